#include "doctest.h"

#include "cfreg/field_algebra.hpp"
#include "cfreg/reference.hpp"
#include "helpers.hpp"

#include <cmath>
#include <set>

using namespace cfreg;

namespace {

AffineTransform scaled_identity(double k)
{
    AffineTransform t;
    for (int i = 0; i < 3; ++i) {
        t.linear(i, i) = k;
    }
    return t;
}

bool interior(Dims s, int x, int y, int z)
{
    return x > 0 && y > 0 && z > 0 && x < s.d - 1 && y < s.h - 1 && z < s.w - 1;
}

} // namespace

TEST_CASE("affine_to_field")
{
    SUBCASE("identity and translation")
    {
        for (const auto img = affine_to_field(AffineTransform::identity(), {4, 5, 6}); float v : img.data()) {
            CHECK(v == 0.0f);
        }
        AffineTransform t;
        t.translation(0) = 1.0;
        const auto f = affine_to_field(t, {3, 3, 3});
        for (int i = 0; i < 27; ++i) {
            CHECK(f.data()[i] == 1.0f);
            CHECK(f.data()[27 + i] == 0.0f);
            CHECK(f.data()[54 + i] == 0.0f);
        }
    }
    SUBCASE("A = 2I on a 5^3 grid gives u = p_c at every voxel")
    {
        const auto f = affine_to_field(scaled_identity(2.0), {5, 5, 5});
        for (int x = 0; x < 5; ++x) {
            for (int y = 0; y < 5; ++y) {
                for (int z = 0; z < 5; ++z) {
                    CHECK(f.at(0, x, y, z) == float(x - 2));
                    CHECK(f.at(1, x, y, z) == float(y - 2));
                    CHECK(f.at(2, x, y, z) == float(z - 2));
                }
            }
        }
        CHECK(f.at(0, 4, 4, 4) == 2.0f);
        CHECK(f.at(1, 4, 4, 4) == 2.0f);
        CHECK(f.at(2, 4, 4, 4) == 2.0f);
    }
}

TEST_CASE("warp")
{
    const Dims s{6, 7, 5};
    const auto src = test::random_image(2, s, 1);

    SUBCASE("zero field is the identity")
    {
        CHECK(warp(src, zero_field(s)) == src);
    }
    SUBCASE("integer field shifts by one voxel in y")
    {
        DisplacementField f(3, s);
        std::fill(f.channel(1).begin(), f.channel(1).end(), 1.0f);
        const auto out = warp(src, f);
        for (int c = 0; c < 2; ++c) {
            for (int x = 0; x < s.d; ++x) {
                for (int y = 0; y < s.h - 1; ++y) {
                    for (int z = 0; z < s.w; ++z) {
                        CHECK(out.at(c, x, y, z) == src.at(c, x, y + 1, z));
                    }
                }
            }
        }
    }
    SUBCASE("ramp plus half voxel")
    {
        Volume ramp(1, s);
        for (int x = 0; x < s.d; ++x) {
            for (int y = 0; y < s.h; ++y) {
                for (int z = 0; z < s.w; ++z) {
                    ramp(x, y, z) = float(x);
                }
            }
        }
        DisplacementField f(3, s);
        std::fill(f.channel(0).begin(), f.channel(0).end(), 0.5f);
        const auto out = warp(ramp, f);
        for (int x = 0; x < s.d - 1; ++x) {
            CHECK(out(x, 3, 2) == doctest::Approx(x + 0.5));
        }
        // clamped past the last slice
        CHECK(out(s.d - 1, 3, 2) == float(s.d - 1));
    }
    SUBCASE("shape mismatch")
    {
        CHECK_THROWS_AS(warp(src, zero_field({6, 7, 4})), std::invalid_argument);
    }
    SUBCASE("nearest warp of labels only produces source labels")
    {
        LabelMap labels(1, s);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            labels.data()[i] = int(i % 7) * 3;
        }
        const auto f = test::random_image(3, s, 5, -4.0, 4.0);
        const auto out = warp(labels, f, Interp::nearest);
        const std::set<int> allowed(labels.data().begin(), labels.data().end());
        for (int v : out.data()) {
            CHECK(allowed.count(v) == 1);
        }
    }
    SUBCASE("matches the brute-force oracle on random fields within 1e-4")
    {
        const Dims t{8, 8, 8};
        const auto img = test::random_image(1, t, 3);
        const auto f = test::random_image(3, t, 4, -2.5, 2.5);
        const auto out = warp(img, f);
        // oracle: explicit 8-corner sum with clamped coordinates
        for (int x = 0; x < t.d; ++x) {
            for (int y = 0; y < t.h; ++y) {
                for (int z = 0; z < t.w; ++z) {
                    double p[3] = {x + double(f.at(0, x, y, z)), y + double(f.at(1, x, y, z)),
                                   z + double(f.at(2, x, y, z))};
                    int lo[3];
                    double fr[3];
                    for (int a = 0; a < 3; ++a) {
                        p[a] = std::clamp(p[a], 0.0, double(t[a] - 1));
                        lo[a] = std::min(int(std::floor(p[a])), t[a] - 2);
                        fr[a] = p[a] - lo[a];
                    }
                    double v = 0.0;
                    for (int c = 0; c < 8; ++c) {
                        const int dx = c >> 2, dy = (c >> 1) & 1, dz = c & 1;
                        v += img(lo[0] + dx, lo[1] + dy, lo[2] + dz) * (dx ? fr[0] : 1 - fr[0]) *
                             (dy ? fr[1] : 1 - fr[1]) * (dz ? fr[2] : 1 - fr[2]);
                    }
                    CHECK(std::abs(out(x, y, z) - v) <= 1e-4 * std::max(1.0, std::abs(v)));
                }
            }
        }
    }
}

TEST_CASE("upsample, downsample and compose_add")
{
    DisplacementField c(3, {3, 4, 5});
    for (int a = 0; a < 3; ++a) {
        std::fill(c.channel(a).begin(), c.channel(a).end(), float(a) - 0.75f);
    }
    const auto up = upsample_field(c);
    CHECK(up.dims() == Dims{6, 8, 10});
    for (int a = 0; a < 3; ++a) {
        for (float v : up.channel(a)) {
            CHECK(v == 2.0f * (float(a) - 0.75f));
        }
    }
    CHECK(downsample_field(up) == c);
    for (const auto img = upsample_field(zero_field({2, 2, 3})); float v : img.data()) {
        CHECK(v == 0.0f);
    }

    const auto a = test::random_image(3, {4, 4, 4}, 1);
    const auto b = test::random_image(3, {4, 4, 4}, 2);
    const auto d = test::random_image(3, {4, 4, 4}, 3);
    CHECK(compose_add(a, zero_field({4, 4, 4})) == a);
    CHECK(compose_add(zero_field({4, 4, 4}), a) == a);
    CHECK(compose_add(a, b) == compose_add(b, a));
    // associativity holds exactly for these dyadic values
    auto da = a, db = b, dd = d;
    for (auto* img : {&da, &db, &dd}) {
        for (auto& v : img->data()) {
            v = std::round(v * 64.0f) / 64.0f;
        }
    }
    CHECK(compose_add(compose_add(da, db), dd) == compose_add(da, compose_add(db, dd)));

    DisplacementField x(3, {2, 2, 2}), y(3, {2, 2, 2});
    std::fill(x.channel(0).begin(), x.channel(0).end(), 1.0f);
    std::fill(y.channel(1).begin(), y.channel(1).end(), 2.0f);
    const auto z = compose_add(x, y);
    CHECK(z.at(0, 1, 1, 1) == 1.0f);
    CHECK(z.at(1, 1, 1, 1) == 2.0f);
    CHECK(z.at(2, 1, 1, 1) == 0.0f);
    CHECK_THROWS_AS(compose_add(x, zero_field({2, 2, 3})), std::invalid_argument);
}

TEST_CASE("upsampled affine fields stay affine away from the border")
{
    AffineTransform t;
    t.linear(0, 1) = 0.05;
    t.linear(2, 2) = 1.1;
    t.translation(1) = 0.7;
    const Dims s{6, 6, 6};
    const auto up = upsample_field(affine_to_field(t, s));
    // the same transform in fine-grid units: b doubles, A is unchanged
    AffineTransform tf = t;
    for (int r = 0; r < 3; ++r) {
        tf.translation(r) *= 2.0;
    }
    const auto direct = affine_to_field(tf, twice(s));
    for (int x = 1; x < 11; ++x) {
        for (int y = 1; y < 11; ++y) {
            for (int z = 1; z < 11; ++z) {
                for (int a = 0; a < 3; ++a) {
                    CHECK(up.at(a, x, y, z) == doctest::Approx(direct.at(a, x, y, z)).epsilon(1e-5));
                }
            }
        }
    }
}

TEST_CASE("jacobian determinant")
{
    SUBCASE("zero field")
    {
        for (const auto img = jacobian_det(zero_field({3, 4, 2})); float v : img.data()) {
            CHECK(v == 1.0f);
        }
    }
    SUBCASE("A = 2I gives 8 on the interior")
    {
        const Dims s{5, 5, 5};
        const auto det = jacobian_det(affine_to_field(scaled_identity(2.0), s));
        for (int x = 1; x < 4; ++x) {
            for (int y = 1; y < 4; ++y) {
                for (int z = 1; z < 4; ++z) {
                    CHECK(det(x, y, z) == 8.0f);
                }
            }
        }
    }
    SUBCASE("linear fields match det(A) on the interior within 1e-5")
    {
        std::mt19937_64 rng(17);
        std::uniform_real_distribution<double> u(-0.3, 0.3);
        for (int trial = 0; trial < 10; ++trial) {
            AffineTransform t;
            for (int i = 0; i < 12; ++i) {
                t.m[i] += u(rng) * (i % 4 == 3 ? 10.0 : 1.0);
            }
            const Dims s{7, 6, 8};
            const auto det = jacobian_det(affine_to_field(t, s));
            for (int x = 0; x < s.d; ++x) {
                for (int y = 0; y < s.h; ++y) {
                    for (int z = 0; z < s.w; ++z) {
                        if (interior(s, x, y, z)) {
                            CHECK(std::abs(det(x, y, z) - t.determinant()) <= 1e-5);
                        }
                    }
                }
            }
        }
    }
    SUBCASE("smooth field against a central-difference oracle")
    {
        // Random quadratic field, evaluated analytically. A forward difference
        // along axis a at p is the exact derivative at p + e_a / 2 for a
        // quadratic, so the oracle takes central differences of the analytic
        // field there, column by column.
        std::mt19937_64 rng(23);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        double lin[3][3], quad[3][3][3], c0[3];
        for (int i = 0; i < 3; ++i) {
            c0[i] = u(rng);
            for (int j = 0; j < 3; ++j) {
                lin[i][j] = 0.2 * u(rng);
                for (int k = 0; k < 3; ++k) {
                    quad[i][j][k] = 0.01 * u(rng);
                }
            }
        }
        const auto field_at = [&](int comp, const double p[3]) {
            double v = c0[comp];
            for (int j = 0; j < 3; ++j) {
                v += lin[comp][j] * p[j];
                for (int k = 0; k < 3; ++k) {
                    v += quad[comp][j][k] * p[j] * p[k];
                }
            }
            return v;
        };
        const Dims s{8, 8, 8};
        DisplacementField f(3, s);
        for (int x = 0; x < 8; ++x) {
            for (int y = 0; y < 8; ++y) {
                for (int z = 0; z < 8; ++z) {
                    const double p[3] = {double(x), double(y), double(z)};
                    for (int a = 0; a < 3; ++a) {
                        f.at(a, x, y, z) = static_cast<float>(field_at(a, p));
                    }
                }
            }
        }
        const auto det = jacobian_det(f);
        const double h = 1e-3;
        for (int x = 1; x < 7; ++x) {
            for (int y = 1; y < 7; ++y) {
                for (int z = 1; z < 7; ++z) {
                    double J[3][3];
                    for (int b = 0; b < 3; ++b) {
                        double p1[3] = {double(x), double(y), double(z)};
                        double p0[3] = {double(x), double(y), double(z)};
                        p1[b] += 0.5 + h;
                        p0[b] += 0.5 - h;
                        for (int a = 0; a < 3; ++a) {
                            J[a][b] = (a == b ? 1.0 : 0.0) + (field_at(a, p1) - field_at(a, p0)) / (2 * h);
                        }
                    }
                    const double oracle = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                          J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                          J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
                    CHECK(std::abs(det(x, y, z) - oracle) <= 1e-4 * std::max(1.0, std::abs(oracle)));
                }
            }
        }
        // the serial reference agrees everywhere, borders included
        const auto ref = reference::jacobian_det(f.data().data(), s);
        CHECK(test::rel_error(det.data(), ref) < 1e-5);
    }
    SUBCASE("too small")
    {
        CHECK_THROWS_AS(jacobian_det(zero_field({1, 4, 4})), std::invalid_argument);
    }
}

TEST_CASE("njd_percent")
{
    CHECK(njd_percent(zero_field({4, 4, 4})) == 0.0);
    CHECK(njd_percent(affine_to_field(scaled_identity(-1.0), {4, 4, 4})) == 100.0);
    CHECK(njd_percent(affine_to_field(scaled_identity(0.5), {4, 4, 4})) == 0.0);
}
