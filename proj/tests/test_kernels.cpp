#include "doctest.h"

#include "cfreg/kernels.hpp"
#include "cfreg/reference.hpp"
#include "helpers.hpp"

#include <numeric>

using namespace cfreg;

namespace {

std::vector<float> rand_vec(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(u(rng));
    }
    return v;
}

constexpr double tol = 2e-5;

} // namespace

TEST_CASE("conv3d matches the direct reference")
{
    // sizes that exercise partial tiles and odd extents
    for (const Dims s : {Dims{5, 6, 7}, Dims{9, 4, 3}, Dims{17, 16, 3}}) {
        for (const auto [cin, cout] : {std::pair{1, 3}, std::pair{6, 5}}) {
            const auto x = rand_vec(cin * s.voxels(), 1);
            const auto w = rand_vec(cout * cin * 27, 2);
            const auto b = rand_vec(cout, 3);
            const auto dy = rand_vec(cout * s.voxels(), 4);
            std::vector<float> y(cout * s.voxels()), yr(y.size());
            kernels::conv3d_forward(x.data(), cin, s, w.data(), b.data(), cout, 3, y.data());
            reference::conv3d_forward(x.data(), cin, s, w.data(), b.data(), cout, 3, yr.data());
            CHECK(test::rel_error(y, yr) < tol);

            std::vector<float> dx(x.size(), 0.5f), dw(w.size(), 0.25f), db(cout, 1.0f);
            auto dxr = dx, dwr = dw, dbr = db;
            kernels::conv3d_backward(x.data(), cin, s, w.data(), cout, 3, dy.data(), dx.data(), dw.data(), db.data());
            reference::conv3d_backward(x.data(), cin, s, w.data(), cout, 3, dy.data(), dxr.data(), dwr.data(),
                                       dbr.data());
            CHECK(test::rel_error(dx, dxr) < tol);
            CHECK(test::rel_error(dw, dwr) < tol);
            CHECK(test::rel_error(db, dbr) < tol);
        }
    }
}

TEST_CASE("pointwise matches the reference")
{
    const std::int64_t n = 1000;
    const int cin = 7, cout = 12;
    const auto x = rand_vec(cin * n, 1);
    const auto w = rand_vec(cin * cout, 2);
    const auto b = rand_vec(cout, 3);
    const auto dy = rand_vec(cout * n, 4);
    std::vector<float> y(cout * n), yr(cout * n);
    kernels::pointwise_forward(x.data(), cin, n, w.data(), b.data(), cout, y.data());
    reference::pointwise_forward(x.data(), cin, n, w.data(), b.data(), cout, yr.data());
    CHECK(test::rel_error(y, yr) < tol);
    std::vector<float> dx(x.size()), dw(w.size()), db(cout);
    auto dxr = dx, dwr = dw, dbr = db;
    kernels::pointwise_backward(x.data(), cin, n, w.data(), cout, dy.data(), dx.data(), dw.data(), db.data());
    reference::pointwise_backward(x.data(), cin, n, w.data(), cout, dy.data(), dxr.data(), dwr.data(), dbr.data());
    CHECK(test::rel_error(dx, dxr) < tol);
    CHECK(test::rel_error(dw, dwr) < tol);
    CHECK(test::rel_error(db, dbr) < tol);
}

TEST_CASE("layer norm and max pool match the reference")
{
    const int c = 6;
    const std::int64_t n = 2500;
    const auto x = rand_vec(c * n, 1, -3, 5);
    const auto g = rand_vec(c, 2);
    const auto b = rand_vec(c, 3);
    std::vector<float> y(c * n), yr(c * n), mean(n), rstd(n);
    kernels::layer_norm_forward(x.data(), c, n, g.data(), b.data(), 1e-5f, y.data(), mean.data(), rstd.data());
    reference::layer_norm_forward(x.data(), c, n, g.data(), b.data(), 1e-5f, yr.data());
    CHECK(test::rel_error(y, yr) < 1e-5);

    const Dims s{5, 4, 7};
    const auto px = rand_vec(3 * s.voxels(), 5);
    const Dims o = half_ceil(s);
    std::vector<float> py(3 * o.voxels()), pyr(py.size());
    std::vector<std::int32_t> arg(py.size());
    kernels::max_pool2_forward(px.data(), 3, s, py.data(), arg.data());
    reference::max_pool2_forward(px.data(), 3, s, pyr.data());
    CHECK(py == pyr);
    for (std::size_t i = 0; i < py.size(); ++i) {
        CHECK(px[(i / o.voxels()) * s.voxels() + arg[i]] == py[i]);
    }
}

TEST_CASE("warp kernels match the reference")
{
    const Dims s{7, 6, 9};
    const int c = 4;
    const auto src = rand_vec(c * s.voxels(), 1);
    const auto field = rand_vec(3 * s.voxels(), 2, -3.0, 3.0);
    const auto dout = rand_vec(c * s.voxels(), 3);
    std::vector<float> out(src.size()), outr(src.size());
    kernels::warp_forward(src.data(), c, s, field.data(), out.data());
    reference::warp_forward(src.data(), c, s, field.data(), outr.data());
    CHECK(test::rel_error(out, outr) < tol);

    std::vector<float> ds(src.size()), df(field.size());
    auto dsr = ds, dfr = df;
    kernels::warp_backward(src.data(), c, s, field.data(), dout.data(), ds.data(), df.data());
    reference::warp_backward(src.data(), c, s, field.data(), dout.data(), dsr.data(), dfr.data());
    CHECK(test::rel_error(ds, dsr) < tol);
    CHECK(test::rel_error(df, dfr) < tol);
}

TEST_CASE("upsample adjoint matches the explicit transpose")
{
    const Dims coarse{3, 4, 2};
    const auto dfine = rand_vec(3 * twice(coarse).voxels(), 7);
    std::vector<float> dc(3 * coarse.voxels()), dcr(dc.size());
    kernels::upsample_field_backward(coarse, dfine.data(), dc.data());
    reference::upsample_field_backward(coarse, dfine.data(), dcr.data());
    CHECK(test::rel_error(dc, dcr) < tol);

    // <up(a), b> == <a, up^T(b)>
    const auto a = test::random_image(3, coarse, 9);
    const auto up = upsample_field(a);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < up.size(); ++i) {
        lhs += double(up.data()[i]) * dfine[i];
    }
    for (std::size_t i = 0; i < dc.size(); ++i) {
        rhs += double(a.data()[i]) * dc[i];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("window attention matches the direct reference")
{
    struct Case {
        Dims s;
        int window, shift, c, heads;
    };
    for (const Case k : {Case{{9, 12, 10}, 5, 0, 8, 2}, Case{{9, 12, 10}, 5, 2, 8, 2}, Case{{3, 3, 3}, 5, 2, 4, 4},
                         Case{{6, 4, 5}, 3, 1, 6, 3}, Case{{4, 4, 4}, 1, 0, 4, 1}}) {
        CAPTURE(k.s.str());
        CAPTURE(k.shift);
        const auto part = kernels::WindowPartition::make(k.s, k.window, k.shift);
        CHECK(part.voxel.size() == static_cast<std::size_t>(k.s.voxels()));
        const int m = 2 * k.window - 1;
        const auto qkv = rand_vec(3 * k.c * k.s.voxels(), 1, -2, 2);
        const auto table = rand_vec(m * m * m * k.heads, 2);
        std::vector<float> out(k.c * k.s.voxels()), outr(out.size());
        std::vector<float> probs;
        kernels::window_attention_forward(part, qkv.data(), k.c, k.heads, table.data(), out.data(), &probs);
        reference::window_attention_forward(k.s, k.window, k.shift, qkv.data(), k.c, k.heads, table.data(),
                                            outr.data());
        CHECK(test::rel_error(out, outr) < 1e-5);

        // rows of every attention matrix sum to one
        std::int64_t off = 0;
        for (std::int64_t w = 0; w < part.windows(); ++w) {
            const std::int64_t n = part.offsets[w + 1] - part.offsets[w];
            for (int h = 0; h < k.heads; ++h) {
                for (std::int64_t i = 0; i < n; ++i) {
                    const double row = std::accumulate(probs.begin() + off + i * n, probs.begin() + off + (i + 1) * n, 0.0);
                    CHECK(row == doctest::Approx(1.0).epsilon(1e-5));
                }
                off += n * n;
            }
        }
    }
}

TEST_CASE("window partition pads (9,12,10) to (10,15,10)")
{
    const auto p = kernels::WindowPartition::make({9, 12, 10}, 5, 0);
    CHECK(p.padded == Dims{10, 15, 10});
    CHECK(p.windows() == 2 * 3 * 2);
    CHECK_THROWS_AS(kernels::WindowPartition::make({4, 4, 4}, 5, 5), std::invalid_argument);
}

TEST_CASE("window attention backward matches finite differences")
{
    const Dims s{4, 5, 3};
    const int c = 4, heads = 2, window = 3, shift = 1;
    const auto part = kernels::WindowPartition::make(s, window, shift);
    const int m = 2 * window - 1;
    auto qkv = rand_vec(3 * c * s.voxels(), 1);
    auto table = rand_vec(m * m * m * heads, 2);
    const auto dout = rand_vec(c * s.voxels(), 3);
    const auto objective = [&](const std::vector<float>& q, const std::vector<float>& t) {
        std::vector<double> out(c * s.voxels());
        std::vector<float> o(out.size());
        reference::window_attention_forward(s, window, shift, q.data(), c, heads, t.data(), o.data());
        double v = 0.0;
        for (std::size_t i = 0; i < o.size(); ++i) {
            v += double(o[i]) * dout[i];
        }
        return v;
    };
    std::vector<float> probs, out(c * s.voxels());
    kernels::window_attention_forward(part, qkv.data(), c, heads, table.data(), out.data(), &probs);
    std::vector<float> dqkv(qkv.size()), dtab(table.size());
    kernels::window_attention_backward(part, qkv.data(), c, heads, probs, dout.data(), dqkv.data(), dtab.data());

    const float h = 1e-2f;
    std::mt19937 rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t i = rng() % qkv.size();
        auto up = qkv, dn = qkv;
        up[i] += h;
        dn[i] -= h;
        const double fd = (objective(up, table) - objective(dn, table)) / (2 * h);
        CHECK(dqkv[i] == doctest::Approx(fd).epsilon(2e-2).scale(1e-2));
    }
    for (std::size_t i = 0; i < table.size(); i += 7) {
        auto up = table, dn = table;
        up[i] += h;
        dn[i] -= h;
        const double fd = (objective(qkv, up) - objective(qkv, dn)) / (2 * h);
        CHECK(dtab[i] == doctest::Approx(fd).epsilon(2e-2).scale(1e-2));
    }
}

TEST_CASE("padded and wrapped positions get no attention")
{
    // With 8 voxels per axis and window 5, shift 2, the corner window holds a
    // region with a single real token, which can only attend to itself.
    const Dims s{8, 8, 8};
    const int c = 2, window = 5, shift = 2;
    const auto part = kernels::WindowPartition::make(s, window, shift);
    const auto qkv = rand_vec(3 * c * s.voxels(), 4, -3, 3);
    const auto table = rand_vec(9 * 9 * 9, 5);
    std::vector<float> out(c * s.voxels()), probs;
    kernels::window_attention_forward(part, qkv.data(), c, 1, table.data(), out.data(), &probs);
    // tokens in different shift regions of one window never attend to each other
    std::int64_t off = 0;
    for (std::int64_t w = 0; w < part.windows(); ++w) {
        const std::int64_t t0 = part.offsets[w];
        const std::int64_t n = part.offsets[w + 1] - t0;
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < n; ++j) {
                if (part.region[t0 + i] != part.region[t0 + j]) {
                    CHECK(probs[off + i * n + j] == 0.0f);
                }
            }
        }
        off += n * n;
    }
    // a token alone in its region reproduces its value vector
    std::int64_t singles = 0;
    for (std::int64_t w = 0; w < part.windows(); ++w) {
        const std::int64_t t0 = part.offsets[w];
        const std::int64_t n = part.offsets[w + 1] - t0;
        for (std::int64_t i = 0; i < n; ++i) {
            int same = 0;
            for (std::int64_t j = 0; j < n; ++j) {
                same += part.region[t0 + j] == part.region[t0 + i];
            }
            if (same == 1) {
                ++singles;
                const std::int64_t v = part.voxel[t0 + i];
                for (int d = 0; d < c; ++d) {
                    CHECK(out[d * s.voxels() + v] == doctest::Approx(qkv[(2 * c + d) * s.voxels() + v]));
                }
            }
        }
    }
    CHECK(singles > 0);
}
