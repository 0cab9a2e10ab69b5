#include "doctest.h"

#include "cfreg/network.hpp"
#include "helpers.hpp"

#include <algorithm>
#include <cmath>

using namespace cfreg;

namespace {

// Parameter count written out per module from layer shapes alone.
std::int64_t conv_module_count(std::int64_t cin, std::int64_t dim) { return 27 * cin * dim + dim + 27 * dim * dim + dim; }

std::int64_t swin_module_count(std::int64_t cin, std::int64_t dim, std::int64_t heads, std::int64_t w, std::int64_t r)
{
    const std::int64_t table = (2 * w - 1) * (2 * w - 1) * (2 * w - 1);
    const std::int64_t block = 2 * dim                 // norm1
                               + 3 * dim * dim + 3 * dim // qkv
                               + table * heads           // relative position bias
                               + dim * dim + dim         // proj
                               + 2 * dim                 // norm2
                               + r * dim * dim + r * dim // fc1
                               + r * dim * dim + dim;    // fc2
    return cin * dim + dim + 4 * block;
}

std::int64_t expected_count(const ModelConfig& c)
{
    const int L = c.levels();
    const auto eh = c.encoder_heads();
    const auto dh = c.decoder_heads();
    const auto level = [&](std::int64_t cin, std::int64_t dim, int heads) {
        return heads == 0 ? conv_module_count(cin, dim) : swin_module_count(cin, dim, heads, c.window, c.mlp_ratio);
    };
    std::int64_t n = 0;
    for (int i = 0; i < L; ++i) {
        n += level(i == 0 ? 1 : c.encoder_dims[i - 1], c.encoder_dims[i], eh[i]);
    }
    for (int k = 0; k < L; ++k) {
        std::int64_t cin = 2 * c.encoder_dims[L - 1 - k];
        if (k > 0) {
            const std::int64_t prev = c.decoder_dims[k - 1];
            n += prev * 4 * prev + 4 * prev;
            cin += prev / 2;
        }
        const std::int64_t dim = c.decoder_dims[k];
        n += level(cin, dim, dh[k]);
        n += k < c.affine_steps ? dim * dim + dim + 12 * dim + 12 : 27 * dim * 3 + 3;
    }
    return n;
}

ModelConfig small_config(Variant v = Variant::trans_decoder)
{
    ModelConfig c;
    c.encoder_dims = {4, 8, 8, 16, 16};
    c.decoder_dims = {16, 16, 8, 8, 4};
    c.attn_heads = {2, 2, 2, 1, 0};
    c.encoder_attn_heads = {0, 2, 2, 4, 4};
    c.window = 3;
    c.mlp_ratio = 2;
    c.variant = v;
    return c;
}

Volume random_volume(Dims s, std::uint64_t seed) { return test::random_image(1, s, seed, 0.0, 1.0); }

} // namespace

TEST_CASE("parameter counts match the closed form for every variant")
{
    for (auto v : {Variant::baseline, Variant::trans_encoder, Variant::trans_decoder, Variant::trans_all}) {
        ModelConfig full;
        full.variant = v;
        const auto p = init_params(full, 1);
        CHECK(count_params(p) == expected_count(full));
        const auto s = init_params(small_config(v), 1);
        CHECK(count_params(s) == expected_count(small_config(v)));

        std::int64_t by_group = 0;
        for (const auto& [name, n] : p.count_by_group()) {
            by_group += n;
        }
        CHECK(by_group == count_params(p));
    }
    CHECK(count_params(NetworkParams{}) == 0);
}

TEST_CASE("init_params is deterministic in the seed")
{
    const auto a = init_params(small_config(), 3);
    const auto b = init_params(small_config(), 3);
    const auto c = init_params(small_config(), 4);
    REQUIRE(a.named.size() == b.named.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < a.named.size(); ++i) {
        CHECK(a.named[i].name == b.named[i].name);
        CHECK(a.named[i].var->value == b.named[i].var->value);
        any_diff = any_diff || !(a.named[i].var->value == c.named[i].var->value);
    }
    CHECK(any_diff);
}

TEST_CASE("head output layers start at zero")
{
    const auto p = init_params(ModelConfig{}, 2);
    for (const auto& np : p.named) {
        if (np.name.find(".out.") != std::string::npos || np.name.find(".conv.") != std::string::npos) {
            if (np.group.rfind("head.", 0) == 0) {
                for (float x : np.var->value.data()) {
                    CHECK(x == 0.0f);
                }
            }
        }
    }
}

TEST_CASE("shape contract on a small grid with the default model")
{
    const ModelConfig cfg;
    const auto p = init_params(cfg, 1);
    const Dims s{32, 32, 32};
    ag::Context plain;
    const auto g = forward_graph(plain, p, ag::constant(Volume(1, s)), ag::constant(Volume(1, s)));
    REQUIRE(g.pyramid_fixed.size() == 5);
    const int enc[] = {8, 16, 32, 64, 128};
    const int dec[] = {256, 128, 64, 32, 16};
    for (int i = 0; i < 5; ++i) {
        CHECK(g.pyramid_fixed[i]->value.channels() == enc[i]);
        CHECK(g.pyramid_fixed[i]->value.dims() == Dims{32 >> i, 32 >> i, 32 >> i});
        CHECK(g.stages[i]->value.channels() == dec[i]);
        const int e = 32 >> (4 - i);
        CHECK(g.fields[i]->value.channels() == 3);
        CHECK(g.fields[i]->value.dims() == Dims{e, e, e});
    }
    CHECK(g.final_field->value.dims() == s);
    CHECK(g.warped->value.dims() == s);
}

TEST_CASE("odd input extents keep the output on the input grid")
{
    const auto p = init_params(small_config(), 1);
    const Dims s{33, 20, 17};
    const auto r = forward(random_volume(s, 1), random_volume(s, 2), p);
    CHECK(r.final_field.dims() == s);
    CHECK(r.fields[0].dims() == Dims{3, 2, 2});
    CHECK(r.fields[3].dims() == Dims{17, 10, 9});
    CHECK_THROWS_AS(forward(random_volume({15, 16, 16}, 1), random_volume({15, 16, 16}, 2), p),
                    std::invalid_argument);
    CHECK_THROWS_AS(forward(random_volume(s, 1), random_volume({33, 20, 16}, 2), p), std::invalid_argument);
}

TEST_CASE("zero-initialized heads give the identity on random pairs")
{
    for (auto v : {Variant::baseline, Variant::trans_decoder}) {
        const auto p = init_params(small_config(v), 7);
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            const Dims s{16, 20, 16};
            const auto f = random_volume(s, 10 + seed);
            const auto m = random_volume(s, 20 + seed);
            const auto r = forward(f, m, p);
            for (float x : r.final_field.data()) {
                CHECK(x == 0.0f);
            }
            CHECK(r.warped == m);
            CHECK(r.affine == AffineTransform::identity());
        }
    }
}

TEST_CASE("the encoder is shared by both inputs")
{
    const auto p = init_params(small_config(Variant::trans_all), 5);
    const Dims s{16, 16, 16};
    const auto v = random_volume(s, 3);
    ag::Context plain;
    const auto g = forward_graph(plain, p, ag::constant(v), ag::constant(v));
    const auto e = encode(v, p);
    for (std::size_t i = 0; i < e.size(); ++i) {
        CHECK(g.pyramid_fixed[i]->value == g.pyramid_moving[i]->value);
        CHECK(g.pyramid_fixed[i]->value == e[i]);
    }
    CHECK(std::count_if(p.named.begin(), p.named.end(), [](const NamedParam& n) { return n.group == "encoder"; }) > 0);
}

TEST_CASE("affine-only output is an exact affine field")
{
    auto p = init_params(small_config(), 9);
    // nonzero residual through the output bias: a small rotation-like linear part and a shift
    auto bias = p.affine_heads[0].out.bias->value.data();
    const float r[12] = {0.02f, -0.03f, 0.01f, 0.4f, 0.03f, -0.01f, 0.0f, -0.25f, 0.0f, 0.02f, 0.05f, 0.1f};
    std::copy(std::begin(r), std::end(r), bias.begin());

    const Dims s{16, 16, 16};
    ForwardOptions opt;
    opt.affine_only = true;
    const auto out = forward(random_volume(s, 1), random_volume(s, 2), p, opt);
    REQUIRE(out.fields.size() == 1);

    // translation predicted at 1/16 scale is reported in full-resolution voxels
    CHECK(out.affine.translation(0) == doctest::Approx(0.4 * 16));
    CHECK(out.affine.linear(0, 1) == doctest::Approx(-0.03));
    const auto expected = affine_to_field<float>(out.affine, s);
    CHECK(test::rel_error(out.final_field.data(), expected.data()) < 1e-5);

    // constant Jacobian determinant equal to det(A) in the interior
    const auto det = jacobian_det(out.final_field);
    const auto& a = out.affine;
    const double want = a.linear(0, 0) * (a.linear(1, 1) * a.linear(2, 2) - a.linear(1, 2) * a.linear(2, 1)) -
                        a.linear(0, 1) * (a.linear(1, 0) * a.linear(2, 2) - a.linear(1, 2) * a.linear(2, 0)) +
                        a.linear(0, 2) * (a.linear(1, 0) * a.linear(2, 1) - a.linear(1, 1) * a.linear(2, 0));
    for (int x = 0; x + 1 < s.d; ++x) {
        for (int y = 0; y + 1 < s.h; ++y) {
            for (int z = 0; z + 1 < s.w; ++z) {
                CHECK(det(x, y, z) == doctest::Approx(want).epsilon(1e-5));
            }
        }
    }

    ModelConfig no_affine = small_config();
    no_affine = config_for_steps(no_affine, 0, 5);
    const auto q = init_params(no_affine, 1);
    CHECK_THROWS_AS(forward(random_volume(s, 1), random_volume(s, 2), q, opt), std::invalid_argument);
}

TEST_CASE("skip_affine replaces the affine step by the identity")
{
    auto p = init_params(small_config(), 9);
    p.affine_heads[0].out.bias->value.data()[3] = 1.0f;
    const Dims s{16, 16, 16};
    ForwardOptions opt;
    opt.skip_affine = true;
    const auto r = forward(random_volume(s, 1), random_volume(s, 2), p, opt);
    for (float x : r.fields[0].data()) {
        CHECK(x == 0.0f);
    }
    CHECK(r.affine == AffineTransform::identity());
    const auto with = forward(random_volume(s, 1), random_volume(s, 2), p);
    CHECK(with.fields[0].at(0, 0, 0, 0) == doctest::Approx(1.0));
}

TEST_CASE("forward is deterministic")
{
    const auto p = init_params(small_config(Variant::trans_all), 11);
    // perturb deformation heads so the output is non-trivial
    for (auto& h : p.deform_heads) {
        for (auto& x : h.conv.weight->value.data()) {
            x = 0.01f;
        }
    }
    const Dims s{16, 16, 16};
    const auto a = forward(random_volume(s, 1), random_volume(s, 2), p);
    const auto b = forward(random_volume(s, 1), random_volume(s, 2), p);
    CHECK(a.final_field == b.final_field);
    CHECK(a.warped == b.warped);
    bool moved = false;
    for (float x : a.final_field.data()) {
        moved = moved || x != 0.0f;
    }
    CHECK(moved);
}

TEST_CASE("patch_expand doubles the grid and halves the channels")
{
    ModelConfig c;
    auto p = init_params(c, 1);
    ag::Context plain;
    const auto x = ag::constant(test::random_image(256, {3, 4, 5}, 1));
    const auto y = patch_expand(plain, p.expand[0], x);
    CHECK(y->value.channels() == 128);
    CHECK(y->value.dims() == Dims{6, 8, 10});
    nn::Linear odd{ag::parameter(Image<float>(1, {3 * 12, 1, 1})), nullptr, 3, 12};
    CHECK_THROWS_AS(patch_expand(plain, odd, ag::constant(Image<float>(3, {2, 2, 2}))), std::invalid_argument);
}

TEST_CASE("window of one reduces attention to the value projection")
{
    const int c = 4;
    const auto qkv = test::random_image(3 * c, {3, 4, 2}, 5);
    ag::Context plain;
    const auto table = ag::constant(test::random_image(1, {2, 1, 1}, 6));
    const auto y = nn::window_attention(plain, ag::constant(qkv), table, 2, 1, 0);
    for (int ch = 0; ch < c; ++ch) {
        const auto got = y->value.channel(ch);
        const auto want = qkv.channel(2 * c + ch);
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
        }
    }
}

TEST_CASE("zero attention and MLP outputs leave only the input projection")
{
    auto p = init_params(small_config(Variant::trans_decoder), 3);
    auto& m = p.decoder[0].swin;
    REQUIRE(p.decoder[0].attention);
    for (auto& blk : m.blocks) {
        blk.proj.weight->value.fill(0.0f);
        blk.proj.bias->value.fill(0.0f);
        blk.fc2.weight->value.fill(0.0f);
        blk.fc2.bias->value.fill(0.0f);
    }
    ag::Context plain;
    const auto x = ag::constant(test::random_image(m.reduce.cin, {4, 4, 4}, 2));
    const auto y = apply_swin(plain, m, x);
    const auto r = nn::linear(plain, x, m.reduce);
    CHECK(y->value == r->value);
}

TEST_CASE("affine head pools globally")
{
    auto p = init_params(small_config(), 3);
    auto& head = p.affine_heads[0];
    for (auto& v : head.out.weight->value.data()) {
        v = 0.1f;
    }
    const int c = head.hidden.cin;
    const auto x = test::random_image(c, {3, 4, 5}, 1);
    // mirrored copy: same channel means
    Image<float> flipped(c, x.dims());
    for (int ch = 0; ch < c; ++ch) {
        for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 4; ++b) {
                for (int d = 0; d < 5; ++d) {
                    flipped.at(ch, a, b, d) = x.at(ch, 2 - a, 3 - b, 4 - d);
                }
            }
        }
    }
    ag::Context plain;
    const auto r1 = affine_head(plain, head, ag::constant(x));
    const auto r2 = affine_head(plain, head, ag::constant(flipped));
    REQUIRE(r1->value.size() == 12);
    for (int i = 0; i < 12; ++i) {
        CHECK(r1->value.data()[i] == doctest::Approx(r2->value.data()[i]).epsilon(1e-5));
    }
}

TEST_CASE("config_for_steps")
{
    const ModelConfig base;
    const auto same = config_for_steps(base, 1, 4);
    CHECK(same.encoder_dims == base.encoder_dims);
    CHECK(same.decoder_dims == base.decoder_dims);
    CHECK(same.attn_heads == base.attn_heads);

    const auto small = config_for_steps(base, 1, 2);
    CHECK(small.encoder_dims == std::vector<int>{8, 16, 32});
    CHECK(small.decoder_dims == std::vector<int>{64, 32, 16});
    CHECK(small.attn_heads == std::vector<int>{4, 2, 0});
    CHECK(small.encoder_attn_heads == std::vector<int>{0, 2, 4});
    CHECK_NOTHROW(small.validate());

    const auto big = config_for_steps(base, 2, 4);
    CHECK(big.encoder_dims == std::vector<int>{8, 16, 32, 64, 128, 256});
    CHECK(big.decoder_dims == std::vector<int>{512, 256, 128, 64, 32, 16});
    CHECK(big.attn_heads == std::vector<int>{32, 16, 8, 4, 2, 0});
    CHECK(big.encoder_attn_heads == std::vector<int>{0, 2, 4, 8, 16, 32});
    CHECK(big.min_extent() == 32);
    CHECK_NOTHROW(big.validate());

    const auto only_deform = config_for_steps(base, 0, 1);
    CHECK(only_deform.levels() == 1);
    CHECK(only_deform.attn_heads == std::vector<int>{0});
    CHECK_NOTHROW(init_params(only_deform, 1));
    CHECK_THROWS_AS(config_for_steps(base, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(config_for_steps(base, -1, 3), std::invalid_argument);
}

TEST_CASE("validate rejects inconsistent configs")
{
    ModelConfig c;
    c.attn_heads = {16, 8, 4, 2, 1};
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("Conv module"), std::invalid_argument);
    c = ModelConfig{};
    c.decoder_dims = {256, 128, 64};
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = ModelConfig{};
    c.decoder_dims = {256, 128, 60, 32, 16};
    c.attn_heads = {16, 8, 8, 2, 0};
    CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("divisible"), std::invalid_argument);
    CHECK_THROWS_AS(parse_variant("transformer"), std::invalid_argument);
    CHECK(parse_variant("trans_all") == Variant::trans_all);
}
