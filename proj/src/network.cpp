#include "cfreg/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace cfreg {

using ag::Context;
using ag::Var;

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::baseline:
        return "baseline";
    case Variant::trans_encoder:
        return "trans_encoder";
    case Variant::trans_decoder:
        return "trans_decoder";
    case Variant::trans_all:
        return "trans_all";
    }
    return "unknown";
}

Variant parse_variant(const std::string& s)
{
    for (auto v : {Variant::baseline, Variant::trans_encoder, Variant::trans_decoder, Variant::trans_all}) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw std::invalid_argument("unknown variant '" + s +
                                "' (expected baseline, trans_encoder, trans_decoder or trans_all)");
}

std::vector<int> ModelConfig::decoder_heads() const
{
    if (variant == Variant::trans_decoder || variant == Variant::trans_all) {
        return attn_heads;
    }
    return std::vector<int>(attn_heads.size(), 0);
}

std::vector<int> ModelConfig::encoder_heads() const
{
    if (variant == Variant::trans_encoder || variant == Variant::trans_all) {
        return encoder_attn_heads;
    }
    return std::vector<int>(encoder_attn_heads.size(), 0);
}

void ModelConfig::validate() const
{
    const auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
    if (affine_steps < 0) {
        fail("affine steps must be >= 0");
    }
    if (deform_steps < 0 || levels() < 1) {
        fail("need at least one registration step");
    }
    const auto L = static_cast<std::size_t>(levels());
    if (encoder_dims.size() != L || decoder_dims.size() != L || attn_heads.size() != L ||
        encoder_attn_heads.size() != L) {
        fail("encoder_dims, decoder_dims, attn_heads and encoder_attn_heads must all have L = " +
             std::to_string(L) + " entries");
    }
    if (attn_heads.back() != 0) {
        fail("the last decoder level must use a Conv module (attn_heads last entry 0)");
    }
    if (window < 1) {
        fail("window must be >= 1");
    }
    if (mlp_ratio < 1) {
        fail("mlp_ratio must be >= 1");
    }
    for (std::size_t i = 0; i < L; ++i) {
        if (encoder_dims[i] < 1 || decoder_dims[i] < 1) {
            fail("channel dims must be >= 1");
        }
        if (attn_heads[i] < 0 || encoder_attn_heads[i] < 0) {
            fail("head counts must be >= 0");
        }
        if (attn_heads[i] > 0 && decoder_dims[i] % attn_heads[i] != 0) {
            fail("decoder dim " + std::to_string(decoder_dims[i]) + " not divisible by " +
                 std::to_string(attn_heads[i]) + " heads");
        }
        if (encoder_attn_heads[i] > 0 && encoder_dims[i] % encoder_attn_heads[i] != 0) {
            fail("encoder dim " + std::to_string(encoder_dims[i]) + " not divisible by " +
                 std::to_string(encoder_attn_heads[i]) + " heads");
        }
        if (i + 1 < L && decoder_dims[i] % 2 != 0) {
            fail("patch expanding needs an even decoder dim, got " + std::to_string(decoder_dims[i]));
        }
    }
}

ModelConfig config_for_steps(const ModelConfig& base, int la, int ld)
{
    if (la < 0 || ld < 0 || la + ld < 1) {
        throw std::invalid_argument("steps: need L_a >= 0, L_d >= 0 and L_a + L_d >= 1");
    }
    ModelConfig c = base;
    c.affine_steps = la;
    c.deform_steps = ld;
    const auto L = static_cast<std::size_t>(la + ld);
    const auto finest_first = [L](std::vector<int> v) {
        while (v.size() < L) {
            v.push_back(v.back() * 2);
        }
        v.resize(L);
        return v;
    };
    // Decoder-ordered lists end at full resolution; keep their tail.
    const auto coarsest_first = [L](std::vector<int> v, bool keep_last_zero) {
        while (v.size() < L) {
            const int front = v.front();
            v.insert(v.begin(), front == 0 && !keep_last_zero ? 1 : front * 2);
        }
        v.erase(v.begin(), v.end() - static_cast<std::ptrdiff_t>(L));
        return v;
    };
    c.encoder_dims = finest_first(base.encoder_dims);
    c.encoder_attn_heads = finest_first(base.encoder_attn_heads);
    if (!c.encoder_attn_heads.empty()) {
        c.encoder_attn_heads.front() = 0;
    }
    c.decoder_dims = coarsest_first(base.decoder_dims, false);
    c.attn_heads = coarsest_first(base.attn_heads, false);
    if (!c.attn_heads.empty()) {
        c.attn_heads.back() = 0;
    }
    return c;
}

namespace {

struct Builder {
    NetworkParams& p;
    std::mt19937_64 rng;

    Var make(const std::string& name, const std::string& group, std::int64_t n)
    {
        auto v = ag::parameter(Image<float>(1, {static_cast<int>(n), 1, 1}));
        p.named.push_back({name, group, v});
        return v;
    }

    void uniform(const Var& v, double bound)
    {
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (float& x : v->value.data()) {
            x = static_cast<float>(dist(rng));
        }
    }

    void trunc_normal(const Var& v, double std)
    {
        std::normal_distribution<double> dist(0.0, 1.0);
        for (float& x : v->value.data()) {
            double z = dist(rng);
            while (std::abs(z) > 2.0) {
                z = dist(rng);
            }
            x = static_cast<float>(z * std);
        }
    }

    void fill(const Var& v, float value) { v->value.fill(value); }

    nn::Conv3d conv(const std::string& name, const std::string& group, int cin, int cout, int k, bool zero)
    {
        nn::Conv3d c{make(name + ".weight", group, std::int64_t(cout) * cin * k * k * k),
                     make(name + ".bias", group, cout), cin, cout, k};
        if (!zero) {
            const double bound = 1.0 / std::sqrt(double(cin) * k * k * k);
            uniform(c.weight, bound);
            uniform(c.bias, bound);
        }
        return c;
    }

    // Attention-style linear layers: truncated normal weights, zero bias.
    nn::Linear linear_tn(const std::string& name, const std::string& group, int cin, int cout)
    {
        nn::Linear l{make(name + ".weight", group, std::int64_t(cout) * cin), make(name + ".bias", group, cout),
                     cin, cout};
        trunc_normal(l.weight, 0.02);
        return l;
    }

    nn::Linear linear_uniform(const std::string& name, const std::string& group, int cin, int cout)
    {
        nn::Linear l{make(name + ".weight", group, std::int64_t(cout) * cin), make(name + ".bias", group, cout),
                     cin, cout};
        const double bound = 1.0 / std::sqrt(double(cin));
        uniform(l.weight, bound);
        uniform(l.bias, bound);
        return l;
    }

    nn::LayerNorm norm(const std::string& name, const std::string& group, int dim)
    {
        nn::LayerNorm n{make(name + ".gamma", group, dim), make(name + ".beta", group, dim), dim};
        fill(n.gamma, 1.0f);
        return n;
    }

    nn::LevelModule level(const std::string& name, const std::string& group, int cin, int dim, int heads,
                          const ModelConfig& cfg)
    {
        nn::LevelModule m;
        m.out_channels = dim;
        if (heads == 0) {
            m.conv.first = conv(name + ".conv1", group, cin, dim, 3, false);
            m.conv.second = conv(name + ".conv2", group, dim, dim, 3, false);
            return m;
        }
        m.attention = true;
        m.swin.heads = heads;
        m.swin.window = cfg.window;
        m.swin.reduce = linear_tn(name + ".reduce", group, cin, dim);
        const int table = (2 * cfg.window - 1) * (2 * cfg.window - 1) * (2 * cfg.window - 1);
        for (int b = 0; b < 4; ++b) {
            const std::string bn = name + ".block" + std::to_string(b);
            nn::SwinBlock blk;
            blk.shift = b % 2 == 1 ? cfg.window / 2 : 0;
            blk.norm1 = norm(bn + ".norm1", group, dim);
            blk.qkv = linear_tn(bn + ".qkv", group, dim, 3 * dim);
            blk.relative_bias = make(bn + ".relative_bias", group, std::int64_t(table) * heads);
            trunc_normal(blk.relative_bias, 0.02);
            blk.proj = linear_tn(bn + ".proj", group, dim, dim);
            blk.norm2 = norm(bn + ".norm2", group, dim);
            blk.fc1 = linear_tn(bn + ".fc1", group, dim, cfg.mlp_ratio * dim);
            blk.fc2 = linear_tn(bn + ".fc2", group, cfg.mlp_ratio * dim, dim);
            m.swin.blocks.push_back(std::move(blk));
        }
        return m;
    }
};

std::int64_t numel(const Var& v) { return v ? static_cast<std::int64_t>(v->value.size()) : 0; }

std::vector<Dims> level_dims(Dims input, int levels)
{
    std::vector<Dims> out{input};
    for (int i = 1; i < levels; ++i) {
        out.push_back(half_ceil(out.back()));
    }
    return out;
}

void require_input(const ModelConfig& cfg, Dims s)
{
    const int m = cfg.min_extent();
    if (s.d < m || s.h < m || s.w < m) {
        throw std::invalid_argument("input " + s.str() + " too small for " + std::to_string(cfg.levels()) +
                                    " levels (need >= " + std::to_string(m) + " per axis)");
    }
}

Var zeros_var(int channels, Dims s) { return ag::constant(Image<float>(channels, s)); }

} // namespace

NetworkParams init_params(const ModelConfig& config, std::uint64_t seed)
{
    config.validate();
    NetworkParams p;
    p.config = config;
    Builder b{p, std::mt19937_64(seed)};
    const int L = config.levels();
    const auto enc_heads = config.encoder_heads();
    const auto dec_heads = config.decoder_heads();
    for (int i = 0; i < L; ++i) {
        const int cin = i == 0 ? 1 : config.encoder_dims[i - 1];
        p.encoder.push_back(b.level("encoder." + std::to_string(i), "encoder", cin, config.encoder_dims[i],
                                    enc_heads[i], config));
    }
    for (int k = 0; k < L; ++k) {
        const std::string group = "decoder." + std::to_string(k);
        const int level = L - 1 - k;
        int cin = 2 * config.encoder_dims[level];
        if (k > 0) {
            const int prev = config.decoder_dims[k - 1];
            p.expand.push_back(b.linear_tn(group + ".expand", group, prev, 4 * prev));
            cin += prev / 2;
        }
        p.decoder.push_back(b.level(group + ".module", group, cin, config.decoder_dims[k], dec_heads[k], config));
        const std::string head = "head." + std::to_string(k);
        const int dim = config.decoder_dims[k];
        if (k < config.affine_steps) {
            nn::AffineHead h;
            h.hidden = b.linear_uniform(head + ".hidden", head, dim, dim);
            h.out = nn::Linear{b.make(head + ".out.weight", head, 12 * std::int64_t(dim)),
                               b.make(head + ".out.bias", head, 12), dim, 12};
            p.affine_heads.push_back(h);
        } else {
            p.deform_heads.push_back(nn::DeformHead{b.conv(head + ".conv", head, dim, 3, 3, true)});
        }
    }
    return p;
}

std::int64_t NetworkParams::count() const
{
    std::int64_t n = 0;
    for (const auto& np : named) {
        n += numel(np.var);
    }
    return n;
}

std::vector<std::pair<std::string, std::int64_t>> NetworkParams::count_by_group() const
{
    std::vector<std::pair<std::string, std::int64_t>> out;
    for (const auto& np : named) {
        if (out.empty() || out.back().first != np.group) {
            out.emplace_back(np.group, 0);
        }
        out.back().second += numel(np.var);
    }
    return out;
}

void NetworkParams::zero_grad()
{
    for (auto& np : named) {
        np.var->grad = Image<float>();
    }
}

std::int64_t count_params(const NetworkParams& params) { return params.count(); }

Var apply_swin(Context& ctx, const nn::SwinModule& m, const Var& x)
{
    Var h = nn::linear(ctx, x, m.reduce);
    for (const auto& blk : m.blocks) {
        Var t = nn::layer_norm(ctx, h, blk.norm1);
        t = nn::linear(ctx, t, blk.qkv);
        t = nn::window_attention(ctx, t, blk.relative_bias, m.heads, m.window, blk.shift);
        t = nn::linear(ctx, t, blk.proj);
        h = nn::add(ctx, h, t);
        t = nn::layer_norm(ctx, h, blk.norm2);
        t = nn::linear(ctx, t, blk.fc1);
        t = nn::gelu(ctx, t);
        t = nn::linear(ctx, t, blk.fc2);
        h = nn::add(ctx, h, t);
    }
    return h;
}

Var apply_module(Context& ctx, const nn::LevelModule& m, const Var& x)
{
    if (m.attention) {
        return apply_swin(ctx, m.swin, x);
    }
    Var h = nn::leaky_relu(ctx, nn::conv3d(ctx, x, m.conv.first), 0.2f);
    return nn::leaky_relu(ctx, nn::conv3d(ctx, h, m.conv.second), 0.2f);
}

Var patch_expand(Context& ctx, const nn::Linear& expand, const Var& x)
{
    if (x->value.channels() % 2 != 0) {
        throw std::invalid_argument("patch_expand: odd channel count " + std::to_string(x->value.channels()));
    }
    return nn::pixel_shuffle_up(ctx, nn::linear(ctx, x, expand));
}

Var affine_head(Context& ctx, const nn::AffineHead& head, const Var& x)
{
    Var g = nn::global_avg_pool(ctx, x);
    g = nn::leaky_relu(ctx, nn::linear(ctx, g, head.hidden), 0.2f);
    return nn::linear(ctx, g, head.out);
}

Var deform_head(Context& ctx, const nn::DeformHead& head, const Var& x) { return nn::conv3d(ctx, x, head.conv); }

namespace {

std::vector<Var> encode_graph(Context& ctx, const NetworkParams& params, const Var& v)
{
    std::vector<Var> out;
    Var h = v;
    for (std::size_t i = 0; i < params.encoder.size(); ++i) {
        if (i > 0) {
            h = nn::max_pool2(ctx, h);
        }
        h = apply_module(ctx, params.encoder[i], h);
        out.push_back(h);
    }
    return out;
}

} // namespace

GraphOutput forward_graph(Context& ctx, const NetworkParams& params, const Var& fixed, const Var& moving,
                          const ForwardOptions& opt)
{
    const ModelConfig& cfg = params.config;
    const Dims s = fixed->value.dims();
    require_same_dims(s, moving->value.dims(), "forward");
    if (fixed->value.channels() != 1 || moving->value.channels() != 1) {
        throw std::invalid_argument("forward: inputs must be single-channel volumes");
    }
    require_input(cfg, s);
    if (opt.affine_only && cfg.affine_steps == 0) {
        throw std::invalid_argument("affine-only output requested but the model has no affine steps");
    }
    const int L = cfg.levels();
    const auto dims = level_dims(s, L);

    GraphOutput out;
    out.pyramid_fixed = encode_graph(ctx, params, fixed);
    out.pyramid_moving = encode_graph(ctx, params, moving);

    const int stages = opt.affine_only ? cfg.affine_steps : L;
    std::vector<Var> residuals;
    Var prev;
    for (int k = 0; k < stages; ++k) {
        const int level = L - 1 - k;
        const Dims d = dims[level];
        Var input;
        Var up;
        if (k == 0) {
            input = nn::concat(ctx, {out.pyramid_fixed[level], out.pyramid_moving[level]});
        } else {
            Var e = nn::crop(ctx, patch_expand(ctx, params.expand[k - 1], prev), d);
            up = nn::crop(ctx, nn::upsample_field(ctx, out.fields.back()), d);
            Var wm = nn::warp(ctx, out.pyramid_moving[level], up);
            input = nn::concat(ctx, {e, out.pyramid_fixed[level], wm});
        }
        prev = apply_module(ctx, params.decoder[k], input);
        out.stages.push_back(prev);

        Var head;
        if (k < cfg.affine_steps) {
            if (opt.skip_affine) {
                head = zeros_var(3, d);
            } else {
                Var r = affine_head(ctx, params.affine_heads[k], prev);
                residuals.push_back(r);
                head = nn::affine_field(ctx, r, d);
                const double scale = std::ldexp(1.0, level);
                for (int i = 0; i < 12; ++i) {
                    out.affine.m[i] += r->value.data()[i] * (i % 4 == 3 ? scale : 1.0);
                }
            }
        } else {
            head = deform_head(ctx, params.deform_heads[k - cfg.affine_steps], prev);
        }
        out.fields.push_back(k == 0 ? head : nn::add(ctx, up, head));
    }

    if (opt.affine_only) {
        // Composed affine sampled directly on the full grid, so the output is exactly affine.
        Var f;
        for (std::size_t k = 0; k < residuals.size(); ++k) {
            const int level = L - 1 - static_cast<int>(k);
            Var fk = nn::affine_field(ctx, residuals[k], s, std::ldexp(1.0, level));
            f = f ? nn::add(ctx, f, fk) : fk;
        }
        out.final_field = f ? f : zeros_var(3, s);
    } else {
        out.final_field = out.fields.back();
    }
    out.warped = nn::warp(ctx, moving, out.final_field);
    return out;
}

RegistrationResult forward(const Volume& fixed, const Volume& moving, const NetworkParams& params,
                           const ForwardOptions& opt)
{
    Context ctx;
    auto g = forward_graph(ctx, params, ag::constant(fixed), ag::constant(moving), opt);
    g.pyramid_fixed.clear();
    g.pyramid_moving.clear();
    g.stages.clear();
    RegistrationResult r;
    for (auto& f : g.fields) {
        r.fields.push_back(std::move(f->value));
    }
    r.final_field = std::move(g.final_field->value);
    if (!opt.affine_only) {
        // final field aliases the last step field
        r.final_field = r.fields.back();
    }
    r.warped = std::move(g.warped->value);
    r.affine = g.affine;
    return r;
}

std::vector<FeatureMap> encode(const Volume& v, const NetworkParams& params)
{
    require_input(params.config, v.dims());
    Context ctx;
    auto pyr = encode_graph(ctx, params, ag::constant(v));
    std::vector<FeatureMap> out;
    for (auto& f : pyr) {
        out.push_back(std::move(f->value));
    }
    return out;
}

} // namespace cfreg
