#include "cfreg/ops.hpp"

#include "cfreg/field_algebra.hpp"
#include "cfreg/kernels.hpp"

#include <cmath>
#include <numbers>

namespace cfreg::nn {

namespace {

bool tracking(const Context& ctx, std::initializer_list<Var> inputs)
{
    if (ctx.tape == nullptr) {
        return false;
    }
    for (const auto& v : inputs) {
        if (ag::needs_grad(v)) {
            return true;
        }
    }
    return false;
}

float* grad_ptr(const Var& v) { return ag::needs_grad(v) ? v->grad_buffer().data().data() : nullptr; }

Image<float> scalar_image(double v)
{
    Image<float> out(1, {1, 1, 1});
    out.data()[0] = static_cast<float>(v);
    return out;
}

void require_channels(const Var& x, int c, const char* what)
{
    if (x->value.channels() != c) {
        throw std::invalid_argument(std::string(what) + ": expected " + std::to_string(c) + " channels, got " +
                                    std::to_string(x->value.channels()));
    }
}

} // namespace

Var conv3d(Context& ctx, const Var& x, const Conv3d& layer)
{
    require_channels(x, layer.cin, "conv3d");
    const Dims s = x->value.dims();
    Image<float> y(layer.cout, s);
    kernels::conv3d_forward(x->value.data().data(), layer.cin, s, layer.weight->value.data().data(),
                            layer.bias ? layer.bias->value.data().data() : nullptr, layer.cout, layer.ksize,
                            y.data().data());
    return ag::record(ctx, std::move(y), {x, layer.weight, layer.bias}, [x, layer](const Image<float>& g) {
        kernels::conv3d_backward(x->value.data().data(), layer.cin, x->value.dims(),
                                 layer.weight->value.data().data(), layer.cout, layer.ksize, g.data().data(),
                                 grad_ptr(x), grad_ptr(layer.weight), grad_ptr(layer.bias));
    });
}

Var linear(Context& ctx, const Var& x, const Linear& layer)
{
    require_channels(x, layer.cin, "linear");
    const Dims s = x->value.dims();
    Image<float> y(layer.cout, s);
    kernels::pointwise_forward(x->value.data().data(), layer.cin, s.voxels(), layer.weight->value.data().data(),
                               layer.bias ? layer.bias->value.data().data() : nullptr, layer.cout, y.data().data());
    return ag::record(ctx, std::move(y), {x, layer.weight, layer.bias}, [x, layer](const Image<float>& g) {
        kernels::pointwise_backward(x->value.data().data(), layer.cin, x->value.voxels(),
                                    layer.weight->value.data().data(), layer.cout, g.data().data(), grad_ptr(x),
                                    grad_ptr(layer.weight), grad_ptr(layer.bias));
    });
}

Var layer_norm(Context& ctx, const Var& x, const LayerNorm& layer)
{
    require_channels(x, layer.dim, "layer_norm");
    const std::int64_t n = x->value.voxels();
    Image<float> y(layer.dim, x->value.dims());
    std::vector<float> mean(n), rstd(n);
    kernels::layer_norm_forward(x->value.data().data(), layer.dim, n, layer.gamma->value.data().data(),
                                layer.beta->value.data().data(), 1e-5f, y.data().data(), mean.data(), rstd.data());
    if (!tracking(ctx, {x, layer.gamma, layer.beta})) {
        return ag::constant(std::move(y));
    }
    return ag::record(ctx, std::move(y), {x, layer.gamma, layer.beta},
                      [x, layer, mean = std::move(mean), rstd = std::move(rstd)](const Image<float>& g) {
                          kernels::layer_norm_backward(x->value.data().data(), layer.dim, x->value.voxels(),
                                                       layer.gamma->value.data().data(), mean.data(), rstd.data(),
                                                       g.data().data(), grad_ptr(x), grad_ptr(layer.gamma),
                                                       grad_ptr(layer.beta));
                      });
}

Var leaky_relu(Context& ctx, const Var& x, float slope)
{
    Image<float> y(x->value.channels(), x->value.dims());
    const auto in = x->value.data();
    auto out = y.data();
    const std::int64_t total = static_cast<std::int64_t>(in.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < total; ++i) {
        out[i] = in[i] > 0.0f ? in[i] : slope * in[i];
    }
    return ag::record(ctx, std::move(y), {x}, [x, slope](const Image<float>& g) {
        const auto in = x->value.data();
        auto dx = x->grad_buffer().data();
        const std::int64_t total = static_cast<std::int64_t>(in.size());
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < total; ++i) {
            dx[i] += in[i] > 0.0f ? g.data()[i] : slope * g.data()[i];
        }
    });
}

Var gelu(Context& ctx, const Var& x)
{
    Image<float> y(x->value.channels(), x->value.dims());
    const auto in = x->value.data();
    auto out = y.data();
    const std::int64_t total = static_cast<std::int64_t>(in.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < total; ++i) {
        out[i] = 0.5f * in[i] * (1.0f + std::erf(in[i] * static_cast<float>(std::numbers::sqrt2 / 2)));
    }
    return ag::record(ctx, std::move(y), {x}, [x](const Image<float>& g) {
        const auto in = x->value.data();
        auto dx = x->grad_buffer().data();
        const std::int64_t total = static_cast<std::int64_t>(in.size());
        const float inv_sqrt_2pi = static_cast<float>(1.0 / std::sqrt(2.0 * std::numbers::pi));
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < total; ++i) {
            const float v = in[i];
            const float cdf = 0.5f * (1.0f + std::erf(v * static_cast<float>(std::numbers::sqrt2 / 2)));
            dx[i] += g.data()[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5f * v * v));
        }
    });
}

Var add(Context& ctx, const Var& a, const Var& b)
{
    if (a->value.channels() != b->value.channels() || !(a->value.dims() == b->value.dims())) {
        throw std::invalid_argument("add: operand shapes differ");
    }
    Image<float> y(a->value.channels(), a->value.dims());
    const auto av = a->value.data();
    const auto bv = b->value.data();
    auto out = y.data();
    const std::int64_t total = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < total; ++i) {
        out[i] = av[i] + bv[i];
    }
    return ag::record(ctx, std::move(y), {a, b}, [a, b](const Image<float>& g) {
        for (const auto& v : {a, b}) {
            if (!ag::needs_grad(v)) {
                continue;
            }
            auto d = v->grad_buffer().data();
            const std::int64_t total = static_cast<std::int64_t>(d.size());
#pragma omp parallel for schedule(static)
            for (std::int64_t i = 0; i < total; ++i) {
                d[i] += g.data()[i];
            }
        }
    });
}

Var max_pool2(Context& ctx, const Var& x)
{
    const Dims s = x->value.dims();
    const int c = x->value.channels();
    Image<float> y(c, half_ceil(s));
    std::vector<std::int32_t> argmax(y.size());
    kernels::max_pool2_forward(x->value.data().data(), c, s, y.data().data(), argmax.data());
    if (!tracking(ctx, {x})) {
        return ag::constant(std::move(y));
    }
    return ag::record(ctx, std::move(y), {x}, [x, argmax = std::move(argmax)](const Image<float>& g) {
        kernels::max_pool2_backward(x->value.channels(), x->value.dims(), argmax.data(), g.data().data(),
                                    x->grad_buffer().data().data());
    });
}

Var concat(Context& ctx, const std::vector<Var>& xs)
{
    if (xs.empty()) {
        throw std::invalid_argument("concat: no inputs");
    }
    const Dims s = xs.front()->value.dims();
    int c = 0;
    for (const auto& x : xs) {
        require_same_dims(s, x->value.dims(), "concat");
        c += x->value.channels();
    }
    Image<float> y(c, s);
    std::size_t off = 0;
    for (const auto& x : xs) {
        std::copy(x->value.data().begin(), x->value.data().end(), y.data().begin() + off);
        off += x->value.size();
    }
    bool any = false;
    for (const auto& x : xs) {
        any = any || ag::needs_grad(x);
    }
    if (ctx.tape == nullptr || !any) {
        return ag::constant(std::move(y));
    }
    auto out = ag::constant(std::move(y));
    out->requires_grad = true;
    out->backward = [xs](const Image<float>& g) {
        std::size_t off = 0;
        for (const auto& x : xs) {
            const std::size_t n = x->value.size();
            if (ag::needs_grad(x)) {
                auto d = x->grad_buffer().data();
                for (std::size_t i = 0; i < n; ++i) {
                    d[i] += g.data()[off + i];
                }
            }
            off += n;
        }
    };
    ctx.tape->push(out);
    return out;
}

Var crop(Context& ctx, const Var& x, Dims target)
{
    const Dims s = x->value.dims();
    if (s == target) {
        return x;
    }
    if (target.d > s.d || target.h > s.h || target.w > s.w) {
        throw std::invalid_argument("crop: target " + target.str() + " exceeds " + s.str());
    }
    const int c = x->value.channels();
    Image<float> y(c, target);
    for (int ch = 0; ch < c; ++ch) {
        for (int a = 0; a < target.d; ++a) {
            for (int b = 0; b < target.h; ++b) {
                const float* src = &x->value.at(ch, a, b, 0);
                std::copy(src, src + target.w, &y.at(ch, a, b, 0));
            }
        }
    }
    return ag::record(ctx, std::move(y), {x}, [x, target](const Image<float>& g) {
        auto& d = x->grad_buffer();
        for (int ch = 0; ch < d.channels(); ++ch) {
            for (int a = 0; a < target.d; ++a) {
                for (int b = 0; b < target.h; ++b) {
                    for (int z = 0; z < target.w; ++z) {
                        d.at(ch, a, b, z) += g.at(ch, a, b, z);
                    }
                }
            }
        }
    });
}

Var pixel_shuffle_up(Context& ctx, const Var& x)
{
    const int cin = x->value.channels();
    if (cin % 8 != 0) {
        throw std::invalid_argument("pixel_shuffle_up: channel count must be divisible by 8");
    }
    const int c = cin / 8;
    const Dims s = x->value.dims();
    Image<float> y(c, twice(s));
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (int o = 0; o < 8; ++o) {
            const int a = o / 4, b = (o / 2) % 2, d = o % 2;
            for (int i = 0; i < s.d; ++i) {
                for (int j = 0; j < s.h; ++j) {
                    for (int k = 0; k < s.w; ++k) {
                        y.at(ch, 2 * i + a, 2 * j + b, 2 * k + d) = x->value.at(ch * 8 + o, i, j, k);
                    }
                }
            }
        }
    }
    return ag::record(ctx, std::move(y), {x}, [x, c](const Image<float>& g) {
        auto& dx = x->grad_buffer();
        const Dims s = dx.dims();
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < c; ++ch) {
            for (int o = 0; o < 8; ++o) {
                const int a = o / 4, b = (o / 2) % 2, d = o % 2;
                for (int i = 0; i < s.d; ++i) {
                    for (int j = 0; j < s.h; ++j) {
                        for (int k = 0; k < s.w; ++k) {
                            dx.at(ch * 8 + o, i, j, k) += g.at(ch, 2 * i + a, 2 * j + b, 2 * k + d);
                        }
                    }
                }
            }
        }
    });
}

Var global_avg_pool(Context& ctx, const Var& x)
{
    const int c = x->value.channels();
    const std::int64_t n = x->value.voxels();
    Image<float> y(c, {1, 1, 1});
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (float v : x->value.channel(ch)) {
            acc += v;
        }
        y.data()[ch] = static_cast<float>(acc / static_cast<double>(n));
    }
    return ag::record(ctx, std::move(y), {x}, [x](const Image<float>& g) {
        auto& dx = x->grad_buffer();
        const float inv = 1.0f / static_cast<float>(dx.voxels());
        for (int ch = 0; ch < dx.channels(); ++ch) {
            const float v = g.data()[ch] * inv;
            for (float& d : dx.channel(ch)) {
                d += v;
            }
        }
    });
}

Var window_attention(Context& ctx, const Var& qkv, const Var& bias_table, int heads, int window, int shift)
{
    const int c3 = qkv->value.channels();
    if (heads < 1 || c3 % 3 != 0 || (c3 / 3) % heads != 0) {
        throw std::invalid_argument("window_attention: channels (" + std::to_string(c3 / 3) +
                                    ") must be divisible by heads (" + std::to_string(heads) + ")");
    }
    const int c = c3 / 3;
    const int m = 2 * window - 1;
    if (bias_table->value.size() != static_cast<std::size_t>(m * m * m * heads)) {
        throw std::invalid_argument("window_attention: relative position table has the wrong size");
    }
    auto part = std::make_shared<kernels::WindowPartition>(kernels::WindowPartition::make(qkv->value.dims(), window, shift));
    Image<float> y(c, qkv->value.dims());
    const bool track = tracking(ctx, {qkv, bias_table});
    auto probs = std::make_shared<std::vector<float>>();
    kernels::window_attention_forward(*part, qkv->value.data().data(), c, heads, bias_table->value.data().data(),
                                      y.data().data(), track ? probs.get() : nullptr);
    if (!track) {
        return ag::constant(std::move(y));
    }
    return ag::record(ctx, std::move(y), {qkv, bias_table}, [qkv, bias_table, part, probs, c, heads](const Image<float>& g) {
        kernels::window_attention_backward(*part, qkv->value.data().data(), c, heads, *probs, g.data().data(),
                                           qkv->grad_buffer().data().data(), grad_ptr(bias_table));
    });
}

Var affine_field(Context& ctx, const Var& residual, Dims dims, double translation_scale)
{
    if (residual->value.size() != 12) {
        throw std::invalid_argument("affine_field: expected 12 residual values");
    }
    AffineTransform t;
    for (int i = 0; i < 12; ++i) {
        t.m[i] += residual->value.data()[i] * (i % 4 == 3 ? translation_scale : 1.0);
    }
    auto y = affine_to_field<float>(t, dims);
    return ag::record(ctx, std::move(y), {residual}, [residual, dims, translation_scale](const Image<float>& g) {
        const auto c = grid_center(dims);
        const std::int64_t n = dims.voxels();
        double acc[12] = {};
        for (int x = 0; x < dims.d; ++x) {
            for (int y = 0; y < dims.h; ++y) {
                for (int z = 0; z < dims.w; ++z) {
                    const double p[4] = {x - c[0], y - c[1], z - c[2], translation_scale};
                    const std::int64_t i = (std::int64_t(x) * dims.h + y) * dims.w + z;
                    for (int r = 0; r < 3; ++r) {
                        const double gv = g.data()[r * n + i];
                        for (int k = 0; k < 4; ++k) {
                            acc[r * 4 + k] += gv * p[k];
                        }
                    }
                }
            }
        }
        auto d = residual->grad_buffer().data();
        for (int k = 0; k < 12; ++k) {
            d[k] += static_cast<float>(acc[k]);
        }
    });
}

Var upsample_field(Context& ctx, const Var& field)
{
    auto y = cfreg::upsample_field(field->value);
    return ag::record(ctx, std::move(y), {field}, [field](const Image<float>& g) {
        kernels::upsample_field_backward(field->value.dims(), g.data().data(), field->grad_buffer().data().data());
    });
}

Var warp(Context& ctx, const Var& src, const Var& field)
{
    require_field(field->value.channels(), "warp");
    require_same_dims(src->value.dims(), field->value.dims(), "warp");
    Image<float> y(src->value.channels(), src->value.dims());
    kernels::warp_forward(src->value.data().data(), src->value.channels(), src->value.dims(),
                          field->value.data().data(), y.data().data());
    return ag::record(ctx, std::move(y), {src, field}, [src, field](const Image<float>& g) {
        kernels::warp_backward(src->value.data().data(), src->value.channels(), src->value.dims(),
                               field->value.data().data(), g.data().data(), grad_ptr(src), grad_ptr(field));
    });
}

Var ncc_loss(Context& ctx, const Var& warped, const Volume& fixed, const LossConfig& cfg)
{
    const bool track = tracking(ctx, {warped});
    auto grad = std::make_shared<Image<float>>();
    const double v = cfreg::ncc_loss(warped->value, fixed, cfg, track ? grad.get() : nullptr);
    return ag::record(ctx, scalar_image(v), {warped}, [warped, grad](const Image<float>& g) {
        const float s = g.data()[0];
        auto d = warped->grad_buffer().data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] += s * grad->data()[i];
        }
    });
}

Var diffusion_loss(Context& ctx, const Var& field)
{
    const bool track = tracking(ctx, {field});
    auto grad = std::make_shared<Image<float>>();
    const double v = cfreg::diffusion_loss(field->value, track ? grad.get() : nullptr);
    return ag::record(ctx, scalar_image(v), {field}, [field, grad](const Image<float>& g) {
        const float s = g.data()[0];
        auto d = field->grad_buffer().data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] += s * grad->data()[i];
        }
    });
}

Var jd_loss(Context& ctx, const Var& field)
{
    const bool track = tracking(ctx, {field});
    auto grad = std::make_shared<Image<float>>();
    const double v = cfreg::jd_loss(field->value, track ? grad.get() : nullptr);
    return ag::record(ctx, scalar_image(v), {field}, [field, grad](const Image<float>& g) {
        const float s = g.data()[0];
        auto d = field->grad_buffer().data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] += s * grad->data()[i];
        }
    });
}

Var weighted_sum(Context& ctx, const std::vector<Var>& terms, const std::vector<double>& weights)
{
    if (terms.size() != weights.size()) {
        throw std::invalid_argument("weighted_sum: terms and weights differ in length");
    }
    double v = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        v += weights[i] * scalar(terms[i]);
    }
    bool any = false;
    for (const auto& t : terms) {
        any = any || ag::needs_grad(t);
    }
    auto out = ag::constant(scalar_image(v));
    if (ctx.tape == nullptr || !any) {
        return out;
    }
    out->requires_grad = true;
    out->backward = [terms, weights](const Image<float>& g) {
        for (std::size_t i = 0; i < terms.size(); ++i) {
            if (ag::needs_grad(terms[i])) {
                terms[i]->grad_buffer().data()[0] += static_cast<float>(weights[i] * g.data()[0]);
            }
        }
    };
    ctx.tape->push(out);
    return out;
}

} // namespace cfreg::nn
