#pragma once

// Serial, straightforward versions of the kernels in cfreg/kernels.hpp.
// Direct loops with double accumulation, no BLAS, no OpenMP. Used by the
// tests as a second route and by the benchmark as the baseline.

#include "cfreg/field_algebra.hpp"
#include "cfreg/image.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

namespace cfreg::reference {

inline std::int64_t flat(Dims s, int x, int y, int z) { return (std::int64_t(x) * s.h + y) * s.w + z; }

inline void conv3d_forward(const float* x, int cin, Dims s, const float* weight, const float* bias, int cout,
                           int ksize, float* y)
{
    const int r = ksize / 2;
    const std::int64_t n = s.voxels();
    for (int co = 0; co < cout; ++co) {
        for (int i = 0; i < s.d; ++i) {
            for (int j = 0; j < s.h; ++j) {
                for (int k = 0; k < s.w; ++k) {
                    double acc = bias != nullptr ? bias[co] : 0.0;
                    for (int ci = 0; ci < cin; ++ci) {
                        const float* wk = weight + (std::int64_t(co) * cin + ci) * ksize * ksize * ksize;
                        for (int a = 0; a < ksize; ++a) {
                            const int xi = i + a - r;
                            if (xi < 0 || xi >= s.d) {
                                continue;
                            }
                            for (int b = 0; b < ksize; ++b) {
                                const int yi = j + b - r;
                                if (yi < 0 || yi >= s.h) {
                                    continue;
                                }
                                for (int c = 0; c < ksize; ++c) {
                                    const int zi = k + c - r;
                                    if (zi < 0 || zi >= s.w) {
                                        continue;
                                    }
                                    acc += double(wk[(a * ksize + b) * ksize + c]) * x[ci * n + flat(s, xi, yi, zi)];
                                }
                            }
                        }
                    }
                    y[co * n + flat(s, i, j, k)] = static_cast<float>(acc);
                }
            }
        }
    }
}

/// Scatter form: every output gradient is pushed back along the taps that produced it.
inline void conv3d_backward(const float* x, int cin, Dims s, const float* weight, int cout, int ksize,
                            const float* dy, float* dx, float* dweight, float* dbias)
{
    const int r = ksize / 2;
    const int kk = ksize * ksize * ksize;
    const std::int64_t n = s.voxels();
    std::vector<double> gx(dx != nullptr ? cin * n : 0, 0.0);
    std::vector<double> gw(dweight != nullptr ? std::int64_t(cout) * cin * kk : 0, 0.0);
    for (int co = 0; co < cout; ++co) {
        double gb = 0.0;
        for (int i = 0; i < s.d; ++i) {
            for (int j = 0; j < s.h; ++j) {
                for (int k = 0; k < s.w; ++k) {
                    const double g = dy[co * n + flat(s, i, j, k)];
                    gb += g;
                    for (int ci = 0; ci < cin; ++ci) {
                        const std::int64_t wbase = (std::int64_t(co) * cin + ci) * kk;
                        for (int a = 0; a < ksize; ++a) {
                            const int xi = i + a - r;
                            if (xi < 0 || xi >= s.d) {
                                continue;
                            }
                            for (int b = 0; b < ksize; ++b) {
                                const int yi = j + b - r;
                                if (yi < 0 || yi >= s.h) {
                                    continue;
                                }
                                for (int c = 0; c < ksize; ++c) {
                                    const int zi = k + c - r;
                                    if (zi < 0 || zi >= s.w) {
                                        continue;
                                    }
                                    const int tap = (a * ksize + b) * ksize + c;
                                    const std::int64_t xin = ci * n + flat(s, xi, yi, zi);
                                    if (!gx.empty()) {
                                        gx[xin] += g * weight[wbase + tap];
                                    }
                                    if (!gw.empty()) {
                                        gw[wbase + tap] += g * x[xin];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (dbias != nullptr) {
            dbias[co] += static_cast<float>(gb);
        }
    }
    for (std::size_t i = 0; i < gx.size(); ++i) {
        dx[i] += static_cast<float>(gx[i]);
    }
    for (std::size_t i = 0; i < gw.size(); ++i) {
        dweight[i] += static_cast<float>(gw[i]);
    }
}

inline void pointwise_forward(const float* x, int cin, std::int64_t n, const float* weight, const float* bias,
                              int cout, float* y)
{
    for (int co = 0; co < cout; ++co) {
        for (std::int64_t v = 0; v < n; ++v) {
            double acc = bias != nullptr ? bias[co] : 0.0;
            for (int ci = 0; ci < cin; ++ci) {
                acc += double(weight[co * cin + ci]) * x[ci * n + v];
            }
            y[co * n + v] = static_cast<float>(acc);
        }
    }
}

inline void pointwise_backward(const float* x, int cin, std::int64_t n, const float* weight, int cout,
                               const float* dy, float* dx, float* dweight, float* dbias)
{
    for (int co = 0; co < cout; ++co) {
        double gb = 0.0;
        for (int ci = 0; ci < cin; ++ci) {
            double gw = 0.0;
            for (std::int64_t v = 0; v < n; ++v) {
                gw += double(dy[co * n + v]) * x[ci * n + v];
            }
            if (dweight != nullptr) {
                dweight[co * cin + ci] += static_cast<float>(gw);
            }
        }
        for (std::int64_t v = 0; v < n; ++v) {
            gb += dy[co * n + v];
        }
        if (dbias != nullptr) {
            dbias[co] += static_cast<float>(gb);
        }
    }
    if (dx != nullptr) {
        for (int ci = 0; ci < cin; ++ci) {
            for (std::int64_t v = 0; v < n; ++v) {
                double acc = 0.0;
                for (int co = 0; co < cout; ++co) {
                    acc += double(weight[co * cin + ci]) * dy[co * n + v];
                }
                dx[ci * n + v] += static_cast<float>(acc);
            }
        }
    }
}

inline void layer_norm_forward(const float* x, int c, std::int64_t n, const float* gamma, const float* beta,
                               float eps, float* y)
{
    for (std::int64_t v = 0; v < n; ++v) {
        double mean = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            mean += x[ch * n + v];
        }
        mean /= c;
        double var = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            var += (x[ch * n + v] - mean) * (x[ch * n + v] - mean);
        }
        const double rstd = 1.0 / std::sqrt(var / c + eps);
        for (int ch = 0; ch < c; ++ch) {
            y[ch * n + v] = static_cast<float>((x[ch * n + v] - mean) * rstd * gamma[ch] + beta[ch]);
        }
    }
}

/// Max over each 2x2x2 block, ties resolved to the first voxel in scan order.
inline void max_pool2_forward(const float* x, int c, Dims s, float* y)
{
    const Dims o = half_ceil(s);
    for (int ch = 0; ch < c; ++ch) {
        for (int i = 0; i < o.d; ++i) {
            for (int j = 0; j < o.h; ++j) {
                for (int k = 0; k < o.w; ++k) {
                    float best = -std::numeric_limits<float>::infinity();
                    for (int a = 2 * i; a < std::min(2 * i + 2, s.d); ++a) {
                        for (int b = 2 * j; b < std::min(2 * j + 2, s.h); ++b) {
                            for (int cc = 2 * k; cc < std::min(2 * k + 2, s.w); ++cc) {
                                best = std::max(best, x[ch * s.voxels() + flat(s, a, b, cc)]);
                            }
                        }
                    }
                    y[ch * o.voxels() + flat(o, i, j, k)] = best;
                }
            }
        }
    }
}

inline void warp_forward(const float* src, int c, Dims s, const float* field, float* out)
{
    const std::int64_t n = s.voxels();
    for (int ch = 0; ch < c; ++ch) {
        const std::span<const float> sc(src + ch * n, static_cast<std::size_t>(n));
        for (int i = 0; i < s.d; ++i) {
            for (int j = 0; j < s.h; ++j) {
                for (int k = 0; k < s.w; ++k) {
                    const std::int64_t v = flat(s, i, j, k);
                    out[ch * n + v] = static_cast<float>(
                        sample_linear(sc, s, i + double(field[v]), j + double(field[n + v]), k + double(field[2 * n + v])));
                }
            }
        }
    }
}

/// Gradients of sum(dout * warp(src, field)). The coordinate derivative is
/// that of the interpolant on the cell holding the point; clamped axes get 0.
inline void warp_backward(const float* src, int c, Dims s, const float* field, const float* dout, float* dsrc,
                          float* dfield)
{
    const std::int64_t n = s.voxels();
    for (int i = 0; i < s.d; ++i) {
        for (int j = 0; j < s.h; ++j) {
            for (int k = 0; k < s.w; ++k) {
                const std::int64_t v = flat(s, i, j, k);
                const AxisStencil ax[3] = {AxisStencil::make(i + double(field[v]), s.d),
                                           AxisStencil::make(j + double(field[n + v]), s.h),
                                           AxisStencil::make(k + double(field[2 * n + v]), s.w)};
                double g[3] = {0, 0, 0};
                for (int corner = 0; corner < 8; ++corner) {
                    int idx[3];
                    double wt[3], dwt[3];
                    for (int a = 0; a < 3; ++a) {
                        const bool hi = (corner >> (2 - a)) & 1;
                        idx[a] = hi ? ax[a].i1 : ax[a].i0;
                        wt[a] = hi ? ax[a].t : 1.0 - ax[a].t;
                        dwt[a] = ax[a].clamped ? 0.0 : (hi ? 1.0 : -1.0);
                    }
                    const std::int64_t u = flat(s, idx[0], idx[1], idx[2]);
                    const double w = wt[0] * wt[1] * wt[2];
                    for (int ch = 0; ch < c; ++ch) {
                        const double go = dout[ch * n + v];
                        if (dsrc != nullptr) {
                            dsrc[ch * n + u] += static_cast<float>(go * w);
                        }
                        const double val = src[ch * n + u];
                        g[0] += go * val * dwt[0] * wt[1] * wt[2];
                        g[1] += go * val * wt[0] * dwt[1] * wt[2];
                        g[2] += go * val * wt[0] * wt[1] * dwt[2];
                    }
                }
                if (dfield != nullptr) {
                    for (int a = 0; a < 3; ++a) {
                        dfield[a * n + v] += static_cast<float>(g[a]);
                    }
                }
            }
        }
    }
}

/// Window attention written against the rolled, padded grid directly: a
/// voxel o sits at padded position (o - shift) mod P; tokens attend to the
/// tokens of the same window and the same shift region.
inline void window_attention_forward(Dims s, int window, int shift, const float* qkv, int c, int heads,
                                     const float* bias_table, float* out)
{
    const int hd = c / heads;
    const std::int64_t n = s.voxels();
    const double scale = 1.0 / std::sqrt(double(hd));
    const auto padded = [&](int e) { return (e + window - 1) / window * window; };
    const int P[3] = {padded(s.d), padded(s.h), padded(s.w)};
    const auto region = [&](int j, int np) {
        if (shift == 0) {
            return 0;
        }
        return j < np - window ? 0 : (j < np - shift ? 1 : 2);
    };
    struct Token {
        int win[3];
        int loc[3];
        int reg;
    };
    std::vector<Token> tok(static_cast<std::size_t>(n));
    for (int i = 0; i < s.d; ++i) {
        for (int j = 0; j < s.h; ++j) {
            for (int k = 0; k < s.w; ++k) {
                const int o[3] = {i, j, k};
                Token t{};
                t.reg = 0;
                for (int a = 0; a < 3; ++a) {
                    const int p = ((o[a] - shift) % P[a] + P[a]) % P[a];
                    t.win[a] = p / window;
                    t.loc[a] = p % window;
                    t.reg = t.reg * 3 + region(p, P[a]);
                }
                tok[flat(s, i, j, k)] = t;
            }
        }
    }
    const int m = 2 * window - 1;
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (int h = 0; h < heads; ++h) {
        for (std::int64_t qi = 0; qi < n; ++qi) {
            const Token& tq = tok[qi];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t kj = 0; kj < n; ++kj) {
                const Token& tk = tok[kj];
                const bool same = tq.win[0] == tk.win[0] && tq.win[1] == tk.win[1] && tq.win[2] == tk.win[2] &&
                                  tq.reg == tk.reg;
                if (!same) {
                    logits[kj] = -std::numeric_limits<double>::infinity();
                    continue;
                }
                double dot = 0.0;
                for (int d = 0; d < hd; ++d) {
                    dot += double(qkv[(h * hd + d) * n + qi]) * qkv[(c + h * hd + d) * n + kj];
                }
                const int rel = ((tq.loc[0] - tk.loc[0] + window - 1) * m + (tq.loc[1] - tk.loc[1] + window - 1)) * m +
                                (tq.loc[2] - tk.loc[2] + window - 1);
                logits[kj] = dot * scale + bias_table[rel * heads + h];
                mx = std::max(mx, logits[kj]);
            }
            double z = 0.0;
            for (std::int64_t kj = 0; kj < n; ++kj) {
                logits[kj] = std::isinf(logits[kj]) ? 0.0 : std::exp(logits[kj] - mx);
                z += logits[kj];
            }
            for (int d = 0; d < hd; ++d) {
                double acc = 0.0;
                for (std::int64_t kj = 0; kj < n; ++kj) {
                    if (logits[kj] != 0.0) {
                        acc += logits[kj] * qkv[(2 * c + h * hd + d) * n + kj];
                    }
                }
                out[(h * hd + d) * n + qi] = static_cast<float>(acc / z);
            }
        }
    }
}

/// Upsample adjoint by brute force: the transpose of the explicit interpolation matrix.
inline void upsample_field_backward(Dims coarse, const float* dfine, float* dcoarse)
{
    const Dims fine = twice(coarse);
    const std::int64_t nc = coarse.voxels();
    const std::int64_t nf = fine.voxels();
    for (int ch = 0; ch < 3; ++ch) {
        for (std::int64_t u = 0; u < nc; ++u) {
            Image<double> unit(1, coarse);
            unit.data()[u] = 1.0;
            double acc = 0.0;
            for (int i = 0; i < fine.d; ++i) {
                for (int j = 0; j < fine.h; ++j) {
                    for (int k = 0; k < fine.w; ++k) {
                        const double g = dfine[ch * nf + flat(fine, i, j, k)];
                        if (g == 0.0) {
                            continue;
                        }
                        acc += 2.0 * g *
                               sample_linear(std::as_const(unit).channel(0), coarse, (i + 0.5) * 0.5 - 0.5, (j + 0.5) * 0.5 - 0.5,
                                             (k + 0.5) * 0.5 - 0.5);
                    }
                }
            }
            dcoarse[ch * nc + u] += static_cast<float>(acc);
        }
    }
}

/// Negative mean local NCC^2, every window statistic taken by direct
/// summation over the truncated (in-bounds) cube.
inline double ncc_loss(const float* a, const float* b, Dims s, int window, double eps)
{
    const int r = window / 2;
    double total = 0.0;
    for (int i = 0; i < s.d; ++i) {
        for (int j = 0; j < s.h; ++j) {
            for (int k = 0; k < s.w; ++k) {
                double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, cnt = 0;
                for (int x = std::max(0, i - r); x <= std::min(s.d - 1, i + r); ++x) {
                    for (int y = std::max(0, j - r); y <= std::min(s.h - 1, j + r); ++y) {
                        for (int z = std::max(0, k - r); z <= std::min(s.w - 1, k + r); ++z) {
                            const double va = a[flat(s, x, y, z)], vb = b[flat(s, x, y, z)];
                            sa += va;
                            sb += vb;
                            saa += va * va;
                            sbb += vb * vb;
                            sab += va * vb;
                            cnt += 1;
                        }
                    }
                }
                const double cross = sab - sa * sb / cnt;
                const double va = saa - sa * sa / cnt;
                const double vb = sbb - sb * sb / cnt;
                total += cross * cross / ((va + eps) * (vb + eps));
            }
        }
    }
    return -total / static_cast<double>(s.voxels());
}

/// det(I + grad u) by cofactor expansion.
inline std::vector<double> jacobian_det(const float* field, Dims s)
{
    const std::int64_t n = s.voxels();
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < s.d; ++i) {
        for (int j = 0; j < s.h; ++j) {
            for (int k = 0; k < s.w; ++k) {
                const int p[3] = {i, j, k};
                double J[3][3];
                for (int a = 0; a < 3; ++a) {
                    for (int b = 0; b < 3; ++b) {
                        // forward difference, backward at the far border
                        int hi[3] = {i, j, k}, lo[3] = {i, j, k};
                        if (p[b] + 1 < s[b]) {
                            hi[b] += 1;
                        } else {
                            lo[b] -= 1;
                        }
                        const double d = double(field[a * n + flat(s, hi[0], hi[1], hi[2])]) -
                                         field[a * n + flat(s, lo[0], lo[1], lo[2])];
                        J[a][b] = (a == b ? 1.0 : 0.0) + d;
                    }
                }
                out[flat(s, i, j, k)] = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                                        J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                                        J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
            }
        }
    }
    return out;
}

} // namespace cfreg::reference
