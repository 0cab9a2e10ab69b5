#include "cfreg/kernels.hpp"

#include "cfreg/field_algebra.hpp"

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace cfreg::kernels {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc)
{
    if (m == 0 || n == 0) {
        return;
    }
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                alpha, a, lda, b, ldb, beta, c, ldc);
}

namespace {

// OpenMP owns the parallelism; BLAS calls made from worker threads stay serial.
const bool blas_serial = [] {
    openblas_set_num_threads(1);
    return true;
}();

constexpr std::int64_t tile_budget = std::int64_t(1) << 18; // floats per im2col tile (1 MiB)
constexpr std::int64_t min_cols = 256;

// Voxel rows (x, y) per tile so that a (k x tile) column block stays cache resident.
int tile_rows(std::int64_t k, Dims s)
{
    const std::int64_t rows = std::int64_t(s.d) * s.h;
    return static_cast<int>(std::clamp<std::int64_t>(tile_budget / std::max<std::int64_t>(1, k * s.w), 1, rows));
}

// col(ci*27 + kk, t) for voxel rows [r0, r0 + nr), row r = x * h + y.
void im2col_rows(const float* x, int cin, Dims s, int r0, int nr, float* col)
{
    const std::int64_t n = std::int64_t(nr) * s.w;
    const std::int64_t vox = s.voxels();
    for (int ci = 0; ci < cin; ++ci) {
        const float* src = x + ci * vox;
        for (int kk = 0; kk < 27; ++kk) {
            const int kx = kk / 9 - 1, ky = (kk / 3) % 3 - 1, kz = kk % 3 - 1;
            float* dst = col + (std::int64_t(ci) * 27 + kk) * n;
            const int z_lo = std::max(0, -kz);
            const int z_hi = std::min(s.w, s.w - kz);
            for (int ri = 0; ri < nr; ++ri) {
                const int r = r0 + ri;
                const int sx = r / s.h + kx;
                const int sy = r % s.h + ky;
                float* drow = dst + std::int64_t(ri) * s.w;
                if (sx < 0 || sx >= s.d || sy < 0 || sy >= s.h) {
                    std::fill(drow, drow + s.w, 0.0f);
                    continue;
                }
                const float* srow = src + (std::int64_t(sx) * s.h + sy) * s.w;
                for (int z = 0; z < z_lo; ++z) {
                    drow[z] = 0.0f;
                }
                if (z_hi > z_lo) {
                    std::memcpy(drow + z_lo, srow + z_lo + kz, sizeof(float) * (z_hi - z_lo));
                }
                for (int z = std::max(z_hi, z_lo); z < s.w; ++z) {
                    drow[z] = 0.0f;
                }
            }
        }
    }
}

// y (+)= conv(x, w) with weight layout (cout, cin, 27), tiled over voxel rows.
void conv_tiles(const float* x, int cin, Dims s, const float* w, int cout, float* y, bool accumulate)
{
    const int k = cin * 27;
    const int rows = s.d * s.h;
    const int tr = tile_rows(k, s);
    const int tiles = (rows + tr - 1) / tr;
    const int n_all = static_cast<int>(s.voxels());
#pragma omp parallel
    {
        std::vector<float> col(static_cast<std::size_t>(k) * tr * s.w);
#pragma omp for schedule(static)
        for (int t = 0; t < tiles; ++t) {
            const int r0 = t * tr;
            const int nr = std::min(tr, rows - r0);
            const int n = nr * s.w;
            im2col_rows(x, cin, s, r0, nr, col.data());
            gemm(false, false, cout, n, k, 1.0f, w, k, col.data(), n, accumulate ? 1.0f : 0.0f,
                 y + std::int64_t(r0) * s.w, n_all);
        }
    }
}

// Column-split product C (+)= op(A) B for B with many columns; each block is one serial GEMM.
void gemm_columns(bool trans_a, int m, std::int64_t n, int k, const float* a, int lda, const float* b, float beta,
                  float* c)
{
    const int ni = static_cast<int>(n);
    const std::int64_t block = std::max<std::int64_t>(min_cols, tile_budget / std::max(1, k + m));
    const std::int64_t blocks = (n + block - 1) / block;
#pragma omp parallel for schedule(static)
    for (std::int64_t t = 0; t < blocks; ++t) {
        const std::int64_t c0 = t * block;
        const int nb = static_cast<int>(std::min(block, n - c0));
        gemm(trans_a, false, m, nb, k, 1.0f, a, lda, b + c0, ni, beta, c + c0, ni);
    }
}

// Sum of per-thread partials in thread order keeps reductions reproducible for a fixed thread count.
void reduce_partials(const std::vector<std::vector<float>>& parts, float* out, std::size_t size)
{
    for (const auto& p : parts) {
        if (p.empty()) {
            continue;
        }
        for (std::size_t i = 0; i < size; ++i) {
            out[i] += p[i];
        }
    }
}

void add_bias(float* y, const float* bias, int cout, std::int64_t n)
{
    if (bias == nullptr) {
        return;
    }
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        float* row = y + co * n;
        const float b = bias[co];
        for (std::int64_t i = 0; i < n; ++i) {
            row[i] += b;
        }
    }
}

void bias_grad(const float* dy, int cout, std::int64_t n, float* dbias)
{
    if (dbias == nullptr) {
        return;
    }
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
        const float* row = dy + co * n;
        double acc = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            acc += row[i];
        }
        dbias[co] += static_cast<float>(acc);
    }
}

} // namespace

void pointwise_forward(const float* x, int cin, std::int64_t n, const float* weight, const float* bias, int cout,
                       float* y)
{
    gemm_columns(false, cout, n, cin, weight, cin, x, 0.0f, y);
    add_bias(y, bias, cout, n);
}

void pointwise_backward(const float* x, int cin, std::int64_t n, const float* weight, int cout, const float* dy,
                        float* dx, float* dweight, float* dbias)
{
    const int ni = static_cast<int>(n);
    if (dweight != nullptr) {
        const std::int64_t block = std::max<std::int64_t>(min_cols, tile_budget / std::max(1, cin + cout));
        const std::int64_t blocks = (n + block - 1) / block;
        std::vector<std::vector<float>> parts(static_cast<std::size_t>(omp_get_max_threads()));
#pragma omp parallel
        {
            auto& part = parts[static_cast<std::size_t>(omp_get_thread_num())];
#pragma omp for schedule(static)
            for (std::int64_t t = 0; t < blocks; ++t) {
                if (part.empty()) {
                    part.assign(static_cast<std::size_t>(cout) * cin, 0.0f);
                }
                const std::int64_t c0 = t * block;
                const int nb = static_cast<int>(std::min(block, n - c0));
                gemm(false, true, cout, cin, nb, 1.0f, dy + c0, ni, x + c0, ni, 1.0f, part.data(), cin);
            }
        }
        reduce_partials(parts, dweight, static_cast<std::size_t>(cout) * cin);
    }
    if (dx != nullptr) {
        gemm_columns(true, cin, n, cout, weight, cin, dy, 1.0f, dx);
    }
    bias_grad(dy, cout, n, dbias);
}

void conv3d_forward(const float* x, int cin, Dims s, const float* weight, const float* bias, int cout, int ksize,
                    float* y)
{
    if (ksize == 1) {
        pointwise_forward(x, cin, s.voxels(), weight, bias, cout, y);
        return;
    }
    conv_tiles(x, cin, s, weight, cout, y, false);
    add_bias(y, bias, cout, s.voxels());
}

void conv3d_backward(const float* x, int cin, Dims s, const float* weight, int cout, int ksize, const float* dy,
                     float* dx, float* dweight, float* dbias)
{
    if (ksize == 1) {
        pointwise_backward(x, cin, s.voxels(), weight, cout, dy, dx, dweight, dbias);
        return;
    }
    const int k = cin * 27;
    const int n_all = static_cast<int>(s.voxels());
    if (dweight != nullptr) {
        const int rows = s.d * s.h;
        const int tr = tile_rows(k, s);
        const int tiles = (rows + tr - 1) / tr;
        std::vector<std::vector<float>> parts(static_cast<std::size_t>(omp_get_max_threads()));
#pragma omp parallel
        {
            auto& part = parts[static_cast<std::size_t>(omp_get_thread_num())];
            std::vector<float> col;
#pragma omp for schedule(static)
            for (int t = 0; t < tiles; ++t) {
                if (part.empty()) {
                    part.assign(static_cast<std::size_t>(cout) * k, 0.0f);
                    col.resize(static_cast<std::size_t>(k) * tr * s.w);
                }
                const int r0 = t * tr;
                const int nr = std::min(tr, rows - r0);
                const int n = nr * s.w;
                im2col_rows(x, cin, s, r0, nr, col.data());
                gemm(false, true, cout, k, n, 1.0f, dy + std::int64_t(r0) * s.w, n_all, col.data(), n, 1.0f,
                     part.data(), k);
            }
        }
        reduce_partials(parts, dweight, static_cast<std::size_t>(cout) * k);
    }
    if (dx != nullptr) {
        // Input gradient is a correlation of dy with the flipped, transposed kernel.
        std::vector<float> flipped(static_cast<std::size_t>(cin) * cout * 27);
        for (int co = 0; co < cout; ++co) {
            for (int ci = 0; ci < cin; ++ci) {
                for (int kk = 0; kk < 27; ++kk) {
                    flipped[(std::size_t(ci) * cout + co) * 27 + (26 - kk)] = weight[(std::size_t(co) * cin + ci) * 27 + kk];
                }
            }
        }
        conv_tiles(dy, cout, s, flipped.data(), cin, dx, true);
    }
    bias_grad(dy, cout, s.voxels(), dbias);
}

void layer_norm_forward(const float* x, int c, std::int64_t n, const float* gamma, const float* beta, float eps,
                        float* y, float* mean, float* rstd)
{
    constexpr std::int64_t block = 1024;
#pragma omp parallel for schedule(static)
    for (std::int64_t b0 = 0; b0 < n; b0 += block) {
        const std::int64_t b1 = std::min(n, b0 + block);
        for (std::int64_t i = b0; i < b1; ++i) {
            mean[i] = 0.0f;
            rstd[i] = 0.0f;
        }
        for (int ch = 0; ch < c; ++ch) {
            const float* row = x + ch * n;
            for (std::int64_t i = b0; i < b1; ++i) {
                mean[i] += row[i];
            }
        }
        for (std::int64_t i = b0; i < b1; ++i) {
            mean[i] /= static_cast<float>(c);
        }
        for (int ch = 0; ch < c; ++ch) {
            const float* row = x + ch * n;
            for (std::int64_t i = b0; i < b1; ++i) {
                const float d = row[i] - mean[i];
                rstd[i] += d * d;
            }
        }
        for (std::int64_t i = b0; i < b1; ++i) {
            rstd[i] = 1.0f / std::sqrt(rstd[i] / static_cast<float>(c) + eps);
        }
        for (int ch = 0; ch < c; ++ch) {
            const float* row = x + ch * n;
            float* out = y + ch * n;
            for (std::int64_t i = b0; i < b1; ++i) {
                out[i] = (row[i] - mean[i]) * rstd[i] * gamma[ch] + beta[ch];
            }
        }
    }
}

void layer_norm_backward(const float* x, int c, std::int64_t n, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta)
{
    if (dgamma != nullptr || dbeta != nullptr) {
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < c; ++ch) {
            const float* row = x + ch * n;
            const float* g = dy + ch * n;
            double sg = 0.0, sb = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                sg += g[i] * (row[i] - mean[i]) * rstd[i];
                sb += g[i];
            }
            if (dgamma != nullptr) {
                dgamma[ch] += static_cast<float>(sg);
            }
            if (dbeta != nullptr) {
                dbeta[ch] += static_cast<float>(sb);
            }
        }
    }
    if (dx == nullptr) {
        return;
    }
    constexpr std::int64_t block = 1024;
#pragma omp parallel
    {
        std::vector<float> a(block), b(block);
#pragma omp for schedule(static)
        for (std::int64_t b0 = 0; b0 < n; b0 += block) {
            const std::int64_t b1 = std::min(n, b0 + block);
            std::fill(a.begin(), a.end(), 0.0f);
            std::fill(b.begin(), b.end(), 0.0f);
            for (int ch = 0; ch < c; ++ch) {
                const float* row = x + ch * n;
                const float* g = dy + ch * n;
                for (std::int64_t i = b0; i < b1; ++i) {
                    const float dxhat = g[i] * gamma[ch];
                    a[i - b0] += dxhat;
                    b[i - b0] += dxhat * (row[i] - mean[i]) * rstd[i];
                }
            }
            const float inv_c = 1.0f / static_cast<float>(c);
            for (int ch = 0; ch < c; ++ch) {
                const float* row = x + ch * n;
                const float* g = dy + ch * n;
                float* out = dx + ch * n;
                for (std::int64_t i = b0; i < b1; ++i) {
                    const float xhat = (row[i] - mean[i]) * rstd[i];
                    out[i] += rstd[i] * (g[i] * gamma[ch] - a[i - b0] * inv_c - xhat * b[i - b0] * inv_c);
                }
            }
        }
    }
}

void max_pool2_forward(const float* x, int c, Dims s, float* y, std::int32_t* argmax)
{
    const Dims o = half_ceil(s);
    const std::int64_t vin = s.voxels();
    const std::int64_t vout = o.voxels();
#pragma omp parallel for collapse(2) schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (int ox = 0; ox < o.d; ++ox) {
            const float* src = x + ch * vin;
            for (int oy = 0; oy < o.h; ++oy) {
                for (int oz = 0; oz < o.w; ++oz) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int32_t arg = -1;
                    for (int dx = 0; dx < 2; ++dx) {
                        const int ix = 2 * ox + dx;
                        if (ix >= s.d) {
                            continue;
                        }
                        for (int dy = 0; dy < 2; ++dy) {
                            const int iy = 2 * oy + dy;
                            if (iy >= s.h) {
                                continue;
                            }
                            for (int dz = 0; dz < 2; ++dz) {
                                const int iz = 2 * oz + dz;
                                if (iz >= s.w) {
                                    continue;
                                }
                                const auto idx = static_cast<std::int32_t>((std::int64_t(ix) * s.h + iy) * s.w + iz);
                                if (arg < 0 || src[idx] > best) {
                                    best = src[idx];
                                    arg = idx;
                                }
                            }
                        }
                    }
                    const std::int64_t oi = ch * vout + (std::int64_t(ox) * o.h + oy) * o.w + oz;
                    y[oi] = best;
                    if (argmax != nullptr) {
                        argmax[oi] = arg;
                    }
                }
            }
        }
    }
}

void max_pool2_backward(int c, Dims s, const std::int32_t* argmax, const float* dy, float* dx)
{
    const Dims o = half_ceil(s);
    const std::int64_t vin = s.voxels();
    const std::int64_t vout = o.voxels();
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (std::int64_t i = 0; i < vout; ++i) {
            dx[ch * vin + argmax[ch * vout + i]] += dy[ch * vout + i];
        }
    }
}

namespace {

struct Trilinear {
    std::int64_t idx[8];
    float w[8];
    // d(weight)/d(coordinate) per corner, per axis; zero on clamped axes.
    float dw[3][8];
};

Trilinear trilinear(Dims s, double px, double py, double pz, bool grads = true)
{
    const auto ax = AxisStencil::make(px, s.d);
    const auto ay = AxisStencil::make(py, s.h);
    const auto az = AxisStencil::make(pz, s.w);
    Trilinear t{};
    int k = 0;
    for (int dx = 0; dx < 2; ++dx) {
        const int ix = dx ? ax.i1 : ax.i0;
        const double wx = dx ? ax.t : 1.0 - ax.t;
        const double gx = ax.clamped ? 0.0 : (dx ? 1.0 : -1.0);
        for (int dy = 0; dy < 2; ++dy) {
            const int iy = dy ? ay.i1 : ay.i0;
            const double wy = dy ? ay.t : 1.0 - ay.t;
            const double gy = ay.clamped ? 0.0 : (dy ? 1.0 : -1.0);
            for (int dz = 0; dz < 2; ++dz) {
                const int iz = dz ? az.i1 : az.i0;
                const double wz = dz ? az.t : 1.0 - az.t;
                const double gz = az.clamped ? 0.0 : (dz ? 1.0 : -1.0);
                t.idx[k] = (std::int64_t(ix) * s.h + iy) * s.w + iz;
                t.w[k] = static_cast<float>(wx * wy * wz);
                if (grads) {
                    t.dw[0][k] = static_cast<float>(gx * wy * wz);
                    t.dw[1][k] = static_cast<float>(wx * gy * wz);
                    t.dw[2][k] = static_cast<float>(wx * wy * gz);
                }
                ++k;
            }
        }
    }
    return t;
}

} // namespace

void warp_forward(const float* src, int c, Dims s, const float* field, float* out)
{
    const std::int64_t n = s.voxels();
    const std::int64_t sx = std::int64_t(s.h) * s.w;
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const std::int64_t i = (std::int64_t(x) * s.h + y) * s.w + z;
                const auto ax = AxisStencil::make(x + double(field[i]), s.d);
                const auto ay = AxisStencil::make(y + double(field[n + i]), s.h);
                const auto az = AxisStencil::make(z + double(field[2 * n + i]), s.w);
                // same corner order and rounding as trilinear()
                const std::int64_t base[4] = {ax.i0 * sx + std::int64_t(ay.i0) * s.w, ax.i0 * sx + std::int64_t(ay.i1) * s.w,
                                              ax.i1 * sx + std::int64_t(ay.i0) * s.w, ax.i1 * sx + std::int64_t(ay.i1) * s.w};
                const double wxy[4] = {(1.0 - ax.t) * (1.0 - ay.t), (1.0 - ax.t) * ay.t, ax.t * (1.0 - ay.t),
                                       ax.t * ay.t};
                float w[8];
                for (int k = 0; k < 4; ++k) {
                    w[2 * k] = static_cast<float>(wxy[k] * (1.0 - az.t));
                    w[2 * k + 1] = static_cast<float>(wxy[k] * az.t);
                }
                for (int ch = 0; ch < c; ++ch) {
                    const float* sc = src + ch * n;
                    double v = 0.0;
                    for (int k = 0; k < 4; ++k) {
                        v += double(w[2 * k]) * sc[base[k] + az.i0];
                        v += double(w[2 * k + 1]) * sc[base[k] + az.i1];
                    }
                    out[ch * n + i] = static_cast<float>(v);
                }
            }
        }
    }
}

void warp_backward(const float* src, int c, Dims s, const float* field, const float* dout, float* dsrc,
                   float* dfield)
{
    const std::int64_t n = s.voxels();
    std::vector<Trilinear> stencils(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const std::int64_t i = (std::int64_t(x) * s.h + y) * s.w + z;
                stencils[i] = trilinear(s, x + double(field[i]), y + double(field[n + i]), z + double(field[2 * n + i]));
            }
        }
    }
    if (dfield != nullptr) {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            const auto& t = stencils[i];
            double g[3] = {0, 0, 0};
            for (int ch = 0; ch < c; ++ch) {
                const float* sc = src + ch * n;
                const double go = dout[ch * n + i];
                if (go == 0.0) {
                    continue;
                }
                for (int a = 0; a < 3; ++a) {
                    double d = 0.0;
                    for (int k = 0; k < 8; ++k) {
                        d += double(t.dw[a][k]) * sc[t.idx[k]];
                    }
                    g[a] += go * d;
                }
            }
            for (int a = 0; a < 3; ++a) {
                dfield[a * n + i] += static_cast<float>(g[a]);
            }
        }
    }
    if (dsrc != nullptr) {
#pragma omp parallel for schedule(static)
        for (int ch = 0; ch < c; ++ch) {
            float* dc = dsrc + ch * n;
            const float* gc = dout + ch * n;
            for (std::int64_t i = 0; i < n; ++i) {
                const float go = gc[i];
                if (go == 0.0f) {
                    continue;
                }
                const auto& t = stencils[i];
                for (int k = 0; k < 8; ++k) {
                    dc[t.idx[k]] += go * t.w[k];
                }
            }
        }
    }
}

void upsample_field_backward(Dims coarse, const float* dfine, float* dcoarse)
{
    const Dims fine = twice(coarse);
    const std::int64_t nf = fine.voxels();
    const std::int64_t nc = coarse.voxels();
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < 3; ++ch) {
        for (int x = 0; x < fine.d; ++x) {
            for (int y = 0; y < fine.h; ++y) {
                for (int z = 0; z < fine.w; ++z) {
                    const std::int64_t i = (std::int64_t(x) * fine.h + y) * fine.w + z;
                    const float g = 2.0f * dfine[ch * nf + i];
                    if (g == 0.0f) {
                        continue;
                    }
                    const auto t = trilinear(coarse, (x + 0.5) * 0.5 - 0.5, (y + 0.5) * 0.5 - 0.5, (z + 0.5) * 0.5 - 0.5);
                    for (int k = 0; k < 8; ++k) {
                        dcoarse[ch * nc + t.idx[k]] += g * t.w[k];
                    }
                }
            }
        }
    }
}

WindowPartition WindowPartition::make(Dims dims, int window, int shift)
{
    if (window < 1 || shift < 0 || shift >= window) {
        throw std::invalid_argument("window partition: need window >= 1 and 0 <= shift < window");
    }
    WindowPartition p;
    p.dims = dims;
    p.window = window;
    p.shift = shift;
    const auto pad = [&](int n) { return (n + window - 1) / window * window; };
    p.padded = {pad(dims.d), pad(dims.h), pad(dims.w)};
    const auto region = [&](int j, int np) -> int {
        if (shift == 0) {
            return 0;
        }
        return j < np - window ? 0 : (j < np - shift ? 1 : 2);
    };
    const int nw[3] = {p.padded.d / window, p.padded.h / window, p.padded.w / window};
    p.offsets.reserve(static_cast<std::size_t>(nw[0]) * nw[1] * nw[2] + 1);
    p.voxel.reserve(static_cast<std::size_t>(dims.voxels()));
    for (int wx = 0; wx < nw[0]; ++wx) {
        for (int wy = 0; wy < nw[1]; ++wy) {
            for (int wz = 0; wz < nw[2]; ++wz) {
                p.offsets.push_back(static_cast<std::int64_t>(p.voxel.size()));
                for (int a = 0; a < window; ++a) {
                    const int jx = wx * window + a;
                    const int ox = (jx + shift) % p.padded.d;
                    if (ox >= dims.d) {
                        continue;
                    }
                    for (int b = 0; b < window; ++b) {
                        const int jy = wy * window + b;
                        const int oy = (jy + shift) % p.padded.h;
                        if (oy >= dims.h) {
                            continue;
                        }
                        for (int c = 0; c < window; ++c) {
                            const int jz = wz * window + c;
                            const int oz = (jz + shift) % p.padded.w;
                            if (oz >= dims.w) {
                                continue;
                            }
                            p.voxel.push_back((std::int64_t(ox) * dims.h + oy) * dims.w + oz);
                            p.local.push_back((a * window + b) * window + c);
                            p.region.push_back(static_cast<std::uint8_t>(
                                region(jx, p.padded.d) * 9 + region(jy, p.padded.h) * 3 + region(jz, p.padded.w)));
                        }
                    }
                }
            }
        }
    }
    p.offsets.push_back(static_cast<std::int64_t>(p.voxel.size()));
    return p;
}

std::int64_t WindowPartition::max_window_tokens() const
{
    std::int64_t m = 0;
    for (std::int64_t w = 0; w < windows(); ++w) {
        m = std::max(m, offsets[w + 1] - offsets[w]);
    }
    return m;
}

namespace {

std::vector<std::int64_t> prob_offsets(const WindowPartition& part, int heads)
{
    std::vector<std::int64_t> off(part.windows() + 1, 0);
    for (std::int64_t w = 0; w < part.windows(); ++w) {
        const std::int64_t n = part.offsets[w + 1] - part.offsets[w];
        off[w + 1] = off[w] + heads * n * n;
    }
    return off;
}

void gather(const float* src, std::int64_t n_all, int ch0, int hd, const std::int64_t* vox, int n, float* dst)
{
    for (int t = 0; t < n; ++t) {
        for (int d = 0; d < hd; ++d) {
            dst[t * hd + d] = src[(ch0 + d) * n_all + vox[t]];
        }
    }
}

} // namespace

void window_attention_forward(const WindowPartition& part, const float* qkv, int c, int heads,
                              const float* bias_table, float* out, std::vector<float>* probs)
{
    const int hd = c / heads;
    const std::int64_t n_all = part.dims.voxels();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const auto poff = prob_offsets(part, heads);
    if (probs != nullptr) {
        probs->assign(static_cast<std::size_t>(poff.back()), 0.0f);
    }
    const int max_n = static_cast<int>(part.max_window_tokens());
    const int w = part.window;
#pragma omp parallel
    {
        std::vector<float> q(max_n * hd), k(max_n * hd), v(max_n * hd), o(max_n * hd), sc(max_n * max_n);
        std::vector<int> rel(max_n * max_n);
#pragma omp for schedule(static)
        for (std::int64_t win = 0; win < part.windows(); ++win) {
            const std::int64_t t0 = part.offsets[win];
            const int n = static_cast<int>(part.offsets[win + 1] - t0);
            if (n == 0) {
                continue;
            }
            const std::int64_t* vox = part.voxel.data() + t0;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    rel[i * n + j] = part.region[t0 + i] == part.region[t0 + j]
                                         ? relative_index(part.local[t0 + i], part.local[t0 + j], w)
                                         : -1;
                }
            }
            for (int h = 0; h < heads; ++h) {
                gather(qkv, n_all, h * hd, hd, vox, n, q.data());
                gather(qkv, n_all, c + h * hd, hd, vox, n, k.data());
                gather(qkv, n_all, 2 * c + h * hd, hd, vox, n, v.data());
                gemm(false, true, n, n, hd, scale, q.data(), hd, k.data(), hd, 0.0f, sc.data(), n);
                for (int i = 0; i < n; ++i) {
                    float* row = sc.data() + i * n;
                    float mx = -std::numeric_limits<float>::infinity();
                    for (int j = 0; j < n; ++j) {
                        const int r = rel[i * n + j];
                        if (r < 0) {
                            row[j] = -std::numeric_limits<float>::infinity();
                        } else {
                            row[j] += bias_table[r * heads + h];
                            mx = std::max(mx, row[j]);
                        }
                    }
                    float sum = 0.0f;
                    for (int j = 0; j < n; ++j) {
                        row[j] = rel[i * n + j] < 0 ? 0.0f : std::exp(row[j] - mx);
                        sum += row[j];
                    }
                    const float inv = 1.0f / sum;
                    for (int j = 0; j < n; ++j) {
                        row[j] *= inv;
                    }
                }
                gemm(false, false, n, hd, n, 1.0f, sc.data(), n, v.data(), hd, 0.0f, o.data(), hd);
                for (int t = 0; t < n; ++t) {
                    for (int d = 0; d < hd; ++d) {
                        out[(h * hd + d) * n_all + vox[t]] = o[t * hd + d];
                    }
                }
                if (probs != nullptr) {
                    std::copy(sc.begin(), sc.begin() + n * n, probs->begin() + poff[win] + std::int64_t(h) * n * n);
                }
            }
        }
    }
}

void window_attention_backward(const WindowPartition& part, const float* qkv, int c, int heads,
                               const std::vector<float>& probs, const float* dout, float* dqkv, float* dbias_table)
{
    const int hd = c / heads;
    const std::int64_t n_all = part.dims.voxels();
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    const auto poff = prob_offsets(part, heads);
    const int max_n = static_cast<int>(part.max_window_tokens());
    const int w = part.window;
    const int table = (2 * w - 1) * (2 * w - 1) * (2 * w - 1) * heads;
    const int threads = omp_get_max_threads();
    std::vector<std::vector<float>> dtables(threads, std::vector<float>(dbias_table != nullptr ? table : 0, 0.0f));
#pragma omp parallel num_threads(threads)
    {
        std::vector<float> q(max_n * hd), k(max_n * hd), v(max_n * hd), go(max_n * hd);
        std::vector<float> dq(max_n * hd), dk(max_n * hd), dv(max_n * hd), dp(max_n * max_n);
        std::vector<int> rel(max_n * max_n);
        auto& dtab = dtables[omp_get_thread_num()];
#pragma omp for schedule(static)
        for (std::int64_t win = 0; win < part.windows(); ++win) {
            const std::int64_t t0 = part.offsets[win];
            const int n = static_cast<int>(part.offsets[win + 1] - t0);
            if (n == 0) {
                continue;
            }
            const std::int64_t* vox = part.voxel.data() + t0;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) {
                    rel[i * n + j] = part.region[t0 + i] == part.region[t0 + j]
                                         ? relative_index(part.local[t0 + i], part.local[t0 + j], w)
                                         : -1;
                }
            }
            for (int h = 0; h < heads; ++h) {
                const float* p = probs.data() + poff[win] + std::int64_t(h) * n * n;
                gather(qkv, n_all, h * hd, hd, vox, n, q.data());
                gather(qkv, n_all, c + h * hd, hd, vox, n, k.data());
                gather(qkv, n_all, 2 * c + h * hd, hd, vox, n, v.data());
                gather(dout, n_all, h * hd, hd, vox, n, go.data());
                gemm(true, false, n, hd, n, 1.0f, p, n, go.data(), hd, 0.0f, dv.data(), hd);
                gemm(false, true, n, n, hd, 1.0f, go.data(), hd, v.data(), hd, 0.0f, dp.data(), n);
                for (int i = 0; i < n; ++i) {
                    float* row = dp.data() + i * n;
                    const float* prow = p + i * n;
                    float dot = 0.0f;
                    for (int j = 0; j < n; ++j) {
                        dot += row[j] * prow[j];
                    }
                    for (int j = 0; j < n; ++j) {
                        row[j] = prow[j] * (row[j] - dot);
                        if (!dtab.empty() && rel[i * n + j] >= 0) {
                            dtab[rel[i * n + j] * heads + h] += row[j];
                        }
                    }
                }
                gemm(false, false, n, hd, n, scale, dp.data(), n, k.data(), hd, 0.0f, dq.data(), hd);
                gemm(true, false, n, hd, n, scale, dp.data(), n, q.data(), hd, 0.0f, dk.data(), hd);
                for (int t = 0; t < n; ++t) {
                    for (int d = 0; d < hd; ++d) {
                        dqkv[(h * hd + d) * n_all + vox[t]] += dq[t * hd + d];
                        dqkv[(c + h * hd + d) * n_all + vox[t]] += dk[t * hd + d];
                        dqkv[(2 * c + h * hd + d) * n_all + vox[t]] += dv[t * hd + d];
                    }
                }
            }
        }
    }
    if (dbias_table != nullptr) {
        for (const auto& dt : dtables) {
            for (int i = 0; i < table; ++i) {
                dbias_table[i] += dt[i];
            }
        }
    }
}

} // namespace cfreg::kernels
