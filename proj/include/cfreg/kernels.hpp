#pragma once

// OpenMP/BLAS kernels behind the network ops. Layouts are channel-major
// (C, D, H, W) float buffers; gradients are accumulated (+=) into outputs.
// Serial reference versions live in cfreg/reference.hpp.

#include "cfreg/image.hpp"

#include <cstdint>
#include <vector>

namespace cfreg::kernels {

/// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
          int ldb, float beta, float* c, int ldc);

/// Cubic convolution, stride 1, zero padding ksize / 2. Weight layout (cout, cin, k, k, k).
void conv3d_forward(const float* x, int cin, Dims s, const float* weight, const float* bias, int cout, int ksize,
                    float* y);
void conv3d_backward(const float* x, int cin, Dims s, const float* weight, int cout, int ksize, const float* dy,
                     float* dx, float* dweight, float* dbias);

/// y(cout, n) = W(cout, cin) x(cin, n) + b.
void pointwise_forward(const float* x, int cin, std::int64_t n, const float* weight, const float* bias, int cout,
                       float* y);
void pointwise_backward(const float* x, int cin, std::int64_t n, const float* weight, int cout, const float* dy,
                        float* dx, float* dweight, float* dbias);

/// Normalization across channels at every voxel.
void layer_norm_forward(const float* x, int c, std::int64_t n, const float* gamma, const float* beta, float eps,
                        float* y, float* mean, float* rstd);
void layer_norm_backward(const float* x, int c, std::int64_t n, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta);

/// 2x2x2 max pooling; partial windows at odd borders are pooled as-is.
void max_pool2_forward(const float* x, int c, Dims s, float* y, std::int32_t* argmax);
void max_pool2_backward(int c, Dims s, const std::int32_t* argmax, const float* dy, float* dx);

/// Trilinear warp of every channel by a field on the same grid (border clamp).
void warp_forward(const float* src, int c, Dims s, const float* field, float* out);
void warp_backward(const float* src, int c, Dims s, const float* field, const float* dout, float* dsrc,
                   float* dfield);

/// Adjoint of upsample_field (fine -> coarse gradient).
void upsample_field_backward(Dims coarse, const float* dfine, float* dcoarse);

/// Token groups of a (possibly shifted) window partition of a grid padded to a
/// multiple of the window. Padded positions are dropped; tokens only attend
/// within their shift region.
struct WindowPartition {
    Dims dims;
    int window = 1;
    int shift = 0;
    Dims padded;
    std::vector<std::int64_t> offsets; // window w spans tokens [offsets[w], offsets[w+1])
    std::vector<std::int64_t> voxel;   // flat voxel index per token
    std::vector<std::int32_t> local;   // position inside the window, (a * w + b) * w + c
    std::vector<std::uint8_t> region;  // shift region id

    static WindowPartition make(Dims dims, int window, int shift);
    std::int64_t windows() const { return static_cast<std::int64_t>(offsets.size()) - 1; }
    std::int64_t max_window_tokens() const;
};

/// Index into a (2w-1)^3 relative position table.
inline int relative_index(int li, int lj, int w)
{
    const int ai = li / (w * w), bi = (li / w) % w, ci = li % w;
    const int aj = lj / (w * w), bj = (lj / w) % w, cj = lj % w;
    const int m = 2 * w - 1;
    return ((ai - aj + w - 1) * m + (bi - bj + w - 1)) * m + (ci - cj + w - 1);
}

/// Multi-head self-attention inside windows. qkv holds (3C, N) projections;
/// bias_table is ((2w-1)^3, heads). When probs is non-null it receives the
/// attention weights for the backward pass (size = sum_w heads * n_w^2).
void window_attention_forward(const WindowPartition& part, const float* qkv, int c, int heads,
                              const float* bias_table, float* out, std::vector<float>* probs);
void window_attention_backward(const WindowPartition& part, const float* qkv, int c, int heads,
                               const std::vector<float>& probs, const float* dout, float* dqkv, float* dbias_table);

} // namespace cfreg::kernels
