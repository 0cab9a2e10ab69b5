#pragma once

// Differentiable building blocks for the registration network.

#include "cfreg/autograd.hpp"
#include "cfreg/losses.hpp"

#include <vector>

namespace cfreg::nn {

using ag::Context;
using ag::Var;

/// Cubic kernel, stride 1, zero padding ksize / 2.
struct Conv3d {
    Var weight; // cout x cin x k^3
    Var bias;   // cout
    int cin = 0;
    int cout = 0;
    int ksize = 3;
};

/// Per-voxel channel mixing; on a 1x1x1 grid this is a fully-connected layer.
struct Linear {
    Var weight; // cout x cin
    Var bias;   // cout
    int cin = 0;
    int cout = 0;
};

struct LayerNorm {
    Var gamma;
    Var beta;
    int dim = 0;
};

Var conv3d(Context& ctx, const Var& x, const Conv3d& layer);
Var linear(Context& ctx, const Var& x, const Linear& layer);
Var layer_norm(Context& ctx, const Var& x, const LayerNorm& layer);
Var leaky_relu(Context& ctx, const Var& x, float slope);
Var gelu(Context& ctx, const Var& x);
Var add(Context& ctx, const Var& a, const Var& b);
Var max_pool2(Context& ctx, const Var& x);
Var concat(Context& ctx, const std::vector<Var>& xs);
/// Keeps the leading region of every axis.
Var crop(Context& ctx, const Var& x, Dims target);
/// (8C, D, H, W) -> (C, 2D, 2H, 2W); channel c*8 + (a*4 + b*2 + d) fills offset (a, b, d).
Var pixel_shuffle_up(Context& ctx, const Var& x);
/// Channel means as a (C, 1, 1, 1) image.
Var global_avg_pool(Context& ctx, const Var& x);
/// Window self-attention on projected (3C, ...) inputs; bias_table is ((2w-1)^3, heads).
Var window_attention(Context& ctx, const Var& qkv, const Var& bias_table, int heads, int window, int shift);
/// Dense field of the transform [I + dA | scale * b] from 12 residuals (row-major 3x4, as channels).
/// scale converts translations predicted on a coarser grid into voxels of this one.
Var affine_field(Context& ctx, const Var& residual, Dims dims, double translation_scale = 1.0);
Var upsample_field(Context& ctx, const Var& field);
/// Trilinear warp of every channel of src by field.
Var warp(Context& ctx, const Var& src, const Var& field);

Var ncc_loss(Context& ctx, const Var& warped, const Volume& fixed, const LossConfig& cfg);
Var diffusion_loss(Context& ctx, const Var& field);
Var jd_loss(Context& ctx, const Var& field);
Var weighted_sum(Context& ctx, const std::vector<Var>& terms, const std::vector<double>& weights);

inline double scalar(const Var& v) { return static_cast<double>(v->value.data()[0]); }

} // namespace cfreg::nn
