#pragma once

// Dual-path encoder, attention decoder and the single-pass coarse-to-fine driver.

#include "cfreg/field_algebra.hpp"
#include "cfreg/ops.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace cfreg {

enum class Variant { baseline, trans_encoder, trans_decoder, trans_all };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
    int affine_steps = 1; // L_a
    int deform_steps = 4; // L_d
    // Level 1 (full resolution) first.
    std::vector<int> encoder_dims{8, 16, 32, 64, 128};
    // Decoder stage 1 (coarsest) first.
    std::vector<int> decoder_dims{256, 128, 64, 32, 16};
    std::vector<int> attn_heads{16, 8, 4, 2, 0};
    // Used by the trans_encoder / trans_all variants; 0 keeps a Conv module.
    std::vector<int> encoder_attn_heads{0, 2, 4, 8, 16};
    int window = 5;
    int mlp_ratio = 4;
    Variant variant = Variant::trans_decoder;

    int levels() const { return affine_steps + deform_steps; }
    /// Head counts actually used after applying the variant.
    std::vector<int> decoder_heads() const;
    std::vector<int> encoder_heads() const;
    /// Throws std::invalid_argument describing the first violated invariant.
    void validate() const;
    /// Smallest input extent per axis that supports every level.
    int min_extent() const { return 1 << (levels() - 1); }
};

/// Default per-level lists resized to L = la + ld levels: the encoder keeps
/// its finest entries, the decoder and heads keep their finest (last) entries;
/// missing coarse levels are extrapolated by doubling.
ModelConfig config_for_steps(const ModelConfig& base, int la, int ld);

namespace nn {

struct ConvModule {
    Conv3d first;
    Conv3d second;
};

struct SwinBlock {
    LayerNorm norm1;
    Linear qkv;
    Var relative_bias;
    Linear proj;
    LayerNorm norm2;
    Linear fc1;
    Linear fc2;
    int shift = 0;
};

struct SwinModule {
    Linear reduce;
    std::vector<SwinBlock> blocks;
    int heads = 1;
    int window = 5;
};

/// Either a Conv module or a SwinTrans module.
struct LevelModule {
    bool attention = false;
    ConvModule conv;
    SwinModule swin;
    int out_channels = 0;
};

struct AffineHead {
    Linear hidden;
    Linear out; // 12 residuals, zero-initialized
};

struct DeformHead {
    Conv3d conv; // 3 channels, zero-initialized
};

} // namespace nn

struct NamedParam {
    std::string name;
    std::string group;
    ag::Var var;
};

struct NetworkParams {
    ModelConfig config;
    std::vector<nn::LevelModule> encoder; // shared by both inputs
    std::vector<nn::LevelModule> decoder; // stage order, coarse to fine
    std::vector<nn::Linear> expand;       // expand[k] feeds stage k + 1
    std::vector<nn::AffineHead> affine_heads;
    std::vector<nn::DeformHead> deform_heads;
    std::vector<NamedParam> named;

    std::int64_t count() const;
    /// Scalar count per module group, in registration order.
    std::vector<std::pair<std::string, std::int64_t>> count_by_group() const;
    void zero_grad();
};

/// Seeded initialization: uniform(+-1/sqrt(fan_in)) for convolutions and the
/// affine hidden layer, truncated normal (std 0.02) for attention linears and
/// relative position tables, zeros for head output layers.
NetworkParams init_params(const ModelConfig& config, std::uint64_t seed);

std::int64_t count_params(const NetworkParams& params);

struct ForwardOptions {
    bool affine_only = false; // stop after the affine steps and report their composed transform
    bool skip_affine = false; // replace the affine steps by identity
};

struct GraphOutput {
    std::vector<ag::Var> fields; // phi_1 .. phi_L (or phi_1 .. phi_La when affine_only)
    ag::Var final_field;         // full resolution
    ag::Var warped;
    AffineTransform affine;      // composed, in full-resolution voxel units
    std::vector<ag::Var> pyramid_fixed;
    std::vector<ag::Var> pyramid_moving;
    std::vector<ag::Var> stages;
};

/// Differentiable forward pass; with ctx.tape == nullptr nothing is retained
/// beyond what the caller keeps.
GraphOutput forward_graph(ag::Context& ctx, const NetworkParams& params, const ag::Var& fixed,
                          const ag::Var& moving, const ForwardOptions& opt = {});

struct RegistrationResult {
    std::vector<DisplacementField> fields;
    DisplacementField final_field;
    Volume warped;
    AffineTransform affine;
};

RegistrationResult forward(const Volume& fixed, const Volume& moving, const NetworkParams& params,
                           const ForwardOptions& opt = {});

/// Encoder pyramid of one volume (level 1 first).
std::vector<FeatureMap> encode(const Volume& v, const NetworkParams& params);

/// Level-module application, exposed for tests.
ag::Var apply_module(ag::Context& ctx, const nn::LevelModule& m, const ag::Var& x);
ag::Var apply_swin(ag::Context& ctx, const nn::SwinModule& m, const ag::Var& x);
ag::Var patch_expand(ag::Context& ctx, const nn::Linear& expand, const ag::Var& x);
ag::Var affine_head(ag::Context& ctx, const nn::AffineHead& head, const ag::Var& x);
ag::Var deform_head(ag::Context& ctx, const nn::DeformHead& head, const ag::Var& x);

} // namespace cfreg
