#pragma once

// INI run configuration and the on-disk pair dataset layout.
//
//   [model]  affine_steps deform_steps encoder_dims decoder_dims attn_heads
//            encoder_attn_heads window mlp_ratio variant
//   [loss]   sigma lambda ncc_window epsilon
//   [train]  iterations learning_rate batch_size seed checkpoint_interval
//            validation_pairs grad_clip affine_only log_interval
//   [data]   dir shape preprocess
//   [output] dir
//
// Lists are comma separated ("8,16,32"); shape "0,0,0" keeps input shapes.

#include "cfreg/evaluation.hpp"
#include "cfreg/synthetic.hpp"
#include "cfreg/training.hpp"

#include <string>
#include <vector>

namespace cfreg {

struct RunConfig {
    TrainConfig train;
    std::string data_dir;
    Dims shape{0, 0, 0};
    bool preprocess = true;
    std::string out_dir = "out";
};

/// Unknown sections or keys are errors (typos should not silently fall back to defaults).
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
/// Every field, defaults included.
std::string format_run_config(const RunConfig& rc);
void save_run_config(const std::string& path, const RunConfig& rc);

Dims parse_dims(const std::string& text);
std::vector<int> parse_int_list(const std::string& text);

// --- pair datasets ------------------------------------------------------------
// <dir>/manifest.csv lists one pair per row: id,fixed,moving,labels_fixed,labels_moving
// with paths relative to <dir>.

struct PairFiles {
    std::string id;
    std::string fixed;
    std::string moving;
    std::string labels_fixed;
    std::string labels_moving;
};

std::vector<PairFiles> read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const std::vector<PairFiles>& pairs);

EvalPair load_pair(const std::string& dir, const PairFiles& files, bool preprocess, Dims target);

/// Training images are the fixed and moving volumes of the first
/// (n - validation_pairs) pairs; the rest are held out for validation.
/// With a single pair its two volumes form the training set and it is also
/// used for validation.
Dataset load_dataset(const std::string& dir, int validation_pairs, bool preprocess, Dims target);

/// Writes n synthetic pairs (pair_000, pair_001, ...) plus manifest.csv. Each
/// pair directory holds fixed/moving volumes, both label maps, the ground-truth
/// field and spec.txt. Fails before writing anything if a pair would fold.
std::vector<PairFiles> write_synthetic_dataset(const std::string& dir, int n, std::uint64_t seed,
                                               const SyntheticMagnitudes& mag);

} // namespace cfreg
