#pragma once

// Unsupervised optimization loop, optimizer and parameter sweeps.

#include "cfreg/checkpoint.hpp"
#include "cfreg/evaluation.hpp"
#include "cfreg/losses.hpp"

#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace cfreg {

struct TrainConfig {
    int iterations = 1000;
    double learning_rate = 1e-4;
    int batch_size = 1;            // pairs whose gradients are averaged per step
    std::uint64_t seed = 0;
    int checkpoint_interval = 0;   // 0: final checkpoint only
    int validation_pairs = 0;      // held-out pairs scored at every checkpoint
    double grad_clip = 0.0;        // global L2 norm limit, 0 disables
    bool affine_only = false;      // optimize the composed affine output of the affine steps only
    int log_interval = 1;
    LossConfig loss;
    ModelConfig model;
};

struct Dataset {
    std::vector<Volume> images;
    std::vector<EvalPair> validation;
};

/// Two distinct indices, uniform over ordered pairs: (fixed, moving).
std::pair<std::size_t, std::size_t> sample_pair(std::size_t dataset_size, std::mt19937_64& rng);

class Adam {
public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    /// Applies one update using the accumulated gradients (missing grads count as zero).
    void step(NetworkParams& params);
    AdamState state() const { return state_; }
    void set_state(AdamState s) { state_ = std::move(s); }

private:
    double lr_, beta1_, beta2_, eps_;
    AdamState state_;
};

struct LossRecord {
    std::int64_t iteration = 0;
    LossBreakdown loss;
};

struct ValidationRecord {
    std::int64_t iteration = 0;
    double dsc_before = 0.0;
    double dsc_after = 0.0;
    double njd_percent = 0.0;
};

struct TrainHooks {
    std::ostream* log = nullptr;        // structured key=value lines
    std::string checkpoint_dir;         // empty: no files written
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossRecord> history;
    std::vector<ValidationRecord> validation;
    double seconds = 0.0;
};

/// Loss of one pair with gradients accumulated into params (scaled by weight).
LossBreakdown accumulate_gradients(const NetworkParams& params, const Volume& fixed, const Volume& moving,
                                   const LossConfig& loss, bool affine_only, double weight = 1.0);

/// Runs config.iterations steps. With `resume`, continues from its parameters,
/// optimizer state, RNG state and iteration counter; the resumed run then
/// matches an uninterrupted one bit for bit.
TrainResult train(const TrainConfig& config, const Dataset& data, const Checkpoint* resume = nullptr,
                  const TrainHooks& hooks = {});

/// Centered moving average with the given window (shrinks at the ends).
std::vector<double> smooth(const std::vector<double>& values, int window);

std::string format_loss_line(const LossRecord& r);

enum class SweepAxis { steps, lambda, variant };
SweepAxis parse_sweep_axis(const std::string& s);
std::string to_string(SweepAxis a);

struct SweepRow {
    std::string value;
    bool is_default = false;
    std::int64_t params = 0;
    double dsc_before = 0.0;
    double dsc_after = 0.0;
    double njd_percent = 0.0;
    double runtime_seconds = 0.0; // registration forward pass
    double train_seconds = 0.0;
    double final_loss = 0.0;
};

struct SweepReport {
    SweepAxis axis = SweepAxis::variant;
    std::vector<SweepRow> rows;
    std::string text() const;
    std::string csv() const;
};

/// Applies one sweep value to a config. steps values look like "1:4".
TrainConfig apply_sweep_value(const TrainConfig& base, SweepAxis axis, const std::string& value);

/// One training run per value with shared seed and data, scored on eval_pairs.
SweepReport sweep(const TrainConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                  const Dataset& data, const std::vector<EvalPair>& eval_pairs, std::ostream* log = nullptr);

} // namespace cfreg
