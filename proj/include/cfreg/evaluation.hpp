#pragma once

// Overlap and folding metrics, per-pair evaluation and grouped reports.

#include "cfreg/network.hpp"

#include <array>
#include <string>
#include <vector>

namespace cfreg {

/// Mean Dice over non-background labels present in either map; a label
/// missing from one map scores 0. Two all-background maps score 1.
double dsc(const LabelMap& a, const LabelMap& b);

/// Per-label centroids (label -> voxel coordinate), labels > 0 only.
std::vector<std::pair<int, std::array<double, 3>>> label_centroids(const LabelMap& labels);

/// Mean Euclidean distance between centroids of labels present in both maps.
double mean_centroid_error(const LabelMap& a, const LabelMap& b);

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& field);

/// |warped - fixed| per voxel.
Volume difference_map(const Volume& warped, const Volume& fixed);

struct EvalPair {
    std::string id;
    Volume fixed;
    Volume moving;
    LabelMap labels_fixed;
    LabelMap labels_moving;
};

struct EvalRecord {
    std::string pair_id;
    std::string group;
    double dsc_before = 0.0;
    double dsc_after = 0.0;
    double njd_percent = 0.0;
    double runtime_seconds = 0.0;
};

/// Runs the forward pass (timed, median of `repeats`), warps the moving labels
/// with nearest neighbour and scores the pair.
EvalRecord evaluate_pair(const NetworkParams& params, const EvalPair& pair, const ForwardOptions& opt = {},
                         int repeats = 3);

/// Scores a given final field (no network involved).
EvalRecord evaluate_field(const EvalPair& pair, const DisplacementField& field);

struct ReportRow {
    std::string group;
    std::size_t count = 0;
    double dsc_before = 0.0;
    double dsc_after = 0.0;
    double njd_percent = 0.0;
    double runtime_seconds = 0.0;
    bool best_dsc = false;
    bool best_njd = false;
    bool best_runtime = false;
};

struct Report {
    std::vector<ReportRow> rows;
    std::string text() const;
    std::string csv() const;
};

/// Per-group means in first-appearance order; best = highest DSC after,
/// lowest NJD, lowest runtime (ties all flagged).
Report report(const std::vector<EvalRecord>& records);

/// pair_id, dsc_before, dsc_after, njd_percent, runtime_s
std::string records_csv(const std::vector<EvalRecord>& records);

} // namespace cfreg
