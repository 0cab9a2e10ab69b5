#pragma once

// Analytic multi-blob phantoms and known-transform pairs for desk-scale testing.

#include "cfreg/field_algebra.hpp"
#include "cfreg/image.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>

namespace cfreg {

struct SyntheticPairSpec {
    std::uint64_t seed = 0;
    Dims shape{32, 32, 32};
    std::array<double, 3> rotation{0, 0, 0};    // radians about axes 0, 1, 2
    std::array<double, 3> translation{0, 0, 0}; // voxels
    std::array<double, 3> scale{1, 1, 1};
    double deform_amplitude = 0.0;  // peak displacement component, voxels
    double deform_smoothness = 4.0; // Gaussian sigma of the random field, voxels
    int blobs = 4;                  // labelled structures inside the head region
};

/// truth_field maps fixed to moving coordinates: fixed(p) ~ moving(p + truth(p)).
/// It is the affine field of truth_affine plus the smooth deformation.
struct SyntheticPair {
    Volume fixed;
    Volume moving;
    LabelMap labels_fixed;
    LabelMap labels_moving;
    AffineTransform truth_affine;
    DisplacementField truth_field;
};

/// Throws std::invalid_argument if the requested transform folds (truth NJD > 0).
SyntheticPair synth_pair(const SyntheticPairSpec& spec);

/// Rotation * scale as the linear part, translation as b.
AffineTransform spec_affine(const SyntheticPairSpec& spec);

/// Draws per-pair affine parameters uniformly within the given magnitudes.
struct SyntheticMagnitudes {
    Dims shape{32, 32, 32};
    double rotation = 0.0;    // max |angle| per axis, radians
    double translation = 0.0; // max |shift| per axis, voxels
    double scale = 0.0;       // max |scale - 1| per axis
    double deform_amplitude = 0.0;
    double deform_smoothness = 4.0;
    int blobs = 4;
};
SyntheticPairSpec random_spec(const SyntheticMagnitudes& mag, std::mt19937_64& rng);

std::string spec_to_text(const SyntheticPairSpec& spec);
SyntheticPairSpec spec_from_text(const std::string& text);

} // namespace cfreg
