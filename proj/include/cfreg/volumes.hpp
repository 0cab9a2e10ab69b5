#pragma once

#include "cfreg/field_algebra.hpp"
#include "cfreg/image.hpp"

#include <array>
#include <cstdint>
#include <string>

namespace cfreg {

// --- file I/O -------------------------------------------------------------

/// Loads a single-channel 3D NIfTI file. Trailing singleton axes are accepted.
Volume load_volume(const std::string& path);
LabelMap load_labels(const std::string& path);
/// 4D file whose last axis holds the three displacement components.
DisplacementField load_field(const std::string& path);

void save_volume(const std::string& path, const Volume& v);
void save_labels(const std::string& path, const LabelMap& labels);
void save_field(const std::string& path, const DisplacementField& field);

// --- preprocessing --------------------------------------------------------

/// (x - min) / (max - min); a constant volume maps to zeros.
Volume normalize_intensity(const Volume& v);

/// Intensity-weighted centroid in voxel coordinates.
std::array<double, 3> center_of_mass(const Volume& v);

/// Integer shift that moves the moving volume's centroid onto the fixed one.
std::array<int, 3> com_shift(const Volume& fixed, const Volume& moving);

/// Translate by an integer voxel offset with zero fill: out(p) = in(p - shift).
template <class T>
Image<T> shift_image(const Image<T>& in, const std::array<int, 3>& shift)
{
    const Dims s = in.dims();
    Image<T> out(in.channels(), s);
    for (int c = 0; c < in.channels(); ++c) {
        for (int x = 0; x < s.d; ++x) {
            const int sx = x - shift[0];
            if (sx < 0 || sx >= s.d) {
                continue;
            }
            for (int y = 0; y < s.h; ++y) {
                const int sy = y - shift[1];
                if (sy < 0 || sy >= s.h) {
                    continue;
                }
                for (int z = 0; z < s.w; ++z) {
                    const int sz = z - shift[2];
                    if (sz >= 0 && sz < s.w) {
                        out.at(c, x, y, z) = in.at(c, sx, sy, sz);
                    }
                }
            }
        }
    }
    return out;
}

/// Moving translated (rounded integer shift, zero fill) so its centroid matches fixed's.
Volume com_initialize(const Volume& fixed, const Volume& moving);

/// Center-aligned crop and/or symmetric zero pad to the target extent.
/// Along each axis the leading offset is floor((source - target) / 2).
template <class T>
Image<T> crop_or_pad(const Image<T>& v, Dims target)
{
    if (!target.valid()) {
        throw std::invalid_argument("crop_or_pad: target extent must be >= 1, got " + target.str());
    }
    const Dims s = v.dims();
    // Offset of the output origin in source coordinates (negative when padding).
    const auto origin = [](int src, int dst) {
        const int diff = src - dst;
        return diff >= 0 ? diff / 2 : -((-diff) / 2);
    };
    const int ox = origin(s.d, target.d);
    const int oy = origin(s.h, target.h);
    const int oz = origin(s.w, target.w);
    Image<T> out(v.channels(), target);
    for (int c = 0; c < v.channels(); ++c) {
        for (int x = 0; x < target.d; ++x) {
            const int sx = x + ox;
            if (sx < 0 || sx >= s.d) {
                continue;
            }
            for (int y = 0; y < target.h; ++y) {
                const int sy = y + oy;
                if (sy < 0 || sy >= s.h) {
                    continue;
                }
                for (int z = 0; z < target.w; ++z) {
                    const int sz = z + oz;
                    if (sz >= 0 && sz < s.w) {
                        out.at(c, x, y, z) = v.at(c, sx, sy, sz);
                    }
                }
            }
        }
    }
    return out;
}

struct PreparedPair {
    Volume fixed;
    Volume moving;
    LabelMap labels_fixed;  // empty when not supplied
    LabelMap labels_moving;
    std::array<int, 3> shift{0, 0, 0}; // CoM shift applied to moving
};

/// Fixed pipeline: min-max normalization, CoM initialization of moving (labels
/// follow the same integer shift), then crop/pad to target. A target with a
/// zero extent keeps the input shape.
PreparedPair prepare_pair(const Volume& fixed, const Volume& moving, const LabelMap* labels_fixed = nullptr,
                          const LabelMap* labels_moving = nullptr, Dims target = {0, 0, 0});

} // namespace cfreg
