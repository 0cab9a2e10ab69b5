#pragma once

// Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.
//
// Voxel (x, y, z) of an Image maps to NIfTI index (i, j, k) = (x, y, z); the
// on-disk order has i fastest. Orientation metadata is written as identity and
// ignored on read.

#include "cfreg/image.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cfreg::nifti {

enum class DataType : std::int16_t {
    uint8 = 2,
    int16 = 4,
    int32 = 8,
    float32 = 16,
    float64 = 64,
    int8 = 256,
    uint16 = 512,
    uint32 = 768,
    int64 = 1024,
    uint64 = 1280,
};

struct RawImage {
    std::vector<int> dims;       // dim[1..dim[0]]
    std::vector<double> values;  // on-disk order, scaling applied
    DataType datatype = DataType::float32;
};

RawImage read(const std::string& path);

/// Writes a 3D (channels == 1) or 4D (channels > 1, channel = 4th axis) file.
template <class T>
void write(const std::string& path, const Image<T>& image, DataType type);

} // namespace cfreg::nifti
