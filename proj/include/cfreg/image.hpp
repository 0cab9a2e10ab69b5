#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfreg {

/// Spatial extent of a grid. Axis 0 is the slowest-varying in memory.
struct Dims {
    int d = 0;
    int h = 0;
    int w = 0;

    constexpr std::int64_t voxels() const { return std::int64_t(d) * h * w; }
    constexpr int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    constexpr bool valid() const { return d >= 1 && h >= 1 && w >= 1; }
    friend constexpr bool operator==(const Dims&, const Dims&) = default;

    std::string str() const
    {
        return "(" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

constexpr Dims half_ceil(Dims s) { return {(s.d + 1) / 2, (s.h + 1) / 2, (s.w + 1) / 2}; }
constexpr Dims twice(Dims s) { return {2 * s.d, 2 * s.h, 2 * s.w}; }

/// Dense C x D x H x W grid, channel-major.
template <class T>
class Image {
public:
    using value_type = T;

    Image() = default;
    Image(int channels, Dims dims, T fill = T{})
        : channels_(channels), dims_(dims),
          data_(static_cast<std::size_t>(channels) * static_cast<std::size_t>(dims.voxels()), fill)
    {
        if (channels < 0 || dims.d < 0 || dims.h < 0 || dims.w < 0) {
            throw std::invalid_argument("negative image extent");
        }
    }

    int channels() const { return channels_; }
    Dims dims() const { return dims_; }
    std::int64_t voxels() const { return dims_.voxels(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::span<T> channel(int c) { return {data_.data() + c * voxels(), static_cast<std::size_t>(voxels())}; }
    std::span<const T> channel(int c) const
    {
        return {data_.data() + c * voxels(), static_cast<std::size_t>(voxels())};
    }

    std::int64_t index(int x, int y, int z) const { return (std::int64_t(x) * dims_.h + y) * dims_.w + z; }

    T& at(int c, int x, int y, int z) { return data_[c * voxels() + index(x, y, z)]; }
    const T& at(int c, int x, int y, int z) const { return data_[c * voxels() + index(x, y, z)]; }
    T& operator()(int x, int y, int z) { return data_[index(x, y, z)]; }
    const T& operator()(int x, int y, int z) const { return data_[index(x, y, z)]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Image& a, const Image& b)
    {
        return a.channels_ == b.channels_ && a.dims_ == b.dims_ && a.data_ == b.data_;
    }

private:
    int channels_ = 0;
    Dims dims_{};
    std::vector<T> data_;
};

/// Single-channel grayscale intensities.
using Volume = Image<float>;
/// Single-channel integer labels, 0 = background.
using LabelMap = Image<std::int32_t>;
/// Three channels: displacement along axes 0, 1, 2 in voxels of its own grid.
using DisplacementField = Image<float>;
/// C channels of learned features.
using FeatureMap = Image<float>;

template <class U, class T>
Image<U> image_cast(const Image<T>& src)
{
    Image<U> out(src.channels(), src.dims());
    std::transform(src.data().begin(), src.data().end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
}

inline void require_same_dims(Dims a, Dims b, const char* what)
{
    if (!(a == b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

} // namespace cfreg
