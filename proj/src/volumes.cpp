#include "cfreg/volumes.hpp"

#include "cfreg/nifti.hpp"

#include <cmath>
#include <limits>

namespace cfreg {

namespace {

// Collapses trailing singleton axes; returns the spatial extent and channel count.
std::pair<Dims, int> layout(const nifti::RawImage& raw, bool allow_channels, const std::string& path)
{
    std::vector<int> d = raw.dims;
    while (d.size() > 3 && d.back() == 1) {
        d.pop_back();
    }
    if (d.size() == 3) {
        return {{d[0], d[1], d[2]}, 1};
    }
    if (allow_channels && d.size() == 4) {
        return {{d[0], d[1], d[2]}, d[3]};
    }
    throw std::runtime_error("non-3D input: " + path + " has " + std::to_string(d.size()) + " non-singleton axes");
}

template <class T>
Image<T> from_raw(const nifti::RawImage& raw, Dims s, int channels)
{
    Image<T> out(channels, s);
    std::size_t o = 0;
    for (int c = 0; c < channels; ++c) {
        for (int z = 0; z < s.w; ++z) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.d; ++x) {
                    out.at(c, x, y, z) = static_cast<T>(raw.values[o++]);
                }
            }
        }
    }
    return out;
}

} // namespace

Volume load_volume(const std::string& path)
{
    const auto raw = nifti::read(path);
    const auto [s, channels] = layout(raw, false, path);
    auto v = from_raw<float>(raw, s, channels);
    for (float x : v.data()) {
        if (!std::isfinite(x)) {
            throw std::runtime_error("non-finite intensity in " + path);
        }
    }
    return v;
}

LabelMap load_labels(const std::string& path)
{
    const auto raw = nifti::read(path);
    const auto [s, channels] = layout(raw, false, path);
    for (double v : raw.values) {
        if (v < 0 || v != std::floor(v)) {
            throw std::runtime_error("label map must hold non-negative integers: " + path);
        }
    }
    return from_raw<std::int32_t>(raw, s, channels);
}

DisplacementField load_field(const std::string& path)
{
    const auto raw = nifti::read(path);
    const auto [s, channels] = layout(raw, true, path);
    if (channels != 3) {
        throw std::runtime_error("displacement field must have 3 components: " + path);
    }
    return from_raw<float>(raw, s, channels);
}

void save_volume(const std::string& path, const Volume& v)
{
    if (v.channels() != 1) {
        throw std::invalid_argument("save_volume: single-channel volume expected");
    }
    nifti::write(path, v, nifti::DataType::float32);
}

void save_labels(const std::string& path, const LabelMap& labels)
{
    nifti::write(path, labels, nifti::DataType::int32);
}

void save_field(const std::string& path, const DisplacementField& field)
{
    require_field(field.channels(), "save_field");
    nifti::write(path, field, nifti::DataType::float32);
}

Volume normalize_intensity(const Volume& v)
{
    if (v.empty()) {
        return v;
    }
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (float x : v.data()) {
        if (!std::isfinite(x)) {
            throw std::invalid_argument("normalize_intensity: non-finite input value");
        }
        lo = std::min<double>(lo, x);
        hi = std::max<double>(hi, x);
    }
    Volume out(v.channels(), v.dims());
    if (hi == lo) {
        return out;
    }
    const double range = hi - lo;
    std::transform(v.data().begin(), v.data().end(), out.data().begin(),
                   [&](float x) { return static_cast<float>((x - lo) / range); });
    return out;
}

std::array<double, 3> center_of_mass(const Volume& v)
{
    const Dims s = v.dims();
    double total = 0.0;
    double m[3] = {0, 0, 0};
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const double w = v(x, y, z);
                total += w;
                m[0] += w * x;
                m[1] += w * y;
                m[2] += w * z;
            }
        }
    }
    if (!(total > 0.0)) {
        throw std::invalid_argument("center_of_mass: total intensity must be positive");
    }
    return {m[0] / total, m[1] / total, m[2] / total};
}

std::array<int, 3> com_shift(const Volume& fixed, const Volume& moving)
{
    const auto cf = center_of_mass(fixed);
    const auto cm = center_of_mass(moving);
    std::array<int, 3> shift{};
    for (int a = 0; a < 3; ++a) {
        shift[a] = static_cast<int>(std::lround(cf[a] - cm[a]));
    }
    return shift;
}

Volume com_initialize(const Volume& fixed, const Volume& moving)
{
    return shift_image(moving, com_shift(fixed, moving));
}

PreparedPair prepare_pair(const Volume& fixed, const Volume& moving, const LabelMap* labels_fixed,
                          const LabelMap* labels_moving, Dims target)
{
    require_same_dims(fixed.dims(), moving.dims(), "prepare_pair");
    if (labels_fixed != nullptr) {
        require_same_dims(fixed.dims(), labels_fixed->dims(), "prepare_pair fixed labels");
    }
    if (labels_moving != nullptr) {
        require_same_dims(moving.dims(), labels_moving->dims(), "prepare_pair moving labels");
    }
    PreparedPair p;
    p.fixed = normalize_intensity(fixed);
    const Volume m = normalize_intensity(moving);
    p.shift = com_shift(p.fixed, m);
    p.moving = shift_image(m, p.shift);
    if (labels_fixed != nullptr) {
        p.labels_fixed = *labels_fixed;
    }
    if (labels_moving != nullptr) {
        p.labels_moving = shift_image(*labels_moving, p.shift);
    }
    if (target.d > 0 && target.h > 0 && target.w > 0) {
        p.fixed = crop_or_pad(p.fixed, target);
        p.moving = crop_or_pad(p.moving, target);
        if (labels_fixed != nullptr) {
            p.labels_fixed = crop_or_pad(p.labels_fixed, target);
        }
        if (labels_moving != nullptr) {
            p.labels_moving = crop_or_pad(p.labels_moving, target);
        }
    }
    return p;
}

} // namespace cfreg
