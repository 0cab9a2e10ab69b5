#pragma once

// Dense displacement fields and affine transforms on voxel grids.
//
// A field u maps voxel p to p + u(p); channel a holds the displacement along
// axis a, measured in voxels of the field's own grid.

#include "cfreg/image.hpp"

#include <array>
#include <cmath>
#include <concepts>
#include <type_traits>

namespace cfreg {

/// 3x4 matrix [A|b], row-major, acting on voxel coordinates measured from the grid center.
struct AffineTransform {
    std::array<double, 12> m{1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};

    static AffineTransform identity() { return {}; }

    double linear(int r, int c) const { return m[r * 4 + c]; }
    double translation(int r) const { return m[r * 4 + 3]; }
    double& linear(int r, int c) { return m[r * 4 + c]; }
    double& translation(int r) { return m[r * 4 + 3]; }

    double determinant() const
    {
        const auto a = [&](int r, int c) { return linear(r, c); };
        return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
               a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
               a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    }

    friend bool operator==(const AffineTransform&, const AffineTransform&) = default;
};

inline std::array<double, 3> grid_center(Dims s)
{
    return {(s.d - 1) * 0.5, (s.h - 1) * 0.5, (s.w - 1) * 0.5};
}

inline void require_field(int channels, const char* what)
{
    if (channels != 3) {
        throw std::invalid_argument(std::string(what) + ": displacement field must have 3 channels");
    }
}

template <class T = float>
Image<T> zero_field(Dims s)
{
    return Image<T>(3, s);
}

/// u(p) = A p_c + b - p_c with p_c = p - center.
template <class T = float>
Image<T> affine_to_field(const AffineTransform& t, Dims s)
{
    Image<T> out(3, s);
    const auto c = grid_center(s);
    const std::int64_t n = s.voxels();
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const double p[3] = {x - c[0], y - c[1], z - c[2]};
                const std::int64_t i = out.index(x, y, z);
                for (int r = 0; r < 3; ++r) {
                    const double v = t.linear(r, 0) * p[0] + t.linear(r, 1) * p[1] + t.linear(r, 2) * p[2] +
                                     t.translation(r) - p[r];
                    out.data()[r * n + i] = static_cast<T>(v);
                }
            }
        }
    }
    return out;
}

enum class Interp { linear, nearest };

/// Interpolation stencil along one axis with border clamping.
struct AxisStencil {
    int i0 = 0;
    int i1 = 0;
    double t = 0.0;
    bool clamped = false;

    static AxisStencil make(double x, int n)
    {
        AxisStencil s;
        if (n == 1) {
            s.clamped = true;
            return s;
        }
        double xc = x;
        if (xc <= 0.0) {
            s.clamped = xc < 0.0;
            xc = 0.0;
        } else if (xc >= n - 1) {
            s.clamped = xc > n - 1;
            xc = n - 1;
        }
        s.i0 = std::min(static_cast<int>(std::floor(xc)), n - 2);
        s.i1 = s.i0 + 1;
        s.t = xc - s.i0;
        return s;
    }
};

inline int nearest_index(double x, int n)
{
    const int i = static_cast<int>(std::floor(x + 0.5));
    return std::clamp(i, 0, n - 1);
}

/// Trilinear sample of one channel at a continuous voxel position.
template <class T>
double sample_linear(std::span<const T> ch, Dims s, double x, double y, double z)
{
    const auto ax = AxisStencil::make(x, s.d);
    const auto ay = AxisStencil::make(y, s.h);
    const auto az = AxisStencil::make(z, s.w);
    const auto at = [&](int i, int j, int k) { return static_cast<double>(ch[(std::int64_t(i) * s.h + j) * s.w + k]); };
    const double c00 = at(ax.i0, ay.i0, az.i0) * (1 - az.t) + at(ax.i0, ay.i0, az.i1) * az.t;
    const double c01 = at(ax.i0, ay.i1, az.i0) * (1 - az.t) + at(ax.i0, ay.i1, az.i1) * az.t;
    const double c10 = at(ax.i1, ay.i0, az.i0) * (1 - az.t) + at(ax.i1, ay.i0, az.i1) * az.t;
    const double c11 = at(ax.i1, ay.i1, az.i0) * (1 - az.t) + at(ax.i1, ay.i1, az.i1) * az.t;
    const double c0 = c00 * (1 - ay.t) + c01 * ay.t;
    const double c1 = c10 * (1 - ay.t) + c11 * ay.t;
    return c0 * (1 - ax.t) + c1 * ax.t;
}

/// output(p) = source sampled at p + u(p); coordinates outside the grid clamp to the border.
template <class T, class F>
Image<T> warp(const Image<T>& source, const Image<F>& field, Interp mode = Interp::linear)
{
    require_field(field.channels(), "warp");
    require_same_dims(source.dims(), field.dims(), "warp");
    if constexpr (std::is_integral_v<T>) {
        if (mode != Interp::nearest) {
            throw std::invalid_argument("warp: integer images require nearest-neighbor interpolation");
        }
    }
    const Dims s = source.dims();
    const std::int64_t n = s.voxels();
    Image<T> out(source.channels(), s);
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const std::int64_t i = source.index(x, y, z);
                const double px = x + static_cast<double>(field.data()[i]);
                const double py = y + static_cast<double>(field.data()[n + i]);
                const double pz = z + static_cast<double>(field.data()[2 * n + i]);
                if (mode == Interp::nearest) {
                    const std::int64_t j = source.index(nearest_index(px, s.d), nearest_index(py, s.h),
                                                        nearest_index(pz, s.w));
                    for (int c = 0; c < source.channels(); ++c) {
                        out.data()[c * n + i] = source.data()[c * n + j];
                    }
                } else {
                    for (int c = 0; c < source.channels(); ++c) {
                        out.data()[c * n + i] = static_cast<T>(sample_linear(source.channel(c), s, px, py, pz));
                    }
                }
            }
        }
    }
    return out;
}

/// Doubles the grid per axis (half-voxel aligned trilinear) and doubles the vectors.
template <class T>
Image<T> upsample_field(const Image<T>& field)
{
    require_field(field.channels(), "upsample_field");
    const Dims s = field.dims();
    const Dims o = twice(s);
    Image<T> out(3, o);
    const std::int64_t n = o.voxels();
#pragma omp parallel for schedule(static)
    for (int x = 0; x < o.d; ++x) {
        for (int y = 0; y < o.h; ++y) {
            for (int z = 0; z < o.w; ++z) {
                const double cx = (x + 0.5) * 0.5 - 0.5;
                const double cy = (y + 0.5) * 0.5 - 0.5;
                const double cz = (z + 0.5) * 0.5 - 0.5;
                const std::int64_t i = out.index(x, y, z);
                for (int c = 0; c < 3; ++c) {
                    out.data()[c * n + i] = static_cast<T>(2.0 * sample_linear(field.channel(c), s, cx, cy, cz));
                }
            }
        }
    }
    return out;
}

/// Strided subsampling by 2 with halved vectors; inverse of upsample_field on constant fields.
template <class T>
Image<T> downsample_field(const Image<T>& field)
{
    require_field(field.channels(), "downsample_field");
    const Dims s = field.dims();
    const Dims o = half_ceil(s);
    Image<T> out(3, o);
    for (int c = 0; c < 3; ++c) {
        for (int x = 0; x < o.d; ++x) {
            for (int y = 0; y < o.h; ++y) {
                for (int z = 0; z < o.w; ++z) {
                    out.at(c, x, y, z) = static_cast<T>(field.at(c, 2 * x, 2 * y, 2 * z) / T(2));
                }
            }
        }
    }
    return out;
}

/// Elementwise sum of two fields on the same grid.
template <class T>
Image<T> compose_add(const Image<T>& coarse, const Image<T>& fine)
{
    require_field(coarse.channels(), "compose_add");
    require_field(fine.channels(), "compose_add");
    require_same_dims(coarse.dims(), fine.dims(), "compose_add");
    Image<T> out(3, fine.dims());
    const auto a = coarse.data();
    const auto b = fine.data();
    auto o = out.data();
    const std::int64_t total = static_cast<std::int64_t>(o.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < total; ++i) {
        o[i] = a[i] + b[i];
    }
    return out;
}

/// Forward difference along an axis, backward at the far border.
struct DiffStencil {
    std::int64_t plus = 0;
    std::int64_t minus = 0;
};

inline DiffStencil diff_stencil(Dims s, int x, int y, int z, int axis)
{
    const int coord = axis == 0 ? x : (axis == 1 ? y : z);
    const int n = s[axis];
    const std::int64_t stride = axis == 0 ? std::int64_t(s.h) * s.w : (axis == 1 ? s.w : 1);
    const std::int64_t i = (std::int64_t(x) * s.h + y) * s.w + z;
    if (coord < n - 1) {
        return {i + stride, i};
    }
    return {i, i - stride};
}

/// J = I + grad u at voxel (x, y, z); J[i][a] = d(p_i + u_i)/d p_a.
template <class T>
void jacobian_matrix(const Image<T>& field, int x, int y, int z, double J[3][3])
{
    const Dims s = field.dims();
    const std::int64_t n = s.voxels();
    const auto f = field.data();
    for (int a = 0; a < 3; ++a) {
        const auto st = diff_stencil(s, x, y, z, a);
        for (int i = 0; i < 3; ++i) {
            J[i][a] = static_cast<double>(f[i * n + st.plus]) - static_cast<double>(f[i * n + st.minus]) +
                      (i == a ? 1.0 : 0.0);
        }
    }
}

inline double det3(const double J[3][3])
{
    return J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
           J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
}

inline void require_jacobian_dims(Dims s, const char* what)
{
    if (s.d < 2 || s.h < 2 || s.w < 2) {
        throw std::invalid_argument(std::string(what) + ": every spatial dimension must be >= 2, got " + s.str());
    }
}

/// det(I + grad u) per voxel.
template <class T>
Image<T> jacobian_det(const Image<T>& field)
{
    require_field(field.channels(), "jacobian_det");
    const Dims s = field.dims();
    require_jacobian_dims(s, "jacobian_det");
    Image<T> out(1, s);
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                double J[3][3];
                jacobian_matrix(field, x, y, z, J);
                out(x, y, z) = static_cast<T>(det3(J));
            }
        }
    }
    return out;
}

/// Percentage of voxels whose Jacobian determinant is <= 0.
template <class T>
double njd_percent(const Image<T>& field)
{
    const auto det = jacobian_det(field);
    std::int64_t bad = 0;
    for (T v : det.data()) {
        bad += v <= T(0) ? 1 : 0;
    }
    return 100.0 * static_cast<double>(bad) / static_cast<double>(det.voxels());
}

} // namespace cfreg
