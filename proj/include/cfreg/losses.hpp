#pragma once

// Unsupervised registration objective: local NCC similarity plus diffusion and
// negative-Jacobian penalties on the displacement field.
//
// Every loss optionally writes its analytic gradient. Arithmetic is carried out
// in double regardless of T.

#include "cfreg/field_algebra.hpp"
#include "cfreg/image.hpp"

#include <vector>

namespace cfreg {

struct LossConfig {
    double sigma = 1.0;      // weight of the regularization term
    double lambda = 1e-4;    // weight of the Jacobian penalty inside the regularizer
    int ncc_window = 9;      // odd window edge, voxels
    double epsilon = 1e-5;   // variance floor
};

struct LossBreakdown {
    double total = 0.0;
    double ncc = 0.0;
    double diffusion = 0.0;
    double jd = 0.0;
};

namespace detail {

/// In-place truncated box sum of radius r along every axis.
inline void box_sum(std::vector<double>& buf, Dims s, int r)
{
    const int ext[3] = {s.d, s.h, s.w};
    const std::int64_t strides[3] = {std::int64_t(s.h) * s.w, s.w, 1};
    for (int axis = 0; axis < 3; ++axis) {
        const int n = ext[axis];
        const std::int64_t stride = strides[axis];
        const int o1 = axis == 0 ? 1 : 0;
        const int o2 = axis == 2 ? 1 : 2;
        const int n1 = ext[o1];
        const int n2 = ext[o2];
#pragma omp parallel
        {
            std::vector<double> prefix(n + 1);
#pragma omp for schedule(static)
            for (int a = 0; a < n1; ++a) {
                for (int b = 0; b < n2; ++b) {
                    const std::int64_t base = a * strides[o1] + b * strides[o2];
                    prefix[0] = 0.0;
                    for (int k = 0; k < n; ++k) {
                        prefix[k + 1] = prefix[k] + buf[base + k * stride];
                    }
                    for (int k = 0; k < n; ++k) {
                        const int lo = std::max(0, k - r);
                        const int hi = std::min(n - 1, k + r);
                        buf[base + k * stride] = prefix[hi + 1] - prefix[lo];
                    }
                }
            }
        }
    }
}

inline int window_count(int k, int n, int r) { return std::min(n - 1, k + r) - std::max(0, k - r) + 1; }

} // namespace detail

/// Negative mean of squared local correlation over voxel-centered windows
/// (truncated at the border). Range [-1, 0].
template <class T>
double ncc_loss(const Image<T>& warped, const Image<T>& fixed, const LossConfig& cfg,
                Image<T>* grad_warped = nullptr, Image<T>* grad_fixed = nullptr)
{
    require_same_dims(warped.dims(), fixed.dims(), "ncc_loss");
    if (warped.channels() != 1 || fixed.channels() != 1) {
        throw std::invalid_argument("ncc_loss: single-channel volumes expected");
    }
    const Dims s = fixed.dims();
    if (cfg.ncc_window < 1 || cfg.ncc_window % 2 == 0) {
        throw std::invalid_argument("ncc_loss: window must be a positive odd integer");
    }
    const int r = cfg.ncc_window / 2;
    const std::int64_t n = s.voxels();
    const double eps = cfg.epsilon;

    std::vector<double> sf(n), sm(n), sff(n), smm(n), sfm(n);
    for (std::int64_t i = 0; i < n; ++i) {
        const double f = fixed.data()[i];
        const double m = warped.data()[i];
        sf[i] = f;
        sm[i] = m;
        sff[i] = f * f;
        smm[i] = m * m;
        sfm[i] = f * m;
    }
    for (auto* b : {&sf, &sm, &sff, &smm, &sfm}) {
        detail::box_sum(*b, s, r);
    }

    const bool want_grad = grad_warped != nullptr || grad_fixed != nullptr;
    // Per-center coefficients for the gradient.
    std::vector<double> a, bm, bf, a_fbar, a_mbar, bm_mbar, bf_fbar;
    if (want_grad) {
        for (auto* v : {&a, &bm, &bf, &a_fbar, &a_mbar, &bm_mbar, &bf_fbar}) {
            v->assign(n, 0.0);
        }
    }

    std::vector<double> cc(n);
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        const int cx = detail::window_count(x, s.d, r);
        for (int y = 0; y < s.h; ++y) {
            const int cy = detail::window_count(y, s.h, r);
            for (int z = 0; z < s.w; ++z) {
                const std::int64_t i = (std::int64_t(x) * s.h + y) * s.w + z;
                const double cnt = double(cx) * cy * detail::window_count(z, s.w, r);
                const double fbar = sf[i] / cnt;
                const double mbar = sm[i] / cnt;
                const double cross = sfm[i] - sf[i] * mbar;
                const double vf = sff[i] - sf[i] * fbar + eps;
                const double vm = smm[i] - sm[i] * mbar + eps;
                cc[i] = cross * cross / (vf * vm);
                if (want_grad) {
                    a[i] = 2.0 * cross / (vf * vm);
                    bm[i] = -cross * cross / (vf * vm * vm);
                    bf[i] = -cross * cross / (vf * vf * vm);
                    a_fbar[i] = a[i] * fbar;
                    a_mbar[i] = a[i] * mbar;
                    bm_mbar[i] = bm[i] * mbar;
                    bf_fbar[i] = bf[i] * fbar;
                }
            }
        }
    }
    double sum = 0.0;
    for (double v : cc) {
        sum += v;
    }
    const double loss = -sum / static_cast<double>(n);

    if (want_grad) {
        for (auto* v : {&a, &bm, &bf, &a_fbar, &a_mbar, &bm_mbar, &bf_fbar}) {
            detail::box_sum(*v, s, r);
        }
        const double scale = -1.0 / static_cast<double>(n);
        if (grad_warped != nullptr) {
            *grad_warped = Image<T>(1, s);
            for (std::int64_t i = 0; i < n; ++i) {
                const double f = fixed.data()[i];
                const double m = warped.data()[i];
                grad_warped->data()[i] =
                    static_cast<T>(scale * (f * a[i] - a_fbar[i] + 2.0 * (m * bm[i] - bm_mbar[i])));
            }
        }
        if (grad_fixed != nullptr) {
            *grad_fixed = Image<T>(1, s);
            for (std::int64_t i = 0; i < n; ++i) {
                const double f = fixed.data()[i];
                const double m = warped.data()[i];
                grad_fixed->data()[i] =
                    static_cast<T>(scale * (m * a[i] - a_mbar[i] + 2.0 * (f * bf[i] - bf_fbar[i])));
            }
        }
    }
    return loss;
}

/// Sum over axes of the mean squared forward difference of the displacement.
template <class T>
double diffusion_loss(const Image<T>& field, Image<T>* grad = nullptr)
{
    require_field(field.channels(), "diffusion_loss");
    const Dims s = field.dims();
    require_jacobian_dims(s, "diffusion_loss");
    const std::int64_t n = s.voxels();
    const auto f = field.data();
    if (grad != nullptr) {
        *grad = Image<T>(3, s);
    }
    double total = 0.0;
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t stride = axis == 0 ? std::int64_t(s.h) * s.w : (axis == 1 ? s.w : 1);
        const std::int64_t count = n / s[axis] * (s[axis] - 1);
        const double inv = 1.0 / static_cast<double>(count);
        double acc = 0.0;
        for (int x = 0; x < s.d - (axis == 0); ++x) {
            for (int y = 0; y < s.h - (axis == 1); ++y) {
                for (int z = 0; z < s.w - (axis == 2); ++z) {
                    const std::int64_t i = (std::int64_t(x) * s.h + y) * s.w + z;
                    for (int c = 0; c < 3; ++c) {
                        const double d = static_cast<double>(f[c * n + i + stride]) - static_cast<double>(f[c * n + i]);
                        acc += d * d;
                        if (grad != nullptr) {
                            grad->data()[c * n + i + stride] += static_cast<T>(2.0 * d * inv);
                            grad->data()[c * n + i] -= static_cast<T>(2.0 * d * inv);
                        }
                    }
                }
            }
        }
        total += acc * inv;
    }
    return total;
}

/// Mean over voxels of max(0, -det(I + grad u)).
template <class T>
double jd_loss(const Image<T>& field, Image<T>* grad = nullptr)
{
    require_field(field.channels(), "jd_loss");
    const Dims s = field.dims();
    require_jacobian_dims(s, "jd_loss");
    const std::int64_t n = s.voxels();
    const double inv = 1.0 / static_cast<double>(n);
    if (grad != nullptr) {
        *grad = Image<T>(3, s);
    }
    double acc = 0.0;
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                double J[3][3];
                jacobian_matrix(field, x, y, z, J);
                const double det = det3(J);
                if (det >= 0.0) {
                    continue;
                }
                acc -= det;
                if (grad == nullptr) {
                    continue;
                }
                // d(-det)/dJ = -cofactor
                const double cof[3][3] = {
                    {J[1][1] * J[2][2] - J[1][2] * J[2][1], J[1][2] * J[2][0] - J[1][0] * J[2][2],
                     J[1][0] * J[2][1] - J[1][1] * J[2][0]},
                    {J[0][2] * J[2][1] - J[0][1] * J[2][2], J[0][0] * J[2][2] - J[0][2] * J[2][0],
                     J[0][1] * J[2][0] - J[0][0] * J[2][1]},
                    {J[0][1] * J[1][2] - J[0][2] * J[1][1], J[0][2] * J[1][0] - J[0][0] * J[1][2],
                     J[0][0] * J[1][1] - J[0][1] * J[1][0]},
                };
                for (int a = 0; a < 3; ++a) {
                    const auto st = diff_stencil(s, x, y, z, a);
                    for (int i = 0; i < 3; ++i) {
                        const double g = -cof[i][a] * inv;
                        grad->data()[i * n + st.plus] += static_cast<T>(g);
                        grad->data()[i * n + st.minus] -= static_cast<T>(g);
                    }
                }
            }
        }
    }
    return acc * inv;
}

/// ncc + sigma * (diffusion + lambda * jd).
template <class T>
LossBreakdown total_loss(const Image<T>& warped, const Image<T>& fixed, const Image<T>& field, const LossConfig& cfg)
{
    LossBreakdown b;
    b.ncc = ncc_loss(warped, fixed, cfg);
    b.diffusion = diffusion_loss(field);
    b.jd = jd_loss(field);
    b.total = b.ncc + cfg.sigma * (b.diffusion + cfg.lambda * b.jd);
    return b;
}

} // namespace cfreg
