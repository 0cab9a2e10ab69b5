#include "cfreg/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

namespace cfreg {

namespace {

struct Ellipsoid {
    std::array<double, 3> center{};
    std::array<double, 3> radii{};
    double intensity = 0.0;

    double radius_at(const std::array<double, 3>& p) const
    {
        double r2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double t = (p[a] - center[a]) / radii[a];
            r2 += t * t;
        }
        return std::sqrt(r2);
    }

    // Smooth inside-indicator with an edge roughly one voxel wide.
    double weight_at(const std::array<double, 3>& p) const
    {
        const double mean_r = (radii[0] + radii[1] + radii[2]) / 3.0;
        return 1.0 / (1.0 + std::exp((radius_at(p) - 1.0) * mean_r / 0.6));
    }
};

struct Phantom {
    Ellipsoid head;
    std::vector<Ellipsoid> blobs;
    std::array<double, 3> wave{};
    double phase = 0.0;

    double intensity(const std::array<double, 3>& p) const
    {
        const double texture = 0.08 * std::sin(wave[0] * p[0] + wave[1] * p[1] + wave[2] * p[2] + phase);
        double v = head.weight_at(p) * (head.intensity + texture);
        for (const auto& b : blobs) {
            const double w = b.weight_at(p);
            v = v * (1.0 - w) + b.intensity * w;
        }
        return v;
    }

    std::int32_t label(const std::array<double, 3>& p) const
    {
        std::int32_t l = head.radius_at(p) < 1.0 ? 1 : 0;
        for (std::size_t k = 0; k < blobs.size(); ++k) {
            if (blobs[k].radius_at(p) < 1.0) {
                l = static_cast<std::int32_t>(k + 2);
            }
        }
        return l;
    }
};

Phantom make_phantom(const SyntheticPairSpec& spec, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Phantom ph;
    const auto c = grid_center(spec.shape);
    const int ext[3] = {spec.shape.d, spec.shape.h, spec.shape.w};
    const double min_ext = std::min({ext[0], ext[1], ext[2]});
    for (int a = 0; a < 3; ++a) {
        ph.head.center[a] = c[a];
        ph.head.radii[a] = 0.36 * ext[a];
    }
    ph.head.intensity = 0.35;
    for (int k = 0; k < spec.blobs; ++k) {
        Ellipsoid b;
        for (int a = 0; a < 3; ++a) {
            b.center[a] = c[a] + (u01(rng) - 0.5) * ph.head.radii[a];
            b.radii[a] = (0.10 + 0.08 * u01(rng)) * min_ext;
        }
        b.intensity = 0.55 + 0.45 * u01(rng);
        ph.blobs.push_back(b);
    }
    for (int a = 0; a < 3; ++a) {
        ph.wave[a] = (u01(rng) - 0.5) * 2.0 * std::numbers::pi / 6.0;
    }
    ph.phase = u01(rng) * 2.0 * std::numbers::pi;
    return ph;
}

void gaussian_smooth(std::vector<double>& buf, Dims s, double sigma)
{
    if (sigma <= 0.0) {
        return;
    }
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (double& k : kernel) {
        k /= norm;
    }
    const int ext[3] = {s.d, s.h, s.w};
    const std::int64_t strides[3] = {std::int64_t(s.h) * s.w, s.w, 1};
    std::vector<double> line;
    for (int axis = 0; axis < 3; ++axis) {
        const int n = ext[axis];
        const int o1 = axis == 0 ? 1 : 0;
        const int o2 = axis == 2 ? 1 : 2;
        line.resize(n);
        for (int a = 0; a < ext[o1]; ++a) {
            for (int b = 0; b < ext[o2]; ++b) {
                const std::int64_t base = a * strides[o1] + b * strides[o2];
                for (int k = 0; k < n; ++k) {
                    line[k] = buf[base + k * strides[axis]];
                }
                for (int k = 0; k < n; ++k) {
                    double acc = 0.0;
                    for (int t = -radius; t <= radius; ++t) {
                        acc += kernel[t + radius] * line[std::clamp(k + t, 0, n - 1)];
                    }
                    buf[base + k * strides[axis]] = acc;
                }
            }
        }
    }
}

DisplacementField random_deformation(const SyntheticPairSpec& spec, std::mt19937_64& rng)
{
    DisplacementField d(3, spec.shape);
    if (spec.deform_amplitude == 0.0) {
        return d;
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::int64_t n = spec.shape.voxels();
    std::vector<std::vector<double>> comps(3, std::vector<double>(n));
    double peak = 0.0;
    for (auto& comp : comps) {
        for (double& v : comp) {
            v = normal(rng);
        }
        gaussian_smooth(comp, spec.shape, spec.deform_smoothness);
        for (double v : comp) {
            peak = std::max(peak, std::abs(v));
        }
    }
    const double scale = peak > 0.0 ? spec.deform_amplitude / peak : 0.0;
    for (int c = 0; c < 3; ++c) {
        for (std::int64_t i = 0; i < n; ++i) {
            d.data()[c * n + i] = static_cast<float>(comps[c][i] * scale);
        }
    }
    return d;
}

std::array<double, 9> invert3(const AffineTransform& t)
{
    const auto a = [&](int r, int c) { return t.linear(r, c); };
    const double det = t.determinant();
    if (std::abs(det) < 1e-12) {
        throw std::invalid_argument("synth_pair: singular affine transform");
    }
    return {(a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) / det, (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) / det,
            (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) / det, (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) / det,
            (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) / det, (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) / det,
            (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) / det, (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) / det,
            (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) / det};
}

} // namespace

AffineTransform spec_affine(const SyntheticPairSpec& spec)
{
    using M = std::array<std::array<double, 3>, 3>;
    const auto mul = [](const M& a, const M& b) {
        M r{};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                for (int k = 0; k < 3; ++k) {
                    r[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        return r;
    };
    // Rotation about axis a acts in the plane of the other two axes.
    const auto rot = [](int axis, double angle) {
        M r{};
        for (int i = 0; i < 3; ++i) {
            r[i][i] = 1.0;
        }
        const int i = (axis + 1) % 3;
        const int j = (axis + 2) % 3;
        r[i][i] = std::cos(angle);
        r[i][j] = -std::sin(angle);
        r[j][i] = std::sin(angle);
        r[j][j] = std::cos(angle);
        return r;
    };
    M s{};
    for (int a = 0; a < 3; ++a) {
        s[a][a] = spec.scale[a];
    }
    const M lin = mul(mul(mul(rot(2, spec.rotation[2]), rot(1, spec.rotation[1])), rot(0, spec.rotation[0])), s);
    AffineTransform t;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
            t.linear(r, c) = lin[r][c];
        }
        t.translation(r) = spec.translation[r];
    }
    return t;
}

SyntheticPair synth_pair(const SyntheticPairSpec& spec)
{
    if (!spec.shape.valid() || spec.shape.d < 2 || spec.shape.h < 2 || spec.shape.w < 2) {
        throw std::invalid_argument("synth_pair: shape must be >= 2 per axis, got " + spec.shape.str());
    }
    if (spec.blobs < 1) {
        throw std::invalid_argument("synth_pair: at least one blob is required");
    }
    if (spec.deform_amplitude < 0.0 || spec.deform_smoothness < 0.0) {
        throw std::invalid_argument("synth_pair: deformation magnitudes must be non-negative");
    }
    std::mt19937_64 rng(spec.seed);
    const Phantom ph = make_phantom(spec, rng);
    const DisplacementField deform = random_deformation(spec, rng);

    SyntheticPair out;
    out.truth_affine = spec_affine(spec);
    out.truth_field = compose_add(affine_to_field<float>(out.truth_affine, spec.shape), deform);
    const auto dets = jacobian_det(out.truth_field);
    for (const float det : dets.data()) {
        if (!(det > 0.0f)) {
            throw std::invalid_argument(
                "synth_pair: requested transform folds (non-positive Jacobian); reduce the deformation amplitude "
                "or increase its smoothness");
        }
    }

    const Dims s = spec.shape;
    const auto c = grid_center(s);
    const auto inv = invert3(out.truth_affine);
    out.fixed = Volume(1, s);
    out.moving = Volume(1, s);
    out.labels_fixed = LabelMap(1, s);
    out.labels_moving = LabelMap(1, s);
    const bool has_deform = spec.deform_amplitude != 0.0;
#pragma omp parallel for schedule(static)
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const std::array<double, 3> q{double(x), double(y), double(z)};
                out.fixed(x, y, z) = static_cast<float>(ph.intensity(q));
                out.labels_fixed(x, y, z) = ph.label(q);

                // Solve p + truth(p) = q by fixed-point iteration on the deformation.
                double r[3];
                for (int a = 0; a < 3; ++a) {
                    r[a] = q[a] - c[a] - out.truth_affine.translation(a);
                }
                std::array<double, 3> p{};
                const int iterations = has_deform ? 40 : 1;
                std::array<double, 3> dv{0, 0, 0};
                for (int it = 0; it < iterations; ++it) {
                    for (int a = 0; a < 3; ++a) {
                        p[a] = c[a];
                        for (int b = 0; b < 3; ++b) {
                            p[a] += inv[a * 3 + b] * (r[b] - dv[b]);
                        }
                    }
                    if (has_deform) {
                        for (int a = 0; a < 3; ++a) {
                            dv[a] = sample_linear(deform.channel(a), s, p[0], p[1], p[2]);
                        }
                    }
                }
                out.moving(x, y, z) = static_cast<float>(ph.intensity(p));
                out.labels_moving(x, y, z) = ph.label(p);
            }
        }
    }
    return out;
}

SyntheticPairSpec random_spec(const SyntheticMagnitudes& mag, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    SyntheticPairSpec spec;
    spec.seed = rng();
    spec.shape = mag.shape;
    for (int a = 0; a < 3; ++a) {
        spec.rotation[a] = mag.rotation * sym(rng);
        spec.translation[a] = mag.translation * sym(rng);
        spec.scale[a] = 1.0 + mag.scale * sym(rng);
    }
    spec.deform_amplitude = mag.deform_amplitude;
    spec.deform_smoothness = mag.deform_smoothness;
    spec.blobs = mag.blobs;
    return spec;
}

std::string spec_to_text(const SyntheticPairSpec& spec)
{
    std::ostringstream os;
    os.precision(17);
    os << "seed = " << spec.seed << "\n";
    os << "shape = " << spec.shape.d << "," << spec.shape.h << "," << spec.shape.w << "\n";
    const auto triple = [&](const char* key, const std::array<double, 3>& v) {
        os << key << " = " << v[0] << "," << v[1] << "," << v[2] << "\n";
    };
    triple("rotation", spec.rotation);
    triple("translation", spec.translation);
    triple("scale", spec.scale);
    os << "deform_amplitude = " << spec.deform_amplitude << "\n";
    os << "deform_smoothness = " << spec.deform_smoothness << "\n";
    os << "blobs = " << spec.blobs << "\n";
    return os.str();
}

SyntheticPairSpec spec_from_text(const std::string& text)
{
    SyntheticPairSpec spec;
    std::istringstream is(text);
    std::string line;
    const auto parse3 = [](const std::string& v) {
        std::array<double, 3> out{};
        std::istringstream ls(v);
        char comma = 0;
        if (!(ls >> out[0] >> comma >> out[1] >> comma >> out[2])) {
            throw std::invalid_argument("bad triple '" + v + "'");
        }
        return out;
    };
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || line.starts_with("#")) {
            continue;
        }
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            s.erase(s.find_last_not_of(" \t\r") + 1);
            return s;
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "seed") {
            spec.seed = std::stoull(value);
        } else if (key == "shape") {
            const auto v = parse3(value);
            spec.shape = {int(v[0]), int(v[1]), int(v[2])};
        } else if (key == "rotation") {
            spec.rotation = parse3(value);
        } else if (key == "translation") {
            spec.translation = parse3(value);
        } else if (key == "scale") {
            spec.scale = parse3(value);
        } else if (key == "deform_amplitude") {
            spec.deform_amplitude = std::stod(value);
        } else if (key == "deform_smoothness") {
            spec.deform_smoothness = std::stod(value);
        } else if (key == "blobs") {
            spec.blobs = std::stoi(value);
        } else {
            throw std::invalid_argument("unknown synthetic spec key '" + key + "'");
        }
    }
    return spec;
}

} // namespace cfreg
