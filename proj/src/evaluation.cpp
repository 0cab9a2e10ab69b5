#include "cfreg/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cfreg {

double dsc(const LabelMap& a, const LabelMap& b)
{
    require_same_dims(a.dims(), b.dims(), "dsc");
    std::map<int, std::array<std::int64_t, 3>> counts; // |A|, |B|, |A and B|
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] > 0) {
            ++counts[av[i]][0];
        }
        if (bv[i] > 0) {
            ++counts[bv[i]][1];
        }
        if (av[i] > 0 && av[i] == bv[i]) {
            ++counts[av[i]][2];
        }
    }
    if (counts.empty()) {
        return 1.0;
    }
    double sum = 0.0;
    for (const auto& [label, c] : counts) {
        sum += 2.0 * static_cast<double>(c[2]) / static_cast<double>(c[0] + c[1]);
    }
    return sum / static_cast<double>(counts.size());
}

std::vector<std::pair<int, std::array<double, 3>>> label_centroids(const LabelMap& labels)
{
    std::map<int, std::array<double, 4>> acc;
    const Dims s = labels.dims();
    for (int x = 0; x < s.d; ++x) {
        for (int y = 0; y < s.h; ++y) {
            for (int z = 0; z < s.w; ++z) {
                const int l = labels(x, y, z);
                if (l > 0) {
                    auto& a = acc[l];
                    a[0] += x;
                    a[1] += y;
                    a[2] += z;
                    a[3] += 1.0;
                }
            }
        }
    }
    std::vector<std::pair<int, std::array<double, 3>>> out;
    for (const auto& [l, a] : acc) {
        out.push_back({l, {a[0] / a[3], a[1] / a[3], a[2] / a[3]}});
    }
    return out;
}

double mean_centroid_error(const LabelMap& a, const LabelMap& b)
{
    require_same_dims(a.dims(), b.dims(), "mean_centroid_error");
    const auto ca = label_centroids(a);
    const auto cb = label_centroids(b);
    double sum = 0.0;
    int n = 0;
    for (const auto& [la, pa] : ca) {
        for (const auto& [lb, pb] : cb) {
            if (la == lb) {
                sum += std::hypot(pa[0] - pb[0], pa[1] - pb[1], pa[2] - pb[2]);
                ++n;
            }
        }
    }
    if (n == 0) {
        throw std::invalid_argument("mean_centroid_error: no label shared by both maps");
    }
    return sum / n;
}

LabelMap warp_labels(const LabelMap& labels, const DisplacementField& field)
{
    return warp(labels, field, Interp::nearest);
}

Volume difference_map(const Volume& warped, const Volume& fixed)
{
    require_same_dims(warped.dims(), fixed.dims(), "difference_map");
    if (warped.channels() != fixed.channels()) {
        throw std::invalid_argument("difference_map: shape mismatch");
    }
    Volume out(warped.channels(), warped.dims());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out.data()[i] = std::abs(warped.data()[i] - fixed.data()[i]);
    }
    return out;
}

EvalRecord evaluate_field(const EvalPair& pair, const DisplacementField& field)
{
    EvalRecord r;
    r.pair_id = pair.id;
    r.dsc_before = dsc(pair.labels_moving, pair.labels_fixed);
    r.dsc_after = dsc(warp_labels(pair.labels_moving, field), pair.labels_fixed);
    r.njd_percent = njd_percent(field);
    return r;
}

EvalRecord evaluate_pair(const NetworkParams& params, const EvalPair& pair, const ForwardOptions& opt, int repeats)
{
    require_same_dims(pair.fixed.dims(), pair.moving.dims(), "evaluate_pair");
    require_same_dims(pair.fixed.dims(), pair.labels_fixed.dims(), "evaluate_pair labels");
    require_same_dims(pair.fixed.dims(), pair.labels_moving.dims(), "evaluate_pair labels");
    std::vector<double> times;
    RegistrationResult result;
    for (int i = 0; i < std::max(1, repeats); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        result = forward(pair.fixed, pair.moving, params, opt);
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    EvalRecord r = evaluate_field(pair, result.final_field);
    r.runtime_seconds = times[times.size() / 2];
    return r;
}

Report report(const std::vector<EvalRecord>& records)
{
    if (records.empty()) {
        throw std::invalid_argument("report: no records");
    }
    Report rep;
    std::map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto [it, inserted] = index.try_emplace(r.group, rep.rows.size());
        if (inserted) {
            rep.rows.push_back(ReportRow{r.group});
        }
        auto& row = rep.rows[it->second];
        ++row.count;
        row.dsc_before += r.dsc_before;
        row.dsc_after += r.dsc_after;
        row.njd_percent += r.njd_percent;
        row.runtime_seconds += r.runtime_seconds;
    }
    double best_dsc = -1.0, best_njd = 1e300, best_rt = 1e300;
    for (auto& row : rep.rows) {
        const double n = static_cast<double>(row.count);
        row.dsc_before /= n;
        row.dsc_after /= n;
        row.njd_percent /= n;
        row.runtime_seconds /= n;
        best_dsc = std::max(best_dsc, row.dsc_after);
        best_njd = std::min(best_njd, row.njd_percent);
        best_rt = std::min(best_rt, row.runtime_seconds);
    }
    for (auto& row : rep.rows) {
        row.best_dsc = row.dsc_after == best_dsc;
        row.best_njd = row.njd_percent == best_njd;
        row.best_runtime = row.runtime_seconds == best_rt;
    }
    return rep;
}

std::string Report::text() const
{
    std::ostringstream os;
    os << std::left << std::setw(18) << "group" << std::right << std::setw(6) << "n" << std::setw(12) << "DSC before"
       << std::setw(12) << "DSC after" << std::setw(11) << "NJD (%)" << std::setw(13) << "Runtime (s)" << '\n';
    os << std::fixed;
    for (const auto& r : rows) {
        const auto mark = [](bool b) { return b ? "*" : " "; };
        os << std::left << std::setw(18) << (r.group.empty() ? "-" : r.group) << std::right << std::setw(6)
           << r.count << std::setw(12) << std::setprecision(4) << r.dsc_before << std::setw(11) << r.dsc_after
           << mark(r.best_dsc) << std::setw(10) << std::setprecision(4) << r.njd_percent << mark(r.best_njd)
           << std::setw(12) << std::setprecision(4) << r.runtime_seconds << mark(r.best_runtime) << '\n';
    }
    os << "* best in column\n";
    return os.str();
}

std::string Report::csv() const
{
    std::ostringstream os;
    os << "group,n,dsc_before,dsc_after,njd_percent,runtime_s,best_dsc,best_njd,best_runtime\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.group << ',' << r.count << ',' << r.dsc_before << ',' << r.dsc_after << ',' << r.njd_percent << ','
           << r.runtime_seconds << ',' << r.best_dsc << ',' << r.best_njd << ',' << r.best_runtime << '\n';
    }
    return os.str();
}

std::string records_csv(const std::vector<EvalRecord>& records)
{
    std::ostringstream os;
    os << "pair_id,dsc_before,dsc_after,njd_percent,runtime_s\n";
    os << std::setprecision(10);
    for (const auto& r : records) {
        os << r.pair_id << ',' << r.dsc_before << ',' << r.dsc_after << ',' << r.njd_percent << ','
           << r.runtime_seconds << '\n';
    }
    return os.str();
}

} // namespace cfreg
