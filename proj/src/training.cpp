#include "cfreg/training.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace cfreg {

std::pair<std::size_t, std::size_t> sample_pair(std::size_t dataset_size, std::mt19937_64& rng)
{
    if (dataset_size < 2) {
        throw std::invalid_argument("sample_pair: dataset needs at least 2 images, has " +
                                    std::to_string(dataset_size));
    }
    std::uniform_int_distribution<std::size_t> first(0, dataset_size - 1);
    std::uniform_int_distribution<std::size_t> second(0, dataset_size - 2);
    const std::size_t i = first(rng);
    std::size_t j = second(rng);
    if (j >= i) {
        ++j;
    }
    return {i, j};
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(NetworkParams& params)
{
    auto& named = params.named;
    if (state_.m.empty()) {
        for (const auto& p : named) {
            state_.m.emplace_back(p.var->value.size(), 0.0f);
            state_.v.emplace_back(p.var->value.size(), 0.0f);
        }
    }
    if (state_.m.size() != named.size()) {
        throw std::invalid_argument("Adam: optimizer state does not match the parameters");
    }
    ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
    for (std::size_t k = 0; k < named.size(); ++k) {
        auto w = named[k].var->value.data();
        const auto& g = named[k].var->grad;
        auto& m = state_.m[k];
        auto& v = state_.v[k];
        const std::int64_t n = static_cast<std::int64_t>(w.size());
#pragma omp parallel for schedule(static) if (n > 65536)
        for (std::int64_t i = 0; i < n; ++i) {
            const float gi = g.empty() ? 0.0f : g.data()[i];
            m[i] = b1 * m[i] + (1.0f - b1) * gi;
            v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            w[i] -= static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps_));
        }
    }
}

LossBreakdown accumulate_gradients(const NetworkParams& params, const Volume& fixed, const Volume& moving,
                                   const LossConfig& loss, bool affine_only, double weight)
{
    ag::Tape tape;
    ag::Context ctx{&tape};
    ForwardOptions opt;
    opt.affine_only = affine_only;
    auto g = forward_graph(ctx, params, ag::constant(fixed), ag::constant(moving), opt);
    auto ncc = nn::ncc_loss(ctx, g.warped, fixed, loss);
    auto diff = nn::diffusion_loss(ctx, g.final_field);
    auto jd = nn::jd_loss(ctx, g.final_field);
    auto total = nn::weighted_sum(ctx, {ncc, diff, jd},
                                  {weight, weight * loss.sigma, weight * loss.sigma * loss.lambda});
    LossBreakdown out;
    out.ncc = nn::scalar(ncc);
    out.diffusion = nn::scalar(diff);
    out.jd = nn::scalar(jd);
    out.total = out.ncc + loss.sigma * (out.diffusion + loss.lambda * out.jd);
    if (std::isfinite(out.total) && total->requires_grad) {
        tape.backward(total);
    }
    return out;
}

std::string format_loss_line(const LossRecord& r)
{
    std::ostringstream os;
    os << std::setprecision(9) << "iter=" << r.iteration << " total=" << r.loss.total << " ncc=" << r.loss.ncc
       << " diffusion=" << r.loss.diffusion << " jd=" << r.loss.jd;
    return os.str();
}

namespace {

double grad_norm(const NetworkParams& params)
{
    double s = 0.0;
    for (const auto& p : params.named) {
        for (float g : p.var->grad.data()) {
            s += static_cast<double>(g) * g;
        }
    }
    return std::sqrt(s);
}

void scale_grads(NetworkParams& params, float k)
{
    for (auto& p : params.named) {
        for (float& g : p.var->grad.data()) {
            g *= k;
        }
    }
}

ValidationRecord validate(const NetworkParams& params, const Dataset& data, int count, bool affine_only,
                          std::int64_t iteration)
{
    ValidationRecord v;
    v.iteration = iteration;
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(count), data.validation.size());
    ForwardOptions opt;
    opt.affine_only = affine_only;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = evaluate_pair(params, data.validation[i], opt, 1);
        v.dsc_before += r.dsc_before / static_cast<double>(n);
        v.dsc_after += r.dsc_after / static_cast<double>(n);
        v.njd_percent += r.njd_percent / static_cast<double>(n);
    }
    return v;
}

std::string rng_text(const std::mt19937_64& rng)
{
    std::ostringstream os;
    os << rng;
    return os.str();
}

} // namespace

TrainResult train(const TrainConfig& config, const Dataset& data, const Checkpoint* resume, const TrainHooks& hooks)
{
    if (data.images.size() < 2) {
        throw std::invalid_argument("train: dataset needs at least 2 images, has " +
                                    std::to_string(data.images.size()));
    }
    if (config.iterations < 0 || config.batch_size < 1) {
        throw std::invalid_argument("train: iterations must be >= 0 and batch_size >= 1");
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res;
    Checkpoint& ck = res.checkpoint;
    std::mt19937_64 rng;
    Adam adam(config.learning_rate);
    if (resume != nullptr) {
        ck.params = resume->params;
        ck.seed = resume->seed;
        ck.iteration = resume->iteration;
        if (resume->rng_state.empty()) {
            std::seed_seq seq{resume->seed, std::uint64_t{1}};
            rng.seed(seq);
        } else {
            std::istringstream is(resume->rng_state);
            is >> rng;
            if (!is) {
                throw std::runtime_error("train: corrupt RNG state in checkpoint");
            }
        }
        adam.set_state(resume->adam);
    } else {
        ck.params = init_params(config.model, config.seed);
        ck.seed = config.seed;
        std::seed_seq seq{config.seed, std::uint64_t{1}};
        rng.seed(seq);
    }
    NetworkParams& params = ck.params;
    if (!hooks.checkpoint_dir.empty()) {
        std::filesystem::create_directories(hooks.checkpoint_dir);
    }
    const auto write_checkpoint = [&](const std::string& name) {
        if (hooks.checkpoint_dir.empty()) {
            return;
        }
        ck.rng_state = rng_text(rng);
        ck.adam = adam.state();
        save_checkpoint((std::filesystem::path(hooks.checkpoint_dir) / name).string(), ck);
    };
    const auto run_validation = [&](std::int64_t it) {
        if (config.validation_pairs <= 0 || data.validation.empty()) {
            return;
        }
        const auto v = validate(params, data, config.validation_pairs, config.affine_only, it);
        res.validation.push_back(v);
        if (hooks.log) {
            *hooks.log << std::setprecision(6) << "validate iter=" << it << " dsc_before=" << v.dsc_before
                       << " dsc_after=" << v.dsc_after << " njd_percent=" << v.njd_percent << std::endl;
        }
    };

    const std::int64_t end = ck.iteration + config.iterations;
    for (std::int64_t it = ck.iteration + 1; it <= end; ++it) {
        params.zero_grad();
        LossBreakdown acc;
        const double w = 1.0 / config.batch_size;
        std::size_t fi = 0, mi = 0;
        for (int b = 0; b < config.batch_size; ++b) {
            std::tie(fi, mi) = sample_pair(data.images.size(), rng);
            const auto l = accumulate_gradients(params, data.images[fi], data.images[mi], config.loss,
                                                config.affine_only, w);
            acc.total += w * l.total;
            acc.ncc += w * l.ncc;
            acc.diffusion += w * l.diffusion;
            acc.jd += w * l.jd;
        }
        if (!std::isfinite(acc.total)) {
            std::ostringstream os;
            os << "non-finite loss at iteration " << it << " (fixed image " << fi << ", moving image " << mi
               << "): ncc=" << acc.ncc << " diffusion=" << acc.diffusion << " jd=" << acc.jd;
            throw std::runtime_error(os.str());
        }
        if (config.grad_clip > 0.0) {
            const double norm = grad_norm(params);
            if (norm > config.grad_clip) {
                scale_grads(params, static_cast<float>(config.grad_clip / norm));
            }
        }
        adam.step(params);
        ck.iteration = it;
        res.history.push_back({it, acc});
        if (hooks.log && config.log_interval > 0 && it % config.log_interval == 0) {
            *hooks.log << format_loss_line(res.history.back()) << std::endl;
        }
        if (config.checkpoint_interval > 0 && it % config.checkpoint_interval == 0 && it != end) {
            run_validation(it);
            write_checkpoint("checkpoint_" + std::to_string(it) + ".bin");
        }
    }
    params.zero_grad();
    run_validation(ck.iteration);
    ck.rng_state = rng_text(rng);
    ck.adam = adam.state();
    write_checkpoint("final.bin");
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::vector<double> smooth(const std::vector<double>& values, int window)
{
    std::vector<double> out(values.size());
    const int n = static_cast<int>(values.size());
    const int r = std::max(0, window / 2);
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - r), b = std::min(n - 1, i + r);
        double s = 0.0;
        for (int k = a; k <= b; ++k) {
            s += values[k];
        }
        out[i] = s / (b - a + 1);
    }
    return out;
}

SweepAxis parse_sweep_axis(const std::string& s)
{
    if (s == "steps") {
        return SweepAxis::steps;
    }
    if (s == "lambda") {
        return SweepAxis::lambda;
    }
    if (s == "variant") {
        return SweepAxis::variant;
    }
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected steps, lambda or variant)");
}

std::string to_string(SweepAxis a)
{
    switch (a) {
    case SweepAxis::steps:
        return "steps";
    case SweepAxis::lambda:
        return "lambda";
    case SweepAxis::variant:
        return "variant";
    }
    return "unknown";
}

namespace {

std::pair<int, int> parse_steps(const std::string& v)
{
    const auto colon = v.find(':');
    try {
        if (colon != std::string::npos) {
            std::size_t a = 0, b = 0;
            const int la = std::stoi(v.substr(0, colon), &a);
            const int ld = std::stoi(v.substr(colon + 1), &b);
            if (a == colon && b == v.size() - colon - 1) {
                return {la, ld};
            }
        }
    } catch (const std::exception&) {
    }
    throw std::invalid_argument("steps value '" + v + "' must look like L_a:L_d, e.g. 1:4");
}

bool is_default_value(SweepAxis axis, const std::string& value)
{
    switch (axis) {
    case SweepAxis::steps:
        return parse_steps(value) == std::pair{1, 4};
    case SweepAxis::lambda:
        return std::abs(std::stod(value) - 1e-4) < 1e-12;
    case SweepAxis::variant:
        return parse_variant(value) == Variant::trans_decoder;
    }
    return false;
}

} // namespace

TrainConfig apply_sweep_value(const TrainConfig& base, SweepAxis axis, const std::string& value)
{
    TrainConfig c = base;
    switch (axis) {
    case SweepAxis::steps: {
        const auto [la, ld] = parse_steps(value);
        c.model = config_for_steps(base.model, la, ld);
        break;
    }
    case SweepAxis::lambda: {
        std::size_t pos = 0;
        double l = 0.0;
        try {
            l = std::stod(value, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos != value.size() || !(l >= 0.0)) {
            throw std::invalid_argument("lambda value '" + value + "' must be a non-negative number");
        }
        c.loss.lambda = l;
        break;
    }
    case SweepAxis::variant:
        c.model.variant = parse_variant(value);
        break;
    }
    c.model.validate();
    return c;
}

SweepReport sweep(const TrainConfig& base, SweepAxis axis, const std::vector<std::string>& values,
                  const Dataset& data, const std::vector<EvalPair>& eval_pairs, std::ostream* log)
{
    if (values.empty()) {
        throw std::invalid_argument("sweep: no values given");
    }
    if (eval_pairs.empty()) {
        throw std::invalid_argument("sweep: no evaluation pairs");
    }
    std::vector<TrainConfig> configs;
    for (const auto& v : values) {
        configs.push_back(apply_sweep_value(base, axis, v)); // validate all before training anything
    }
    SweepReport rep;
    rep.axis = axis;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (log) {
            *log << "sweep " << to_string(axis) << '=' << values[k] << " start" << std::endl;
        }
        const auto r = train(configs[k], data, nullptr, TrainHooks{log, {}});
        SweepRow row;
        row.value = values[k];
        row.is_default = is_default_value(axis, values[k]);
        row.params = count_params(r.checkpoint.params);
        row.train_seconds = r.seconds;
        row.final_loss = r.history.empty() ? 0.0 : r.history.back().loss.total;
        ForwardOptions opt;
        opt.affine_only = configs[k].affine_only;
        for (const auto& p : eval_pairs) {
            const auto e = evaluate_pair(r.checkpoint.params, p, opt);
            const double n = static_cast<double>(eval_pairs.size());
            row.dsc_before += e.dsc_before / n;
            row.dsc_after += e.dsc_after / n;
            row.njd_percent += e.njd_percent / n;
            row.runtime_seconds += e.runtime_seconds / n;
        }
        if (log) {
            *log << std::setprecision(6) << "sweep " << to_string(axis) << '=' << values[k]
                 << " dsc_after=" << row.dsc_after << " njd_percent=" << row.njd_percent << std::endl;
        }
        rep.rows.push_back(row);
    }
    return rep;
}

std::string SweepReport::text() const
{
    std::ostringstream os;
    os << std::left << std::setw(16) << to_string(axis) << std::right << std::setw(12) << "params" << std::setw(12)
       << "DSC before" << std::setw(11) << "DSC after" << std::setw(10) << "NJD (%)" << std::setw(13)
       << "Runtime (s)" << std::setw(11) << "Train (s)" << '\n';
    os << std::fixed;
    for (const auto& r : rows) {
        os << std::left << std::setw(16) << (r.value + (r.is_default ? " (default)" : "")) << std::right
           << std::setw(12) << r.params << std::setw(12) << std::setprecision(4) << r.dsc_before << std::setw(11)
           << r.dsc_after << std::setw(10) << r.njd_percent << std::setw(13) << r.runtime_seconds << std::setw(11)
           << std::setprecision(1) << r.train_seconds << '\n';
    }
    return os.str();
}

std::string SweepReport::csv() const
{
    std::ostringstream os;
    os << to_string(axis) << ",is_default,params,dsc_before,dsc_after,njd_percent,runtime_s,train_s,final_loss\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.value << ',' << r.is_default << ',' << r.params << ',' << r.dsc_before << ',' << r.dsc_after << ','
           << r.njd_percent << ',' << r.runtime_seconds << ',' << r.train_seconds << ',' << r.final_loss << '\n';
    }
    return os.str();
}

} // namespace cfreg
