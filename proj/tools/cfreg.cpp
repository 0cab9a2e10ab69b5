// cfreg: synthetic data, training, registration, evaluation and sweeps.

#include "cfreg/checkpoint.hpp"
#include "cfreg/evaluation.hpp"
#include "cfreg/run_config.hpp"
#include "cfreg/synthetic.hpp"
#include "cfreg/training.hpp"
#include "cfreg/volumes.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

namespace fs = std::filesystem;
using namespace cfreg;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::string data;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int iterations = -1;
    bool affine_only = false;
    bool no_affine = false;
    bool no_preprocess = false;
    std::string shape;
};

RunConfig resolve(const Common& c)
{
    RunConfig rc = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    if (!c.out.empty()) {
        rc.out_dir = c.out;
    }
    if (!c.data.empty()) {
        rc.data_dir = c.data;
    }
    if (c.seed_set) {
        rc.train.seed = c.seed;
    }
    if (c.iterations >= 0) {
        rc.train.iterations = c.iterations;
    }
    if (c.affine_only) {
        rc.train.affine_only = true;
    }
    if (c.no_affine) {
        rc.train.model = config_for_steps(rc.train.model, 0, rc.train.model.levels());
    }
    if (c.no_preprocess) {
        rc.preprocess = false;
    }
    if (!c.shape.empty()) {
        rc.shape = parse_dims(c.shape);
    }
    return rc;
}

void add_common(CLI::App* app, Common& c, bool training)
{
    app->add_option("--config", c.config, "INI run configuration");
    app->add_option("--out", c.out, "Output directory");
    auto* seed = app->add_option("--seed", c.seed, "Seed for every random draw");
    seed->each([&c](const std::string&) { c.seed_set = true; });
    if (training) {
        app->add_option("--iterations", c.iterations, "Training iterations");
        app->add_option("--data", c.data, "Dataset directory with manifest.csv");
    }
    app->add_option("--shape", c.shape, "Crop/pad target D,H,W (0,0,0 keeps the input shape)");
    app->add_flag("--no-preprocess", c.no_preprocess, "Skip normalization, CoM initialization and crop/pad");
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p);
    if (!out) {
        throw std::runtime_error("cannot write " + p.string());
    }
    out << text;
}

std::string affine_text(const AffineTransform& t)
{
    std::ostringstream os;
    os << std::setprecision(9);
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) {
            os << t.m[r * 4 + c] << (c == 3 ? '\n' : ' ');
        }
    }
    return os.str();
}

ForwardOptions forward_options(const Checkpoint& ck, bool affine_only, bool no_affine)
{
    ForwardOptions opt;
    opt.affine_only = affine_only;
    opt.skip_affine = no_affine;
    if (affine_only && no_affine) {
        throw std::invalid_argument("--affine-only and --no-affine are mutually exclusive");
    }
    if (affine_only && ck.params.config.affine_steps == 0) {
        throw std::invalid_argument("--affine-only needs a model with affine steps");
    }
    return opt;
}

// Pads up to the next multiple of the coarsest stride when no target is given.
Dims default_target(Dims s, const ModelConfig& m)
{
    const int k = m.min_extent();
    const auto up = [k](int n) { return (n + k - 1) / k * k; };
    return {up(s.d), up(s.h), up(s.w)};
}

int cmd_synth(const fs::path& out, int n, std::uint64_t seed, const SyntheticMagnitudes& mag)
{
    fs::create_directories(out);
    const auto files = write_synthetic_dataset(out.string(), n, seed, mag);
    std::cout << "wrote " << files.size() << " pairs to " << out.string() << '\n';
    return 0;
}

int cmd_train(const Common& c, const std::string& resume_path)
{
    RunConfig rc = resolve(c);
    if (rc.data_dir.empty()) {
        throw std::invalid_argument("train: no dataset (--data or [data] dir)");
    }
    std::unique_ptr<Checkpoint> resume;
    if (!resume_path.empty()) {
        resume = std::make_unique<Checkpoint>(load_checkpoint(resume_path));
        rc.train.model = resume->params.config;
        rc.train.seed = resume->seed;
    }
    const fs::path out = rc.out_dir;
    fs::create_directories(out);
    save_run_config((out / "config.ini").string(), rc);
    const Dataset data = load_dataset(rc.data_dir, rc.train.validation_pairs, rc.preprocess, rc.shape);
    std::ofstream log(out / "train.log", resume ? std::ios::app : std::ios::trunc);
    const auto result = train(rc.train, data, resume.get(), TrainHooks{&log, out.string()});
    std::cout << "trained " << rc.train.iterations << " iterations in " << std::fixed << std::setprecision(1)
              << result.seconds << " s; checkpoint " << (out / "final.bin").string() << '\n';
    if (!result.history.empty()) {
        std::cout << format_loss_line(result.history.back()) << '\n';
    }
    return 0;
}

int cmd_register(const Common& c, const std::string& ckpt, const std::string& fixed_path,
                 const std::string& moving_path, const std::string& lf_path, const std::string& lm_path)
{
    RunConfig rc = resolve(c);
    const Checkpoint ck = load_checkpoint(ckpt);
    rc.train.model = ck.params.config;
    const auto opt = forward_options(ck, c.affine_only, c.no_affine);
    const Volume f = load_volume(fixed_path);
    const Volume m = load_volume(moving_path);
    LabelMap lf, lm;
    const bool labels = !lf_path.empty() && !lm_path.empty();
    if (labels) {
        lf = load_labels(lf_path);
        lm = load_labels(lm_path);
    }
    EvalPair pair;
    pair.id = fs::path(moving_path).filename().string();
    if (rc.preprocess) {
        const Dims target = rc.shape.voxels() > 0 ? rc.shape : default_target(f.dims(), ck.params.config);
        rc.shape = target;
        auto p = prepare_pair(f, m, labels ? &lf : nullptr, labels ? &lm : nullptr, target);
        pair.fixed = std::move(p.fixed);
        pair.moving = std::move(p.moving);
        pair.labels_fixed = std::move(p.labels_fixed);
        pair.labels_moving = std::move(p.labels_moving);
    } else {
        require_same_dims(f.dims(), m.dims(), "register");
        pair.fixed = f;
        pair.moving = m;
        pair.labels_fixed = lf;
        pair.labels_moving = lm;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const RegistrationResult r = forward(pair.fixed, pair.moving, ck.params, opt);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const fs::path out = rc.out_dir;
    fs::create_directories(out);
    save_run_config((out / "config.ini").string(), rc);
    save_volume((out / "warped.nii.gz").string(), r.warped);
    save_field((out / "field.nii.gz").string(), r.final_field);
    save_volume((out / "difference.nii.gz").string(), difference_map(r.warped, pair.fixed));
    if (rc.preprocess) {
        save_volume((out / "fixed_prepared.nii.gz").string(), pair.fixed);
        save_volume((out / "moving_prepared.nii.gz").string(), pair.moving);
    }
    write_text(out / "affine.txt", affine_text(r.affine));

    LossConfig lc = rc.train.loss;
    std::ostringstream line;
    line << std::setprecision(6) << "pair=" << pair.id << " ncc_before=" << ncc_loss(pair.moving, pair.fixed, lc)
         << " ncc_after=" << ncc_loss(r.warped, pair.fixed, lc) << " njd_percent=" << njd_percent(r.final_field);
    if (labels) {
        const auto e = evaluate_field(pair, r.final_field);
        line << " dsc_before=" << e.dsc_before << " dsc_after=" << e.dsc_after;
        save_labels((out / "labels_warped.nii.gz").string(), warp_labels(pair.labels_moving, r.final_field));
    }
    line << " runtime_s=" << seconds;
    write_text(out / "report.txt", line.str() + "\n");
    std::cout << line.str() << '\n';
    return 0;
}

int cmd_evaluate(const Common& c, const std::string& ckpt)
{
    RunConfig rc = resolve(c);
    const Checkpoint ck = load_checkpoint(ckpt);
    rc.train.model = ck.params.config;
    const auto opt = forward_options(ck, c.affine_only, c.no_affine);
    if (rc.data_dir.empty()) {
        throw std::invalid_argument("evaluate: no pairs (--data not given)");
    }
    const auto files = read_manifest(rc.data_dir);
    std::vector<EvalRecord> records;
    for (const auto& pf : files) {
        const EvalPair p = load_pair(rc.data_dir, pf, rc.preprocess, rc.shape);
        auto r = evaluate_pair(ck.params, p, opt);
        r.group = opt.affine_only ? "affine_only" : (opt.skip_affine ? "no_affine" : "full");
        records.push_back(r);
    }
    const fs::path out = rc.out_dir;
    fs::create_directories(out);
    save_run_config((out / "config.ini").string(), rc);
    write_text(out / "eval.csv", records_csv(records));
    const Report rep = report(records);
    write_text(out / "report.txt", rep.text());
    write_text(out / "report.csv", rep.csv());
    std::cout << records_csv(records) << '\n' << rep.text();
    return 0;
}

int cmd_sweep(const Common& c, const std::string& axis_name, const std::string& values_text)
{
    RunConfig rc = resolve(c);
    if (rc.data_dir.empty()) {
        throw std::invalid_argument("sweep: no dataset (--data or [data] dir)");
    }
    const SweepAxis axis = parse_sweep_axis(axis_name);
    std::vector<std::string> values;
    std::stringstream ss(values_text);
    for (std::string v; std::getline(ss, v, ',');) {
        if (!v.empty()) {
            values.push_back(v);
        }
    }
    if (values.empty()) {
        values = axis == SweepAxis::variant ? std::vector<std::string>{"baseline", "trans_encoder", "trans_decoder",
                                                                        "trans_all"}
                 : axis == SweepAxis::lambda ? std::vector<std::string>{"0", "1e-5", "1e-4", "1e-3"}
                                             : std::vector<std::string>{"0:3", "1:3", "2:3", "0:4", "1:4", "2:4"};
    }
    const Dataset data = load_dataset(rc.data_dir, rc.train.validation_pairs, rc.preprocess, rc.shape);
    const fs::path out = rc.out_dir;
    fs::create_directories(out);
    save_run_config((out / "config.ini").string(), rc);
    std::ofstream log(out / "sweep.log");
    // Nothing held out: score on every pair, training pairs included.
    std::vector<EvalPair> eval_pairs = data.validation;
    if (eval_pairs.empty()) {
        for (const auto& pf : read_manifest(rc.data_dir)) {
            eval_pairs.push_back(load_pair(rc.data_dir, pf, rc.preprocess, rc.shape));
        }
    }
    const auto rep = sweep(rc.train, axis, values, data, eval_pairs, &log);
    write_text(out / "sweep.txt", rep.text());
    write_text(out / "sweep.csv", rep.csv());
    std::cout << rep.text();
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Joint affine and deformable 3D registration in one forward pass"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "Write synthetic registration pairs");
    std::string synth_out = "data";
    int synth_n = 4;
    std::uint64_t synth_seed = 0;
    std::string synth_shape = "48,48,48";
    double rot_deg = 5.0, trans = 3.0, scale = 0.05, amp = 2.0, smooth = 4.0;
    int blobs = 4;
    synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
    synth->add_option("--n", synth_n, "Number of pairs")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Seed")->capture_default_str();
    synth->add_option("--shape", synth_shape, "Volume shape D,H,W")->capture_default_str();
    synth->add_option("--rotation", rot_deg, "Max rotation per axis (degrees)")->capture_default_str();
    synth->add_option("--translation", trans, "Max translation per axis (voxels)")->capture_default_str();
    synth->add_option("--scale", scale, "Max |scale - 1| per axis")->capture_default_str();
    synth->add_option("--deform-amp", amp, "Peak deformation per component (voxels)")->capture_default_str();
    synth->add_option("--deform-smooth", smooth, "Deformation smoothness (voxels)")->capture_default_str();
    synth->add_option("--blobs", blobs, "Labelled structures per phantom")->capture_default_str();

    Common tc;
    std::string resume;
    auto* trn = app.add_subcommand("train", "Train a model on a pair dataset");
    add_common(trn, tc, true);
    trn->add_option("--resume", resume, "Continue from a checkpoint");
    trn->add_flag("--affine-only", tc.affine_only, "Optimize the affine steps' output only");
    trn->add_flag("--no-affine", tc.no_affine, "Use L_a = 0 (all steps deformable)");

    Common rcm;
    std::string ckpt, fixed, moving, lf, lm;
    auto* reg = app.add_subcommand("register", "Register a moving volume to a fixed one");
    add_common(reg, rcm, false);
    reg->add_option("--checkpoint", ckpt, "Model checkpoint")->required();
    reg->add_option("--fixed", fixed, "Fixed volume (NIfTI)")->required();
    reg->add_option("--moving", moving, "Moving volume (NIfTI)")->required();
    reg->add_option("--fixed-labels", lf, "Fixed label map, for DSC");
    reg->add_option("--moving-labels", lm, "Moving label map, for DSC");
    reg->add_flag("--affine-only", rcm.affine_only, "Output the affine steps' transform only");
    reg->add_flag("--no-affine", rcm.no_affine, "Replace affine steps by identity");

    Common ec;
    std::string eval_ckpt;
    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on a pair dataset");
    add_common(ev, ec, false);
    ev->add_option("--data", ec.data, "Dataset directory with manifest.csv");
    ev->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
    ev->add_flag("--affine-only", ec.affine_only, "Score the affine steps' transform only");
    ev->add_flag("--no-affine", ec.no_affine, "Replace affine steps by identity");

    Common sc;
    std::string axis, values;
    auto* sw = app.add_subcommand("sweep", "Train and score one model per value of an axis");
    add_common(sw, sc, true);
    sw->add_option("--axis", axis, "steps, lambda or variant")->required();
    sw->add_option("--values", values, "Comma-separated values (steps as L_a:L_d); defaults per axis");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*synth) {
            SyntheticMagnitudes mag;
            mag.shape = parse_dims(synth_shape);
            mag.rotation = rot_deg * std::numbers::pi / 180.0;
            mag.translation = trans;
            mag.scale = scale;
            mag.deform_amplitude = amp;
            mag.deform_smoothness = smooth;
            mag.blobs = blobs;
            return cmd_synth(synth_out, synth_n, synth_seed, mag);
        }
        if (*trn) {
            return cmd_train(tc, resume);
        }
        if (*reg) {
            return cmd_register(rcm, ckpt, fixed, moving, lf, lm);
        }
        if (*ev) {
            return cmd_evaluate(ec, eval_ckpt);
        }
        if (*sw) {
            return cmd_sweep(sc, axis, values);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
