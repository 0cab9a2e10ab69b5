#include "cfreg/run_config.hpp"

#include "cfreg/volumes.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <map>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cfreg {

namespace pt = boost::property_tree;
namespace fs = std::filesystem;

std::vector<int> parse_int_list(const std::string& text)
{
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        int v = 0;
        try {
            v = std::stoi(item, &pos);
        } catch (const std::exception&) {
            throw std::invalid_argument("bad integer list '" + text + "'");
        }
        while (pos < item.size() && std::isspace(static_cast<unsigned char>(item[pos]))) {
            ++pos;
        }
        if (pos != item.size()) {
            throw std::invalid_argument("bad integer list '" + text + "'");
        }
        out.push_back(v);
    }
    return out;
}

Dims parse_dims(const std::string& text)
{
    const auto v = parse_int_list(text);
    if (v.size() != 3) {
        throw std::invalid_argument("shape '" + text + "' must have three comma-separated extents");
    }
    return {v[0], v[1], v[2]};
}

namespace {

std::string join(const std::vector<int>& v)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

void check_keys(const pt::ptree& tree)
{
    static const std::map<std::string, std::set<std::string>> known{
        {"model",
         {"affine_steps", "deform_steps", "encoder_dims", "decoder_dims", "attn_heads", "encoder_attn_heads",
          "window", "mlp_ratio", "variant"}},
        {"loss", {"sigma", "lambda", "ncc_window", "epsilon"}},
        {"train",
         {"iterations", "learning_rate", "batch_size", "seed", "checkpoint_interval", "validation_pairs",
          "grad_clip", "affine_only", "log_interval"}},
        {"data", {"dir", "shape", "preprocess"}},
        {"output", {"dir"}},
    };
    for (const auto& [section, body] : tree) {
        const auto it = known.find(section);
        if (it == known.end()) {
            throw std::invalid_argument("config: unknown section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            if (!it->second.contains(key)) {
                throw std::invalid_argument("config: unknown key '" + key + "' in [" + section + "]");
            }
        }
    }
}

// Present keys must convert; ptree::get(path, default) would silently fall back.
template <class T>
T read(const pt::ptree& tree, const std::string& key, T fallback)
{
    return tree.get_child_optional(key) ? tree.get<T>(key) : fallback;
}

} // namespace

RunConfig parse_run_config(const std::string& text)
{
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw std::invalid_argument(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
    }
    check_keys(tree);
    RunConfig rc;
    auto& m = rc.train.model;
    auto& l = rc.train.loss;
    auto& t = rc.train;
    try {
        m.affine_steps = read(tree, "model.affine_steps", m.affine_steps);
        m.deform_steps = read(tree, "model.deform_steps", m.deform_steps);
        if (auto v = tree.get_optional<std::string>("model.encoder_dims")) {
            m.encoder_dims = parse_int_list(*v);
        }
        if (auto v = tree.get_optional<std::string>("model.decoder_dims")) {
            m.decoder_dims = parse_int_list(*v);
        }
        if (auto v = tree.get_optional<std::string>("model.attn_heads")) {
            m.attn_heads = parse_int_list(*v);
        }
        if (auto v = tree.get_optional<std::string>("model.encoder_attn_heads")) {
            m.encoder_attn_heads = parse_int_list(*v);
        }
        m.window = read(tree, "model.window", m.window);
        m.mlp_ratio = read(tree, "model.mlp_ratio", m.mlp_ratio);
        if (auto v = tree.get_optional<std::string>("model.variant")) {
            m.variant = parse_variant(*v);
        }
        l.sigma = read(tree, "loss.sigma", l.sigma);
        l.lambda = read(tree, "loss.lambda", l.lambda);
        l.ncc_window = read(tree, "loss.ncc_window", l.ncc_window);
        l.epsilon = read(tree, "loss.epsilon", l.epsilon);
        t.iterations = read(tree, "train.iterations", t.iterations);
        t.learning_rate = read(tree, "train.learning_rate", t.learning_rate);
        t.batch_size = read(tree, "train.batch_size", t.batch_size);
        t.seed = read(tree, "train.seed", t.seed);
        t.checkpoint_interval = read(tree, "train.checkpoint_interval", t.checkpoint_interval);
        t.validation_pairs = read(tree, "train.validation_pairs", t.validation_pairs);
        t.grad_clip = read(tree, "train.grad_clip", t.grad_clip);
        t.affine_only = read(tree, "train.affine_only", t.affine_only);
        t.log_interval = read(tree, "train.log_interval", t.log_interval);
        rc.data_dir = read(tree, "data.dir", rc.data_dir);
        if (auto v = tree.get_optional<std::string>("data.shape")) {
            rc.shape = parse_dims(*v);
        }
        rc.preprocess = read(tree, "data.preprocess", rc.preprocess);
        rc.out_dir = read(tree, "output.dir", rc.out_dir);
    } catch (const pt::ptree_bad_data& e) {
        throw std::invalid_argument(std::string("config: bad value: ") + e.what());
    }
    m.validate();
    if (l.ncc_window < 1 || l.ncc_window % 2 == 0) {
        throw std::invalid_argument("config: loss.ncc_window must be a positive odd integer");
    }
    return rc;
}

RunConfig load_run_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("missing config file " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string format_run_config(const RunConfig& rc)
{
    const auto& m = rc.train.model;
    const auto& l = rc.train.loss;
    const auto& t = rc.train;
    std::ostringstream os;
    os.precision(17);
    os << "[model]\n"
       << "affine_steps = " << m.affine_steps << '\n'
       << "deform_steps = " << m.deform_steps << '\n'
       << "encoder_dims = " << join(m.encoder_dims) << '\n'
       << "decoder_dims = " << join(m.decoder_dims) << '\n'
       << "attn_heads = " << join(m.attn_heads) << '\n'
       << "encoder_attn_heads = " << join(m.encoder_attn_heads) << '\n'
       << "window = " << m.window << '\n'
       << "mlp_ratio = " << m.mlp_ratio << '\n'
       << "variant = " << to_string(m.variant) << "\n\n"
       << "[loss]\n"
       << "sigma = " << l.sigma << '\n'
       << "lambda = " << l.lambda << '\n'
       << "ncc_window = " << l.ncc_window << '\n'
       << "epsilon = " << l.epsilon << "\n\n"
       << "[train]\n"
       << "iterations = " << t.iterations << '\n'
       << "learning_rate = " << t.learning_rate << '\n'
       << "batch_size = " << t.batch_size << '\n'
       << "seed = " << t.seed << '\n'
       << "checkpoint_interval = " << t.checkpoint_interval << '\n'
       << "validation_pairs = " << t.validation_pairs << '\n'
       << "grad_clip = " << t.grad_clip << '\n'
       << "affine_only = " << (t.affine_only ? "true" : "false") << '\n'
       << "log_interval = " << t.log_interval << "\n\n"
       << "[data]\n"
       << "dir = " << rc.data_dir << '\n'
       << "shape = " << rc.shape.d << ',' << rc.shape.h << ',' << rc.shape.w << '\n'
       << "preprocess = " << (rc.preprocess ? "true" : "false") << "\n\n"
       << "[output]\n"
       << "dir = " << rc.out_dir << '\n';
    return os.str();
}

void save_run_config(const std::string& path, const RunConfig& rc)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out << format_run_config(rc);
}

std::vector<PairFiles> read_manifest(const std::string& dir)
{
    const fs::path p = fs::path(dir) / "manifest.csv";
    std::ifstream in(p);
    if (!in) {
        throw std::runtime_error("no pairs: missing " + p.string());
    }
    std::vector<PairFiles> out;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) {
            cols.push_back(c);
        }
        if (cols.size() != 5) {
            throw std::runtime_error("manifest " + p.string() + ": expected 5 columns in '" + line + "'");
        }
        out.push_back({cols[0], cols[1], cols[2], cols[3], cols[4]});
    }
    if (out.empty()) {
        throw std::runtime_error("no pairs in " + p.string());
    }
    return out;
}

void write_manifest(const std::string& dir, const std::vector<PairFiles>& pairs)
{
    std::ofstream out(fs::path(dir) / "manifest.csv");
    if (!out) {
        throw std::runtime_error("cannot write manifest in " + dir);
    }
    out << "id,fixed,moving,labels_fixed,labels_moving\n";
    for (const auto& p : pairs) {
        out << p.id << ',' << p.fixed << ',' << p.moving << ',' << p.labels_fixed << ',' << p.labels_moving << '\n';
    }
}

EvalPair load_pair(const std::string& dir, const PairFiles& files, bool preprocess, Dims target)
{
    const auto path = [&](const std::string& rel) { return (fs::path(dir) / rel).string(); };
    if (files.labels_fixed.empty() || files.labels_moving.empty()) {
        throw std::runtime_error("pair " + files.id + ": missing labels");
    }
    const Volume f = load_volume(path(files.fixed));
    const Volume m = load_volume(path(files.moving));
    const LabelMap lf = load_labels(path(files.labels_fixed));
    const LabelMap lm = load_labels(path(files.labels_moving));
    EvalPair p;
    p.id = files.id;
    if (preprocess) {
        auto prep = prepare_pair(f, m, &lf, &lm, target);
        p.fixed = std::move(prep.fixed);
        p.moving = std::move(prep.moving);
        p.labels_fixed = std::move(prep.labels_fixed);
        p.labels_moving = std::move(prep.labels_moving);
    } else {
        p.fixed = f;
        p.moving = m;
        p.labels_fixed = lf;
        p.labels_moving = lm;
        require_same_dims(f.dims(), m.dims(), ("pair " + files.id).c_str());
    }
    return p;
}

Dataset load_dataset(const std::string& dir, int validation_pairs, bool preprocess, Dims target)
{
    const auto files = read_manifest(dir);
    Dataset d;
    const std::size_t n = files.size();
    const std::size_t held = n > 1 ? std::min<std::size_t>(static_cast<std::size_t>(std::max(0, validation_pairs)), n - 1)
                                   : 0;
    for (std::size_t i = 0; i < n; ++i) {
        EvalPair p = load_pair(dir, files[i], preprocess, target);
        if (i < n - held) {
            d.images.push_back(p.fixed);
            d.images.push_back(p.moving);
        }
        if (i >= n - held || n == 1) {
            d.validation.push_back(std::move(p));
        }
    }
    return d;
}

std::vector<PairFiles> write_synthetic_dataset(const std::string& dir, int n, std::uint64_t seed,
                                               const SyntheticMagnitudes& mag)
{
    if (n < 1) {
        throw std::invalid_argument("synth: need at least one pair");
    }
    std::mt19937_64 rng(seed);
    std::vector<SyntheticPairSpec> specs;
    std::vector<SyntheticPair> pairs;
    for (int i = 0; i < n; ++i) {
        specs.push_back(random_spec(mag, rng));
        pairs.push_back(synth_pair(specs.back()));
    }
    std::vector<PairFiles> files;
    for (int i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "pair_%03d", i);
        const fs::path pd = fs::path(dir) / id;
        fs::create_directories(pd);
        save_volume((pd / "fixed.nii.gz").string(), pairs[i].fixed);
        save_volume((pd / "moving.nii.gz").string(), pairs[i].moving);
        save_labels((pd / "labels_fixed.nii.gz").string(), pairs[i].labels_fixed);
        save_labels((pd / "labels_moving.nii.gz").string(), pairs[i].labels_moving);
        save_field((pd / "truth_field.nii.gz").string(), pairs[i].truth_field);
        std::ofstream((pd / "spec.txt").string()) << spec_to_text(specs[i]);
        const std::string rel = id;
        files.push_back({rel, rel + "/fixed.nii.gz", rel + "/moving.nii.gz", rel + "/labels_fixed.nii.gz",
                         rel + "/labels_moving.nii.gz"});
    }
    write_manifest(dir, files);
    return files;
}

} // namespace cfreg
