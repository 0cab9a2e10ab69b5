#include "cfreg/checkpoint.hpp"

#include "json.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cfreg {

namespace {

using nlohmann::json;

constexpr char magic[8] = {'C', 'F', 'R', 'E', 'G', 'C', 'K', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json config_json(const ModelConfig& c)
{
    return json{{"affine_steps", c.affine_steps},
                {"deform_steps", c.deform_steps},
                {"encoder_dims", c.encoder_dims},
                {"decoder_dims", c.decoder_dims},
                {"attn_heads", c.attn_heads},
                {"encoder_attn_heads", c.encoder_attn_heads},
                {"window", c.window},
                {"mlp_ratio", c.mlp_ratio},
                {"variant", to_string(c.variant)}};
}

ModelConfig config_from(const json& j)
{
    ModelConfig c;
    c.affine_steps = j.at("affine_steps").get<int>();
    c.deform_steps = j.at("deform_steps").get<int>();
    c.encoder_dims = j.at("encoder_dims").get<std::vector<int>>();
    c.decoder_dims = j.at("decoder_dims").get<std::vector<int>>();
    c.attn_heads = j.at("attn_heads").get<std::vector<int>>();
    c.encoder_attn_heads = j.at("encoder_attn_heads").get<std::vector<int>>();
    c.window = j.at("window").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.validate();
    return c;
}

void write_floats(std::ofstream& out, const float* p, std::size_t n)
{
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

void read_floats(std::ifstream& in, float* p, std::size_t n, const std::string& path)
{
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) {
        throw std::runtime_error("checkpoint " + path + ": truncated tensor data");
    }
}

} // namespace

std::string config_to_json(const ModelConfig& c) { return config_json(c).dump(); }

ModelConfig config_from_json(const std::string& text) { return config_from(json::parse(text)); }

void save_checkpoint(const std::string& path, const Checkpoint& ck)
{
    json h;
    h["config"] = config_json(ck.params.config);
    h["seed"] = ck.seed;
    h["iteration"] = ck.iteration;
    h["rng_state"] = ck.rng_state;
    h["adam_step"] = ck.adam.step;
    const bool has_adam = !ck.adam.m.empty();
    h["has_adam"] = has_adam;
    h["extra"] = ck.extra;
    json tensors = json::array();
    for (const auto& p : ck.params.named) {
        tensors.push_back({{"name", p.name}, {"numel", p.var->value.size()}});
    }
    h["tensors"] = tensors;
    if (has_adam && (ck.adam.m.size() != ck.params.named.size() || ck.adam.v.size() != ck.params.named.size())) {
        throw std::invalid_argument("save_checkpoint: optimizer state does not match the parameter list");
    }

    const std::string header = h.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path);
    }
    out.write(magic, sizeof magic);
    const std::uint32_t version = checkpoint_version;
    const std::uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& p : ck.params.named) {
        write_floats(out, p.var->value.data().data(), p.var->value.size());
    }
    if (has_adam) {
        for (std::size_t i = 0; i < ck.params.named.size(); ++i) {
            write_floats(out, ck.adam.m[i].data(), ck.adam.m[i].size());
            write_floats(out, ck.adam.v[i].data(), ck.adam.v[i].size());
        }
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("missing checkpoint " + path);
    }
    char m[8] = {};
    in.read(m, sizeof m);
    if (!in || std::memcmp(m, magic, sizeof magic) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || version != checkpoint_version) {
        throw std::runtime_error("checkpoint " + path + ": unsupported version " + std::to_string(version));
    }
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw std::runtime_error("checkpoint " + path + ": truncated header");
    }
    const json h = json::parse(header);

    Checkpoint ck;
    ck.seed = h.at("seed").get<std::uint64_t>();
    ck.iteration = h.at("iteration").get<std::int64_t>();
    ck.rng_state = h.at("rng_state").get<std::string>();
    ck.adam.step = h.at("adam_step").get<std::int64_t>();
    ck.extra = h.value("extra", std::string());
    // Rebuild the parameter structure, then overwrite values.
    ck.params = init_params(config_from(h.at("config")), ck.seed);
    const auto& tensors = h.at("tensors");
    if (tensors.size() != ck.params.named.size()) {
        throw std::runtime_error("checkpoint " + path + ": parameter list does not match its config");
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        auto& p = ck.params.named[i];
        if (tensors[i].at("name").get<std::string>() != p.name ||
            tensors[i].at("numel").get<std::size_t>() != p.var->value.size()) {
            throw std::runtime_error("checkpoint " + path + ": tensor " + p.name + " does not match its config");
        }
        read_floats(in, p.var->value.data().data(), p.var->value.size(), path);
    }
    if (h.at("has_adam").get<bool>()) {
        for (const auto& p : ck.params.named) {
            std::vector<float> mm(p.var->value.size()), vv(p.var->value.size());
            read_floats(in, mm.data(), mm.size(), path);
            read_floats(in, vv.data(), vv.size(), path);
            ck.adam.m.push_back(std::move(mm));
            ck.adam.v.push_back(std::move(vv));
        }
    }
    return ck;
}

} // namespace cfreg
