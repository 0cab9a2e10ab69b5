#pragma once

// Versioned checkpoint files.
//
// Layout: 8-byte magic "CFREGCK1", little-endian uint32 format version,
// uint64 header length, a JSON header of that many bytes, then every tensor
// listed in header["tensors"] as raw little-endian float32 in order.

#include "cfreg/network.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace cfreg {

struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
};

struct Checkpoint {
    NetworkParams params;
    std::uint64_t seed = 0;
    std::int64_t iteration = 0;
    std::string rng_state;   // textual std::mt19937_64 state; empty when unused
    AdamState adam;          // empty moments when the optimizer never ran
    std::string extra;       // free-form JSON text (resolved run config, notes)
};

inline constexpr std::uint32_t checkpoint_version = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

std::string config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const std::string& text);

} // namespace cfreg
