#pragma once

#include "cfreg/image.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <unistd.h>

namespace cfreg::test {

/// Fresh per-test directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("cfreg_tests_" + std::to_string(::getpid())) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream(path, std::ios::binary) << text;
}

inline std::string read_text(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T = float>
Image<T> random_image(int channels, Dims s, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Image<T> out(channels, s);
    for (auto& v : out.data()) {
        v = static_cast<T>(u(rng));
    }
    return out;
}

/// max |a - b| / max(max |b|, floor)
template <class A, class B>
double rel_error(const A& a, const B& b, double floor = 1e-12)
{
    double num = 0.0, den = floor;
    for (std::size_t i = 0; i < std::size(a); ++i) {
        num = std::max(num, std::abs(double(a[i]) - double(b[i])));
        den = std::max(den, std::abs(double(b[i])));
    }
    return num / den;
}

} // namespace cfreg::test
