#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "tallpack/tallpack.hpp"

namespace tallpack::test {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tallpack_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline TensorMap single(const std::string& name, std::vector<float> values) {
    TensorMap m;
    const auto n = values.size();
    m.insert(name, Shape{n}, std::move(values));
    return m;
}

inline TaskVector tv(std::vector<float> values, std::string label = "t") {
    return {single("w", std::move(values)), std::move(label)};
}

inline MultiTaskVector mtv(std::vector<float> values, std::size_t tasks = 1) {
    return {single("w", std::move(values)), tasks};
}

inline Mask flat_mask(std::vector<std::uint8_t> bits, const std::string& name = "w") {
    Mask m;
    m.bits[name] = std::move(bits);
    return m;
}

inline MaskSet mask_set(const std::vector<std::vector<std::uint8_t>>& masks) {
    MaskSet set;
    for (std::size_t t = 0; t < masks.size(); ++t) set.add("m" + std::to_string(t), flat_mask(masks[t]), 1.0);
    return set;
}

inline std::vector<float> uniform_values(std::mt19937& rng, std::size_t n, float lo = -1.0f, float hi = 1.0f) {
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

/// Random multi-tensor map with shapes drawn from a small menu.
inline TensorMap random_map(std::mt19937& rng, std::size_t tensors) {
    TensorMap m;
    std::uniform_int_distribution<int> dim(0, 7);
    for (std::size_t i = 0; i < tensors; ++i) {
        Shape shape{static_cast<std::uint64_t>(dim(rng)), static_cast<std::uint64_t>(dim(rng) + 1)};
        m.insert("t" + std::to_string(i) + ".weight", shape, uniform_values(rng, element_count(shape), -3.0f, 3.0f));
    }
    return m;
}

} // namespace tallpack::test
