#pragma once

// Synthetic checkpoint collections with known task supports, plus the
// accuracy-side metric helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tallpack/error.hpp"
#include "tallpack/scorer.hpp"
#include "tallpack/tensor_store.hpp"

namespace tallpack {

enum class SyntheticMode { disjoint, overlapping };

struct SyntheticSpec {
    std::uint64_t P = 0;             // trainable scalars
    std::uint64_t T = 1;
    std::uint64_t seed = 0;
    SyntheticMode mode = SyntheticMode::disjoint;
    double overlap_fraction = 0.0;   // overlapping mode: support size = floor(fraction * P)
    double value_scale = 0.1;
    bool layered = false;            // several tensors instead of a single "w"
};

struct SyntheticTasks {
    TensorMap pretrained;
    std::vector<TensorMap> finetuned;
    std::vector<std::string> labels;
    /// Sorted flat indices (lexicographic tensor order, row-major).
    std::vector<std::vector<std::uint64_t>> supports;
};

namespace detail {

/// Platform-independent sampling on top of mt19937_64, whose output sequence
/// is fixed by the standard (the <random> distributions are not).
class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed) : engine_(seed) {}

    double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Uniform integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

private:
    std::mt19937_64 engine_;
};

inline std::vector<std::pair<std::string, std::uint64_t>> synthetic_layout(const SyntheticSpec& spec) {
    if (!spec.layered) return {{"w", spec.P}};
    // Three tensors; names sort in declaration order.
    const std::uint64_t bias = spec.P / 8;
    const std::uint64_t norm = spec.P / 8;
    return {{"layer0.bias", bias}, {"layer0.weight", spec.P - bias - norm}, {"layer1.norm", norm}};
}

inline TensorMap split_flat(const SyntheticSpec& spec, const std::vector<float>& flat) {
    TensorMap out;
    std::size_t at = 0;
    for (const auto& [name, n] : synthetic_layout(spec)) {
        out.insert(name, Shape{n},
                   std::vector<float>(flat.begin() + static_cast<std::ptrdiff_t>(at),
                                      flat.begin() + static_cast<std::ptrdiff_t>(at + n)));
        at += n;
    }
    return out;
}

/// Pretrained values have magnitude in [1, 2). With value_scale <= 0.5 the
/// fine-tuned value stays within a factor of two of the base, so the f32
/// residual is exact and base + residual reproduces the checkpoint bit-exactly.
inline SyntheticTasks materialize(const SyntheticSpec& spec, SplitRng& rng,
                                  std::vector<std::vector<std::uint64_t>> supports) {
    if (!(spec.value_scale > 0.0)) throw error(errc::bad_fraction, "value_scale must be > 0");
    std::vector<float> base(spec.P);
    for (auto& v : base) {
        const double mag = rng.uniform(1.0, 2.0);
        v = static_cast<float>(rng.uniform01() < 0.5 ? -mag : mag);
    }

    SyntheticTasks out;
    out.pretrained = split_flat(spec, base);
    const double floor_mag = 1e-3 * spec.value_scale;
    for (std::uint64_t t = 0; t < spec.T; ++t) {
        auto& support = supports[t];
        std::sort(support.begin(), support.end());
        std::vector<float> ft = base;
        for (auto idx : support) {
            float updated;
            do {
                double delta;
                do {
                    delta = rng.uniform(-spec.value_scale, spec.value_scale);
                } while (std::fabs(delta) < floor_mag);
                updated = static_cast<float>(static_cast<double>(base[idx]) + delta);
            } while (updated == base[idx]);
            ft[idx] = updated;
        }
        out.finetuned.push_back(split_flat(spec, ft));
        out.labels.push_back("task" + std::to_string(t));
    }
    out.supports = std::move(supports);
    return out;
}

} // namespace detail

/// A seed-determined permutation of [0, P) cut into T equal blocks; task t
/// differs from the base model exactly on block t.
inline SyntheticTasks gen_disjoint_tasks(const SyntheticSpec& spec) {
    if (spec.T == 0) throw error(errc::empty_input, "T must be >= 1");
    if (spec.P % spec.T != 0)
        throw error(errc::indivisible_p, "P=" + std::to_string(spec.P) + " not divisible by T=" + std::to_string(spec.T));
    detail::SplitRng rng(spec.seed);
    std::vector<std::uint64_t> perm(spec.P);
    for (std::uint64_t i = 0; i < spec.P; ++i) perm[i] = i;
    rng.shuffle(perm);
    const auto block = spec.P / spec.T;
    std::vector<std::vector<std::uint64_t>> supports(spec.T);
    for (std::uint64_t t = 0; t < spec.T; ++t)
        supports[t].assign(perm.begin() + static_cast<std::ptrdiff_t>(t * block),
                           perm.begin() + static_cast<std::ptrdiff_t>((t + 1) * block));
    return detail::materialize(spec, rng, std::move(supports));
}

/// Independent random supports of size floor(overlap_fraction * P) per task.
inline SyntheticTasks gen_overlapping_tasks(const SyntheticSpec& spec) {
    if (spec.T == 0) throw error(errc::empty_input, "T must be >= 1");
    if (!(spec.overlap_fraction >= 0.0 && spec.overlap_fraction <= 1.0))
        throw error(errc::bad_fraction, "overlap_fraction outside [0, 1]");
    detail::SplitRng rng(spec.seed);
    const auto size = static_cast<std::uint64_t>(std::floor(spec.overlap_fraction * static_cast<double>(spec.P)));
    std::vector<std::vector<std::uint64_t>> supports(spec.T);
    std::vector<std::uint64_t> perm(spec.P);
    for (auto& s : supports) {
        for (std::uint64_t i = 0; i < spec.P; ++i) perm[i] = i;
        rng.shuffle(perm);
        s.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(size));
    }
    return detail::materialize(spec, rng, std::move(supports));
}

inline SyntheticTasks generate_tasks(const SyntheticSpec& spec) {
    return spec.mode == SyntheticMode::disjoint ? gen_disjoint_tasks(spec) : gen_overlapping_tasks(spec);
}

/// Mean over tasks of merged / fine-tuned accuracy, in percent. Values above
/// 100 are legitimate.
inline double normalized_accuracy(const std::vector<double>& merged_accs, const std::vector<double>& finetuned_accs) {
    if (merged_accs.size() != finetuned_accs.size())
        throw error(errc::length_mismatch, "accuracy lists differ in length");
    if (merged_accs.empty()) throw error(errc::empty_input, "no accuracies");
    double total = 0.0;
    for (std::size_t t = 0; t < merged_accs.size(); ++t) {
        if (!(finetuned_accs[t] > 0.0))
            throw error(errc::zero_denominator, "fine-tuned accuracy of task " + std::to_string(t));
        total += merged_accs[t] / finetuned_accs[t];
    }
    return 100.0 * total / static_cast<double>(merged_accs.size());
}

} // namespace tallpack
