#pragma once

// Magnitude masking and magnitude pruning of individual task vectors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "tallpack/error.hpp"
#include "tallpack/tall_masks.hpp"
#include "tallpack/task_vectors.hpp"

namespace tallpack {

namespace detail {

/// ceil(fraction * total), snapping products that sit within rounding noise of
/// an integer (0.4 * 5 is 2.0000000000000004 in binary floating point).
inline std::uint64_t fraction_count(double fraction, std::uint64_t total) {
    const double exact = fraction * static_cast<double>(total);
    const double nearest = std::round(exact);
    if (std::fabs(exact - nearest) <= 1e-9 * std::max(1.0, exact))
        return static_cast<std::uint64_t>(nearest);
    return static_cast<std::uint64_t>(std::ceil(exact));
}

/// Flat indices (lexicographic tensor order, row-major) of the `k` largest
/// |values|. Equal magnitudes prefer the lower flat index.
inline std::vector<std::uint8_t> top_k_selection(const std::vector<float>& flat, std::uint64_t k) {
    std::vector<std::uint8_t> keep(flat.size(), 0);
    if (k >= flat.size()) {
        std::fill(keep.begin(), keep.end(), 1);
        return keep;
    }
    if (k == 0) return keep;
    std::vector<std::uint64_t> order(flat.size());
    std::iota(order.begin(), order.end(), std::uint64_t{0});
    auto before = [&](std::uint64_t a, std::uint64_t b) {
        const float ma = std::fabs(flat[a]);
        const float mb = std::fabs(flat[b]);
        return ma != mb ? ma > mb : a < b;
    };
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
    for (std::uint64_t i = 0; i < k; ++i) keep[order[i]] = 1;
    return keep;
}

inline std::vector<float> flatten(const TensorMap& map) {
    std::vector<float> out;
    out.reserve(map.total_elements());
    for (const auto& [_, t] : map) out.insert(out.end(), t.data.begin(), t.data.end());
    return out;
}

inline Mask unflatten_mask(const TensorMap& layout, const std::vector<std::uint8_t>& flat) {
    Mask m;
    std::size_t at = 0;
    for (const auto& [name, t] : layout) {
        m.bits[name].assign(flat.begin() + static_cast<std::ptrdiff_t>(at),
                            flat.begin() + static_cast<std::ptrdiff_t>(at + t.size()));
        at += t.size();
    }
    return m;
}

inline void require_fraction(double f, errc code) {
    if (!(f > 0.0 && f <= 1.0)) throw error(code, "fraction " + std::to_string(f) + " outside (0, 1]");
}

} // namespace detail

inline constexpr double default_magnitude_fraction = 0.10;

/// Selects the ceil(top_fraction * P') largest-magnitude scalars of tau_t,
/// ranked globally across tensors.
inline Mask magnitude_mask(const TaskVector& tau_t, double top_fraction = default_magnitude_fraction) {
    detail::require_fraction(top_fraction, errc::bad_fraction);
    const auto flat = detail::flatten(tau_t.tensors);
    const auto k = detail::fraction_count(top_fraction, flat.size());
    return detail::unflatten_mask(tau_t.tensors, detail::top_k_selection(flat, k));
}

inline TaskVector magnitude_prune(const TaskVector& tau_t, double keep_fraction) {
    const auto mask = magnitude_mask(tau_t, keep_fraction);
    TaskVector out = tau_t;
    for (const auto& [name, bits] : mask.bits) {
        auto& data = out.tensors.at(name).data;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!bits[i]) data[i] = 0.0f;
    }
    return out;
}

/// Pruning level whose storage matches the mask-based archive.
struct PruningBudget {
    std::uint64_t budget_bits = 0;      // (64 + T) P' + 32 F
    std::uint64_t base_bits = 0;        // dense part of a masked archive: 64 P' + 32 F
    std::uint64_t kept_per_task = 0;
    double keep_fraction = 0.0;
};

inline constexpr std::uint64_t pruned_value_bits = 32;
inline constexpr std::uint64_t pruned_index_bits = 32;

/// Each kept entry costs a 32-bit value plus a 32-bit index. The T P' bits a
/// masked archive spends on masks are split evenly across the T task vectors.
inline PruningBudget pruning_budget(std::uint64_t tasks, std::uint64_t trainable, std::uint64_t frozen) {
    if (tasks == 0) throw error(errc::empty_input, "T must be >= 1");
    PruningBudget b;
    b.budget_bits = (64 + tasks) * trainable + 32 * frozen;
    b.base_bits = 64 * trainable + 32 * frozen;
    const auto per_entry = pruned_value_bits + pruned_index_bits;
    b.kept_per_task = (b.budget_bits - b.base_bits) / (tasks * per_entry);
    b.kept_per_task = std::min(b.kept_per_task, trainable);
    b.keep_fraction = trainable ? static_cast<double>(b.kept_per_task) / static_cast<double>(trainable) : 0.0;
    return b;
}

} // namespace tallpack
