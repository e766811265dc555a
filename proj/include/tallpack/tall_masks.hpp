#pragma once

// Per-task binary masks over the trainable scalars of a multi-task vector,
// agreement statistics across tasks, and the lambda grid search.

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tallpack/error.hpp"
#include "tallpack/parallel.hpp"
#include "tallpack/scorer.hpp"
#include "tallpack/task_vectors.hpp"
#include "tallpack/tensor_store.hpp"

namespace tallpack {

/// One 0/1 byte per scalar, keyed by tensor name in row-major element order.
/// The packed 1-bit form lives in compression.hpp.
struct Mask {
    std::map<std::string, std::vector<std::uint8_t>> bits;

    std::uint64_t bit_count() const noexcept {
        std::uint64_t n = 0;
        for (const auto& [_, b] : bits) n += b.size();
        return n;
    }

    std::uint64_t count_ones() const noexcept {
        std::uint64_t n = 0;
        for (const auto& [_, b] : bits)
            for (auto v : b) n += v;
        return n;
    }

    double density() const noexcept {
        const auto total = bit_count();
        return total ? static_cast<double>(count_ones()) / static_cast<double>(total) : 0.0;
    }

    /// True iff every 1-bit of *this is also set in `other`.
    bool subset_of(const Mask& other) const {
        if (bits.size() != other.bits.size()) return false;
        for (const auto& [name, b] : bits) {
            auto it = other.bits.find(name);
            if (it == other.bits.end() || it->second.size() != b.size()) return false;
            for (std::size_t i = 0; i < b.size(); ++i)
                if (b[i] && !it->second[i]) return false;
        }
        return true;
    }

    std::vector<std::uint8_t> flatten() const {
        std::vector<std::uint8_t> out;
        out.reserve(bit_count());
        for (const auto& [_, b] : bits) out.insert(out.end(), b.begin(), b.end());
        return out;
    }

    bool operator==(const Mask&) const = default;

    static Mask filled(const TensorMap& layout, std::uint8_t value) {
        Mask m;
        for (const auto& [name, t] : layout) m.bits[name].assign(t.size(), value);
        return m;
    }
};

struct MaskSet {
    struct Entry {
        std::string label;
        Mask mask;
        double lambda = 0.0;
    };

    std::vector<Entry> masks;
    std::vector<std::string> key_order;

    std::size_t num_tasks() const noexcept { return masks.size(); }

    void add(std::string label, Mask mask, double lambda) {
        if (masks.empty()) {
            key_order.clear();
            for (const auto& [name, _] : mask.bits) key_order.push_back(name);
        }
        validate_against(mask);
        masks.push_back({std::move(label), std::move(mask), lambda});
    }

    void validate_against(const Mask& m) const {
        if (masks.empty()) return;
        const auto& ref = masks.front().mask.bits;
        if (m.bits.size() != ref.size())
            throw error(errc::incompatible_shapes, "mask tensor sets differ");
        for (const auto& [name, b] : ref) {
            auto it = m.bits.find(name);
            if (it == m.bits.end() || it->second.size() != b.size())
                throw error(errc::incompatible_shapes, "mask layout differs at '" + name + "'");
        }
    }
};

/// Exact ratio; summing numerators over all n recovers the denominator.
struct Fraction {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 1;

    double value() const noexcept {
        return denominator ? static_cast<double>(numerator) / static_cast<double>(denominator) : 0.0;
    }
};

namespace detail {

inline void require_mask_layout(const Mask& m, const TensorMap& layout) {
    if (m.bits.size() != layout.size())
        throw error(errc::incompatible_shapes, "mask covers a different tensor set");
    for (const auto& [name, t] : layout) {
        auto it = m.bits.find(name);
        if (it == m.bits.end() || it->second.size() != t.size())
            throw error(errc::incompatible_shapes, "mask does not match tensor '" + name + "'");
    }
}

/// Per-scalar sums of the T mask bits, flattened in key order.
inline std::vector<std::uint32_t> bit_sums(const MaskSet& set) {
    if (set.masks.empty()) throw error(errc::empty_input, "empty mask set");
    std::vector<std::uint32_t> sums(set.masks.front().mask.bit_count(), 0);
    for (const auto& e : set.masks) {
        set.validate_against(e.mask);
        std::size_t i = 0;
        for (const auto& [_, b] : e.mask.bits)
            for (auto v : b) sums[i++] += v;
    }
    return sums;
}

} // namespace detail

/// Bit = 1 iff |tau_t| >= lambda * |tau_mtl - tau_t|. Equality selects the
/// scalar. The product is formed in double so scaling by lambda is monotone.
inline Mask build_tall_mask(const TaskVector& tau_t, const MultiTaskVector& tau_mtl, double lambda) {
    if (!(lambda > 0.0)) throw error(errc::non_positive_lambda, "lambda must be > 0");
    require_compatible(tau_t.tensors, tau_mtl.tensors);
    Mask m;
    for (const auto& [name, t] : tau_t.tensors) {
        const auto& mtl = tau_mtl.tensors.at(name).data;
        auto& bits = m.bits[name];
        bits.resize(t.size());
        for (std::size_t i = 0; i < bits.size(); ++i) {
            const float rest = mtl[i] - t.data[i];
            bits[i] = static_cast<double>(std::fabs(t.data[i])) >= lambda * static_cast<double>(std::fabs(rest));
        }
    }
    return m;
}

/// Per-scalar brute force: cost(m) = |m * tau_mtl - tau_t| for m in {0,1};
/// the cheaper choice wins and ties go to 1.
inline Mask oracle_mask(const TaskVector& tau_t, const MultiTaskVector& tau_mtl) {
    require_compatible(tau_t.tensors, tau_mtl.tensors);
    Mask m;
    for (const auto& [name, t] : tau_t.tensors) {
        const auto& mtl = tau_mtl.tensors.at(name).data;
        auto& bits = m.bits[name];
        bits.resize(t.size());
        for (std::size_t i = 0; i < bits.size(); ++i) {
            float cost[2];
            for (int choice = 0; choice < 2; ++choice)
                cost[choice] = std::fabs(static_cast<float>(choice) * mtl[i] - t.data[i]);
            bits[i] = cost[1] <= cost[0] ? 1 : 0;
        }
    }
    return m;
}

/// pretrained + alpha * (mask o tau_mtl) on the masked keys.
inline TensorMap masked_apply(const TensorMap& pretrained, const MultiTaskVector& tau_mtl,
                              const Mask& mask, double alpha = 1.0) {
    detail::require_subset_layout(tau_mtl.tensors, pretrained);
    detail::require_mask_layout(mask, tau_mtl.tensors);
    const auto a = static_cast<float>(alpha);
    TensorMap out = pretrained;
    for (const auto& [name, t] : tau_mtl.tensors) {
        auto& dst = out.at(name).data;
        const auto& bits = mask.bits.at(name);
        if (alpha == 1.0) {
            for (std::size_t i = 0; i < dst.size(); ++i)
                if (bits[i]) dst[i] += t.data[i];
        } else {
            for (std::size_t i = 0; i < dst.size(); ++i)
                if (bits[i]) dst[i] += a * t.data[i];
        }
    }
    return out;
}

/// Scalar counts indexed by how many of the T masks select them.
struct WeightTaxonomy {
    std::vector<std::uint64_t> counts; // size T + 1
    std::uint64_t total = 0;

    std::size_t num_tasks() const noexcept { return counts.empty() ? 0 : counts.size() - 1; }
    std::uint64_t catastrophic() const { return counts.at(0); }
    std::uint64_t selfish() const { return counts.size() > 1 ? counts[1] : 0; }
    std::uint64_t general() const {
        std::uint64_t n = 0;
        for (std::size_t i = 2; i < counts.size(); ++i) n += counts[i];
        return n;
    }
    std::uint64_t universal() const { return counts.back(); }

    double fraction(std::size_t n) const {
        return total ? static_cast<double>(counts.at(n)) / static_cast<double>(total) : 0.0;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "n,count,fraction\n";
        for (std::size_t n = 0; n < counts.size(); ++n) os << n << ',' << counts[n] << ',' << fraction(n) << '\n';
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t n = 0; n < counts.size(); ++n)
            rows.push_back({{"n", n}, {"count", counts[n]}, {"fraction", fraction(n)}});
        return {{"num_tasks", num_tasks()},
                {"total", total},
                {"rows", rows},
                {"catastrophic", catastrophic()},
                {"selfish", selfish()},
                {"general", general()},
                {"universal", universal()}};
    }
};

inline WeightTaxonomy classify_weights(const MaskSet& masks) {
    const auto sums = detail::bit_sums(masks);
    WeightTaxonomy tax;
    tax.counts.assign(masks.num_tasks() + 1, 0);
    tax.total = sums.size();
    for (auto s : sums) ++tax.counts[s];
    return tax;
}

/// Fraction of trainable scalars selected by exactly n of the T masks.
inline Fraction mask_agreement(const MaskSet& masks, std::int64_t n) {
    if (n < 0 || static_cast<std::uint64_t>(n) > masks.num_tasks())
        throw error(errc::out_of_range_n, "n=" + std::to_string(n) + " outside [0, T]");
    const auto tax = classify_weights(masks);
    return {tax.counts[static_cast<std::size_t>(n)], tax.total};
}

inline const std::vector<double>& default_lambda_grid() {
    static const std::vector<double> grid{0.2, 0.3, 0.4, 0.5, 0.6};
    return grid;
}

struct LambdaChoice {
    double lambda = 0.0;
    double score = 0.0;
    Mask mask;
};

/// Scores pretrained + m(lambda) o tau_mtl for every grid value and keeps the
/// best; equal scores resolve to the largest lambda.
inline LambdaChoice tune_lambda(const TensorMap& pretrained, const TaskVector& tau_t,
                                const MultiTaskVector& tau_mtl, const std::vector<double>& grid,
                                const Scorer& scorer) {
    if (grid.empty()) throw error(errc::empty_grid, "lambda grid is empty");
    for (double l : grid)
        if (!(l > 0.0)) throw error(errc::non_positive_lambda, "grid value " + std::to_string(l));

    std::vector<Mask> masks(grid.size());
    std::vector<double> scores(grid.size());
    auto evaluate = [&](std::size_t i) {
        masks[i] = build_tall_mask(tau_t, tau_mtl, grid[i]);
        scores[i] = scorer(masked_apply(pretrained, tau_mtl, masks[i]));
    };
    if (scorer.serial) {
        for (std::size_t i = 0; i < grid.size(); ++i) evaluate(i);
    } else {
        parallel_for(grid.size(), evaluate);
    }

    std::size_t best = 0;
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] > grid[best])) best = i;
    }
    return {grid[best], scores[best], std::move(masks[best])};
}

} // namespace tallpack
