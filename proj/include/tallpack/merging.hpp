#pragma once

// Weight averaging, task arithmetic, TIES, and consensus filtering of the
// multi-task vector, plus the end-to-end merge pipeline.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "tallpack/baselines.hpp"
#include "tallpack/error.hpp"
#include "tallpack/parallel.hpp"
#include "tallpack/scorer.hpp"
#include "tallpack/tall_masks.hpp"
#include "tallpack/task_vectors.hpp"

namespace tallpack {

enum class MergeMethod { average, task_arithmetic, ties, consensus_ta, consensus_ties };

constexpr std::string_view method_name(MergeMethod m) noexcept {
    switch (m) {
    case MergeMethod::average: return "average";
    case MergeMethod::task_arithmetic: return "task_arithmetic";
    case MergeMethod::ties: return "ties";
    case MergeMethod::consensus_ta: return "consensus_ta";
    case MergeMethod::consensus_ties: return "consensus_ties";
    }
    return "?";
}

inline std::optional<MergeMethod> parse_method(std::string_view s) {
    for (auto m : {MergeMethod::average, MergeMethod::task_arithmetic, MergeMethod::ties,
                   MergeMethod::consensus_ta, MergeMethod::consensus_ties})
        if (method_name(m) == s) return m;
    return std::nullopt;
}

inline std::vector<double> default_alpha_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 10; ++i) grid.push_back(i / 10.0);
    return grid;
}

struct MergeConfig {
    MergeMethod method = MergeMethod::task_arithmetic;
    std::optional<double> alpha;                      // unset: tune over alpha_grid
    std::vector<double> alpha_grid = default_alpha_grid();
    std::int64_t consensus_k = 2;
    double ties_trim_fraction = 0.2;
    std::vector<double> lambda_grid = default_lambda_grid();

    void validate(std::size_t tasks) const {
        if (!(ties_trim_fraction > 0.0 && ties_trim_fraction <= 1.0))
            throw error(errc::bad_trim_fraction, std::to_string(ties_trim_fraction));
        if (consensus_k < 0 || static_cast<std::uint64_t>(consensus_k) > tasks)
            throw error(errc::bad_consensus_k,
                        "k=" + std::to_string(consensus_k) + " with T=" + std::to_string(tasks));
        if (alpha && !(*alpha > 0.0 && std::isfinite(*alpha)))
            throw error(errc::bad_fraction, "alpha must be a positive finite scalar");
        if (!alpha && alpha_grid.empty()) throw error(errc::empty_grid, "alpha grid is empty");
        if (lambda_grid.empty()) throw error(errc::empty_grid, "lambda grid is empty");
    }
};

/// Elementwise mean over every key: sequential f32 sum, then one divide.
inline TensorMap weight_average(const std::vector<TensorMap>& checkpoints) {
    if (checkpoints.empty()) throw error(errc::empty_input, "no checkpoints to average");
    TensorMap out = checkpoints.front();
    for (std::size_t c = 1; c < checkpoints.size(); ++c) {
        require_compatible(out, checkpoints[c]);
        for (const auto& [name, t] : checkpoints[c]) {
            auto& acc = out.at(name).data;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t.data[i];
        }
    }
    if (checkpoints.size() > 1) {
        const auto n = static_cast<float>(checkpoints.size());
        for (const auto& name : out.keys())
            for (auto& v : out.at(name).data) v /= n;
    }
    return out;
}

inline TensorMap task_arithmetic_merge(const TensorMap& pretrained, const std::vector<TaskVector>& vectors,
                                       double alpha) {
    return apply_vector(pretrained, sum_task_vectors(vectors), alpha);
}

/// TIES: per task keep the top trim_fraction of scalars by magnitude (one
/// global threshold per task vector), elect a sign per coordinate from the
/// sum of the kept values, then average only the kept values carrying that
/// sign. Zero-sum coordinates elect sign 0 and produce 0.
inline MultiTaskVector ties_merge(const std::vector<TaskVector>& vectors, double trim_fraction) {
    if (vectors.empty()) throw error(errc::empty_input, "no task vectors to merge");
    if (!(trim_fraction > 0.0 && trim_fraction <= 1.0))
        throw error(errc::bad_trim_fraction, std::to_string(trim_fraction));
    const auto& layout = vectors.front().tensors;
    for (const auto& v : vectors) require_compatible(layout, v.tensors);

    std::vector<std::vector<float>> trimmed(vectors.size());
    parallel_for(vectors.size(), [&](std::size_t t) {
        auto flat = detail::flatten(vectors[t].tensors);
        const auto keep = detail::top_k_selection(flat, detail::fraction_count(trim_fraction, flat.size()));
        for (std::size_t i = 0; i < flat.size(); ++i)
            if (!keep[i]) flat[i] = 0.0f;
        trimmed[t] = std::move(flat);
    });

    const std::size_t total = trimmed.front().size();
    std::vector<float> merged(total, 0.0f);
    for (std::size_t i = 0; i < total; ++i) {
        float sum = 0.0f;
        for (const auto& tv : trimmed) sum += tv[i];
        if (sum == 0.0f) continue;
        const bool positive = sum > 0.0f;
        float acc = 0.0f;
        std::uint32_t count = 0;
        for (const auto& tv : trimmed) {
            if ((positive && tv[i] > 0.0f) || (!positive && tv[i] < 0.0f)) {
                acc += tv[i];
                ++count;
            }
        }
        merged[i] = count ? acc / static_cast<float>(count) : 0.0f;
    }

    MultiTaskVector out{layout, vectors.size()};
    std::size_t at = 0;
    for (const auto& name : layout.keys()) {
        auto& data = out.tensors.at(name).data;
        std::copy_n(merged.begin() + static_cast<std::ptrdiff_t>(at), data.size(), data.begin());
        at += data.size();
    }
    return out;
}

/// Bit = 1 iff at least k of the T masks select the scalar. k = T + 1 gives
/// the empty mask.
inline Mask consensus_mask(const MaskSet& masks, std::int64_t k) {
    const auto sums = detail::bit_sums(masks);
    const auto& ref = masks.masks.front().mask;
    std::vector<std::uint8_t> flat(sums.size());
    for (std::size_t i = 0; i < sums.size(); ++i)
        flat[i] = static_cast<std::int64_t>(sums[i]) >= k ? 1 : 0;
    Mask out;
    std::size_t at = 0;
    for (const auto& [name, b] : ref.bits) {
        out.bits[name].assign(flat.begin() + static_cast<std::ptrdiff_t>(at),
                              flat.begin() + static_cast<std::ptrdiff_t>(at + b.size()));
        at += b.size();
    }
    return out;
}

/// Hadamard product of a 0/1 mask with tau_mtl. Unselected entries become +0.
inline MultiTaskVector consensus_merge(const MultiTaskVector& tau_mtl, const Mask& cmask) {
    detail::require_mask_layout(cmask, tau_mtl.tensors);
    MultiTaskVector out = tau_mtl;
    for (const auto& [name, bits] : cmask.bits) {
        auto& data = out.tensors.at(name).data;
        for (std::size_t i = 0; i < data.size(); ++i)
            if (!bits[i]) data[i] = 0.0f;
    }
    return out;
}

struct AlphaChoice {
    double alpha = 0.0;
    double score = 0.0;
};

/// Maximizes scorer(pretrained + alpha * v) over the grid; ties go to the
/// smaller alpha.
inline AlphaChoice tune_alpha(const TensorMap& pretrained, const MultiTaskVector& v,
                              const std::vector<double>& grid, const Scorer& scorer) {
    if (grid.empty()) throw error(errc::empty_grid, "alpha grid is empty");
    std::vector<double> scores(grid.size());
    auto evaluate = [&](std::size_t i) { scores[i] = scorer(apply_vector(pretrained, v, grid[i])); };
    if (scorer.serial) {
        for (std::size_t i = 0; i < grid.size(); ++i) evaluate(i);
    } else {
        parallel_for(grid.size(), evaluate);
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (scores[i] > scores[best] || (scores[i] == scores[best] && grid[i] < grid[best])) best = i;
    return {grid[best], scores[best]};
}

/// Negative mean L1 distance to every fine-tuned checkpoint.
inline Scorer mean_l1_scorer(std::vector<TensorMap> targets) {
    return Scorer{"neg_mean_l1", [ts = std::move(targets)](const TensorMap& c) {
                      double total = 0.0;
                      for (const auto& t : ts) total += l1_distance(c, t);
                      return -total / static_cast<double>(ts.size());
                  }};
}

struct LabeledCheckpoint {
    std::string label;
    TensorMap weights;
};

struct MergeResult {
    TensorMap model;
    MultiTaskVector vector;          // the vector actually applied (empty for average)
    std::optional<double> alpha;
    std::optional<MaskSet> masks;    // per-task TALL masks (consensus methods)
    std::optional<Mask> consensus;
    nlohmann::json metadata;
};

/// Per-task TALL masks against `tau_mtl`, each with its own lambda from the
/// grid. `scorers[t]` defaults to negative L1 distance to checkpoint t.
inline MaskSet build_task_masks(const TensorMap& pretrained, const std::vector<LabeledCheckpoint>& checkpoints,
                                const std::vector<TaskVector>& vectors, const MultiTaskVector& tau_mtl,
                                const std::vector<double>& lambda_grid,
                                const std::vector<Scorer>& scorers = {}) {
    std::vector<LambdaChoice> choices(vectors.size());
    parallel_for(vectors.size(), [&](std::size_t t) {
        const Scorer scorer = t < scorers.size() ? scorers[t] : l1_scorer(checkpoints[t].weights);
        Scorer serial = scorer;
        serial.serial = true; // the outer loop is already parallel
        choices[t] = tune_lambda(pretrained, vectors[t], tau_mtl, lambda_grid, serial);
    });
    MaskSet set;
    for (std::size_t t = 0; t < vectors.size(); ++t)
        set.add(checkpoints[t].label, std::move(choices[t].mask), choices[t].lambda);
    return set;
}

/// Full merge: task vectors, method-specific tau_mtl, optional consensus
/// filtering (masks built against that method's own tau_mtl), then alpha.
inline MergeResult merge_checkpoints(const TensorMap& pretrained, const std::vector<LabeledCheckpoint>& checkpoints,
                                     const TrainableKeySpec& keys, const MergeConfig& config,
                                     const std::optional<Scorer>& alpha_scorer = std::nullopt) {
    if (checkpoints.empty()) throw error(errc::empty_input, "no checkpoints to merge");
    const bool consensus = config.method == MergeMethod::consensus_ta ||
                           config.method == MergeMethod::consensus_ties;
    config.validate(checkpoints.size());

    MergeResult result;
    result.metadata = {{"method", method_name(config.method)}, {"num_tasks", checkpoints.size()}};
    nlohmann::json labels = nlohmann::json::array();
    for (const auto& c : checkpoints) labels.push_back(c.label);
    result.metadata["tasks"] = labels;

    if (config.method == MergeMethod::average) {
        std::vector<TensorMap> weights;
        for (const auto& c : checkpoints) weights.push_back(c.weights);
        result.model = weight_average(weights);
        result.metadata["alpha"] = nullptr;
        return result;
    }

    std::vector<TaskVector> vectors(checkpoints.size());
    parallel_for(checkpoints.size(), [&](std::size_t t) {
        vectors[t] = compute_task_vector(checkpoints[t].weights, pretrained, keys, checkpoints[t].label);
    });

    const bool ties = config.method == MergeMethod::ties || config.method == MergeMethod::consensus_ties;
    MultiTaskVector tau = ties ? ties_merge(vectors, config.ties_trim_fraction) : sum_task_vectors(vectors);
    if (ties) result.metadata["trim_fraction"] = config.ties_trim_fraction;

    if (consensus) {
        auto masks = build_task_masks(pretrained, checkpoints, vectors, tau, config.lambda_grid);
        auto cmask = consensus_mask(masks, config.consensus_k);
        tau = consensus_merge(tau, cmask);
        nlohmann::json lambdas = nlohmann::json::object();
        for (const auto& e : masks.masks) lambdas[e.label] = e.lambda;
        result.metadata["k"] = config.consensus_k;
        result.metadata["lambdas"] = lambdas;
        result.metadata["consensus_density"] = cmask.density();
        result.masks = std::move(masks);
        result.consensus = std::move(cmask);
    }

    double alpha;
    if (config.alpha) {
        alpha = *config.alpha;
    } else {
        std::vector<TensorMap> targets;
        for (const auto& c : checkpoints) targets.push_back(c.weights);
        const Scorer scorer = alpha_scorer ? *alpha_scorer : mean_l1_scorer(std::move(targets));
        alpha = tune_alpha(pretrained, tau, config.alpha_grid, scorer).alpha;
        result.metadata["alpha_tuned"] = true;
    }
    result.alpha = alpha;
    result.metadata["alpha"] = alpha;
    result.model = apply_vector(pretrained, tau, alpha);
    result.vector = std::move(tau);
    return result;
}

} // namespace tallpack
