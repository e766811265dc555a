#pragma once

#include <cmath>
#include <cstring>
#include <fnmatch.h>
#include <set>
#include <string>
#include <vector>

#include "tallpack/error.hpp"
#include "tallpack/tensor_store.hpp"

namespace tallpack {

/// Partition of a checkpoint's tensor names into trainable and frozen sets.
/// Frozen tensors must be identical across checkpoints and never enter task
/// vectors or masks.
struct TrainableKeySpec {
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;

    static TrainableKeySpec all_trainable(const TensorMap& model) {
        return {model.keys(), {}};
    }

    /// Tensors whose names match any of the shell-style patterns are frozen.
    static TrainableKeySpec from_frozen_patterns(const TensorMap& model,
                                                 const std::vector<std::string>& patterns) {
        TrainableKeySpec spec;
        for (const auto& name : model.keys()) {
            bool frozen = false;
            for (const auto& p : patterns)
                if (fnmatch(p.c_str(), name.c_str(), 0) == 0) frozen = true;
            (frozen ? spec.frozen : spec.trainable).push_back(name);
        }
        return spec;
    }

    void validate(const TensorMap& model) const {
        std::set<std::string> seen;
        for (const auto* list : {&trainable, &frozen}) {
            for (const auto& k : *list) {
                if (!seen.insert(k).second)
                    throw error(errc::invalid_key_spec, "'" + k + "' listed twice");
                if (!model.contains(k))
                    throw error(errc::invalid_key_spec, "'" + k + "' not present in the model");
            }
        }
        if (seen.size() != model.size())
            throw error(errc::invalid_key_spec, "key spec does not cover every tensor");
    }

    std::uint64_t trainable_count(const TensorMap& model) const {
        std::uint64_t n = 0;
        for (const auto& k : trainable) n += model.at(k).size();
        return n;
    }

    std::uint64_t frozen_count(const TensorMap& model) const {
        std::uint64_t n = 0;
        for (const auto& k : frozen) n += model.at(k).size();
        return n;
    }

    bool operator==(const TrainableKeySpec&) const = default;
};

/// tau_t = theta_t - theta_pre over the trainable keys.
struct TaskVector {
    TensorMap tensors;
    std::string source_label;
};

/// Aggregate of T task vectors (plain sum, TIES output, or a filtered sum).
struct MultiTaskVector {
    TensorMap tensors;
    std::size_t num_source_tasks = 1;
};

namespace detail {

inline void require_same_layout(const TensorMap& a, const TensorMap& b) {
    require_compatible(a, b);
}

/// Every key of `sub` must exist in `full` with the same shape.
inline void require_subset_layout(const TensorMap& sub, const TensorMap& full) {
    for (const auto& [name, t] : sub) {
        if (!full.contains(name))
            throw error(errc::incompatible_shapes, "'" + name + "' missing from base model");
        if (full.at(name).shape != t.shape)
            throw error(errc::incompatible_shapes, "'" + name + "' shape " + shape_string(t.shape) +
                                                       " vs " + shape_string(full.at(name).shape));
    }
}

} // namespace detail

inline TaskVector compute_task_vector(const TensorMap& finetuned, const TensorMap& pretrained,
                                      const TrainableKeySpec& spec, std::string label = {}) {
    require_compatible(finetuned, pretrained);
    spec.validate(pretrained);

    for (const auto& k : spec.frozen) {
        const auto& a = finetuned.at(k).data;
        const auto& b = pretrained.at(k).data;
        if (!a.empty() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0)
            throw error(errc::frozen_key_modified, "frozen tensor '" + k + "' differs from the base model");
    }

    TaskVector tv;
    tv.source_label = std::move(label);
    for (const auto& k : spec.trainable) {
        const auto& ft = finetuned.at(k);
        const auto& pre = pretrained.at(k);
        Tensor out{ft.shape, std::vector<float>(ft.size())};
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = ft.data[i] - pre.data[i];
        tv.tensors.insert(k, std::move(out));
    }
    return tv;
}

/// Elementwise f32 sum in list order.
inline MultiTaskVector sum_task_vectors(const std::vector<TaskVector>& vectors) {
    if (vectors.empty()) throw error(errc::empty_input, "no task vectors to sum");
    MultiTaskVector out{vectors.front().tensors, vectors.size()};
    for (std::size_t v = 1; v < vectors.size(); ++v) {
        detail::require_same_layout(out.tensors, vectors[v].tensors);
        for (const auto& [name, t] : vectors[v].tensors) {
            auto& acc = out.tensors.at(name).data;
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t.data[i];
        }
    }
    return out;
}

/// pretrained + alpha * v on v's keys; every other tensor is copied unchanged.
inline TensorMap apply_vector(const TensorMap& pretrained, const TensorMap& v, double alpha) {
    if (!std::isfinite(alpha)) throw error(errc::non_finite_value, "alpha must be finite");
    detail::require_subset_layout(v, pretrained);
    const auto a = static_cast<float>(alpha);
    TensorMap out = pretrained;
    for (const auto& [name, t] : v) {
        auto& dst = out.at(name).data;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += a * t.data[i];
    }
    return out;
}

inline TensorMap apply_vector(const TensorMap& pretrained, const TaskVector& v, double alpha) {
    return apply_vector(pretrained, v.tensors, alpha);
}

inline TensorMap apply_vector(const TensorMap& pretrained, const MultiTaskVector& v, double alpha) {
    return apply_vector(pretrained, v.tensors, alpha);
}

} // namespace tallpack
