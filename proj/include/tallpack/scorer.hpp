#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "tallpack/tensor_store.hpp"

namespace tallpack {

/// Maps a candidate model to a score; higher is better. Must be deterministic.
/// Grid searches call it concurrently unless `serial` is set.
struct Scorer {
    std::string name;
    std::function<double(const TensorMap&)> fn;
    bool serial = false;

    double operator()(const TensorMap& candidate) const { return fn(candidate); }
};

/// Sum of |a - b| over every tensor, accumulated in double in key order.
inline double l1_distance(const TensorMap& a, const TensorMap& b) {
    require_compatible(a, b);
    double total = 0.0;
    auto ib = b.begin();
    for (auto ia = a.begin(); ia != a.end(); ++ia, ++ib) {
        const auto& x = ia->second.data;
        const auto& y = ib->second.data;
        for (std::size_t i = 0; i < x.size(); ++i)
            total += std::fabs(static_cast<double>(x[i]) - static_cast<double>(y[i]));
    }
    return total;
}

/// Weight-space proxy scorer: negative L1 distance to `target`.
inline Scorer l1_scorer(TensorMap target) {
    return Scorer{"neg_l1",
                  [t = std::move(target)](const TensorMap& c) { return -l1_distance(c, t); }};
}

} // namespace tallpack
