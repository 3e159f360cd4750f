// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "mrag/errors.hpp"

namespace mrag {

// Accumulation happens in double regardless of the storage type so that
// rankings are stable across float payloads of different magnitudes.
inline double dot(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
    return s;
}

inline double squared_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    return s;
}

inline double norm(std::span<const float> v) { return std::sqrt(squared_norm(v)); }

// Cosine similarity; a zero vector on either side yields 0 rather than NaN.
// Callers that must reject zero queries check the norm themselves.
inline double cosine(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw DimensionError("cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    double na = norm(a);
    double nb = norm(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

} // namespace mrag
