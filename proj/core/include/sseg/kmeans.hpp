#pragma once

#include <cstdint>
#include <vector>

#include "sseg/tensor.hpp"

namespace sseg {

struct KMeansResult {
    std::vector<std::int64_t> assignments;  // length n, values in [0, k)
    Tensor centroids;                       // [k, d]
    double inertia = 0.0;                   // sum of squared distances at termination
    std::vector<double> inertia_trace;      // inertia after each assignment pass
    int iterations = 0;
};

/// Lloyd's algorithm from k-means++ initialization. Stops when the largest
/// centroid movement drops below tol or after max_iters. Empty clusters are
/// refilled with the point currently farthest from its centroid. Ties in
/// assignment go to the lower centroid index. Deterministic given seed.
KMeansResult kmeans(const Tensor& points, std::int64_t k, std::uint64_t seed, int max_iters = 100,
                    double tol = 1e-6);

}  // namespace sseg
