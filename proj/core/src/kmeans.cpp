#include "sseg/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "sseg/rng.hpp"

namespace sseg {

namespace {

double sqdist(const double* a, const double* b, std::int64_t d) {
    double s = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        s += diff * diff;
    }
    return s;
}

}  // namespace

KMeansResult kmeans(const Tensor& points, std::int64_t k, std::uint64_t seed, int max_iters,
                    double tol) {
    if (points.rank() != 2) throw std::invalid_argument("kmeans: points must be [n,d]");
    const std::int64_t n = points.dim(0), d = points.dim(1);
    if (k < 1) throw std::invalid_argument("kmeans: k must be positive");
    if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");

    Rng rng(seed);
    Tensor centroids({k, d});
    auto copy_point = [&](std::int64_t point, std::int64_t cluster) {
        for (std::int64_t j = 0; j < d; ++j) centroids.at(cluster, j) = points.at(point, j);
    };

    // k-means++ seeding
    copy_point(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n))), 0);
    std::vector<double> best_d2(static_cast<std::size_t>(n), std::numeric_limits<double>::max());
    for (std::int64_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double d2 = sqdist(&points.data()[i * d], &centroids.data()[(c - 1) * d], d);
            best_d2[static_cast<std::size_t>(i)] =
                std::min(best_d2[static_cast<std::size_t>(i)], d2);
            total += best_d2[static_cast<std::size_t>(i)];
        }
        std::int64_t pick;
        if (total <= 0.0) {
            pick = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n)));
        } else {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::int64_t i = 0; i < n; ++i) {
                acc += best_d2[static_cast<std::size_t>(i)];
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        }
        copy_point(pick, c);
    }

    KMeansResult res;
    res.assignments.assign(static_cast<std::size_t>(n), 0);
    std::vector<double> dist_to_own(static_cast<std::size_t>(n), 0.0);
    std::vector<std::int64_t> counts(static_cast<std::size_t>(k), 0);

    auto assign_pass = [&]() {
        double inertia = 0.0;
        std::fill(counts.begin(), counts.end(), 0);
        for (std::int64_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            std::int64_t arg = 0;
            for (std::int64_t c = 0; c < k; ++c) {
                const double d2 = sqdist(&points.data()[i * d], &centroids.data()[c * d], d);
                if (d2 < best) {
                    best = d2;
                    arg = c;
                }
            }
            res.assignments[static_cast<std::size_t>(i)] = arg;
            dist_to_own[static_cast<std::size_t>(i)] = best;
            inertia += best;
            ++counts[static_cast<std::size_t>(arg)];
        }
        return inertia;
    };

    auto refill_empties = [&]() {
        for (std::int64_t c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) continue;
            // steal the point farthest from its centroid (ties: lowest index)
            double far = -1.0;
            std::int64_t donor = -1;
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t own = res.assignments[static_cast<std::size_t>(i)];
                if (counts[static_cast<std::size_t>(own)] <= 1) continue;  // keep donors non-empty
                if (dist_to_own[static_cast<std::size_t>(i)] > far) {
                    far = dist_to_own[static_cast<std::size_t>(i)];
                    donor = i;
                }
            }
            if (donor < 0) continue;  // duplicated data; nothing sensible to move
            const std::int64_t prev = res.assignments[static_cast<std::size_t>(donor)];
            res.assignments[static_cast<std::size_t>(donor)] = c;
            dist_to_own[static_cast<std::size_t>(donor)] = 0.0;
            --counts[static_cast<std::size_t>(prev)];
            ++counts[static_cast<std::size_t>(c)];
        }
    };

    auto update_pass = [&]() {  // returns max centroid movement
        Tensor next({k, d});
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t c = res.assignments[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < d; ++j) next.at(c, j) += points.at(i, j);
        }
        double max_shift = 0.0;
        for (std::int64_t c = 0; c < k; ++c) {
            const double cnt = static_cast<double>(counts[static_cast<std::size_t>(c)]);
            if (cnt == 0.0) continue;
            double shift2 = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double v = next.at(c, j) / cnt;
                const double delta = v - centroids.at(c, j);
                shift2 += delta * delta;
                centroids.at(c, j) = v;
            }
            max_shift = std::max(max_shift, std::sqrt(shift2));
        }
        return max_shift;
    };

    for (int it = 0; it < max_iters; ++it) {
        res.inertia_trace.push_back(assign_pass());
        refill_empties();
        res.iterations = it + 1;
        if (update_pass() < tol) break;
    }
    // leave assignments consistent with the final centroids
    res.inertia = assign_pass();
    refill_empties();
    res.centroids = std::move(centroids);
    return res;
}

}  // namespace sseg
