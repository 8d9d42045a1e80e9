#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "sseg/tensor.hpp"

namespace sseg {

struct LossWeights;

/// Injective assignment of K pseudo-masks (rows) to N predictions (columns).
struct Assignment {
    std::vector<std::pair<int, int>> pairs;  // (pseudo, pred), ascending pseudo
    double total_cost = 0.0;                 // sum of matched costs, row-ascending order
    std::vector<int> unmatched_preds;        // ascending, size N-K
};

/// Minimum-cost assignment for a K x N cost matrix, K <= N (shortest
/// augmenting path). Among equal-cost optima the lexicographically smallest
/// pair list is returned. Throws on K > N or non-finite entries.
Assignment hungarian(const Tensor& costs);

/// Exhaustive oracle with the same tie-break; refuses N > 8.
Assignment brute_force_match(const Tensor& costs);

/// Matching cost of one (prediction, pseudo-segment) pair:
/// lambda_dice * dice(sigmoid(logits), target) + lambda_focal * focal(logits,
/// target). Inputs are same-shape; target values are 0/1.
double pair_cost(const Tensor& pred_logits, const Tensor& pseudo_binary, const LossWeights& w);

}  // namespace sseg
