#include "sseg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "sseg/autograd.hpp"
#include "sseg/losses.hpp"

namespace sseg {

namespace {

void validate_costs(const Tensor& costs) {
    if (costs.rank() != 2) throw std::invalid_argument("matching: cost matrix must be rank 2");
    std::int64_t k = costs.dim(0), n = costs.dim(1);
    if (k > n) {
        throw std::invalid_argument("matching: more pseudo-masks than predictions (" +
                                    std::to_string(k) + " > " + std::to_string(n) + ")");
    }
    for (std::int64_t i = 0; i < costs.size(); ++i) {
        if (!std::isfinite(costs[i])) {
            throw std::invalid_argument("matching: non-finite cost at flat index " +
                                        std::to_string(i));
        }
    }
}

// Matched-cost total in a fixed order (row 0 first). Every total reported or
// compared by this module goes through here so equal assignments produce
// bit-equal sums.
double assignment_total(const Tensor& costs, const std::vector<int>& col_of_row) {
    double total = 0.0;
    for (std::size_t i = 0; i < col_of_row.size(); ++i) {
        total += costs.at(static_cast<std::int64_t>(i), col_of_row[i]);
    }
    return total;
}

// Shortest augmenting path with row/column potentials (Jonker-Volgenant
// flavor), K <= N. Returns the matched column per row.
std::vector<int> solve_rectangular(const Tensor& costs) {
    int k = static_cast<int>(costs.dim(0));
    int n = static_cast<int>(costs.dim(1));
    const double inf = std::numeric_limits<double>::max() / 4.0;

    // 1-indexed; column 0 is the virtual start of each augmenting path.
    std::vector<double> u(static_cast<std::size_t>(k) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> match(static_cast<std::size_t>(n) + 1, 0);
    std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);

    for (int i = 1; i <= k; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> min_slack(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            int i0 = match[static_cast<std::size_t>(j0)];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                double cur = costs.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                             v[static_cast<std::size_t>(j)];
                if (cur < min_slack[static_cast<std::size_t>(j)]) {
                    min_slack[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (min_slack[static_cast<std::size_t>(j)] < delta) {
                    delta = min_slack[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    min_slack[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            int j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> col_of_row(static_cast<std::size_t>(k), -1);
    for (int j = 1; j <= n; ++j) {
        int row = match[static_cast<std::size_t>(j)];
        if (row > 0) col_of_row[static_cast<std::size_t>(row) - 1] = j - 1;
    }
    return col_of_row;
}

// Optimal completion cost for rows [row0, K) over the still-free columns,
// summed in row order.
double completion_cost(const Tensor& costs, int row0, const std::vector<char>& col_taken) {
    int k = static_cast<int>(costs.dim(0));
    int n = static_cast<int>(costs.dim(1));
    int sub_rows = k - row0;
    if (sub_rows == 0) return 0.0;
    std::vector<int> free_cols;
    for (int j = 0; j < n; ++j) {
        if (!col_taken[static_cast<std::size_t>(j)]) free_cols.push_back(j);
    }
    Tensor sub({sub_rows, static_cast<std::int64_t>(free_cols.size())}, 0.0);
    for (int r = 0; r < sub_rows; ++r) {
        for (std::size_t c = 0; c < free_cols.size(); ++c) {
            sub.at(r, static_cast<std::int64_t>(c)) = costs.at(row0 + r, free_cols[c]);
        }
    }
    std::vector<int> sub_assign = solve_rectangular(sub);
    double total = 0.0;
    for (int r = 0; r < sub_rows; ++r) {
        total += sub.at(r, sub_assign[static_cast<std::size_t>(r)]);
    }
    return total;
}

// Rebuilds the optimum column by column, preferring the lowest column index
// that still completes to the optimal total. The equality tests are exact:
// when intermediate rounding makes every candidate miss, the caller keeps
// the unrefined solution (which can only happen when the optimum is unique,
// so nothing is lost).
bool lex_refine(const Tensor& costs, double optimal_total, std::vector<int>& col_of_row) {
    int k = static_cast<int>(costs.dim(0));
    int n = static_cast<int>(costs.dim(1));
    std::vector<int> fixed(static_cast<std::size_t>(k), -1);
    std::vector<char> col_taken(static_cast<std::size_t>(n), 0);
    double prefix = 0.0;
    for (int i = 0; i < k; ++i) {
        bool found = false;
        for (int j = 0; j < n && !found; ++j) {
            if (col_taken[static_cast<std::size_t>(j)]) continue;
            col_taken[static_cast<std::size_t>(j)] = 1;
            double rest = completion_cost(costs, i + 1, col_taken);
            if (prefix + costs.at(i, j) + rest == optimal_total) {
                fixed[static_cast<std::size_t>(i)] = j;
                prefix += costs.at(i, j);
                found = true;
            } else {
                col_taken[static_cast<std::size_t>(j)] = 0;
            }
        }
        if (!found) return false;
    }
    if (assignment_total(costs, fixed) != optimal_total) return false;
    col_of_row = fixed;
    return true;
}

Assignment build_result(const Tensor& costs, const std::vector<int>& col_of_row) {
    Assignment out;
    std::vector<char> taken(static_cast<std::size_t>(costs.dim(1)), 0);
    for (std::size_t i = 0; i < col_of_row.size(); ++i) {
        out.pairs.emplace_back(static_cast<int>(i), col_of_row[i]);
        taken[static_cast<std::size_t>(col_of_row[i])] = 1;
    }
    for (int j = 0; j < static_cast<int>(costs.dim(1)); ++j) {
        if (!taken[static_cast<std::size_t>(j)]) out.unmatched_preds.push_back(j);
    }
    out.total_cost = assignment_total(costs, col_of_row);
    return out;
}

}  // namespace

Assignment hungarian(const Tensor& costs) {
    validate_costs(costs);
    if (costs.dim(0) == 0) return build_result(costs, {});
    std::vector<int> col_of_row = solve_rectangular(costs);
    double optimal_total = assignment_total(costs, col_of_row);
    lex_refine(costs, optimal_total, col_of_row);
    return build_result(costs, col_of_row);
}

Assignment brute_force_match(const Tensor& costs) {
    validate_costs(costs);
    std::int64_t k = costs.dim(0), n = costs.dim(1);
    if (n > 8) throw std::invalid_argument("brute_force_match: refusing N > 8");
    if (k == 0) return build_result(costs, {});

    std::vector<int> current(static_cast<std::size_t>(k), -1);
    std::vector<int> best;
    double best_total = std::numeric_limits<double>::infinity();
    std::vector<char> taken(static_cast<std::size_t>(n), 0);

    // Columns are tried in ascending order per row, so complete assignments
    // appear in lexicographic order; strict < keeps the first optimum.
    auto recurse = [&](auto&& self, int row) -> void {
        if (row == static_cast<int>(k)) {
            double total = assignment_total(costs, current);
            if (total < best_total) {
                best_total = total;
                best = current;
            }
            return;
        }
        for (int j = 0; j < static_cast<int>(n); ++j) {
            if (taken[static_cast<std::size_t>(j)]) continue;
            taken[static_cast<std::size_t>(j)] = 1;
            current[static_cast<std::size_t>(row)] = j;
            self(self, row + 1);
            taken[static_cast<std::size_t>(j)] = 0;
        }
    };
    recurse(recurse, 0);
    return build_result(costs, best);
}

double pair_cost(const Tensor& pred_logits, const Tensor& pseudo_binary, const LossWeights& w) {
    ag::NoGradGuard guard;
    ag::Var logits(pred_logits);
    double d = dice_loss(ag::sigmoid(logits), pseudo_binary, w.dice_smooth).value()[0];
    double f = focal_loss(logits, pseudo_binary, w.focal_gamma, w.focal_alpha).value()[0];
    return w.lambda_dice * d + w.lambda_focal * f;
}

}  // namespace sseg
