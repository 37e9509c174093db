#include "combo/matching.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include "combo/losses.hpp"

namespace combo {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potentials-based Hungarian on the matrix restricted to `rows` x `cols`
// (index lists into the full matrix). Assigns every element of the smaller
// side; returns pairs in full-matrix coordinates, sorted by row.
//
// The assignment is optimal but tie-breaks are arbitrary; the lexicographic
// refinement happens in hungarian() below.
std::vector<std::pair<std::size_t, std::size_t>> solve_sub(
    const Tensor<double>& a, std::vector<std::size_t> rows, std::vector<std::size_t> cols) {
    bool transposed = rows.size() > cols.size();
    if (transposed) std::swap(rows, cols);
    std::size_t n = rows.size(), m = cols.size();
    if (n == 0) return {};

    auto cost = [&](std::size_t i, std::size_t j) -> double {
        return transposed ? a.at(cols[j], rows[i]) : a.at(rows[i], cols[j]);
    };

    // 1-based classic formulation: u over rows, v over cols, p[j] = row matched
    // to col j (p[0] is the working row).
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            std::size_t i0 = p[j0], j1 = 0;
            double delta = kInf;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        std::size_t ri = p[j] - 1, cj = j - 1;
        if (transposed)
            pairs.emplace_back(cols[cj], rows[ri]);
        else
            pairs.emplace_back(rows[ri], cols[cj]);
    }
    std::sort(pairs.begin(), pairs.end());
    return pairs;
}

double canonical_total(const Tensor<double>& a,
                       const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    double t = 0.0;
    for (auto [n, s] : pairs) t += a.at(n, s);
    return t;
}

MatchResult finish(std::size_t n_queries,
                   std::vector<std::pair<std::size_t, std::size_t>> pairs) {
    std::sort(pairs.begin(), pairs.end());
    MatchResult r;
    r.pairs = std::move(pairs);
    std::vector<bool> matched(n_queries, false);
    for (auto [n, s] : r.pairs) matched[n] = true;
    for (std::size_t n = 0; n < n_queries; ++n)
        if (!matched[n]) r.unmatched_queries.push_back(n);
    return r;
}

}  // namespace

CostMatrix cost_matrix(const Tensor<double>& class_probs, const Tensor<float>& mask_logits,
                       const std::vector<SegmentLabel>& labels, double lambda_cls,
                       double lambda_mask) {
    if (labels.empty()) throw std::invalid_argument("cost_matrix: no targets");
    std::size_t n = class_probs.rows();
    if (mask_logits.dim(0) != n) throw std::invalid_argument("cost_matrix: query count mismatch");
    std::size_t hw = mask_logits.dim(1) * mask_logits.dim(2);

    CostMatrix cm;
    cm.lambda_cls = lambda_cls;
    cm.lambda_mask = lambda_mask;
    cm.values = Tensor<double>({n, labels.size()});
    for (std::size_t s = 0; s < labels.size(); ++s) {
        const auto& lab = labels[s];
        if (lab.mask.size() != hw) throw std::invalid_argument("cost_matrix: mask shape mismatch");
        if (lab.class_id < 1 || static_cast<std::size_t>(lab.class_id) >= class_probs.cols())
            throw std::invalid_argument("cost_matrix: label class out of range");
        for (std::size_t q = 0; q < n; ++q) {
            double phi = class_probs.at(q, static_cast<std::size_t>(lab.class_id));
            double lm = mask_loss_value(mask_logits.data.data() + q * hw, lab.mask.data.data(), hw);
            cm.values.at(q, s) = -lambda_cls * phi + lambda_mask * lm;
        }
    }
    for (double vvv : cm.values.data)
        if (!std::isfinite(vvv)) throw std::domain_error("cost_matrix: non-finite entry");
    return cm;
}

MatchResult hungarian(const CostMatrix& cost) {
    const auto& a = cost.values;
    std::size_t n = a.rows(), s = a.cols();
    if (n == 0 || s == 0) throw std::invalid_argument("hungarian: empty matrix");
    std::size_t want = std::min(n, s);

    // Greedy lexicographic refinement: walk queries in order and commit the
    // cheapest completion, preferring the smallest label and preferring a
    // match over skipping when totals tie.
    std::vector<std::pair<std::size_t, std::size_t>> forced;
    std::vector<bool> col_used(s, false);
    for (std::size_t q = 0; q < n && forced.size() < want; ++q) {
        std::vector<std::size_t> rest_rows;
        for (std::size_t r = q + 1; r < n; ++r) rest_rows.push_back(r);
        std::vector<std::size_t> free_cols_base;
        for (std::size_t c = 0; c < s; ++c)
            if (!col_used[c]) free_cols_base.push_back(c);

        double best_total = kInf;
        std::size_t best_col = s;  // s == skip
        bool can_skip = rest_rows.size() >= want - forced.size();
        for (std::size_t c = 0; c < s; ++c) {
            if (col_used[c]) continue;
            std::vector<std::size_t> free_cols;
            for (std::size_t cc : free_cols_base)
                if (cc != c) free_cols.push_back(cc);
            auto completion = solve_sub(a, rest_rows, free_cols);
            auto candidate = forced;
            candidate.emplace_back(q, c);
            candidate.insert(candidate.end(), completion.begin(), completion.end());
            std::sort(candidate.begin(), candidate.end());
            double t = canonical_total(a, candidate);
            if (t < best_total) {
                best_total = t;
                best_col = c;
            }
        }
        if (can_skip) {
            auto completion = solve_sub(a, rest_rows, free_cols_base);
            auto candidate = forced;
            candidate.insert(candidate.end(), completion.begin(), completion.end());
            std::sort(candidate.begin(), candidate.end());
            double t = canonical_total(a, candidate);
            if (t < best_total) {
                best_total = t;
                best_col = s;
            }
        }
        if (best_col < s) {
            forced.emplace_back(q, best_col);
            col_used[best_col] = true;
        }
    }
    return finish(n, std::move(forced));
}

MatchResult brute_force_match(const CostMatrix& cost) {
    const auto& a = cost.values;
    std::size_t n = a.rows(), s = a.cols();
    if (n == 0 || s == 0) throw std::invalid_argument("brute_force_match: empty matrix");
    std::size_t want = std::min(n, s);
    if (want > 7) throw std::invalid_argument("brute_force_match: size bound exceeded");

    // Enumerate injections of the smaller side into the larger; keep the
    // candidate with the smallest (total, lexicographic pair list).
    bool rows_small = n <= s;
    std::size_t small = rows_small ? n : s;
    std::size_t large = rows_small ? s : n;

    std::vector<std::pair<std::size_t, std::size_t>> best, current;
    double best_total = kInf;
    bool have_best = false;
    std::vector<bool> used(large, false);

    std::function<void(std::size_t)> recurse = [&](std::size_t i) {
        if (i == small) {
            auto candidate = current;
            std::sort(candidate.begin(), candidate.end());
            double t = canonical_total(a, candidate);
            if (!have_best || t < best_total ||
                (t == best_total && candidate < best)) {
                have_best = true;
                best_total = t;
                best = candidate;
            }
            return;
        }
        for (std::size_t j = 0; j < large; ++j) {
            if (used[j]) continue;
            used[j] = true;
            current.emplace_back(rows_small ? i : j, rows_small ? j : i);
            recurse(i + 1);
            current.pop_back();
            used[j] = false;
        }
    };
    recurse(0);
    return finish(n, std::move(best));
}

}  // namespace combo
