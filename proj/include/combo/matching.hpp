#pragma once

// Bipartite matching between predicted segments and labels: cost matrix,
// optimal assignment (Hungarian with potentials), and an exhaustive oracle.
// Ties between equally-cheap assignments are broken toward the
// lexicographically smallest pair list ordered by (query, label).

#include <cstddef>
#include <utility>
#include <vector>

#include "combo/domain.hpp"
#include "combo/tensor.hpp"

namespace combo {

struct CostMatrix {
    Tensor<double> values;  // [N,S]
    double lambda_cls = 2.0;
    double lambda_mask = 5.0;

    std::size_t n_queries() const { return values.rows(); }
    std::size_t n_labels() const { return values.cols(); }
};

struct MatchResult {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query, label), sorted by query
    std::vector<std::size_t> unmatched_queries;              // ascending

    // Canonical total: selected entries summed in pair order.
    double total(const CostMatrix& cost) const {
        double t = 0.0;
        for (auto [n, s] : pairs) t += cost.values.at(n, s);
        return t;
    }
};

// A(n,s) = -lambda_cls * class_probs(n, c_s) + lambda_mask * mask_loss(mask_logits(n), m_s).
// class_probs rows must already be restricted/normalized distributions over the
// full channel axis (masked channels exactly zero). Throws "no targets" when
// labels is empty.
CostMatrix cost_matrix(const Tensor<double>& class_probs, const Tensor<float>& mask_logits,
                       const std::vector<SegmentLabel>& labels, double lambda_cls,
                       double lambda_mask);

// Minimum-cost assignment of min(N,S) pairs, deterministic lexicographic
// tie-break. Throws on an empty matrix.
MatchResult hungarian(const CostMatrix& cost);

// Exhaustive enumeration with the identical tie-break; requires min(N,S) <= 7.
MatchResult brute_force_match(const CostMatrix& cost);

}  // namespace combo
