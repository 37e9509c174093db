#pragma once

// Per-query importance estimation: accumulate each query's minimum matching
// cost over a step's training set, min-max normalize and reverse, then blend
// with the previous importance vector weighted by old/new class counts.

#include <cstddef>
#include <vector>

#include "combo/matching.hpp"

namespace combo {

struct ImportanceVector {
    std::vector<double> values;  // length N, entries in [0,1]
    int step = 1;                // the step this vector gates (I^t)

    static ImportanceVector initial(std::size_t n_queries) {
        return ImportanceVector{std::vector<double>(n_queries, 0.0), 1};
    }
};

struct CostBuffer {
    std::vector<double> values;  // length N, running sum of per-query min costs
    std::size_t images_seen = 0;

    static CostBuffer fresh(std::size_t n_queries) {
        return CostBuffer{std::vector<double>(n_queries, 0.0), 0};
    }
};

// buffer(n) += min_s A(n, s). Throws on a query-count mismatch.
void accumulate_buffer(CostBuffer& buffer, const CostMatrix& cost);

// I_Ct(n) = 1 - (B(n) - min B) / (max B - min B); all-equal buffers yield a
// uniform 1.0. Output = (n_old * I_t + n_new * I_Ct) / (n_old + n_new).
ImportanceVector finalize_importance(const CostBuffer& buffer, const ImportanceVector& current,
                                     std::size_t n_old, std::size_t n_new);

}  // namespace combo
