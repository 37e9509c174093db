#include "combo/importance.hpp"

#include <algorithm>
#include <stdexcept>

namespace combo {

void accumulate_buffer(CostBuffer& buffer, const CostMatrix& cost) {
    if (cost.n_queries() != buffer.values.size())
        throw std::invalid_argument("accumulate_buffer: query count mismatch");
    if (cost.n_labels() == 0) throw std::invalid_argument("accumulate_buffer: no labels");
    for (std::size_t q = 0; q < buffer.values.size(); ++q) {
        double m = cost.values.at(q, 0);
        for (std::size_t s = 1; s < cost.n_labels(); ++s)
            m = std::min(m, cost.values.at(q, s));
        buffer.values[q] += m;
    }
    ++buffer.images_seen;
}

ImportanceVector finalize_importance(const CostBuffer& buffer, const ImportanceVector& current,
                                     std::size_t n_old, std::size_t n_new) {
    if (buffer.images_seen < 1)
        throw std::invalid_argument("finalize_importance: empty buffer");
    if (current.values.size() != buffer.values.size())
        throw std::invalid_argument("finalize_importance: length mismatch");
    if (n_new == 0) throw std::invalid_argument("finalize_importance: n_new must be >= 1");

    std::size_t n = buffer.values.size();
    double lo = buffer.values[0], hi = buffer.values[0];
    for (double v : buffer.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    std::vector<double> i_ct(n, 1.0);  // no spread in costs: full retention
    if (hi > lo)
        for (std::size_t q = 0; q < n; ++q)
            i_ct[q] = 1.0 - (buffer.values[q] - lo) / (hi - lo);

    double w_old = static_cast<double>(n_old) / static_cast<double>(n_old + n_new);
    double w_new = static_cast<double>(n_new) / static_cast<double>(n_old + n_new);
    ImportanceVector next;
    next.step = current.step + 1;
    next.values.resize(n);
    for (std::size_t q = 0; q < n; ++q) {
        double v = w_old * current.values[q] + w_new * i_ct[q];
        next.values[q] = std::min(1.0, std::max(0.0, v));
    }
    return next;
}

}  // namespace combo
