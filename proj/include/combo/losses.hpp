#pragma once

// Training objectives.
//
// Matched queries receive cross-entropy and mask losses. What happens to the
// unmatched ones depends on the strategy:
//   - vanilla: cross-entropy toward no-obj, down-weighted;
//   - distillation-learning split: a shared KL term that pins unmatched
//     class distributions to the old model's (old channels + no-obj) while
//     pushing new-class probabilities toward zero.
// Query-feature distillation is weighted per query by an importance vector.
//
// Everything here is templated on the scalar type: float in training,
// double in the gradient-check oracles.

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "combo/autodiff.hpp"
#include "combo/domain.hpp"
#include "combo/matching.hpp"
#include "combo/tensor.hpp"

namespace combo {

struct LossWeights {
    double lambda_cls = 2.0;
    double lambda_kl = 5.0;
    double lambda_ikd = 3.0;
    double lambda_mask = 5.0;
    double no_obj_weight = 0.1;
};

// Three-way split of the query axis induced by a match against the mixed
// (ground-truth + pseudo) label list.
struct HdhlPartition {
    std::vector<std::size_t> matched_current;  // queries matched to current-class labels
    std::vector<std::size_t> matched_old;      // queries matched to pseudo labels
    std::vector<std::size_t> unmatched;

    static HdhlPartition from_match(const MatchResult& match,
                                    const std::vector<SegmentLabel>& labels) {
        HdhlPartition p;
        for (auto [n, s] : match.pairs) {
            (labels[s].is_pseudo ? p.matched_old : p.matched_current).push_back(n);
        }
        p.unmatched = match.unmatched_queries;
        return p;
    }
};

// ------------------------------------------------------- value-level helpers

// Sigmoid BCE (pixel mean) + Dice, plain scalar evaluation. Shared with the
// matching cost so both sides use one definition.
template <class T>
double mask_loss_value(const T* logits, const std::uint8_t* mask, std::size_t count) {
    double bce = 0.0, inter = 0.0, psum = 0.0, msum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        double z = static_cast<double>(logits[i]);
        double m = static_cast<double>(mask[i]);
        bce += std::max(z, 0.0) - z * m + std::log1p(std::exp(-std::abs(z)));
        double p = (z >= 0.0) ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        inter += p * m;
        psum += p;
        msum += m;
    }
    bce /= static_cast<double>(count);
    double dice = 1.0 - 2.0 * inter / (psum + msum);
    return bce + dice;
}

// --------------------------------------------------------------- mask losses

// Differentiable sigmoid BCE (pixel mean) + Dice against a binary mask.
// The ground-truth mask must have at least one positive pixel.
template <class T>
ad::Var<T> mask_loss(const ad::Var<T>& mask_logits_row, const Tensor<std::uint8_t>& gt_mask) {
    if (mask_logits_row.value().size() != gt_mask.size())
        throw std::invalid_argument("mask_loss: shape mismatch");
    double area = 0.0;
    for (auto v : gt_mask.data) area += v;
    if (area == 0.0) throw std::invalid_argument("mask_loss: empty ground-truth mask");

    Tensor<T> m;
    m.shape = mask_logits_row.value().shape;
    m.data.resize(gt_mask.size());
    for (std::size_t i = 0; i < gt_mask.size(); ++i) m.data[i] = static_cast<T>(gt_mask.data[i]);

    ad::Var<T> bce = ad::bce_with_logits_mean(mask_logits_row, m);
    ad::Var<T> probs = ad::sigmoid(mask_logits_row);
    ad::Var<T> inter = ad::sum(ad::mul(probs, ad::Var<T>::constant(m)));
    ad::Var<T> denom = ad::add_scalar(ad::sum(probs), static_cast<T>(area));
    ad::Var<T> dice = ad::add_scalar(ad::scale(ad::div(inter, denom), T(-2)), T(1));
    return ad::add(bce, dice);
}

// ------------------------------------------------------ classification losses

// Mean over matched pairs of -log softmax(active)[target class]. Unmatched
// queries are excluded. Returns 0 and sets *no_pairs when nothing matched.
template <class T>
ad::Var<T> classification_loss(const ad::Var<T>& class_logits, const MatchResult& match,
                               const std::vector<SegmentLabel>& labels,
                               bool* no_pairs = nullptr) {
    if (no_pairs) *no_pairs = match.pairs.empty();
    if (match.pairs.empty()) return ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
    std::vector<std::size_t> rows, targets;
    rows.reserve(match.pairs.size());
    targets.reserve(match.pairs.size());
    for (auto [n, s] : match.pairs) {
        rows.push_back(n);
        targets.push_back(static_cast<std::size_t>(labels[s].class_id));
    }
    ad::Var<T> picked = ad::pick_per_row(
        ad::log_softmax_rows(ad::gather_rows(class_logits, std::move(rows))), std::move(targets));
    return ad::scale(ad::mean(picked), T(-1));
}

// Vanilla Mask2Former-style CE over every query: matched queries target their
// class, unmatched ones target no-obj with weight `no_obj_weight`; weighted
// mean (sum w_i * ce_i / sum w_i).
template <class T>
ad::Var<T> vanilla_classification_loss(const ad::Var<T>& class_logits, const MatchResult& match,
                                       const std::vector<SegmentLabel>& labels,
                                       std::size_t no_obj_channel, double no_obj_weight) {
    std::size_t n_queries = class_logits.value().rows();
    std::vector<std::size_t> targets(n_queries, no_obj_channel);
    Tensor<T> weights({n_queries});
    for (std::size_t i = 0; i < n_queries; ++i) weights.data[i] = static_cast<T>(no_obj_weight);
    double weight_sum = no_obj_weight * static_cast<double>(n_queries);
    for (auto [n, s] : match.pairs) {
        targets[n] = static_cast<std::size_t>(labels[s].class_id);
        weights.data[n] = T(1);
        weight_sum += 1.0 - no_obj_weight;
    }
    ad::Var<T> nll = ad::scale(
        ad::pick_per_row(ad::log_softmax_rows(class_logits), std::move(targets)), T(-1));
    ad::Var<T> weighted = ad::mul(nll, ad::Var<T>::constant(std::move(weights)));
    return ad::scale(ad::sum(weighted), static_cast<T>(1.0 / weight_sum));
}

// ----------------------------------------------------------------- HDHL loss

template <class T>
struct HdhlKlResult {
    ad::Var<T> loss;
    bool empty = false;
    long clamped = 0;  // channels where the student probability hit the 1e-12 floor
};

// KL(teacher || student) on unmatched queries, mean over queries.
//
// Teacher logits are softmaxed over their own channels, then routed into
// student coordinates via `teacher_to_student`; student channels that receive
// no teacher channel get target probability exactly zero (the new classes).
// Student log-probabilities are floored at log(1e-12) where the teacher has
// mass; each floored channel increments `clamped`.
template <class T>
HdhlKlResult<T> hdhl_kl_loss(const ad::Var<T>& student_logits, const Tensor<T>& teacher_logits,
                             const std::vector<std::size_t>& teacher_to_student) {
    HdhlKlResult<T> out;
    std::size_t u = student_logits.value().rows();
    if (u == 0 || teacher_logits.rows() == 0) {
        out.loss = ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
        out.empty = true;
        return out;
    }
    if (teacher_logits.rows() != u)
        throw std::invalid_argument("hdhl_kl_loss: query count mismatch");
    std::size_t k_student = student_logits.value().cols();
    std::size_t k_teacher = teacher_logits.cols();
    if (teacher_to_student.size() != k_teacher)
        throw std::invalid_argument("hdhl_kl_loss: channel map size mismatch");

    Tensor<double> teacher_probs = softmax_rows_value(teacher_logits);
    Tensor<T> padded({u, k_student});
    double entropy_term = 0.0;  // sum p * log p over teacher support
    for (std::size_t i = 0; i < u; ++i) {
        for (std::size_t j = 0; j < k_teacher; ++j) {
            double p = teacher_probs.at(i, j);
            if (p <= 0.0) continue;
            padded.at(i, teacher_to_student[j]) += static_cast<T>(p);
            entropy_term += p * std::log(p);
        }
    }

    const T floor_log = static_cast<T>(std::log(1e-12));
    for (std::size_t i = 0; i < u; ++i) {
        // Count floored student channels on the value side.
        std::vector<double> row(k_student);
        for (std::size_t j = 0; j < k_student; ++j)
            row[j] = static_cast<double>(student_logits.value().at(i, j));
        ProbDistribution q = softmax(row);
        for (std::size_t j = 0; j < k_student; ++j)
            if (padded.at(i, j) > T(0) && q.probs[j] < 1e-12) ++out.clamped;
    }

    ad::Var<T> log_q = ad::clamp_min(ad::log_softmax_rows(student_logits), floor_log);
    ad::Var<T> cross = ad::sum(ad::mul(ad::Var<T>::constant(std::move(padded)), log_q));
    ad::Var<T> kl = ad::sub(ad::Var<T>::constant(Tensor<T>::scalar(static_cast<T>(entropy_term))),
                            cross);
    out.loss = ad::scale(kl, static_cast<T>(1.0 / static_cast<double>(u)));
    return out;
}

// Prefix-aligned channel map: teacher = [old classes..., no-obj], student =
// [old classes..., new classes..., no-obj].
inline std::vector<std::size_t> prefix_aligned_map(std::size_t k_teacher, std::size_t k_student) {
    std::vector<std::size_t> map(k_teacher);
    for (std::size_t j = 0; j + 1 < k_teacher; ++j) map[j] = j;
    map[k_teacher - 1] = k_student - 1;
    return map;
}

template <class T>
struct HdhlTotalResult {
    ad::Var<T> loss;      // lambda_cls * L_cls (+ lambda_kl * L_kl when distilling)
    long kl_clamped = 0;
    bool no_matched = false;
    bool no_unmatched = false;
};

// L_DL (teacher present): lambda_cls * CE on matched + lambda_kl * KL on
// unmatched. Without a teacher this degenerates to the vanilla loss where
// unmatched queries get down-weighted no-obj CE.
//
// `teacher_logits` rows must correspond to the same query indices as the
// student's; both are full-width with their own -inf channel masks, so the
// teacher->student channel map is the identity.
template <class T>
HdhlTotalResult<T> hdhl_total(const ad::Var<T>& class_logits,
                              const std::optional<Tensor<T>>& teacher_logits,
                              const MatchResult& match, const std::vector<SegmentLabel>& labels,
                              std::size_t no_obj_channel, const LossWeights& w) {
    HdhlTotalResult<T> out;
    if (!teacher_logits.has_value()) {
        out.loss = ad::scale(
            vanilla_classification_loss(class_logits, match, labels, no_obj_channel,
                                        w.no_obj_weight),
            static_cast<T>(w.lambda_cls));
        return out;
    }

    ad::Var<T> cls = classification_loss(class_logits, match, labels, &out.no_matched);
    ad::Var<T> total = ad::scale(cls, static_cast<T>(w.lambda_cls));

    const auto& unmatched = match.unmatched_queries;
    out.no_unmatched = unmatched.empty();
    if (!unmatched.empty() && w.lambda_kl != 0.0) {
        ad::Var<T> student_rows = ad::gather_rows(class_logits, unmatched);
        Tensor<T> teacher_rows({unmatched.size(), teacher_logits->cols()});
        for (std::size_t i = 0; i < unmatched.size(); ++i)
            for (std::size_t j = 0; j < teacher_logits->cols(); ++j)
                teacher_rows.at(i, j) = teacher_logits->at(unmatched[i], j);
        std::vector<std::size_t> identity(teacher_logits->cols());
        for (std::size_t j = 0; j < identity.size(); ++j) identity[j] = j;
        HdhlKlResult<T> kl = hdhl_kl_loss(student_rows, teacher_rows, identity);
        out.kl_clamped = kl.clamped;
        total = ad::add(total, ad::scale(kl.loss, static_cast<T>(w.lambda_kl)));
    }
    out.loss = total;
    return out;
}

// ------------------------------------------------------------------ IKD loss

// (1/N) * sum_n I(n) * ||Q_t(n) - Q_{t-1}(n)||^2.
template <class T>
ad::Var<T> ikd_loss(const ad::Var<T>& queries_t, const Tensor<T>& queries_tm1,
                    const std::vector<double>& importance) {
    if (queries_t.value().rank() != 2 || queries_t.value().shape != queries_tm1.shape)
        throw std::invalid_argument("ikd_loss: query shape mismatch");
    std::size_t n = queries_t.value().rows();
    if (importance.size() != n) throw std::invalid_argument("ikd_loss: importance length mismatch");
    ad::Var<T> diff = ad::sub(queries_t, ad::Var<T>::constant(queries_tm1));
    ad::Var<T> sq = ad::mul(diff, diff);
    Tensor<T> weights({n});
    for (std::size_t i = 0; i < n; ++i) weights.data[i] = static_cast<T>(importance[i]);
    ad::Var<T> weighted = ad::mul(ad::rowsum(sq), ad::Var<T>::constant(std::move(weights)));
    return ad::scale(ad::sum(weighted), static_cast<T>(1.0 / static_cast<double>(n)));
}

// --------------------------------------------------------------- total loss

template <class T>
struct TotalLossParts {
    ad::Var<T> l_dl;                     // required
    std::optional<ad::Var<T>> l_ikd;     // IKD term, already unweighted
    std::optional<ad::Var<T>> mask_mean; // mean matched mask loss, unweighted
};

template <class T>
ad::Var<T> total_loss(const TotalLossParts<T>& parts, const LossWeights& w) {
    auto check_finite = [](const ad::Var<T>& v, const char* name) {
        if (!std::isfinite(static_cast<double>(v.scalar())))
            throw std::domain_error(std::string("total_loss: non-finite part: ") + name);
    };
    check_finite(parts.l_dl, "l_dl");
    ad::Var<T> total = parts.l_dl;
    if (parts.l_ikd.has_value()) {
        check_finite(*parts.l_ikd, "l_ikd");
        total = ad::add(total, ad::scale(*parts.l_ikd, static_cast<T>(w.lambda_ikd)));
    }
    if (parts.mask_mean.has_value()) {
        check_finite(*parts.mask_mean, "mask");
        total = ad::add(total, ad::scale(*parts.mask_mean, static_cast<T>(w.lambda_mask)));
    }
    return total;
}

// Sequential sum of scalar vars in index order (fixed reduction order).
template <class T>
ad::Var<T> sum_scalars(const std::vector<ad::Var<T>>& xs) {
    if (xs.empty()) return ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
    ad::Var<T> acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = ad::add(acc, xs[i]);
    return acc;
}

template <class T>
ad::Var<T> mean_scalars(const std::vector<ad::Var<T>>& xs) {
    if (xs.empty()) return ad::Var<T>::constant(Tensor<T>::scalar(T(0)));
    return ad::scale(sum_scalars(xs), static_cast<T>(1.0 / static_cast<double>(xs.size())));
}

}  // namespace combo
