#include "combo/pseudo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace combo {

void PseudoConfig::validate() const {
    if (!(confidence_threshold >= 0.0 && confidence_threshold < 1.0))
        throw std::invalid_argument("pseudo: confidence threshold must be in [0,1)");
    if (!(mask_threshold >= 0.0 && mask_threshold < 1.0))
        throw std::invalid_argument("pseudo: mask threshold must be in [0,1)");
    if (min_pixels < 1) throw std::invalid_argument("pseudo: min_pixels must be >= 1");
}

WeightedMasks weighted_masks(const ModelOutput& old_output, const ChannelLayout& layout) {
    std::size_t n = old_output.class_logits.rows();
    std::size_t h = old_output.mask_logits.dim(1), w = old_output.mask_logits.dim(2);

    bool any_real = false;
    for (int c = 1; c <= layout.max_classes && !any_real; ++c)
        any_real = std::isfinite(old_output.class_logits.at(0, static_cast<std::size_t>(c)));
    if (!any_real)
        throw std::invalid_argument("weighted_masks: old model has no active real classes");

    Tensor<double> probs = softmax_rows_value(old_output.class_logits);
    WeightedMasks out;
    out.m_w = Tensor<double>({n, h, w});
    out.c_w.resize(n);
    out.conf.resize(n);
    for (std::size_t q = 0; q < n; ++q) {
        int best = -1;
        double best_p = -1.0;
        for (int c = 1; c <= layout.max_classes; ++c) {  // real classes only
            double p = probs.at(q, static_cast<std::size_t>(c));
            if (p > best_p) {
                best_p = p;
                best = c;
            }
        }
        out.c_w[q] = best;
        out.conf[q] = best_p;
        const float* row = old_output.mask_logits.data.data() + q * h * w;
        for (std::size_t p = 0; p < h * w; ++p) {
            double z = row[p];
            double sig = (z >= 0) ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            out.m_w.data[q * h * w + p] = sig * best_p;
        }
    }
    return out;
}

Tensor<std::uint8_t> gt_cover_mask(const std::vector<SegmentLabel>& labels, std::size_t h,
                                   std::size_t w) {
    Tensor<std::uint8_t> cover({h, w});
    for (const auto& lab : labels) {
        if (lab.mask.size() != h * w)
            throw std::invalid_argument("gt_cover_mask: mask shape mismatch");
        for (std::size_t p = 0; p < h * w; ++p)
            if (lab.mask.data[p]) {
                if (cover.data[p]) throw std::invalid_argument("gt_cover_mask: overlapping gt");
                cover.data[p] = 1;
            }
    }
    return cover;
}

namespace {

// Winning query per pixel: argmax over M_w, ties to the lowest query index.
std::vector<std::size_t> winner_map(const WeightedMasks& weighted) {
    std::size_t n = weighted.m_w.dim(0);
    std::size_t hw = weighted.m_w.dim(1) * weighted.m_w.dim(2);
    std::vector<std::size_t> winner(hw, 0);
    for (std::size_t p = 0; p < hw; ++p) {
        std::size_t best = 0;
        double best_v = weighted.m_w.data[p];
        for (std::size_t q = 1; q < n; ++q) {
            double v = weighted.m_w.data[q * hw + p];
            if (v > best_v) {
                best_v = v;
                best = q;
            }
        }
        winner[p] = best;
    }
    return winner;
}

}  // namespace

Tensor<std::uint8_t> pseudo_class_mask(const WeightedMasks& weighted,
                                       const Tensor<std::uint8_t>& gt_cover, ClassId c,
                                       PseudoCombine mode) {
    std::size_t h = weighted.m_w.dim(1), w = weighted.m_w.dim(2);
    if (gt_cover.size() != h * w)
        throw std::invalid_argument("pseudo_class_mask: cover shape mismatch");
    auto winner = winner_map(weighted);
    Tensor<std::uint8_t> out({h, w});
    for (std::size_t p = 0; p < h * w; ++p) {
        bool wins = weighted.c_w[winner[p]] == c;
        bool uncovered = gt_cover.data[p] == 0;
        bool on = (mode == PseudoCombine::kOutsideGtAnd) ? (wins && uncovered)
                                                         : (wins || uncovered);
        out.data[p] = on ? 1 : 0;
    }
    return out;
}

std::vector<SegmentLabel> pseudo_labels(const ModelOutput& old_output,
                                        const std::vector<SegmentLabel>& current_gt,
                                        const PseudoConfig& cfg, const ChannelLayout& layout) {
    cfg.validate();
    WeightedMasks weighted = weighted_masks(old_output, layout);
    std::size_t h = old_output.mask_logits.dim(1), w = old_output.mask_logits.dim(2);
    Tensor<std::uint8_t> cover = gt_cover_mask(current_gt, h, w);
    auto winner = winner_map(weighted);

    std::map<std::size_t, std::vector<std::size_t>> pixels_by_query;
    for (std::size_t p = 0; p < h * w; ++p) {
        if (cover.data[p]) continue;  // pixels inside current gt never join
        std::size_t q = winner[p];
        if (!(weighted.conf[q] > cfg.confidence_threshold)) continue;
        if (cfg.mask_threshold > 0.0 &&
            !(weighted.m_w.data[q * h * w + p] > cfg.mask_threshold))
            continue;
        pixels_by_query[q].push_back(p);
    }

    int next_instance = 1;
    for (const auto& lab : current_gt) next_instance = std::max(next_instance, lab.instance_id + 1);

    std::vector<SegmentLabel> out;
    for (const auto& [q, pixels] : pixels_by_query) {
        if (pixels.size() < cfg.min_pixels) continue;
        SegmentLabel lab;
        lab.class_id = weighted.c_w[q];
        lab.instance_id = next_instance++;
        lab.is_pseudo = true;
        lab.mask = Tensor<std::uint8_t>({h, w});
        for (std::size_t p : pixels) lab.mask.data[p] = 1;
        out.push_back(std::move(lab));
    }
    return out;
}

}  // namespace combo
