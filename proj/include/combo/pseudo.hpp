#pragma once

// Pseudo segment labels for old classes, produced from the frozen previous-
// step model's outputs on the current image.
//
// A pixel outside the current ground truth joins the pseudo segment of the
// query with the highest confidence-weighted mask score there, carrying that
// query's most likely old class. One pseudo segment per winning query keeps
// instance structure intact.

#include <cstdint>
#include <vector>

#include "combo/domain.hpp"

namespace combo {

struct PseudoConfig {
    double confidence_threshold = 0.0;  // tau, query-level; 0 disables the gate
    // Pixel-level gate on the weighted mask score M_w of the winning query.
    // Without it every uncovered pixel joins some segment, which buries the
    // true old-class pixels under mislabeled background. 0 disables.
    double mask_threshold = 0.5;
    std::size_t min_pixels = 1;

    void validate() const;
};

struct WeightedMasks {
    Tensor<double> m_w;         // [N,H,W] = sigmoid(mask logit) * conf
    std::vector<ClassId> c_w;   // per query: argmax over old real-class channels
    std::vector<double> conf;   // per query: max prob over old real-class channels
};

// Per-query weighted masks from the old model's output. The class softmax is
// restricted to the old model's active channels (its logits carry the -inf
// mask); conf/argmax range over real old classes only, never no-obj. Throws
// when no real class channel is active (no old model exists before step 2).
WeightedMasks weighted_masks(const ModelOutput& old_output, const ChannelLayout& layout);

std::vector<SegmentLabel> pseudo_labels(const ModelOutput& old_output,
                                        const std::vector<SegmentLabel>& current_gt,
                                        const PseudoConfig& cfg, const ChannelLayout& layout);

// The raw per-class candidate map, exposed for inspecting both readings of
// the labeling rule: the conjunctive form (pixel uncovered AND class wins
// there) used by pseudo_labels, and the literal disjunctive form (class wins
// OR pixel uncovered) kept only to document its degeneracy.
enum class PseudoCombine { kOutsideGtAnd, kLiteralOr };

Tensor<std::uint8_t> pseudo_class_mask(const WeightedMasks& weighted,
                                       const Tensor<std::uint8_t>& gt_cover, ClassId c,
                                       PseudoCombine mode);

// Union of the ground-truth masks.
Tensor<std::uint8_t> gt_cover_mask(const std::vector<SegmentLabel>& labels, std::size_t h,
                                   std::size_t w);

}  // namespace combo
