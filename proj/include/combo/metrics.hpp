#pragma once

// Panoptic inference from raw model outputs and the PQ / mIoU evaluation
// suite, grouped by class subsets (base vs incremental).

#include <cstdint>
#include <map>
#include <vector>

#include "combo/domain.hpp"

namespace combo {

struct PanopticMap {
    Tensor<std::uint16_t> class_map;     // [H,W], 0 = unlabeled
    Tensor<std::uint16_t> instance_map;  // [H,W], 0 = unlabeled; nonzero iff class nonzero
};

struct ClassMetrics {
    // Panoptic counters.
    double tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;  // over TP pairs
    // Semantic pixel counters.
    double px_tp = 0, px_fp = 0, px_fn = 0;

    bool pq_defined() const { return tp + fp + fn > 0; }
    double sq() const { return tp > 0 ? iou_sum / tp : 0.0; }
    double rq() const { return pq_defined() ? tp / (tp + 0.5 * fp + 0.5 * fn) : 0.0; }
    double pq() const { return sq() * rq(); }
    bool iou_defined() const { return px_tp + px_fp + px_fn > 0; }
    double iou() const { return iou_defined() ? px_tp / (px_tp + px_fp + px_fn) : 0.0; }
};

struct SubsetAggregate {
    double pq = 0, sq = 0, rq = 0, miou = 0;
    int pq_classes = 0;    // classes entering the PQ mean
    int miou_classes = 0;  // classes entering the mIoU mean
};

struct ClassSubsets {
    std::vector<ClassId> base;         // C^1
    std::vector<ClassId> incremental;  // C^{2:t}

    std::vector<ClassId> all() const {
        std::vector<ClassId> out = base;
        out.insert(out.end(), incremental.begin(), incremental.end());
        return out;
    }
};

struct MetricReport {
    std::map<ClassId, ClassMetrics> per_class;
    SubsetAggregate base, incremental, all;
};

// Greedy panoptic readout: drop no-obj / low-confidence queries, winner-take-
// all over conf * sigmoid(mask logit), then drop segments whose surviving area
// is below `overlap_threshold` of their sigmoid>0.5 footprint.
PanopticMap panoptic_inference(const ModelOutput& output, const ChannelLayout& layout,
                               double score_threshold = 0.5, double overlap_threshold = 0.5);

// Ground-truth panoptic map from labels (restricted to `keep_classes` when
// non-null: labels of other classes become unlabeled pixels).
PanopticMap ground_truth_map(const ImageSample& sample,
                             const std::vector<ClassId>* keep_classes = nullptr);

// Segment-level PQ/SQ/RQ per class over a split; IoU > 0.5 matching.
MetricReport panoptic_quality(const std::vector<PanopticMap>& preds,
                              const std::vector<PanopticMap>& gts, const ClassSubsets& subsets);

// Pixel-level per-class IoU (instance ids ignored).
MetricReport miou(const std::vector<PanopticMap>& preds, const std::vector<PanopticMap>& gts,
                  const ClassSubsets& subsets);

// Both metric families in one report.
MetricReport evaluate_maps(const std::vector<PanopticMap>& preds,
                           const std::vector<PanopticMap>& gts, const ClassSubsets& subsets);

}  // namespace combo
