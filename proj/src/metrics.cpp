#include "combo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace combo {

namespace {

struct Segment {
    ClassId class_id = 0;
    std::vector<std::size_t> pixels;
};

// Extract segments from a map; enforces the "one class per instance" invariant.
std::vector<Segment> extract_segments(const PanopticMap& map) {
    std::map<int, Segment> by_instance;
    for (std::size_t p = 0; p < map.instance_map.size(); ++p) {
        int inst = map.instance_map.data[p];
        int cid = map.class_map.data[p];
        if ((inst == 0) != (cid == 0))
            throw std::invalid_argument("panoptic map: instance/class maps disagree");
        if (inst == 0) continue;
        auto& seg = by_instance[inst];
        if (seg.pixels.empty())
            seg.class_id = cid;
        else if (seg.class_id != cid)
            throw std::invalid_argument("panoptic map: instance spans multiple classes");
        seg.pixels.push_back(p);
    }
    std::vector<Segment> out;
    out.reserve(by_instance.size());
    for (auto& [inst, seg] : by_instance) out.push_back(std::move(seg));
    return out;
}

double segment_iou(const Segment& a, const Segment& b) {
    // Pixel lists are sorted by construction.
    std::size_t inter = 0, i = 0, j = 0;
    while (i < a.pixels.size() && j < b.pixels.size()) {
        if (a.pixels[i] == b.pixels[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a.pixels[i] < b.pixels[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    std::size_t uni = a.pixels.size() + b.pixels.size() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void aggregate_subset(const MetricReport& report, const std::vector<ClassId>& classes,
                      SubsetAggregate& out) {
    double pq = 0, sq = 0, rq = 0, iou = 0;
    int n_pq = 0, n_iou = 0;
    for (ClassId c : classes) {
        auto it = report.per_class.find(c);
        if (it == report.per_class.end()) continue;
        const auto& m = it->second;
        if (m.pq_defined()) {
            pq += m.pq();
            sq += m.sq();
            rq += m.rq();
            ++n_pq;
        }
        if (m.iou_defined()) {
            iou += m.iou();
            ++n_iou;
        }
    }
    out.pq_classes = n_pq;
    out.miou_classes = n_iou;
    if (n_pq > 0) {
        out.pq = pq / n_pq;
        out.sq = sq / n_pq;
        out.rq = rq / n_pq;
    }
    if (n_iou > 0) out.miou = iou / n_iou;
}

void finalize_aggregates(MetricReport& report, const ClassSubsets& subsets) {
    aggregate_subset(report, subsets.base, report.base);
    aggregate_subset(report, subsets.incremental, report.incremental);
    aggregate_subset(report, subsets.all(), report.all);
}

void accumulate_panoptic(MetricReport& report, const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.class_map.shape != gt.class_map.shape)
        throw std::invalid_argument("panoptic_quality: shape mismatch");
    auto pred_segs = extract_segments(pred);
    auto gt_segs = extract_segments(gt);

    std::vector<bool> pred_matched(pred_segs.size(), false);
    for (const auto& g : gt_segs) {
        int match = -1;
        for (std::size_t pi = 0; pi < pred_segs.size(); ++pi) {
            if (pred_segs[pi].class_id != g.class_id) continue;
            double iou = segment_iou(pred_segs[pi], g);
            if (iou > 0.5) {
                // Unique by the IoU > 0.5 theorem; assert rather than assume.
                if (match >= 0)
                    throw std::logic_error("panoptic_quality: multiple IoU>0.5 matches");
                match = static_cast<int>(pi);
                auto& m = report.per_class[g.class_id];
                m.tp += 1;
                m.iou_sum += iou;
            }
        }
        if (match >= 0)
            pred_matched[static_cast<std::size_t>(match)] = true;
        else
            report.per_class[g.class_id].fn += 1;
    }
    for (std::size_t pi = 0; pi < pred_segs.size(); ++pi)
        if (!pred_matched[pi]) report.per_class[pred_segs[pi].class_id].fp += 1;
}

void accumulate_semantic(MetricReport& report, const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.class_map.shape != gt.class_map.shape)
        throw std::invalid_argument("miou: shape mismatch");
    for (std::size_t p = 0; p < pred.class_map.size(); ++p) {
        int pc = pred.class_map.data[p];
        int gc = gt.class_map.data[p];
        if (pc == 0 && gc == 0) continue;  // unlabeled background everywhere: excluded
        if (pc == gc) {
            report.per_class[pc].px_tp += 1;
        } else {
            if (pc != 0) report.per_class[pc].px_fp += 1;
            if (gc != 0) report.per_class[gc].px_fn += 1;
        }
    }
}

}  // namespace

PanopticMap panoptic_inference(const ModelOutput& output, const ChannelLayout& layout,
                               double score_threshold, double overlap_threshold) {
    std::size_t n = output.class_logits.rows();
    std::size_t h = output.mask_logits.dim(1), w = output.mask_logits.dim(2);
    PanopticMap map;
    map.class_map = Tensor<std::uint16_t>({h, w});
    map.instance_map = Tensor<std::uint16_t>({h, w});

    Tensor<double> probs = softmax_rows_value(output.class_logits);
    struct Kept {
        std::size_t query;
        ClassId class_id;
        double conf;
    };
    std::vector<Kept> kept;
    for (std::size_t q = 0; q < n; ++q) {
        std::size_t best = 0;
        double best_p = -1.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            if (probs.at(q, c) > best_p) {
                best_p = probs.at(q, c);
                best = c;
            }
        }
        if (static_cast<int>(best) == layout.no_obj() || best_p < score_threshold) continue;
        kept.push_back({q, static_cast<ClassId>(best), best_p});
    }
    if (kept.empty()) return map;

    // Winner-take-all on conf * sigmoid(mask logit); ties to the lowest query.
    std::vector<int> winner(h * w, -1);
    std::vector<double> best_score(h * w, 0.0);
    for (std::size_t ki = 0; ki < kept.size(); ++ki) {
        const auto& k = kept[ki];
        const float* row = output.mask_logits.data.data() + k.query * h * w;
        for (std::size_t p = 0; p < h * w; ++p) {
            double z = row[p];
            double sig = (z >= 0) ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            double score = k.conf * sig;
            if (score > best_score[p]) {
                best_score[p] = score;
                winner[p] = static_cast<int>(ki);
            }
        }
    }

    std::uint16_t next_instance = 1;
    for (std::size_t ki = 0; ki < kept.size(); ++ki) {
        const auto& k = kept[ki];
        const float* row = output.mask_logits.data.data() + k.query * h * w;
        std::size_t original = 0, surviving = 0;
        for (std::size_t p = 0; p < h * w; ++p) {
            bool on = row[p] > 0.0f;  // sigmoid > 0.5
            if (on) ++original;
            if (on && winner[p] == static_cast<int>(ki)) ++surviving;
        }
        if (original == 0 || surviving == 0) continue;
        if (static_cast<double>(surviving) / static_cast<double>(original) < overlap_threshold)
            continue;
        std::uint16_t inst = next_instance++;
        for (std::size_t p = 0; p < h * w; ++p) {
            if (row[p] > 0.0f && winner[p] == static_cast<int>(ki)) {
                map.class_map.data[p] = static_cast<std::uint16_t>(k.class_id);
                map.instance_map.data[p] = inst;
            }
        }
    }
    return map;
}

PanopticMap ground_truth_map(const ImageSample& sample, const std::vector<ClassId>* keep_classes) {
    std::set<ClassId> keep;
    if (keep_classes) keep.insert(keep_classes->begin(), keep_classes->end());
    std::size_t h = sample.height(), w = sample.width();
    PanopticMap map;
    map.class_map = Tensor<std::uint16_t>({h, w});
    map.instance_map = Tensor<std::uint16_t>({h, w});
    std::uint16_t next_instance = 1;
    for (const auto& lab : sample.labels) {
        if (keep_classes && !keep.count(lab.class_id)) continue;
        std::uint16_t inst = next_instance++;
        for (std::size_t p = 0; p < h * w; ++p) {
            if (!lab.mask.data[p]) continue;
            map.class_map.data[p] = static_cast<std::uint16_t>(lab.class_id);
            map.instance_map.data[p] = inst;
        }
    }
    return map;
}

MetricReport panoptic_quality(const std::vector<PanopticMap>& preds,
                              const std::vector<PanopticMap>& gts, const ClassSubsets& subsets) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("panoptic_quality: split size mismatch");
    MetricReport report;
    for (std::size_t i = 0; i < preds.size(); ++i)
        accumulate_panoptic(report, preds[i], gts[i]);
    finalize_aggregates(report, subsets);
    return report;
}

MetricReport miou(const std::vector<PanopticMap>& preds, const std::vector<PanopticMap>& gts,
                  const ClassSubsets& subsets) {
    if (preds.size() != gts.size()) throw std::invalid_argument("miou: split size mismatch");
    MetricReport report;
    for (std::size_t i = 0; i < preds.size(); ++i)
        accumulate_semantic(report, preds[i], gts[i]);
    finalize_aggregates(report, subsets);
    return report;
}

MetricReport evaluate_maps(const std::vector<PanopticMap>& preds,
                           const std::vector<PanopticMap>& gts, const ClassSubsets& subsets) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("evaluate_maps: split size mismatch");
    MetricReport report;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        accumulate_panoptic(report, preds[i], gts[i]);
        accumulate_semantic(report, preds[i], gts[i]);
    }
    finalize_aggregates(report, subsets);
    return report;
}

}  // namespace combo
