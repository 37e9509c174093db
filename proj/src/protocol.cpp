#include "combo/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "combo/checkpoint.hpp"
#include "combo/matching.hpp"
#include "combo/optimizer.hpp"
#include "combo/rng.hpp"

namespace combo {

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Reshuffling index stream over the step dataset; epoch order is a function
// of (seed, step, epoch) only.
class BatchStream {
public:
    BatchStream(std::size_t n, std::uint64_t seed, int step) : n_(n), seed_(seed), step_(step) {
        reshuffle();
    }

    std::size_t next() {
        if (cursor_ >= order_.size()) reshuffle();
        return order_[cursor_++];
    }

private:
    void reshuffle() {
        order_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
        Pcg32 rng(derive_seed(seed_, 0x5a71e + static_cast<std::uint64_t>(step_),
                              static_cast<std::uint64_t>(epoch_)));
        for (std::size_t i = n_; i > 1; --i)
            std::swap(order_[i - 1], order_[rng.next_below(static_cast<std::uint32_t>(i))]);
        cursor_ = 0;
        ++epoch_;
    }

    std::size_t n_;
    std::uint64_t seed_;
    int step_;
    std::uint64_t epoch_ = 0;
    std::size_t cursor_ = 0;
    std::vector<std::size_t> order_;
};

struct ImageLossResult {
    ad::Var<float> total;
    long kl_clamped = 0;
};

ImageLossResult image_loss(const ScenarioState& state, const ImageSample& sample,
                           const TrainConfig& cfg) {
    const ModelState& model = state.model;
    int t = model.step();
    ChannelLayout layout = model.config().layout();
    bool use_old = t >= 2 && (cfg.pseudo || cfg.hdhl || cfg.ikd);

    ModelForward fwd = model.forward(sample.image, cfg.qcr);

    std::optional<ModelForward> old_fwd;
    if (use_old) old_fwd = state.old_model->forward(sample.image, true);

    // Targets: ground truth plus (optionally) pseudo labels from the old model.
    std::vector<SegmentLabel> targets = sample.labels;
    if (t >= 2 && cfg.pseudo) {
        auto pseudo = pseudo_labels(old_fwd->to_output(), sample.labels, cfg.pseudo_cfg, layout);
        targets.insert(targets.end(), std::make_move_iterator(pseudo.begin()),
                       std::make_move_iterator(pseudo.end()));
    }

    ImageLossResult result;
    MatchResult match;
    if (!targets.empty()) {
        Tensor<double> probs = softmax_rows_value(fwd.class_logits.value());
        CostMatrix cost = cost_matrix(probs, fwd.mask_logits.value(), targets,
                                      cfg.weights.lambda_cls, cfg.weights.lambda_mask);
        match = hungarian(cost);
    } else {
        for (std::size_t q = 0; q < model.config().n_queries; ++q)
            match.unmatched_queries.push_back(q);
    }

    // Distillation-learning split needs the old model's class logits.
    std::optional<Tensor<float>> teacher;
    if (cfg.hdhl && t >= 2) teacher = old_fwd->class_logits.value();
    auto dl = hdhl_total<float>(fwd.class_logits, teacher, match, targets,
                                static_cast<std::size_t>(layout.no_obj()), cfg.weights);
    result.kl_clamped = dl.kl_clamped;

    TotalLossParts<float> parts;
    parts.l_dl = dl.loss;

    // Mask loss over matched pairs (pseudo pairs included unless disabled).
    std::vector<ad::Var<float>> mask_terms;
    std::size_t hw = model.config().height * model.config().width;
    for (auto [q, s] : match.pairs) {
        if (targets[s].is_pseudo && !cfg.pseudo_in_mask_loss) continue;
        ad::Var<float> row = ad::reshape(
            ad::gather_rows(ad::reshape(fwd.mask_logits, {model.config().n_queries, hw}), {q}),
            {model.config().height, model.config().width});
        mask_terms.push_back(mask_loss(row, targets[s].mask));
    }
    if (!mask_terms.empty()) parts.mask_mean = mean_scalars(mask_terms);

    if (cfg.ikd && t >= 2) {
        const auto& q_now = fwd.queries_per_layer.back();
        Tensor<float> q_old = old_fwd->queries_per_layer.back().value();
        parts.l_ikd = ikd_loss(q_now, q_old, state.importance.values);
    }

    result.total = total_loss(parts, cfg.weights);
    return result;
}

}  // namespace

void TrainConfig::validate() const {
    if (iterations_per_class < 1) throw std::invalid_argument("train: iterations_per_class >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size >= 1");
    if (!(lr_initial > 0) || !(lr_incremental > 0))
        throw std::invalid_argument("train: learning rates must be positive");
    if (weights.lambda_cls < 0 || weights.lambda_kl < 0 || weights.lambda_ikd < 0 ||
        weights.lambda_mask < 0 || weights.no_obj_weight < 0)
        throw std::invalid_argument("train: loss weights must be nonnegative");
    pseudo_cfg.validate();
}

StepReport train_step(ScenarioState& state, const std::vector<ImageSample>& step_dataset,
                      const TrainConfig& cfg) {
    cfg.validate();
    if (step_dataset.empty()) throw std::invalid_argument("train_step: empty step dataset");
    int t = state.model.step();
    if (t < 1) throw std::logic_error("train_step: begin_step must run first");
    if (t >= 2 && !state.old_model) throw std::logic_error("train_step: old model missing");

    auto t0 = std::chrono::steady_clock::now();
    StepReport report;
    report.step = t;
    for (const auto& [cid, cstep] : state.model.class_steps())
        if (cstep == t) report.classes.push_back(cid);

    double base_lr = (t == 1) ? cfg.lr_initial : cfg.lr_incremental;
    OptimConfig opt_cfg;
    opt_cfg.lr = base_lr;
    opt_cfg.weight_decay = cfg.weight_decay;
    AdamW optimizer(opt_cfg);

    long iterations = static_cast<long>(cfg.iterations_per_class) *
                      static_cast<long>(report.classes.size());
    BatchStream stream(step_dataset.size(), cfg.seed, t);

    for (long it = 0; it < iterations; ++it) {
        if (cfg.cosine_lr)
            optimizer.set_lr(base_lr * 0.5 *
                             (1.0 + std::cos(3.141592653589793 * static_cast<double>(it) /
                                             static_cast<double>(iterations))));
        std::vector<ad::Var<float>> losses;
        long clamps = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const ImageSample& sample = step_dataset[stream.next()];
            ImageLossResult r = image_loss(state, sample, cfg);
            losses.push_back(r.total);
            clamps += r.kl_clamped;
        }
        ad::Var<float> batch_loss = mean_scalars(losses);
        double loss_value = static_cast<double>(batch_loss.scalar());
        if (!std::isfinite(loss_value))
            throw std::runtime_error("train_step: non-finite loss at iteration " +
                                     std::to_string(it));
        AdamW::zero_grad(state.model);
        batch_loss.backward();
        AdamW::clip_grad_norm(state.model, cfg.clip_grad_norm);
        optimizer.step(state.model);
        report.loss_curve.push_back(loss_value);
        report.kl_clamp_events += clamps;
    }

    // Post-training importance pass over the step's training set, in dataset
    // order, with the just-trained model frozen. Runs regardless of the IKD
    // flag so the vector is always available to later steps.
    CostBuffer buffer = CostBuffer::fresh(state.model.config().n_queries);
    for (const auto& sample : step_dataset) {
        if (sample.labels.empty()) continue;
        ModelForward fwd = state.model.forward(sample.image, cfg.qcr);
        Tensor<double> probs = softmax_rows_value(fwd.class_logits.value());
        CostMatrix cost = cost_matrix(probs, fwd.mask_logits.value(), sample.labels,
                                      cfg.weights.lambda_cls, cfg.weights.lambda_mask);
        accumulate_buffer(buffer, cost);
    }
    std::size_t n_new = report.classes.size();
    std::size_t n_old = state.model.introduced_classes().size() - n_new;
    state.importance = finalize_importance(buffer, state.importance, n_old, n_new);
    report.importance_next = state.importance.values;
    report.wall_clock_sec = seconds_since(t0);
    return report;
}

MetricReport evaluate_model(const ModelState& model, const std::vector<ImageSample>& val,
                            bool use_qcr, double score_threshold, double overlap_threshold) {
    ChannelLayout layout = model.config().layout();
    std::vector<ClassId> introduced = model.introduced_classes();
    ClassSubsets subsets{model.base_classes(), model.incremental_classes()};
    std::vector<PanopticMap> preds, gts;
    preds.reserve(val.size());
    gts.reserve(val.size());
    for (const auto& sample : val) {
        ModelForward fwd = model.forward(sample.image, use_qcr);
        preds.push_back(panoptic_inference(fwd.to_output(), layout, score_threshold,
                                           overlap_threshold));
        gts.push_back(ground_truth_map(sample, &introduced));
    }
    return evaluate_maps(preds, gts, subsets);
}

ScenarioReport run_scenario(const Dataset& train, const Dataset& val,
                            const ScenarioSpec& scenario, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, const ScenarioRunOptions& options) {
    auto t0 = std::chrono::steady_clock::now();
    model_cfg.validate();
    train_cfg.validate();
    auto classes = step_classes(scenario, train.scene.class_catalog);
    auto step_sets = split_incremental(train.samples, scenario, train.scene.class_catalog);

    ScenarioReport report;
    report.scenario = scenario;
    report.seed = train_cfg.seed;
    report.strict_deterministic = train_cfg.strict_deterministic;

    ScenarioState state;
    int first_step = 1;
    if (options.resume.has_value()) {
        Checkpoint ckpt = load_checkpoint(*options.resume);
        state.model = std::move(ckpt.model);
        state.importance = std::move(ckpt.importance);
        first_step = state.model.step() + 1;
        if (first_step > scenario.steps)
            throw std::invalid_argument("run_scenario: checkpoint is already past the scenario");
    } else {
        state.model = ModelState(model_cfg, train_cfg.seed);
        state.importance = ImportanceVector::initial(model_cfg.n_queries);
    }

    if (!options.checkpoint_dir.empty())
        std::filesystem::create_directories(options.checkpoint_dir);

    for (int t = first_step; t <= scenario.steps; ++t) {
        if (t >= 2) state.old_model = state.model.clone_frozen();
        state.model.begin_step(t, classes[static_cast<std::size_t>(t - 1)], train_cfg.seed);

        StepReport step_report = train_step(state, step_sets[static_cast<std::size_t>(t - 1)],
                                            train_cfg);
        step_report.metrics = evaluate_model(state.model, val.samples, train_cfg.qcr,
                                             train_cfg.score_threshold,
                                             train_cfg.overlap_threshold);
        std::vector<ImageSample> probe(
            val.samples.begin(),
            val.samples.begin() + static_cast<std::ptrdiff_t>(std::min(
                                      options.consistency_probe_images, val.samples.size())));
        step_report.selection_consistency = selection_consistency(state.model, probe);

        if (!options.checkpoint_dir.empty())
            save_checkpoint(state.model, state.importance,
                            options.checkpoint_dir / ("step_" + std::to_string(t) + ".ckpt"));
        report.steps.push_back(std::move(step_report));
    }
    report.wall_clock_sec = seconds_since(t0);
    return report;
}

}  // namespace combo
