#pragma once

// The continual training loop: per-step optimization of the full objective,
// old-model freezing, pseudo-label construction, the post-step importance
// pass, checkpointing, and scenario orchestration with per-step evaluation.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "combo/datagen.hpp"
#include "combo/importance.hpp"
#include "combo/losses.hpp"
#include "combo/metrics.hpp"
#include "combo/model.hpp"
#include "combo/pseudo.hpp"

namespace combo {

struct TrainConfig {
    int iterations_per_class = 200;  // larger-scale setups commonly use 1000
    double lr_initial = 1e-3;        // step 1
    double lr_incremental = 5e-4;    // steps >= 2
    int batch_size = 2;
    std::uint64_t seed = 0;
    bool hdhl = true;
    bool ikd = true;
    bool qcr = true;
    bool pseudo = true;
    LossWeights weights;
    PseudoConfig pseudo_cfg;
    bool pseudo_in_mask_loss = true;  // pseudo-matched pairs join the mask loss
    double score_threshold = 0.5;     // panoptic inference
    double overlap_threshold = 0.5;
    double weight_decay = 1e-4;
    double clip_grad_norm = 1.0;      // 0 disables
    bool cosine_lr = true;            // per-step cosine decay to 0
    bool strict_deterministic = false;

    void validate() const;
};

struct ScenarioState {
    ModelState model;
    std::shared_ptr<const ModelState> old_model;  // present iff step >= 2
    ImportanceVector importance;                  // I^t gating the current step
};

struct StepReport {
    int step = 0;
    std::vector<ClassId> classes;
    MetricReport metrics;
    std::vector<double> loss_curve;       // one entry per iteration
    std::vector<double> importance_next;  // I^{t+1} from the post-step pass
    double selection_consistency = 0.0;
    long kl_clamp_events = 0;
    double wall_clock_sec = 0.0;
};

struct ScenarioReport {
    int schema_version = 1;
    ScenarioSpec scenario;
    std::uint64_t seed = 0;
    bool strict_deterministic = false;
    std::vector<StepReport> steps;
    double wall_clock_sec = 0.0;
};

// One incremental training step over the (already filtered) step dataset.
// Runs iterations_per_class * |C^t| batches, then the importance buffer pass.
StepReport train_step(ScenarioState& state, const std::vector<ImageSample>& step_dataset,
                      const TrainConfig& cfg);

// Panoptic + semantic evaluation of a model over a validation set, restricted
// to the classes introduced so far.
MetricReport evaluate_model(const ModelState& model, const std::vector<ImageSample>& val,
                            bool use_qcr, double score_threshold, double overlap_threshold);

struct ScenarioRunOptions {
    std::filesystem::path checkpoint_dir;           // empty: no checkpoints written
    std::optional<std::filesystem::path> resume;    // continue from this checkpoint
    std::size_t consistency_probe_images = 16;      // validation prefix for the statistic
};

ScenarioReport run_scenario(const Dataset& train, const Dataset& val,
                            const ScenarioSpec& scenario, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, const ScenarioRunOptions& options = {});

}  // namespace combo
