#pragma once

// Miniature query-based mask-classification network.
//
//   image -> 3-layer conv stack -> feature grid F (D x H/2 x W/2)
//   pixel decoder: bilinear upsample of F to per-pixel embeddings (D x H x W)
//   L decoder layers (pre-LN): cross-attention over F positions,
//     self-attention over queries, 2-layer feedforward, single head
//   shared class head (D -> Cmax+2) and mask head (D -> D);
//   mask logits = mask-head-projected query . per-pixel embedding
//
// Class-specific low-rank adapters refine penultimate-layer queries that the
// shared head routes to an incremental class; the update path starts at exact
// identity (W2 = 0). Query embeddings and old adapters freeze from step 2 on.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "combo/autodiff.hpp"
#include "combo/domain.hpp"
#include "combo/rng.hpp"

namespace combo {

struct ModelConfig {
    std::size_t n_queries = 20;       // N
    std::size_t query_dim = 64;       // D (pixel embedding dim as well)
    std::size_t decoder_layers = 3;   // L, >= 2 so a penultimate layer exists
    std::size_t max_classes = 6;      // Cmax
    std::size_t adapter_rank = 16;    // r
    std::size_t backbone_channels = 16;
    std::size_t height = 32;
    std::size_t width = 32;

    void validate() const;
    ChannelLayout layout() const { return ChannelLayout{static_cast<int>(max_classes)}; }
};

struct QcrAdapter {
    ClassId class_id = 0;
    ad::Var<float> w1;  // [D, r]
    ad::Var<float> w2;  // [r, D]
    bool frozen = false;
    int created_step = 0;

    std::size_t parameter_count() const { return w1.value().size() + w2.value().size(); }
};

// Graph-carrying forward result; to_output() strips it to plain tensors.
struct ModelForward {
    std::vector<ad::Var<float>> queries_per_layer;  // L entries, [N,D]
    ad::Var<float> class_logits;                    // [N, Cmax+2], inactive channels -inf
    ad::Var<float> mask_logits;                     // [N, H, W]
    std::vector<bool> refined_flags;

    ModelOutput to_output() const;
};

class ModelState {
public:
    ModelState() = default;
    ModelState(const ModelConfig& cfg, std::uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }
    int step() const { return step_; }
    const std::vector<ClassId>& introduced_classes() const { return introduced_; }
    const std::map<ClassId, int>& class_steps() const { return class_step_; }
    std::vector<bool> active_channels() const { return cfg_.layout().active_mask(introduced_); }

    // Classes introduced at step 1 (base) vs steps >= 2 (incremental).
    std::vector<ClassId> base_classes() const;
    std::vector<ClassId> incremental_classes() const;

    // Advance to step t (must be step()+1), register new classes, create their
    // adapters (from step 2 on) and apply the freezing policy. The caller is
    // responsible for cloning the pre-step state as the old model.
    void begin_step(int t, const std::vector<ClassId>& new_classes, std::uint64_t rng_seed);

    // Deep copy with every parameter frozen.
    std::shared_ptr<ModelState> clone_frozen() const;

    ModelForward forward(const Tensor<float>& image, bool use_qcr) const;

    // Deterministic iteration (lexicographic name order) over all parameters,
    // adapters included.
    void for_each_param(const std::function<void(const std::string&, ad::Var<float>&)>& fn);
    void for_each_param(
        const std::function<void(const std::string&, const ad::Var<float>&)>& fn) const;

    std::map<ClassId, QcrAdapter>& adapters() { return adapters_; }
    const std::map<ClassId, QcrAdapter>& adapters() const { return adapters_; }
    ad::Var<float>& param(const std::string& name);
    const ad::Var<float>& param(const std::string& name) const;
    bool has_param(const std::string& name) const { return params_.count(name) > 0; }

    std::size_t total_parameter_count() const;

    // Restore hooks for the checkpoint reader.
    void restore_meta(int step, const std::map<ClassId, int>& class_steps);
    void restore_adapter(ClassId cid, Tensor<float> w1, Tensor<float> w2, bool frozen,
                         int created_step);

private:
    ModelConfig cfg_;
    int step_ = 0;
    std::vector<ClassId> introduced_;       // sorted
    std::map<ClassId, int> class_step_;     // class -> step of introduction
    std::map<std::string, ad::Var<float>> params_;
    std::map<ClassId, QcrAdapter> adapters_;

    void init_params(std::uint64_t seed);
    void apply_freezing();
};

// Refine queries routed (by the shared head's argmax over active channels) to
// an incremental class: out = q W1 W2 + q. Ties in the argmax go to the lowest
// channel. Throws if a selected class has no adapter.
ad::Var<float> qcr_refine(const ad::Var<float>& queries, const Tensor<float>& class_logits_values,
                          const std::vector<bool>& active, const std::set<ClassId>& incremental,
                          const std::map<ClassId, QcrAdapter>& adapters,
                          std::vector<bool>& refined_flags);

// Fraction of queries whose shared-head argmax at layer L-1 equals the one at
// layer L, evaluated with QCR disabled.
double selection_consistency(const ModelState& state, const std::vector<ImageSample>& images);

}  // namespace combo
