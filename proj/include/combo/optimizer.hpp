#pragma once

// AdamW with decoupled weight decay over a model's trainable parameters.
// Parameters are visited in lexicographic name order and updated with fixed
// serial arithmetic, so identical runs are bit-identical. Parameters that
// never entered the loss graph (no gradient allocated) are skipped, matching
// the usual semantics for absent gradients.

#include <cstdint>
#include <map>
#include <string>

#include "combo/model.hpp"

namespace combo {

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

class AdamW {
public:
    explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

    void step(ModelState& state);
    static void zero_grad(ModelState& state);

    // Scale gradients so their global L2 norm is at most max_norm; returns the
    // pre-clip norm. No-op when max_norm <= 0.
    static double clip_grad_norm(ModelState& state, double max_norm);

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    long step_count() const { return t_; }

private:
    struct Slot {
        Tensor<float> m;
        Tensor<float> v;
    };
    OptimConfig cfg_;
    long t_ = 0;
    std::map<std::string, Slot> slots_;
};

}  // namespace combo
