#include "combo/optimizer.hpp"

#include <cmath>

namespace combo {

void AdamW::step(ModelState& state) {
    ++t_;
    double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    state.for_each_param([&](const std::string& name, ad::Var<float>& var) {
        if (!var.requires_grad()) return;
        if (var.grad().size() == 0) return;  // never touched by the loss graph
        auto& slot = slots_[name];
        if (slot.m.size() != var.value().size()) {
            slot.m = Tensor<float>(var.value().shape);
            slot.v = Tensor<float>(var.value().shape);
        }
        auto& values = var.value_mut().data;
        const auto& grads = var.grad().data;
        float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
        for (std::size_t i = 0; i < values.size(); ++i) {
            float g = grads[i];
            slot.m.data[i] = b1 * slot.m.data[i] + (1.f - b1) * g;
            slot.v.data[i] = b2 * slot.v.data[i] + (1.f - b2) * g * g;
            double mhat = slot.m.data[i] / bias1;
            double vhat = slot.v.data[i] / bias2;
            double update = cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                       cfg_.weight_decay * values[i]);
            values[i] = static_cast<float>(values[i] - update);
        }
    });
}

double AdamW::clip_grad_norm(ModelState& state, double max_norm) {
    double sq = 0.0;
    state.for_each_param([&](const std::string&, ad::Var<float>& var) {
        if (!var.requires_grad() || var.grad().size() == 0) return;
        for (float g : var.grad().data) sq += static_cast<double>(g) * static_cast<double>(g);
    });
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        float scale = static_cast<float>(max_norm / norm);
        state.for_each_param([&](const std::string&, ad::Var<float>& var) {
            if (!var.requires_grad() || var.grad().size() == 0) return;
            for (float& g : var.node()->grad.data) g *= scale;
        });
    }
    return norm;
}

void AdamW::zero_grad(ModelState& state) {
    state.for_each_param([](const std::string&, ad::Var<float>& var) {
        auto node = var.node();
        node->grad.shape.clear();
        node->grad.data.clear();
    });
}

}  // namespace combo
