#include "combo/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace combo {

namespace ad_ns = combo::ad;
using ad_ns::Var;

void ModelConfig::validate() const {
    if (decoder_layers < 2)
        throw std::invalid_argument("model: decoder_layers must be >= 2");
    if (adapter_rank < 1) throw std::invalid_argument("model: adapter_rank must be >= 1");
    if (n_queries < 1 || query_dim < 4 || max_classes < 1 || backbone_channels < 1)
        throw std::invalid_argument("model: bad dimensions");
    if (height < 8 || width < 8 || height % 2 != 0 || width % 2 != 0)
        throw std::invalid_argument("model: H and W must be even and >= 8");
}

ModelOutput ModelForward::to_output() const {
    ModelOutput out;
    out.queries_per_layer.reserve(queries_per_layer.size());
    for (const auto& q : queries_per_layer) out.queries_per_layer.push_back(q.value());
    out.class_logits = class_logits.value();
    out.mask_logits = mask_logits.value();
    out.refined_flags = refined_flags;
    return out;
}

ModelState::ModelState(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    init_params(init_seed);
}

namespace {

Tensor<float> uniform_tensor(std::vector<std::size_t> shape, double bound, Pcg32& rng) {
    Tensor<float> t(std::move(shape));
    for (auto& x : t.data) x = static_cast<float>(rng.next_uniform(-bound, bound));
    return t;
}

Tensor<float> gaussian_tensor(std::vector<std::size_t> shape, double std_dev, Pcg32& rng) {
    Tensor<float> t(std::move(shape));
    for (auto& x : t.data) x = static_cast<float>(std_dev * rng.next_gaussian());
    return t;
}

}  // namespace

void ModelState::init_params(std::uint64_t seed) {
    Pcg32 rng(derive_seed(seed, 0x30de1));
    std::size_t d = cfg_.query_dim, cb = cfg_.backbone_channels;
    auto linear = [&](const std::string& name, std::size_t out, std::size_t in) {
        params_[name + ".w"] = Var<float>::leaf(uniform_tensor({out, in}, 1.0 / std::sqrt(in), rng));
        params_[name + ".b"] = Var<float>::leaf(Tensor<float>({out}));
    };
    auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
        params_[name + ".w"] = Var<float>::leaf(uniform_tensor({out, in, k, k}, bound, rng));
        params_[name + ".b"] = Var<float>::leaf(Tensor<float>({out}));
    };
    auto norm = [&](const std::string& name) {
        params_[name + ".g"] = Var<float>::leaf(Tensor<float>::full({d}, 1.0f));
        params_[name + ".b"] = Var<float>::leaf(Tensor<float>({d}));
    };

    conv("backbone.conv1", cb, 3, 3);
    conv("backbone.conv2", 2 * cb, cb, 3);
    conv("backbone.conv3", d, 2 * cb, 3);

    params_["queries.q0"] = Var<float>::leaf(gaussian_tensor({cfg_.n_queries, d}, 1.0, rng));
    norm("decoder.norm_out");

    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
        std::string p = "decoder." + std::to_string(l);
        norm(p + ".norm_cross");
        linear(p + ".cross.q", d, d);
        linear(p + ".cross.k", d, d);
        linear(p + ".cross.v", d, d);
        linear(p + ".cross.o", d, d);
        norm(p + ".norm_self");
        linear(p + ".self.q", d, d);
        linear(p + ".self.k", d, d);
        linear(p + ".self.v", d, d);
        linear(p + ".self.o", d, d);
        norm(p + ".norm_ffn");
        linear(p + ".ffn.fc1", 2 * d, d);
        linear(p + ".ffn.fc2", d, 2 * d);
    }

    linear("head.class", cfg_.max_classes + 2, d);
    linear("head.mask", d, d);
}

std::vector<ClassId> ModelState::base_classes() const {
    std::vector<ClassId> out;
    for (ClassId c : introduced_)
        if (class_step_.at(c) == 1) out.push_back(c);
    return out;
}

std::vector<ClassId> ModelState::incremental_classes() const {
    std::vector<ClassId> out;
    for (ClassId c : introduced_)
        if (class_step_.at(c) >= 2) out.push_back(c);
    return out;
}

void ModelState::begin_step(int t, const std::vector<ClassId>& new_classes,
                            std::uint64_t rng_seed) {
    if (t != step_ + 1) throw std::invalid_argument("begin_step: steps must advance by one");
    if (new_classes.empty()) throw std::invalid_argument("begin_step: no new classes");
    for (ClassId c : new_classes) {
        if (c < 1 || c > static_cast<ClassId>(cfg_.max_classes))
            throw std::invalid_argument("begin_step: class id out of range");
        if (class_step_.count(c))
            throw std::invalid_argument("begin_step: class sets overlap across steps");
    }
    step_ = t;
    for (ClassId c : new_classes) {
        introduced_.push_back(c);
        class_step_[c] = t;
    }
    std::sort(introduced_.begin(), introduced_.end());

    if (t >= 2) {
        Pcg32 rng(derive_seed(rng_seed, 0xada9, static_cast<std::uint64_t>(t)));
        std::size_t d = cfg_.query_dim, r = cfg_.adapter_rank;
        std::vector<ClassId> sorted_new = new_classes;
        std::sort(sorted_new.begin(), sorted_new.end());
        for (ClassId c : sorted_new) {
            QcrAdapter a;
            a.class_id = c;
            a.created_step = t;
            a.w1 = Var<float>::leaf(uniform_tensor({d, r}, 1.0 / std::sqrt(d), rng));
            a.w2 = Var<float>::leaf(Tensor<float>({r, d}));  // zero: exact identity at start
            a.frozen = false;
            adapters_.emplace(c, std::move(a));
        }
    }
    apply_freezing();
}

void ModelState::apply_freezing() {
    bool freeze_q0 = step_ >= 2;
    for (auto& [name, var] : params_)
        var.set_requires_grad(name == "queries.q0" ? !freeze_q0 : true);
    for (auto& [cid, adapter] : adapters_) {
        adapter.frozen = adapter.created_step < step_;
        adapter.w1.set_requires_grad(!adapter.frozen);
        adapter.w2.set_requires_grad(!adapter.frozen);
    }
}

std::shared_ptr<ModelState> ModelState::clone_frozen() const {
    auto out = std::make_shared<ModelState>();
    out->cfg_ = cfg_;
    out->step_ = step_;
    out->introduced_ = introduced_;
    out->class_step_ = class_step_;
    for (const auto& [name, var] : params_)
        out->params_[name] = Var<float>::leaf(var.value(), false);
    for (const auto& [cid, adapter] : adapters_) {
        QcrAdapter a;
        a.class_id = adapter.class_id;
        a.created_step = adapter.created_step;
        a.frozen = true;
        a.w1 = Var<float>::leaf(adapter.w1.value(), false);
        a.w2 = Var<float>::leaf(adapter.w2.value(), false);
        out->adapters_.emplace(cid, std::move(a));
    }
    return out;
}

ad::Var<float>& ModelState::param(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

const ad::Var<float>& ModelState::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return it->second;
}

void ModelState::for_each_param(
    const std::function<void(const std::string&, ad::Var<float>&)>& fn) {
    for (auto& [cid, adapter] : adapters_) {
        fn("adapter." + std::to_string(cid) + ".w1", adapter.w1);
        fn("adapter." + std::to_string(cid) + ".w2", adapter.w2);
    }
    for (auto& [name, var] : params_) fn(name, var);
}

void ModelState::for_each_param(
    const std::function<void(const std::string&, const ad::Var<float>&)>& fn) const {
    for (const auto& [cid, adapter] : adapters_) {
        fn("adapter." + std::to_string(cid) + ".w1", adapter.w1);
        fn("adapter." + std::to_string(cid) + ".w2", adapter.w2);
    }
    for (const auto& [name, var] : params_) fn(name, var);
}

std::size_t ModelState::total_parameter_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const ad::Var<float>& v) { n += v.value().size(); });
    return n;
}

void ModelState::restore_meta(int step, const std::map<ClassId, int>& class_steps) {
    step_ = step;
    class_step_ = class_steps;
    introduced_.clear();
    for (const auto& [cid, t] : class_steps) introduced_.push_back(cid);
    std::sort(introduced_.begin(), introduced_.end());
    apply_freezing();
}

void ModelState::restore_adapter(ClassId cid, Tensor<float> w1, Tensor<float> w2, bool frozen,
                                 int created_step) {
    QcrAdapter a;
    a.class_id = cid;
    a.created_step = created_step;
    a.frozen = frozen;
    a.w1 = Var<float>::leaf(std::move(w1), !frozen);
    a.w2 = Var<float>::leaf(std::move(w2), !frozen);
    adapters_[cid] = std::move(a);
}

// ------------------------------------------------------------------ forward

namespace {

struct LayerRef {
    const ModelState& state;
    std::string prefix;

    Var<float> linear(const std::string& name, const Var<float>& x) const {
        return ad_ns::add_rowvec(ad_ns::matmul_nt(x, state.param(prefix + name + ".w")),
                                 state.param(prefix + name + ".b"));
    }
    Var<float> norm(const std::string& name, const Var<float>& x) const {
        return ad_ns::layer_norm_rows(x, state.param(prefix + name + ".g"),
                                      state.param(prefix + name + ".b"));
    }
};

Var<float> attention(const LayerRef& layer, const std::string& which, const Var<float>& q_in,
                     const Var<float>& kv_in, float inv_sqrt_d) {
    Var<float> q = layer.linear(which + ".q", q_in);
    Var<float> k = layer.linear(which + ".k", kv_in);
    Var<float> v = layer.linear(which + ".v", kv_in);
    Var<float> scores = ad_ns::scale(ad_ns::matmul_nt(q, k), inv_sqrt_d);
    Var<float> ctx = ad_ns::matmul(ad_ns::softmax_rows(scores), v);
    return layer.linear(which + ".o", ctx);
}

}  // namespace

ad::Var<float> qcr_refine(const ad::Var<float>& queries, const Tensor<float>& class_logits_values,
                          const std::vector<bool>& active, const std::set<ClassId>& incremental,
                          const std::map<ClassId, QcrAdapter>& adapters,
                          std::vector<bool>& refined_flags) {
    std::size_t n = queries.value().rows();
    if (class_logits_values.rows() != n)
        throw std::invalid_argument("qcr_refine: logits/queries mismatch");
    refined_flags.assign(n, false);

    std::map<ClassId, std::vector<std::size_t>> routed;
    for (std::size_t q = 0; q < n; ++q) {
        int best = -1;
        float best_v = 0.f;
        for (std::size_t c = 0; c < class_logits_values.cols(); ++c) {
            if (!active[c]) continue;
            float v = class_logits_values.at(q, c);
            if (best < 0 || v > best_v) {  // ties keep the lowest channel
                best = static_cast<int>(c);
                best_v = v;
            }
        }
        if (best < 0) throw std::logic_error("qcr_refine: no active channel");
        if (incremental.count(best)) {
            routed[best].push_back(q);
            refined_flags[q] = true;
        }
    }

    Var<float> out = queries;
    for (const auto& [cid, idx] : routed) {
        auto it = adapters.find(cid);
        if (it == adapters.end())
            throw std::logic_error("qcr_refine: missing adapter for class " + std::to_string(cid));
        Var<float> rows = ad_ns::gather_rows(out, idx);
        Var<float> update = ad_ns::matmul(ad_ns::matmul(rows, it->second.w1), it->second.w2);
        out = ad_ns::scatter_rows_replace(out, idx, ad_ns::add(update, rows));
    }
    return out;
}

ModelForward ModelState::forward(const Tensor<float>& image, bool use_qcr) const {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.height ||
        image.dim(2) != cfg_.width)
        throw std::invalid_argument("forward: image dimensions do not match config " +
                                    image.shape_str());
    if (step_ < 1) throw std::logic_error("forward: no classes introduced yet");

    std::size_t d = cfg_.query_dim;
    std::size_t l_count = cfg_.decoder_layers;
    float inv_sqrt_d = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));

    // Backbone: strided conv stack.
    Var<float> x = Var<float>::constant(image);
    Var<float> f1 = ad_ns::gelu(ad_ns::conv2d(x, param("backbone.conv1.w"),
                                              param("backbone.conv1.b"), 2, 1));
    Var<float> f2 = ad_ns::gelu(ad_ns::conv2d(f1, param("backbone.conv2.w"),
                                              param("backbone.conv2.b"), 1, 1));
    Var<float> feat = ad_ns::conv2d(f2, param("backbone.conv3.w"), param("backbone.conv3.b"), 1, 1);

    std::size_t fh = feat.value().dim(1), fw = feat.value().dim(2);
    // Pixel decoder: bilinear upsample back to full resolution.
    Var<float> e_pixel = ad_ns::bilinear_upsample(feat, cfg_.height, cfg_.width);

    // Attention memory: feature positions as rows.
    Var<float> memory = ad_ns::transpose(ad_ns::reshape(feat, {d, fh * fw}));

    std::set<ClassId> incremental;
    for (ClassId c : incremental_classes()) incremental.insert(c);
    std::vector<bool> active = active_channels();

    auto class_head = [&](const Var<float>& q) {
        Var<float> logits = ad_ns::add_rowvec(ad_ns::matmul_nt(q, param("head.class.w")),
                                              param("head.class.b"));
        return ad_ns::mask_channels(logits, active);
    };

    ModelForward out;
    out.refined_flags.assign(cfg_.n_queries, false);

    // Pre-LN sublayers on the residual stream; a shared output norm produces
    // the per-layer query view the heads (and feature distillation) consume,
    // keeping those features at unit scale.
    auto out_norm = [&](const Var<float>& q) {
        return ad_ns::layer_norm_rows(q, param("decoder.norm_out.g"),
                                      param("decoder.norm_out.b"));
    };

    Var<float> queries = param("queries.q0");
    for (std::size_t l = 0; l < l_count; ++l) {
        LayerRef layer{*this, "decoder." + std::to_string(l) + "."};
        queries = ad_ns::add(queries, attention(layer, "cross",
                                                layer.norm("norm_cross", queries), memory,
                                                inv_sqrt_d));
        Var<float> normed = layer.norm("norm_self", queries);
        queries = ad_ns::add(queries, attention(layer, "self", normed, normed, inv_sqrt_d));
        Var<float> ffn_in = layer.norm("norm_ffn", queries);
        Var<float> hidden = ad_ns::gelu(layer.linear("ffn.fc1", ffn_in));
        queries = ad_ns::add(queries, layer.linear("ffn.fc2", hidden));
        out.queries_per_layer.push_back(out_norm(queries));

        // Between the penultimate and final layer: route queries predicted as
        // incremental classes through their adapters. Routing reads the shared
        // head on the normed view; the adapter updates the raw stream.
        if (use_qcr && l + 2 == l_count && !incremental.empty()) {
            Var<float> routing_logits = class_head(out.queries_per_layer.back());
            queries = qcr_refine(queries, routing_logits.value(), active, incremental, adapters_,
                                 out.refined_flags);
            out.queries_per_layer.back() = out_norm(queries);
        }
    }

    Var<float> head_view = out.queries_per_layer.back();
    out.class_logits = class_head(head_view);
    Var<float> mask_embed = ad_ns::add_rowvec(ad_ns::matmul_nt(head_view, param("head.mask.w")),
                                              param("head.mask.b"));
    Var<float> e_flat = ad_ns::reshape(e_pixel, {d, cfg_.height * cfg_.width});
    out.mask_logits = ad_ns::reshape(ad_ns::matmul(mask_embed, e_flat),
                                     {cfg_.n_queries, cfg_.height, cfg_.width});
    return out;
}

double selection_consistency(const ModelState& state, const std::vector<ImageSample>& images) {
    if (images.empty()) return 1.0;
    std::vector<bool> active = state.active_channels();
    std::size_t same = 0, total = 0;
    for (const auto& img : images) {
        ModelForward fwd = state.forward(img.image, /*use_qcr=*/false);
        std::size_t l_count = fwd.queries_per_layer.size();
        const auto& q_last = fwd.queries_per_layer[l_count - 1];
        const auto& q_prev = fwd.queries_per_layer[l_count - 2];
        auto head = [&](const ad::Var<float>& q) {
            return ad::mask_channels(
                ad::add_rowvec(ad::matmul_nt(q, state.param("head.class.w")),
                               state.param("head.class.b")),
                active);
        };
        Tensor<float> a = head(q_prev).value();
        Tensor<float> b = head(q_last).value();
        for (std::size_t n = 0; n < a.rows(); ++n) {
            int arg_a = -1, arg_b = -1;
            float best_a = 0.f, best_b = 0.f;
            for (std::size_t c = 0; c < a.cols(); ++c) {
                if (!active[c]) continue;
                if (arg_a < 0 || a.at(n, c) > best_a) {
                    arg_a = static_cast<int>(c);
                    best_a = a.at(n, c);
                }
                if (arg_b < 0 || b.at(n, c) > best_b) {
                    arg_b = static_cast<int>(c);
                    best_b = b.at(n, c);
                }
            }
            same += (arg_a == arg_b) ? 1 : 0;
            ++total;
        }
    }
    return static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace combo
