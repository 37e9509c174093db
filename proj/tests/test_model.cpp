#include <doctest.h>

#include <cmath>
#include <set>

#include "combo/losses.hpp"
#include "combo/model.hpp"
#include "combo/rng.hpp"

using namespace combo;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_queries = 6;
    cfg.query_dim = 16;
    cfg.decoder_layers = 3;
    cfg.max_classes = 6;
    cfg.adapter_rank = 4;
    cfg.backbone_channels = 4;
    cfg.height = 16;
    cfg.width = 16;
    return cfg;
}

Tensor<float> random_image(const ModelConfig& cfg, std::uint64_t seed) {
    Pcg32 rng(seed);
    Tensor<float> img({3, cfg.height, cfg.width});
    for (auto& x : img.data) x = rng.next_float();
    return img;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = small_config();
    cfg.decoder_layers = 1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_config();
    cfg.adapter_rank = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    CHECK_NOTHROW(small_config().validate());
}

TEST_CASE("forward: output shapes match the contract") {
    auto cfg = small_config();
    ModelState state(cfg, 1);
    state.begin_step(1, {1, 2, 3, 4}, 1);
    auto fwd = state.forward(random_image(cfg, 2), false);
    CHECK(fwd.queries_per_layer.size() == cfg.decoder_layers);
    for (const auto& q : fwd.queries_per_layer) {
        CHECK(q.value().rows() == cfg.n_queries);
        CHECK(q.value().cols() == cfg.query_dim);
    }
    CHECK(fwd.class_logits.value().rows() == cfg.n_queries);
    CHECK(fwd.class_logits.value().cols() == cfg.max_classes + 2);
    CHECK(fwd.mask_logits.value().dim(0) == cfg.n_queries);
    CHECK(fwd.mask_logits.value().dim(1) == cfg.height);
    CHECK(fwd.mask_logits.value().dim(2) == cfg.width);
    CHECK(fwd.refined_flags.size() == cfg.n_queries);

    // Inactive channels (reserved 0, classes 5-6 not yet introduced) are -inf.
    for (std::size_t q = 0; q < cfg.n_queries; ++q) {
        CHECK(std::isinf(fwd.class_logits.value().at(q, 0)));
        CHECK(std::isinf(fwd.class_logits.value().at(q, 5)));
        CHECK(std::isinf(fwd.class_logits.value().at(q, 6)));
        CHECK(std::isfinite(fwd.class_logits.value().at(q, 1)));
        CHECK(std::isfinite(fwd.class_logits.value().at(q, 7)));  // no-obj
    }
    CHECK_THROWS_AS(state.forward(Tensor<float>({3, 8, 8}), false), std::invalid_argument);
}

TEST_CASE("forward: deterministic") {
    auto cfg = small_config();
    ModelState state(cfg, 3);
    state.begin_step(1, {1, 2}, 3);
    auto img = random_image(cfg, 5);
    auto a = state.forward(img, false);
    auto b = state.forward(img, false);
    CHECK(a.class_logits.value().data == b.class_logits.value().data);
    CHECK(a.mask_logits.value().data == b.mask_logits.value().data);
}

TEST_CASE("qcr: zero-init identity immediately after begin_step") {
    auto cfg = small_config();
    ModelState state(cfg, 7);
    state.begin_step(1, {1, 2, 3, 4}, 7);
    state.begin_step(2, {5}, 7);
    auto img = random_image(cfg, 9);
    auto with = state.forward(img, true);
    auto without = state.forward(img, false);
    CHECK(with.class_logits.value().data == without.class_logits.value().data);  // exact
    CHECK(with.mask_logits.value().data == without.mask_logits.value().data);
    for (std::size_t l = 0; l < cfg.decoder_layers; ++l)
        CHECK(with.queries_per_layer[l].value().data == without.queries_per_layer[l].value().data);
}

TEST_CASE("qcr: t=1 has no adapters and the flag has no effect") {
    auto cfg = small_config();
    ModelState state(cfg, 7);
    state.begin_step(1, {1, 2, 3, 4}, 7);
    CHECK(state.adapters().empty());
    auto img = random_image(cfg, 4);
    auto with = state.forward(img, true);
    auto without = state.forward(img, false);
    CHECK(with.class_logits.value().data == without.class_logits.value().data);
    for (bool f : with.refined_flags) CHECK_FALSE(f);
}

TEST_CASE("qcr: nonzero W2 steers only routed queries") {
    auto cfg = small_config();
    ModelState state(cfg, 7);
    state.begin_step(1, {1, 2, 3, 4}, 7);
    state.begin_step(2, {5}, 7);
    for (auto& x : state.adapters().at(5).w2.value_mut().data) x = 0.05f;

    auto img = random_image(cfg, 9);
    auto with = state.forward(img, true);
    auto without = state.forward(img, false);
    bool any_refined = false;
    for (bool f : with.refined_flags) any_refined = any_refined || f;
    if (any_refined) {
        CHECK(with.class_logits.value().data != without.class_logits.value().data);
    } else {
        CHECK(with.class_logits.value().data == without.class_logits.value().data);
    }
}

TEST_CASE("qcr_refine: routing, ties, and missing-adapter error") {
    std::size_t n = 4, d = 8, r = 2;
    Pcg32 rng(3);
    Tensor<float> qv({n, d});
    for (auto& x : qv.data) x = rng.next_float();
    auto queries = ad::Var<float>::leaf(qv);

    ChannelLayout layout{6};
    const float ninf = -std::numeric_limits<float>::infinity();
    Tensor<float> logits({n, 8}, std::vector<float>(n * 8, ninf));
    // Query 0 -> class 5 (incremental), query 1 -> class 1 (base),
    // query 2 -> tie between classes 1 and 5 -> lowest wins (1),
    // query 3 -> no-obj.
    logits.at(0, 5) = 3.f;
    logits.at(0, 1) = 1.f;
    logits.at(1, 1) = 3.f;
    logits.at(1, 5) = 1.f;
    logits.at(2, 1) = 2.f;
    logits.at(2, 5) = 2.f;
    logits.at(3, 7) = 3.f;
    logits.at(3, 1) = 0.f;
    for (std::size_t q = 0; q < n; ++q)
        for (std::size_t c : {1ul, 5ul, 7ul})
            if (std::isinf(logits.at(q, c))) logits.at(q, c) = -5.f;

    std::vector<bool> active(8, false);
    active[1] = active[5] = active[7] = true;

    std::map<ClassId, QcrAdapter> adapters;
    QcrAdapter a;
    a.class_id = 5;
    a.created_step = 2;
    Tensor<float> w1({d, r});
    for (auto& x : w1.data) x = rng.next_float();
    a.w1 = ad::Var<float>::leaf(w1);
    a.w2 = ad::Var<float>::leaf(Tensor<float>::full({r, d}, 0.1f));
    adapters.emplace(5, std::move(a));

    std::vector<bool> flags;
    auto out = qcr_refine(queries, logits, active, {5}, adapters, flags);
    CHECK(flags == std::vector<bool>{true, false, false, false});
    // Refined row differs, untouched rows are bit-identical.
    bool row0_changed = false;
    for (std::size_t j = 0; j < d; ++j)
        row0_changed = row0_changed || out.value().at(0, j) != qv.at(0, j);
    CHECK(row0_changed);
    for (std::size_t q = 1; q < n; ++q)
        for (std::size_t j = 0; j < d; ++j) CHECK(out.value().at(q, j) == qv.at(q, j));

    CHECK_THROWS_WITH_AS(qcr_refine(queries, logits, active, {5}, {}, flags),
                         doctest::Contains("missing adapter"), std::logic_error);
}

TEST_CASE("begin_step: adapter bookkeeping and parameter counts") {
    auto cfg = small_config();
    cfg.query_dim = 64;
    cfg.adapter_rank = 16;
    ModelState state(cfg, 11);
    state.begin_step(1, {1, 2, 3, 4}, 11);
    std::size_t before = state.total_parameter_count();
    state.begin_step(2, {5}, 11);
    REQUIRE(state.adapters().size() == 1);
    const auto& adapter = state.adapters().at(5);
    CHECK_FALSE(adapter.frozen);
    CHECK(adapter.parameter_count() == 2 * 64 * 16);  // 2048
    CHECK(state.total_parameter_count() == before + 2048);

    // W2 zero-init.
    for (float x : adapter.w2.value().data) CHECK(x == 0.0f);

    // Overlapping class sets across steps.
    CHECK_THROWS_WITH_AS(state.begin_step(3, {5}, 11), doctest::Contains("overlap"),
                         std::invalid_argument);
    // Step skipping.
    CHECK_THROWS_AS(state.begin_step(5, {6}, 11), std::invalid_argument);
}

TEST_CASE("begin_step: a D=256, r=16 adapter is 8192 parameters per class") {
    ModelConfig cfg = small_config();
    cfg.query_dim = 256;
    cfg.adapter_rank = 16;
    cfg.n_queries = 2;
    ModelState state(cfg, 1);
    state.begin_step(1, {1}, 1);
    state.begin_step(2, {2}, 1);
    CHECK(state.adapters().at(2).parameter_count() == 8192);
}

TEST_CASE("freezing: Q0 and old adapters get exactly zero gradients from step 2 on") {
    auto cfg = small_config();
    ModelState state(cfg, 13);
    state.begin_step(1, {1, 2, 3, 4}, 13);
    CHECK(state.param("queries.q0").requires_grad());

    state.begin_step(2, {5}, 13);
    CHECK_FALSE(state.param("queries.q0").requires_grad());
    CHECK(state.adapters().at(5).w1.requires_grad());

    state.begin_step(3, {6}, 13);
    CHECK(state.adapters().at(5).frozen);
    CHECK_FALSE(state.adapters().at(5).w1.requires_grad());
    CHECK(state.adapters().at(6).w1.requires_grad());

    // Give the class-6 adapter a nonzero W2 so the adapter path is live, then
    // backprop an arbitrary scalar of the full forward.
    for (auto& x : state.adapters().at(6).w2.value_mut().data) x = 0.02f;
    auto fwd = state.forward(random_image(cfg, 17), true);
    auto loss = ad::add(ad::mean(fwd.class_logits), ad::mean(fwd.mask_logits));
    loss.backward();

    CHECK(state.param("queries.q0").grad().size() == 0);       // frozen: never allocated
    CHECK(state.adapters().at(5).w1.grad().size() == 0);       // frozen old adapter
    CHECK(state.param("head.class.w").grad().size() > 0);      // trainable head got grads
    bool any_nonzero = false;
    for (float g : state.param("head.class.w").grad().data) any_nonzero = any_nonzero || g != 0.f;
    CHECK(any_nonzero);
}

TEST_CASE("clone_frozen: old model outputs are unaffected by training the new state") {
    auto cfg = small_config();
    ModelState state(cfg, 19);
    state.begin_step(1, {1, 2}, 19);
    auto img = random_image(cfg, 21);
    auto old_model = state.clone_frozen();
    auto probe_before = old_model->forward(img, false).class_logits.value();

    // Mutate the live model's parameters arbitrarily.
    state.for_each_param([](const std::string&, ad::Var<float>& v) {
        for (auto& x : v.value_mut().data) x += 0.25f;
    });
    auto probe_after = old_model->forward(img, false).class_logits.value();
    CHECK(probe_before.data == probe_after.data);

    // Frozen clone exposes no trainable parameters.
    old_model->for_each_param([](const std::string&, const ad::Var<float>& v) {
        CHECK_FALSE(v.requires_grad());
    });
}

TEST_CASE("adapter update matrix has rank at most r") {
    // Numeric rank of W1*W2 via Gaussian elimination.
    std::size_t d = 8, r = 2;
    Pcg32 rng(23);
    Tensor<double> w1({d, r}), w2({r, d});
    for (auto& x : w1.data) x = rng.next_uniform(-1, 1);
    for (auto& x : w2.data) x = rng.next_uniform(-1, 1);
    std::vector<std::vector<double>> prod(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < r; ++k)
            for (std::size_t j = 0; j < d; ++j) prod[i][j] += w1.at(i, k) * w2.at(k, j);

    std::size_t rank = 0;
    for (std::size_t col = 0; col < d && rank < d; ++col) {
        std::size_t pivot = rank;
        for (std::size_t row = rank; row < d; ++row)
            if (std::abs(prod[row][col]) > std::abs(prod[pivot][col])) pivot = row;
        if (std::abs(prod[pivot][col]) < 1e-9) continue;
        std::swap(prod[pivot], prod[rank]);
        for (std::size_t row = rank + 1; row < d; ++row) {
            double f = prod[row][col] / prod[rank][col];
            for (std::size_t j = col; j < d; ++j) prod[row][j] -= f * prod[rank][j];
        }
        ++rank;
    }
    CHECK(rank <= r);
}
