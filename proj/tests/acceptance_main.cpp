// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// fails. The directional ablation (criterion 7) trains the full grid and is
// the long pole; COMBO_LAB_THREADS caps its parallelism (default 2).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>
#include <vector>

#include <json.hpp>

#include "combo/checkpoint.hpp"
#include "combo/config.hpp"
#include "combo/datagen.hpp"
#include "combo/domain.hpp"
#include "combo/importance.hpp"
#include "combo/losses.hpp"
#include "combo/matching.hpp"
#include "combo/metrics.hpp"
#include "combo/model.hpp"
#include "combo/protocol.hpp"
#include "combo/pseudo.hpp"
#include "combo/report.hpp"
#include "combo/rng.hpp"

using namespace combo;
using ad::Var;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

// ---------------------------------------------------------------- criterion 1

const double kNinf = -std::numeric_limits<double>::infinity();

Tensor<double> masked_logits(std::size_t n, int n_active, int cmax, Pcg32& rng) {
    std::size_t k = static_cast<std::size_t>(cmax) + 2;
    Tensor<double> t({n, k}, std::vector<double>(n * k, kNinf));
    for (std::size_t q = 0; q < n; ++q) {
        for (int c = 1; c <= n_active; ++c)
            t.at(q, static_cast<std::size_t>(c)) = rng.next_uniform(-2, 2);
        t.at(q, k - 1) = rng.next_uniform(-2, 2);
    }
    return t;
}

MatchResult make_match(std::size_t n_queries,
                       std::vector<std::pair<std::size_t, std::size_t>> pairs) {
    MatchResult m;
    m.pairs = std::move(pairs);
    std::vector<bool> used(n_queries, false);
    for (auto [q, s] : m.pairs) used[q] = true;
    for (std::size_t q = 0; q < n_queries; ++q)
        if (!used[q]) m.unmatched_queries.push_back(q);
    return m;
}

SegmentLabel label_of_class(ClassId c, bool pseudo = false) {
    SegmentLabel lab{c, Tensor<std::uint8_t>({2, 2}), c, pseudo};
    lab.mask.at(0, 0) = 1;
    return lab;
}

double loss_grad_check(const std::function<Var<double>(const Var<double>&)>& build,
                       const Tensor<double>& init) {
    auto leaf = Var<double>::leaf(init);
    auto loss = build(leaf);
    loss.backward();
    std::vector<double> analytic, params;
    std::vector<std::size_t> live;
    for (std::size_t i = 0; i < init.size(); ++i) {
        if (!std::isfinite(init.data[i])) continue;
        live.push_back(i);
        params.push_back(init.data[i]);
        analytic.push_back(leaf.grad().size() ? leaf.grad().data[i] : 0.0);
    }
    auto f = [&](const std::vector<double>& p) {
        Tensor<double> t = init;
        for (std::size_t i = 0; i < live.size(); ++i) t.data[live[i]] = p[i];
        return build(Var<double>::constant(t)).scalar();
    };
    return grad_check(f, params, analytic, 1e-6);
}

void criterion_1() {
    Timer timer;
    Pcg32 rng(20260809);
    double worst = 0.0;
    for (int it = 0; it < 50; ++it) {
        auto logits = masked_logits(4, 3, 5, rng);
        auto match = make_match(4, {{0, 1}, {2, 0}});
        std::vector<SegmentLabel> labels{label_of_class(2), label_of_class(3)};
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            return classification_loss(v, match, labels);
        }, logits));

        Tensor<double> z({3, 3});
        for (auto& x : z.data) x = rng.next_uniform(-3, 3);
        Tensor<std::uint8_t> m({3, 3});
        for (auto& x : m.data) x = rng.next_double() < 0.5 ? 1 : 0;
        m.at(1, 1) = 1;
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            return mask_loss(v, m);
        }, z));

        Tensor<double> teacher({2, 3});
        for (auto& x : teacher.data) x = rng.next_uniform(-2, 2);
        Tensor<double> student({2, 5});
        for (auto& x : student.data) x = rng.next_uniform(-2, 2);
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            return hdhl_kl_loss(v, teacher, prefix_aligned_map(3, 5)).loss;
        }, student));

        Tensor<double> qt({3, 4}), qo({3, 4});
        std::vector<double> imp(3);
        for (auto& x : qt.data) x = rng.next_uniform(-2, 2);
        for (auto& x : qo.data) x = rng.next_uniform(-2, 2);
        for (auto& x : imp) x = rng.next_double();
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            return ikd_loss(v, qo, imp);
        }, qt));

        Tensor<double> teacher_full = masked_logits(4, 2, 5, rng);
        LossWeights w;
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            auto dl = hdhl_total<double>(v, teacher_full, match, labels, 6, w);
            TotalLossParts<double> parts;
            parts.l_dl = dl.loss;
            parts.l_ikd = Var<double>::constant(Tensor<double>::scalar(0.4));
            parts.mask_mean = Var<double>::constant(Tensor<double>::scalar(0.2));
            return total_loss(parts, w);
        }, logits));
        Tensor<double> row({3, 3});
        for (auto& x : row.data) x = rng.next_uniform(-2, 2);
        worst = std::max(worst, loss_grad_check([&](const Var<double>& v) {
            TotalLossParts<double> parts;
            parts.l_dl = Var<double>::constant(Tensor<double>::scalar(1.0));
            parts.l_ikd = ikd_loss(v, Tensor<double>({3, 3}), {0.5, 0.7, 0.2});
            parts.mask_mean = mask_loss(v, m);
            return total_loss(parts, w);
        }, row));
    }
    double secs = timer.seconds();
    report(1, worst < 1e-4 && secs < 60.0,
           "loss gradients vs central differences: max rel err " + fmt(worst, 8) + " (< 1e-4), " +
               fmt(secs, 1) + "s (< 60s)");
}

// ---------------------------------------------------------------- criterion 2

void criterion_2() {
    Timer timer;
    bool all_equal = true;
    for (int seed = 0; seed < 200; ++seed) {
        Pcg32 rng(static_cast<std::uint64_t>(seed) + 77);
        std::size_t n = static_cast<std::size_t>(rng.next_int(2, 8));
        std::size_t s = static_cast<std::size_t>(rng.next_int(1, 6));
        if (std::min(n, s) > 6) s = 6;
        CostMatrix cm;
        cm.values = Tensor<double>({n, s});
        for (auto& v : cm.values.data) v = rng.next_uniform(-3, 3);
        auto h = hungarian(cm);
        auto b = brute_force_match(cm);
        all_equal = all_equal && h.total(cm) == b.total(cm) && h.pairs == b.pairs;
    }
    double secs = timer.seconds();
    report(2, all_equal && secs < 10.0,
           std::string("hungarian total == brute force on 200 random instances, exact") +
               " (pair sets identical), " + fmt(secs, 2) + "s (< 10s)");
}

// ---------------------------------------------------------------- criterion 3

void criterion_3() {
    // (a) identical distributions -> 0 within 1e-10.
    Pcg32 rng(99);
    double worst_zero = 0.0;
    for (int it = 0; it < 20; ++it) {
        Tensor<double> teacher({2, 3});
        for (auto& x : teacher.data) x = rng.next_uniform(-2, 2);
        Tensor<double> student({2, 4}, std::vector<double>(8, kNinf));
        for (std::size_t q = 0; q < 2; ++q) {
            student.at(q, 0) = teacher.at(q, 0);
            student.at(q, 1) = teacher.at(q, 1);
            student.at(q, 3) = teacher.at(q, 2);
        }
        auto res = hdhl_kl_loss(Var<double>::leaf(student), teacher, prefix_aligned_map(3, 4));
        worst_zero = std::max(worst_zero, std::abs(res.loss.scalar()));
    }

    // (b) [0.5,0.5] teacher vs uniform-3 student == log 1.5 within 1e-9.
    Tensor<double> teacher2({1, 2});
    Tensor<double> student3({1, 3});
    double log15 = hdhl_kl_loss(Var<double>::leaf(student3), teacher2, prefix_aligned_map(2, 3))
                       .loss.scalar();
    double err_log15 = std::abs(log15 - std::log(1.5));

    // (c) finite-difference gradient wrt each new-class logit == student prob.
    double worst_grad = 0.0;
    for (int it = 0; it < 25; ++it) {
        Tensor<double> teacher({1, 3});
        for (auto& x : teacher.data) x = rng.next_uniform(-2, 2);
        Tensor<double> student({1, 5});
        for (auto& x : student.data) x = rng.next_uniform(-2, 2);
        ProbDistribution q = softmax({student.data.begin(), student.data.end()});
        for (std::size_t c : {2ul, 3ul}) {
            auto f = [&](double delta) {
                Tensor<double> s2 = student;
                s2.at(0, c) += delta;
                return hdhl_kl_loss(Var<double>::constant(s2), teacher, prefix_aligned_map(3, 5))
                    .loss.scalar();
            };
            double fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            worst_grad = std::max(worst_grad,
                                  std::abs(fd - q.probs[c]) / std::max(1.0, std::abs(q.probs[c])));
        }
    }
    bool pass = worst_zero <= 1e-10 && err_log15 <= 1e-9 && worst_grad < 1e-4;
    report(3, pass,
           "distillation-KL analytics: |KL(p,p)| " + fmt(worst_zero, 12) + " (<= 1e-10), |KL - "
           "log1.5| " + fmt(err_log15, 12) + " (<= 1e-9), softmax-KL gradient identity rel err " +
               fmt(worst_grad, 8) + " (< 1e-4)");
}

// ---------------------------------------------------------------- criterion 4

SceneSpec acceptance_scene() {
    SceneSpec scene;
    scene.height = scene.width = 20;
    scene.instances_min = 1;
    scene.instances_max = 3;
    scene.noise_std = 0.02;
    const float pal[6][3] = {{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.15f, 0.2f, 0.9f},
                             {0.9f, 0.85f, 0.1f}, {0.85f, 0.15f, 0.8f}, {0.1f, 0.8f, 0.85f}};
    const ShapeKind kinds[4] = {ShapeKind::kDisk, ShapeKind::kSquare, ShapeKind::kTriangle,
                                ShapeKind::kStripe};
    for (int i = 0; i < 6; ++i) {
        CatalogEntry e;
        e.class_id = i + 1;
        e.kind = kinds[i % 4];
        for (int c = 0; c < 3; ++c) e.color[c] = pal[i][c];
        scene.class_catalog.push_back(e);
    }
    return scene;
}

ModelConfig acceptance_model(const SceneSpec& scene) {
    ModelConfig mc;
    mc.n_queries = 16;
    mc.query_dim = 32;
    mc.decoder_layers = 3;
    mc.max_classes = 6;
    mc.adapter_rank = 8;
    mc.backbone_channels = 12;
    mc.height = scene.height;
    mc.width = scene.width;
    return mc;
}

TrainConfig acceptance_train(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.iterations_per_class = 200;
    cfg.batch_size = 2;
    cfg.seed = seed;
    cfg.weights.lambda_ikd = 0.3;  // desk-scale value; 3 suits much larger models
    return cfg;
}

void criterion_4() {
    // Tiny 3-step scenario: importance stays in [0,1] end to end.
    auto scene = acceptance_scene();
    auto train = generate_dataset(scene, 45, 404);
    auto val = generate_dataset(scene, 6, 405, "val");
    ScenarioSpec scenario{4, 1, 3, 15, 404};
    ModelConfig mc = acceptance_model(scene);
    TrainConfig cfg = acceptance_train(404);
    cfg.iterations_per_class = 5;
    auto rep = run_scenario(train, val, scenario, mc, cfg);
    bool in_range = rep.steps.size() == 3;
    for (const auto& s : rep.steps)
        for (double v : s.importance_next) in_range = in_range && v >= 0.0 && v <= 1.0;

    // t=1: output equals I_Ct regardless of the incoming vector.
    CostBuffer buffer{{3.0, -1.0, 5.0, 0.0}, 2};
    ImportanceVector garbage{{0.9, 0.1, 0.4, 0.7}, 1};
    auto pure = finalize_importance(buffer, garbage, 0, 4);
    auto zero_init = finalize_importance(buffer, ImportanceVector::initial(4), 0, 4);
    bool t1_exact = pure.values == zero_init.values;

    // 100/10 weighting example, 1e-12.
    CostBuffer b2{{10.0, 0.0}, 1};
    ImportanceVector i2{{1.0, 0.0}, 2};
    auto blended = finalize_importance(b2, i2, 100, 10);
    bool weighting = std::abs(blended.values[0] - 100.0 / 110.0) < 1e-12 &&
                     std::abs(blended.values[1] - 10.0 / 110.0) < 1e-12;

    // argmin(buffer) == argmax(I_Ct) on 100 random buffers.
    Pcg32 rng(4);
    bool duality = true;
    for (int it = 0; it < 100; ++it) {
        std::size_t n = static_cast<std::size_t>(rng.next_int(2, 24));
        CostBuffer b;
        b.images_seen = 1;
        b.values.resize(n);
        for (auto& v : b.values) v = rng.next_uniform(-50, 50);
        auto i_ct = finalize_importance(b, ImportanceVector::initial(n), 0, 3);
        std::size_t amin = static_cast<std::size_t>(
            std::min_element(b.values.begin(), b.values.end()) - b.values.begin());
        std::size_t amax = static_cast<std::size_t>(
            std::max_element(i_ct.values.begin(), i_ct.values.end()) - i_ct.values.begin());
        duality = duality && amin == amax && i_ct.values[amin] == 1.0;
    }
    report(4, in_range && t1_exact && weighting && duality,
           std::string("importance estimation: range [0,1] over 3 steps ") +
               (in_range ? "ok" : "VIOLATED") + ", t=1 degeneracy exact, 100/10 blend within "
               "1e-12, argmin(buffer)==argmax(importance) on 100 buffers");
}

// ---------------------------------------------------------------- criterion 5

void criterion_5() {
    auto scene = acceptance_scene();
    ModelConfig mc = acceptance_model(scene);
    ModelState state(mc, 5);
    state.begin_step(1, {1, 2, 3, 4}, 5);
    state.begin_step(2, {5}, 5);

    Pcg32 rng(55);
    Tensor<float> img({3, mc.height, mc.width});
    for (auto& x : img.data) x = rng.next_float();
    auto with = state.forward(img, true);
    auto without = state.forward(img, false);
    bool identical = with.class_logits.value().data == without.class_logits.value().data &&
                     with.mask_logits.value().data == without.mask_logits.value().data;
    for (std::size_t l = 0; l < mc.decoder_layers; ++l)
        identical = identical && with.queries_per_layer[l].value().data ==
                                     without.queries_per_layer[l].value().data;

    std::size_t count = state.adapters().at(5).parameter_count();
    bool count_ok = count == 2 * mc.query_dim * mc.adapter_rank;

    ModelConfig wide = mc;
    wide.query_dim = 256;
    wide.adapter_rank = 16;
    wide.n_queries = 4;
    ModelState wide_state(wide, 6);
    wide_state.begin_step(1, {1}, 6);
    wide_state.begin_step(2, {2}, 6);
    std::size_t wide_count = wide_state.adapters().at(2).parameter_count();

    report(5, identical && count_ok && wide_count == 8192,
           "adapter structure: post-begin_step outputs bitwise identical with/without routing; "
           "parameter count 2*D*r (D=256, r=16 -> " + std::to_string(wide_count) + " == 8192)");
}

// ---------------------------------------------------------------- criterion 6

void criterion_6() {
    Timer timer;
    auto blank = [](std::size_t h, std::size_t w) {
        PanopticMap m;
        m.class_map = Tensor<std::uint16_t>({h, w});
        m.instance_map = Tensor<std::uint16_t>({h, w});
        return m;
    };
    auto paint = [](PanopticMap& m, std::size_t y0, std::size_t y1, std::size_t x0,
                    std::size_t x1, std::uint16_t cls, std::uint16_t inst) {
        for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) {
                m.class_map.at(y, x) = cls;
                m.instance_map.at(y, x) = inst;
            }
    };

    auto gt = blank(10, 10);
    paint(gt, 0, 2, 0, 5, 1, 1);
    auto pred = blank(10, 10);
    paint(pred, 0, 2, 0, 4, 1, 1);
    auto r1 = panoptic_quality({pred}, {gt}, {{1}, {}});
    bool case_08 = std::abs(r1.per_class[1].pq() - 0.8) < 1e-12 &&
                   std::abs(r1.per_class[1].sq() - 0.8) < 1e-12 &&
                   std::abs(r1.per_class[1].rq() - 1.0) < 1e-12;

    auto gt2 = gt;
    paint(gt2, 5, 7, 5, 8, 1, 2);
    auto r2 = panoptic_quality({pred}, {gt2}, {{1}, {}});
    bool case_fn = std::abs(r2.per_class[1].pq() - 0.8 / 1.5) < 1e-12;

    auto r3 = panoptic_quality({gt2}, {gt2}, {{1}, {}});
    bool case_perfect = std::abs(r3.per_class[1].pq() - 1.0) < 1e-12;

    // PQ == SQ*RQ on random maps.
    Pcg32 rng(66);
    bool identity = true;
    for (int it = 0; it < 150; ++it) {
        auto a = blank(9, 9);
        auto b = blank(9, 9);
        for (int s = 0; s < 3; ++s) {
            std::size_t y0 = static_cast<std::size_t>(rng.next_int(0, 6));
            std::size_t x0 = static_cast<std::size_t>(rng.next_int(0, 6));
            paint(a, y0, y0 + static_cast<std::size_t>(rng.next_int(1, 3)), x0,
                  x0 + static_cast<std::size_t>(rng.next_int(1, 3)),
                  static_cast<std::uint16_t>(rng.next_int(1, 3)),
                  static_cast<std::uint16_t>(s + 1));
            std::size_t y1 = static_cast<std::size_t>(rng.next_int(0, 6));
            std::size_t x1 = static_cast<std::size_t>(rng.next_int(0, 6));
            paint(b, y1, y1 + static_cast<std::size_t>(rng.next_int(1, 3)), x1,
                  x1 + static_cast<std::size_t>(rng.next_int(1, 3)),
                  static_cast<std::uint16_t>(rng.next_int(1, 3)),
                  static_cast<std::uint16_t>(s + 1));
        }
        auto r = panoptic_quality({a}, {b}, {{1, 2, 3}, {}});
        for (const auto& [cid, m] : r.per_class)
            if (m.pq_defined()) identity = identity && std::abs(m.pq() - m.sq() * m.rq()) < 1e-9;
    }

    // mIoU formula cases.
    auto mgt = blank(10, 10);
    paint(mgt, 0, 2, 0, 4, 1, 1);
    auto mpred = mgt;
    paint(mpred, 5, 6, 0, 2, 1, 2);
    auto mr = miou({mpred}, {mgt}, {{1}, {}});
    bool miou_cases = std::abs(mr.per_class[1].iou() - 0.8) < 1e-12;
    auto mperf = miou({mgt}, {mgt}, {{1}, {}});
    miou_cases = miou_cases && std::abs(mperf.per_class[1].iou() - 1.0) < 1e-12;

    double secs = timer.seconds();
    report(6, case_08 && case_fn && case_perfect && identity && miou_cases && secs < 10.0,
           "metric suite: PQ hand cases (0.8, 0.5333, 1.0), PQ==SQ*RQ within 1e-9 on random "
           "maps, IoU counting cases, " + fmt(secs, 2) + "s (< 10s)");
}

// ------------------------------------------------------------ criteria 7 + 8

struct GridResult {
    double all_pq = 0;
    double retention = 0;  // step-3 base mIoU / step-1 base mIoU
    double consistency = 0;  // final-step layer L-1 vs L argmax agreement
};

int thread_cap() {
    const char* env = std::getenv("COMBO_LAB_THREADS");
    if (env) return std::max(1, std::atoi(env));
    return std::min(2u, std::max(1u, std::thread::hardware_concurrency()));
}

void criterion_7() {
    Timer timer;
    auto scene = acceptance_scene();
    ScenarioSpec scenario{4, 1, 3, 50, 0};
    ModelConfig mc = acceptance_model(scene);

    struct Job {
        std::uint64_t seed;
        int grid;
    };
    struct Flags {
        const char* name;
        bool pseudo, hdhl, ikd, qcr;
    };
    const Flags grid[4] = {{"FT", false, false, false, false},
                           {"baseline", true, false, false, false},
                           {"baseline+HDHL", true, true, false, false},
                           {"CoMBO", true, true, true, true}};

    std::vector<Job> jobs;
    for (std::uint64_t seed = 0; seed < 5; ++seed)
        for (int g = 0; g < 4; ++g) jobs.push_back({seed, g});
    std::vector<GridResult> results(jobs.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            const Job& job = jobs[i];
            ScenarioSpec sc = scenario;
            sc.seed = job.seed;
            auto train = generate_dataset(scene, 150, job.seed);
            auto val = generate_dataset(scene, 64, job.seed + 5000, "val");
            TrainConfig cfg = acceptance_train(job.seed);
            cfg.pseudo = grid[job.grid].pseudo;
            cfg.hdhl = grid[job.grid].hdhl;
            cfg.ikd = grid[job.grid].ikd;
            cfg.qcr = grid[job.grid].qcr;
            auto rep = run_scenario(train, val, sc, mc, cfg);
            double base1 = rep.steps[0].metrics.base.miou;
            double base3 = rep.steps[2].metrics.base.miou;
            results[i].all_pq = rep.steps[2].metrics.all.pq;
            results[i].retention = base1 > 0 ? base3 / base1 : 0.0;
            results[i].consistency = rep.steps[2].selection_consistency;
        }
    };
    int cap = thread_cap();
    if (cap <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < cap; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    double mean_pq[4] = {0, 0, 0, 0}, mean_ret[4] = {0, 0, 0, 0};
    double per_seed_pq[5][4], per_seed_ret[5][4];
    double combo_consistency = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        per_seed_pq[jobs[i].seed][jobs[i].grid] = results[i].all_pq;
        per_seed_ret[jobs[i].seed][jobs[i].grid] = results[i].retention;
        mean_pq[jobs[i].grid] += results[i].all_pq / 5.0;
        mean_ret[jobs[i].grid] += results[i].retention / 5.0;
        if (jobs[i].grid == 3) combo_consistency += results[i].consistency / 5.0;
    }
    // Routing premise statistic: reported, with 0.9 as the expectation bound
    // (values in [0.9, 0.95) are reported rather than failed).
    std::printf("      [INFO] selection consistency (layer L-1 vs L argmax, full config): "
                "%.3f%s\n",
                combo_consistency,
                combo_consistency > 0.95 ? "" : combo_consistency > 0.9
                    ? "  (note: below the 0.95 typical level)"
                    : "  (WARN: below the 0.9 premise bound)");

    for (int g = 0; g < 4; ++g)
        std::printf("      %-14s mean all-PQ %.4f  mean base-retention %.3f\n", grid[g].name,
                    mean_pq[g], mean_ret[g]);
    for (int s = 0; s < 5; ++s)
        std::printf("      seed %d: PQ %s/%s/%s/%s  retention FT %s CoMBO %s\n", s,
                    fmt(per_seed_pq[s][0], 3).c_str(), fmt(per_seed_pq[s][1], 3).c_str(),
                    fmt(per_seed_pq[s][2], 3).c_str(), fmt(per_seed_pq[s][3], 3).c_str(),
                    fmt(per_seed_ret[s][0], 3).c_str(), fmt(per_seed_ret[s][3], 3).c_str());

    bool mean_order = mean_pq[0] < mean_pq[1] && mean_pq[1] < mean_pq[2] &&
                      mean_pq[2] <= mean_pq[3];
    bool mean_ft_forgets = mean_ret[0] < 0.30;
    bool mean_combo_retains = mean_ret[3] > 0.60;

    int violations = 0;
    for (int s = 0; s < 5; ++s) {
        bool ok = per_seed_pq[s][0] < per_seed_pq[s][1] && per_seed_pq[s][1] < per_seed_pq[s][2] &&
                  per_seed_pq[s][2] <= per_seed_pq[s][3] && per_seed_ret[s][0] < 0.30 &&
                  per_seed_ret[s][3] > 0.60;
        if (!ok) ++violations;
    }
    double secs = timer.seconds();
    bool pass = mean_order && mean_ft_forgets && mean_combo_retains && violations <= 1 &&
                secs < 900.0;
    report(7, pass,
           "directional ablation (5 seeds): mean all-PQ FT " + fmt(mean_pq[0], 3) + " < baseline " +
               fmt(mean_pq[1], 3) + " < +HDHL " + fmt(mean_pq[2], 3) + " <= CoMBO " +
               fmt(mean_pq[3], 3) + "; FT retention " + fmt(mean_ret[0], 3) +
               " (< 0.30), CoMBO retention " + fmt(mean_ret[3], 3) + " (> 0.60); per-seed "
               "violations " + std::to_string(violations) + " (<= 1); " + fmt(secs, 0) +
               "s (< 900s)");
}

void criterion_8() {
#ifndef COMBO_LAB_BIN
    report(8, false, "CLI binary path missing at build time");
#else
    Timer timer;
    auto tmp = fs::temp_directory_path() /
               ("combo_accept_" +
                std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(tmp);

    // Criterion-7 scenario config, one seed, run twice through the CLI.
    nlohmann::ordered_json cfg = run_config_to_json([] {
        RunConfig rc;
        rc.scene = acceptance_scene();
        rc.scenario = ScenarioSpec{4, 1, 3, 50, 0};
        rc.model = acceptance_model(rc.scene);
        rc.model.height = rc.scene.height;
        rc.model.width = rc.scene.width;
        rc.train = acceptance_train(0);
        rc.val_images = 64;
        return rc;
    }());
    {
        std::ofstream f(tmp / "config.json");
        f << cfg.dump(2);
    }
    auto cli = [&](const std::string& args) {
        std::string cmd = std::string(COMBO_LAB_BIN) + " " + args + " >/dev/null 2>&1";
        return WEXITSTATUS(std::system(cmd.c_str()));
    };
    bool ok = cli("generate --config " + (tmp / "config.json").string() + " --out " +
                  (tmp / "data").string()) == 0;
    ok = ok && cli("run --config " + (tmp / "config.json").string() + " --data " +
                   (tmp / "data").string() + " --out " + (tmp / "run_a").string() +
                   " --strict-deterministic") == 0;
    ok = ok && cli("run --config " + (tmp / "config.json").string() + " --data " +
                   (tmp / "data").string() + " --out " + (tmp / "run_b").string() +
                   " --strict-deterministic") == 0;

    bool identical = false;
    if (ok) {
        nlohmann::ordered_json a, b;
        std::ifstream fa(tmp / "run_a" / "report.json"), fb(tmp / "run_b" / "report.json");
        fa >> a;
        fb >> b;
        identical = strip_wall_clock(a) == strip_wall_clock(b) &&
                    strip_wall_clock(a).dump() == strip_wall_clock(b).dump();
    }
    fs::remove_all(tmp);
    report(8, ok && identical,
           "two --strict-deterministic runs produce bit-identical report JSON minus wall-clock "
           "fields (" + fmt(timer.seconds(), 0) + "s)");
#endif
}

// ---------------------------------------------------------------- criterion 9

void criterion_9() {
    ChannelLayout layout{3};
    const float ninf = -std::numeric_limits<float>::infinity();
    auto make_old = [&](std::size_t n, int n_old, std::size_t h, std::size_t w) {
        ModelOutput out;
        std::size_t k = static_cast<std::size_t>(layout.channels());
        out.class_logits = Tensor<float>({n, k}, std::vector<float>(n * k, ninf));
        for (std::size_t q = 0; q < n; ++q) {
            for (int c = 1; c <= n_old; ++c) out.class_logits.at(q, static_cast<std::size_t>(c)) = 0.f;
            out.class_logits.at(q, static_cast<std::size_t>(layout.no_obj())) = 0.f;
        }
        out.mask_logits = Tensor<float>({n, h, w});
        out.refined_flags.assign(n, false);
        return out;
    };

    // Independent per-pixel enumeration.
    auto oracle = [&](const ModelOutput& old_out, const std::vector<SegmentLabel>& gt,
                      const PseudoConfig& pc) {
        std::size_t n = old_out.class_logits.rows();
        std::size_t h = old_out.mask_logits.dim(1), w = old_out.mask_logits.dim(2);
        std::vector<double> conf(n);
        std::vector<int> cw(n);
        std::vector<std::vector<double>> mw(n, std::vector<double>(h * w));
        for (std::size_t q = 0; q < n; ++q) {
            std::vector<double> row(old_out.class_logits.cols());
            for (std::size_t c = 0; c < row.size(); ++c) row[c] = old_out.class_logits.at(q, c);
            auto probs = softmax(row).probs;
            int best = -1;
            double bp = -1;
            for (int c = 1; c <= layout.max_classes; ++c)
                if (probs[static_cast<std::size_t>(c)] > bp) {
                    bp = probs[static_cast<std::size_t>(c)];
                    best = c;
                }
            conf[q] = bp;
            cw[q] = best;
            for (std::size_t p = 0; p < h * w; ++p) {
                double z = old_out.mask_logits.data[q * h * w + p];
                mw[q][p] = bp / (1.0 + std::exp(-z));
            }
        }
        std::vector<std::uint8_t> covered(h * w, 0);
        for (const auto& lab : gt)
            for (std::size_t p = 0; p < h * w; ++p) covered[p] |= lab.mask.data[p];
        std::map<std::size_t, std::vector<std::size_t>> win;
        for (std::size_t p = 0; p < h * w; ++p) {
            if (covered[p]) continue;
            std::size_t bq = 0;
            for (std::size_t q = 1; q < n; ++q)
                if (mw[q][p] > mw[bq][p]) bq = q;
            if (conf[bq] > pc.confidence_threshold &&
                (pc.mask_threshold == 0.0 || mw[bq][p] > pc.mask_threshold))
                win[bq].push_back(p);
        }
        int next_inst = 1;
        for (const auto& lab : gt) next_inst = std::max(next_inst, lab.instance_id + 1);
        std::vector<SegmentLabel> out;
        for (const auto& [q, px] : win) {
            if (px.size() < pc.min_pixels) continue;
            SegmentLabel lab;
            lab.class_id = cw[q];
            lab.instance_id = next_inst++;
            lab.is_pseudo = true;
            lab.mask = Tensor<std::uint8_t>({h, w});
            for (auto p : px) lab.mask.data[p] = 1;
            out.push_back(std::move(lab));
        }
        return out;
    };

    auto labels_equal = [](const std::vector<SegmentLabel>& a,
                           const std::vector<SegmentLabel>& b) {
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (!(a[i].class_id == b[i].class_id && a[i].instance_id == b[i].instance_id &&
                  a[i].mask.data == b[i].mask.data))
                return false;
        return true;
    };

    // Crafted 2-query, 3-class, 4x4 instance.
    auto crafted = make_old(2, 3, 4, 4);
    crafted.class_logits.at(0, 1) = 4.f;
    crafted.class_logits.at(1, 3) = 3.f;
    Pcg32 craft_rng(909);
    for (auto& z : crafted.mask_logits.data) z = static_cast<float>(craft_rng.next_uniform(-3, 3));
    SegmentLabel gt{2, Tensor<std::uint8_t>({4, 4}), 1, false};
    gt.mask.at(0, 0) = gt.mask.at(0, 1) = gt.mask.at(1, 0) = 1;
    PseudoConfig pc_bare;
    pc_bare.mask_threshold = 0.0;
    bool crafted_ok = labels_equal(pseudo_labels(crafted, {gt}, pc_bare, layout),
                                   oracle(crafted, {gt}, pc_bare)) &&
                      labels_equal(pseudo_labels(crafted, {gt}, PseudoConfig{}, layout),
                                   oracle(crafted, {gt}, PseudoConfig{}));

    // 1000 random instances: oracle equality and no overlap with current gt.
    Pcg32 rng(910);
    bool random_ok = true;
    for (int it = 0; it < 1000 && random_ok; ++it) {
        std::size_t n = static_cast<std::size_t>(rng.next_int(1, 4));
        std::size_t h = 5, w = 5;
        auto out = make_old(n, 3, h, w);
        for (std::size_t q = 0; q < n; ++q)
            for (int c = 1; c <= 3; ++c)
                out.class_logits.at(q, static_cast<std::size_t>(c)) =
                    static_cast<float>(rng.next_uniform(-2, 4));
        for (auto& z : out.mask_logits.data) z = static_cast<float>(rng.next_uniform(-4, 4));
        std::vector<SegmentLabel> cur;
        SegmentLabel g{3, Tensor<std::uint8_t>({h, w}), 1, false};
        for (auto& m : g.mask.data) m = rng.next_double() < 0.3 ? 1 : 0;
        g.mask.at(2, 2) = 1;
        cur.push_back(g);

        PseudoConfig pc;
        pc.mask_threshold = (it % 2 == 0) ? 0.0 : 0.5;
        auto got = pseudo_labels(out, cur, pc, layout);
        random_ok = random_ok && labels_equal(got, oracle(out, cur, pc));
        for (const auto& lab : got)
            for (std::size_t p = 0; p < h * w; ++p)
                if (lab.mask.data[p] && g.mask.data[p]) random_ok = false;
    }
    report(9, crafted_ok && random_ok,
           "pseudo-labeling: crafted 2-query 4x4 instance matches per-pixel enumeration exactly; "
           "1000 random instances agree with the oracle and never overlap current ground truth");
}

}  // namespace

int main() {
    std::printf("acceptance suite (desk-scale continual segmentation lab)\n");
    Timer total;
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    std::printf("%d/%d criteria passed in %.0fs\n", 9 - g_failures, 9, total.seconds());
    return g_failures == 0 ? 0 : 1;
}
