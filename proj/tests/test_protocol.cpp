#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "combo/checkpoint.hpp"
#include "combo/protocol.hpp"
#include "combo/report.hpp"
#include "combo/rng.hpp"

using namespace combo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        auto tag = std::chrono::steady_clock::now().time_since_epoch().count();
        path = fs::temp_directory_path() /
               ("combo_proto_" + std::to_string(tag) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

SceneSpec tiny_scene(std::size_t n_classes) {
    SceneSpec spec;
    spec.height = 16;
    spec.width = 16;
    spec.instances_min = 1;
    spec.instances_max = 2;
    spec.noise_std = 0.02;
    const float palette[6][3] = {{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.1f}, {0.15f, 0.2f, 0.9f},
                                 {0.9f, 0.85f, 0.1f}, {0.85f, 0.15f, 0.8f}, {0.1f, 0.8f, 0.85f}};
    const ShapeKind kinds[4] = {ShapeKind::kDisk, ShapeKind::kSquare, ShapeKind::kTriangle,
                                ShapeKind::kStripe};
    for (std::size_t i = 0; i < n_classes; ++i) {
        CatalogEntry e;
        e.class_id = static_cast<ClassId>(i + 1);
        e.kind = kinds[i % 4];
        for (int c = 0; c < 3; ++c) e.color[c] = palette[i % 6][c];
        spec.class_catalog.push_back(e);
    }
    return spec;
}

ModelConfig tiny_model(const SceneSpec& scene) {
    ModelConfig cfg;
    cfg.n_queries = 6;
    cfg.query_dim = 16;
    cfg.decoder_layers = 2;
    cfg.max_classes = scene.class_catalog.size();
    cfg.adapter_rank = 4;
    cfg.backbone_channels = 6;
    cfg.height = scene.height;
    cfg.width = scene.width;
    return cfg;
}

TrainConfig tiny_train(std::uint64_t seed, int iters = 40) {
    TrainConfig cfg;
    cfg.iterations_per_class = iters;
    cfg.batch_size = 1;
    cfg.seed = seed;
    return cfg;
}

std::vector<float> flatten_params(const ModelState& model) {
    std::vector<float> out;
    model.for_each_param([&](const std::string&, const ad::Var<float>& v) {
        out.insert(out.end(), v.value().data.begin(), v.value().data.end());
    });
    return out;
}

}  // namespace

TEST_CASE("train_step: supervised loss decreases on a single-step scenario") {
    auto scene = tiny_scene(2);
    auto train_ds = generate_dataset(scene, 24, 0);
    ScenarioSpec scenario{2, 0, 1, 24, 0};
    auto steps = split_incremental(train_ds.samples, scenario, scene.class_catalog);

    ScenarioState state;
    state.model = ModelState(tiny_model(scene), 0);
    state.importance = ImportanceVector::initial(6);
    state.model.begin_step(1, {1, 2}, 0);

    TrainConfig cfg = tiny_train(0, 60);  // 2 classes -> 120 iterations
    cfg.hdhl = cfg.ikd = cfg.qcr = cfg.pseudo = false;
    auto report = train_step(state, steps[0], cfg);

    REQUIRE(report.loss_curve.size() == 120);
    double first = std::accumulate(report.loss_curve.begin(), report.loss_curve.begin() + 50, 0.0) / 50;
    double last = std::accumulate(report.loss_curve.end() - 50, report.loss_curve.end(), 0.0) / 50;
    CHECK(last < first);
    CHECK(report.importance_next.size() == 6);
    for (double v : report.importance_next) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("train_step: bitwise deterministic for a fixed seed") {
    auto scene = tiny_scene(2);
    auto train_ds = generate_dataset(scene, 12, 3);
    ScenarioSpec scenario{2, 0, 1, 12, 3};
    auto steps = split_incremental(train_ds.samples, scenario, scene.class_catalog);

    auto run_once = [&]() {
        ScenarioState state;
        state.model = ModelState(tiny_model(scene), 3);
        state.importance = ImportanceVector::initial(6);
        state.model.begin_step(1, {1, 2}, 3);
        TrainConfig cfg = tiny_train(3, 10);
        train_step(state, steps[0], cfg);
        return flatten_params(state.model);
    };
    auto a = run_once();
    auto b = run_once();
    CHECK(a == b);  // bitwise
}

TEST_CASE("train_step: frozen old model is bit-identical before and after") {
    auto scene = tiny_scene(3);
    auto train_ds = generate_dataset(scene, 18, 5);
    ScenarioSpec scenario{2, 1, 2, 9, 5};
    auto steps = split_incremental(train_ds.samples, scenario, scene.class_catalog);

    ScenarioState state;
    state.model = ModelState(tiny_model(scene), 5);
    state.importance = ImportanceVector::initial(6);
    state.model.begin_step(1, {1, 2}, 5);
    TrainConfig cfg = tiny_train(5, 8);
    train_step(state, steps[0], cfg);

    state.old_model = state.model.clone_frozen();
    state.model.begin_step(2, {3}, 5);
    auto probe = train_ds.samples[0].image;
    auto before = state.old_model->forward(probe, true).class_logits.value();
    train_step(state, steps[1], cfg);
    auto after = state.old_model->forward(probe, true).class_logits.value();
    CHECK(before.data == after.data);
}

TEST_CASE("train_step: FT configuration never reads the old model") {
    auto scene = tiny_scene(3);
    auto train_ds = generate_dataset(scene, 18, 7);
    ScenarioSpec scenario{2, 1, 2, 9, 7};
    auto steps = split_incremental(train_ds.samples, scenario, scene.class_catalog);

    ScenarioState state;
    state.model = ModelState(tiny_model(scene), 7);
    state.importance = ImportanceVector::initial(6);
    state.model.begin_step(1, {1, 2}, 7);
    TrainConfig ft = tiny_train(7, 5);
    ft.hdhl = ft.ikd = ft.pseudo = false;
    train_step(state, steps[0], ft);

    // A poisoned stand-in whose forward() throws on these images: training
    // only succeeds if the loop never consults it.
    SceneSpec other = tiny_scene(3);
    other.height = other.width = 8;
    auto poisoned = tiny_model(other);
    state.old_model = std::make_shared<ModelState>(poisoned, 1)->clone_frozen();
    state.model.begin_step(2, {3}, 7);
    CHECK_NOTHROW(train_step(state, steps[1], ft));

    // The distillation configuration must consult it and explode.
    TrainConfig full = tiny_train(7, 5);
    ScenarioState state2;
    state2.model = state.model;  // already at step 2
    state2.importance = state.importance;
    state2.old_model = state.old_model;
    CHECK_THROWS(train_step(state2, steps[1], full));
}

TEST_CASE("train_step: rejects empty datasets and missing old model") {
    auto scene = tiny_scene(2);
    ScenarioState state;
    state.model = ModelState(tiny_model(scene), 1);
    state.importance = ImportanceVector::initial(6);
    state.model.begin_step(1, {1, 2}, 1);
    TrainConfig cfg = tiny_train(1);
    CHECK_THROWS_WITH_AS(train_step(state, {}, cfg), doctest::Contains("empty"),
                         std::invalid_argument);
}

TEST_CASE("checkpoint: bit-exact round-trip") {
    TempDir tmp;
    auto scene = tiny_scene(3);
    ScenarioState state;
    state.model = ModelState(tiny_model(scene), 11);
    state.importance = ImportanceVector::initial(6);
    state.model.begin_step(1, {1, 2}, 11);
    state.old_model = state.model.clone_frozen();
    state.model.begin_step(2, {3}, 11);
    state.importance.values = {0.1, 0.9, 0.3, 0.5, 0.7, 1.0};
    state.importance.step = 2;

    auto p1 = tmp.path / "a.ckpt";
    auto p2 = tmp.path / "b.ckpt";
    save_checkpoint(state.model, state.importance, p1);
    Checkpoint back = load_checkpoint(p1);
    CHECK(back.model.step() == 2);
    CHECK(back.importance.values == state.importance.values);
    CHECK(back.importance.step == 2);
    CHECK(back.model.adapters().size() == 1);
    CHECK(flatten_params(back.model) == flatten_params(state.model));
    CHECK_FALSE(back.model.param("queries.q0").requires_grad());  // frozen at step 2
    CHECK(back.model.param("head.class.w").requires_grad());

    save_checkpoint(back.model, back.importance, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());
}

TEST_CASE("run_scenario: single step reduces to supervised training + evaluation") {
    auto scene = tiny_scene(2);
    auto train_ds = generate_dataset(scene, 16, 13);
    auto val_ds = generate_dataset(scene, 6, 14, "val");
    ScenarioSpec scenario{2, 0, 1, 16, 13};
    auto report = run_scenario(train_ds, val_ds, scenario, tiny_model(scene), tiny_train(13, 6));
    REQUIRE(report.steps.size() == 1);
    CHECK(report.steps[0].classes == std::vector<ClassId>{1, 2});
    CHECK(report.steps[0].metrics.all.miou_classes >= 1);
}

TEST_CASE("run_scenario: 4-1 over 6 classes runs 3 steps with 3 metric snapshots") {
    auto scene = tiny_scene(6);
    auto train_ds = generate_dataset(scene, 36, 17);
    auto val_ds = generate_dataset(scene, 6, 18, "val");
    ScenarioSpec scenario{4, 1, 3, 12, 17};
    TrainConfig cfg = tiny_train(17, 3);
    auto report = run_scenario(train_ds, val_ds, scenario, tiny_model(scene), cfg);
    REQUIRE(report.steps.size() == 3);
    CHECK(report.steps[0].classes == std::vector<ClassId>{1, 2, 3, 4});
    CHECK(report.steps[1].classes == std::vector<ClassId>{5});
    CHECK(report.steps[2].classes == std::vector<ClassId>{6});
    for (const auto& s : report.steps) CHECK(s.selection_consistency >= 0.0);
}

TEST_CASE("run_scenario: resume from a checkpoint matches the uninterrupted run bitwise") {
    auto scene = tiny_scene(3);
    auto train_ds = generate_dataset(scene, 24, 19);
    auto val_ds = generate_dataset(scene, 5, 20, "val");
    ScenarioSpec scenario{2, 1, 2, 12, 19};
    TrainConfig cfg = tiny_train(19, 5);

    TempDir tmp;
    ScenarioRunOptions opts;
    opts.checkpoint_dir = tmp.path / "ckpt";
    auto full = run_scenario(train_ds, val_ds, scenario, tiny_model(scene), cfg, opts);
    REQUIRE(full.steps.size() == 2);

    ScenarioRunOptions resume_opts;
    resume_opts.resume = tmp.path / "ckpt" / "step_1.ckpt";
    auto resumed = run_scenario(train_ds, val_ds, scenario, tiny_model(scene), cfg, resume_opts);
    REQUIRE(resumed.steps.size() == 1);

    auto j_full = report_to_json(full, {});
    auto j_resumed = report_to_json(resumed, {});
    CHECK(strip_wall_clock(j_full).at("steps").at(1) ==
          strip_wall_clock(j_resumed).at("steps").at(0));
}

TEST_CASE("report: schema validation and wall-clock stripping") {
    auto scene = tiny_scene(2);
    auto train_ds = generate_dataset(scene, 12, 23);
    auto val_ds = generate_dataset(scene, 4, 24, "val");
    ScenarioSpec scenario{2, 0, 1, 12, 23};
    auto report = run_scenario(train_ds, val_ds, scenario, tiny_model(scene), tiny_train(23, 3));

    TempDir tmp;
    write_report_files(report, nlohmann::ordered_json::object(), tmp.path / "run");
    CHECK(fs::exists(tmp.path / "run" / "report.json"));
    CHECK(fs::exists(tmp.path / "run" / "metrics.csv"));
    CHECK(fs::exists(tmp.path / "run" / "loss_curve.svg"));

    std::ifstream f(tmp.path / "run" / "report.json");
    nlohmann::ordered_json j;
    f >> j;
    CHECK_NOTHROW(validate_report_json(j));
    auto stripped = strip_wall_clock(j);
    CHECK_FALSE(stripped.count("wall_clock_sec"));
    for (const auto& s : stripped.at("steps")) CHECK_FALSE(s.count("wall_clock_sec"));

    // CSV header and at least one row.
    std::string csv = metrics_csv(report);
    CHECK(csv.rfind("step,class,pq,sq,rq,iou\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') >= 2);
}
