#include "combo/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace combo {

using ordered_json = nlohmann::ordered_json;

namespace {

void reject_unknown(const ordered_json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
}

SceneSpec scene_from_json(const ordered_json& j) {
    reject_unknown(j, {"height", "width", "classes", "instances", "noise_std"}, "scene");
    SceneSpec s;
    s.height = j.at("height").get<std::size_t>();
    s.width = j.at("width").get<std::size_t>();
    if (j.count("instances")) {
        s.instances_min = j.at("instances").at(0).get<int>();
        s.instances_max = j.at("instances").at(1).get<int>();
    }
    s.noise_std = j.value("noise_std", 0.02);
    for (const auto& e : j.at("classes")) {
        reject_unknown(e, {"id", "shape", "color"}, "scene.classes[]");
        CatalogEntry entry;
        entry.class_id = e.at("id").get<int>();
        entry.kind = shape_kind_from_name(e.at("shape").get<std::string>());
        for (int c = 0; c < 3; ++c) entry.color[c] = e.at("color").at(c).get<float>();
        s.class_catalog.push_back(entry);
    }
    return s;
}

ordered_json scene_to_json(const SceneSpec& s) {
    ordered_json j;
    j["height"] = s.height;
    j["width"] = s.width;
    ordered_json classes = ordered_json::array();
    for (const auto& e : s.class_catalog) {
        ordered_json entry;
        entry["id"] = e.class_id;
        entry["shape"] = shape_kind_name(e.kind);
        entry["color"] = {e.color[0], e.color[1], e.color[2]};
        classes.push_back(entry);
    }
    j["classes"] = classes;
    j["instances"] = {s.instances_min, s.instances_max};
    j["noise_std"] = s.noise_std;
    return j;
}

ScenarioSpec scenario_from_json(const ordered_json& j) {
    reject_unknown(j, {"n_ini", "n_inc", "steps", "images_per_step", "seed"}, "scenario");
    ScenarioSpec s;
    s.n_ini = j.at("n_ini").get<int>();
    s.n_inc = j.at("n_inc").get<int>();
    s.steps = j.at("steps").get<int>();
    s.images_per_step = j.at("images_per_step").get<int>();
    s.seed = j.value("seed", 0ull);
    return s;
}

ordered_json scenario_to_json(const ScenarioSpec& s) {
    ordered_json j;
    j["n_ini"] = s.n_ini;
    j["n_inc"] = s.n_inc;
    j["steps"] = s.steps;
    j["images_per_step"] = s.images_per_step;
    j["seed"] = s.seed;
    return j;
}

ModelConfig model_from_json(const ordered_json& j) {
    reject_unknown(j,
                   {"n_queries", "query_dim", "decoder_layers", "max_classes", "adapter_rank",
                    "backbone_channels"},
                   "model");
    ModelConfig m;
    m.n_queries = j.value("n_queries", m.n_queries);
    m.query_dim = j.value("query_dim", m.query_dim);
    m.decoder_layers = j.value("decoder_layers", m.decoder_layers);
    m.max_classes = j.at("max_classes").get<std::size_t>();
    m.adapter_rank = j.value("adapter_rank", m.adapter_rank);
    m.backbone_channels = j.value("backbone_channels", m.backbone_channels);
    return m;
}

ordered_json model_to_json(const ModelConfig& m) {
    ordered_json j;
    j["n_queries"] = m.n_queries;
    j["query_dim"] = m.query_dim;
    j["decoder_layers"] = m.decoder_layers;
    j["max_classes"] = m.max_classes;
    j["adapter_rank"] = m.adapter_rank;
    j["backbone_channels"] = m.backbone_channels;
    return j;
}

TrainConfig train_from_json(const ordered_json& j) {
    reject_unknown(j,
                   {"iterations_per_class", "lr_initial", "lr_incremental", "batch_size", "flags",
                    "weights", "pseudo", "pseudo_in_mask_loss", "score_threshold",
                    "overlap_threshold", "weight_decay"},
                   "train");
    TrainConfig t;
    t.iterations_per_class = j.value("iterations_per_class", t.iterations_per_class);
    t.lr_initial = j.value("lr_initial", t.lr_initial);
    t.lr_incremental = j.value("lr_incremental", t.lr_incremental);
    t.batch_size = j.value("batch_size", t.batch_size);
    if (j.count("flags")) {
        const auto& f = j.at("flags");
        reject_unknown(f, {"hdhl", "ikd", "qcr", "pseudo"}, "train.flags");
        t.hdhl = f.value("hdhl", t.hdhl);
        t.ikd = f.value("ikd", t.ikd);
        t.qcr = f.value("qcr", t.qcr);
        t.pseudo = f.value("pseudo", t.pseudo);
    }
    if (j.count("weights")) {
        const auto& w = j.at("weights");
        reject_unknown(w, {"lambda_cls", "lambda_kl", "lambda_ikd", "lambda_mask", "no_obj_weight"},
                       "train.weights");
        t.weights.lambda_cls = w.value("lambda_cls", t.weights.lambda_cls);
        t.weights.lambda_kl = w.value("lambda_kl", t.weights.lambda_kl);
        t.weights.lambda_ikd = w.value("lambda_ikd", t.weights.lambda_ikd);
        t.weights.lambda_mask = w.value("lambda_mask", t.weights.lambda_mask);
        t.weights.no_obj_weight = w.value("no_obj_weight", t.weights.no_obj_weight);
    }
    if (j.count("pseudo")) {
        const auto& p = j.at("pseudo");
        reject_unknown(p, {"confidence_threshold", "mask_threshold", "min_pixels"}, "train.pseudo");
        t.pseudo_cfg.confidence_threshold =
            p.value("confidence_threshold", t.pseudo_cfg.confidence_threshold);
        t.pseudo_cfg.mask_threshold = p.value("mask_threshold", t.pseudo_cfg.mask_threshold);
        t.pseudo_cfg.min_pixels = p.value("min_pixels", t.pseudo_cfg.min_pixels);
    }
    t.pseudo_in_mask_loss = j.value("pseudo_in_mask_loss", t.pseudo_in_mask_loss);
    t.score_threshold = j.value("score_threshold", t.score_threshold);
    t.overlap_threshold = j.value("overlap_threshold", t.overlap_threshold);
    t.weight_decay = j.value("weight_decay", t.weight_decay);
    t.clip_grad_norm = j.value("clip_grad_norm", t.clip_grad_norm);
    t.cosine_lr = j.value("cosine_lr", t.cosine_lr);
    return t;
}

ordered_json train_to_json(const TrainConfig& t) {
    ordered_json j;
    j["iterations_per_class"] = t.iterations_per_class;
    j["lr_initial"] = t.lr_initial;
    j["lr_incremental"] = t.lr_incremental;
    j["batch_size"] = t.batch_size;
    j["flags"] = {{"hdhl", t.hdhl}, {"ikd", t.ikd}, {"qcr", t.qcr}, {"pseudo", t.pseudo}};
    j["weights"] = {{"lambda_cls", t.weights.lambda_cls},
                    {"lambda_kl", t.weights.lambda_kl},
                    {"lambda_ikd", t.weights.lambda_ikd},
                    {"lambda_mask", t.weights.lambda_mask},
                    {"no_obj_weight", t.weights.no_obj_weight}};
    j["pseudo"] = {{"confidence_threshold", t.pseudo_cfg.confidence_threshold},
                   {"mask_threshold", t.pseudo_cfg.mask_threshold},
                   {"min_pixels", t.pseudo_cfg.min_pixels}};
    j["pseudo_in_mask_loss"] = t.pseudo_in_mask_loss;
    j["score_threshold"] = t.score_threshold;
    j["overlap_threshold"] = t.overlap_threshold;
    j["weight_decay"] = t.weight_decay;
    j["clip_grad_norm"] = t.clip_grad_norm;
    j["cosine_lr"] = t.cosine_lr;
    return j;
}

}  // namespace

void RunConfig::validate() const {
    scene.validate();
    scenario.validate(scene.class_catalog.size());
    model.validate();
    train.validate();
    if (val_images < 1) throw std::invalid_argument("config: val_images >= 1");
    if (model.max_classes < scene.class_catalog.size())
        throw std::invalid_argument("config: model.max_classes smaller than the class catalog");
}

RunConfig run_config_from_json(const ordered_json& j) {
    reject_unknown(j, {"scene", "scenario", "model", "train", "val_images"}, "config root");
    RunConfig cfg;
    cfg.scene = scene_from_json(j.at("scene"));
    cfg.scenario = scenario_from_json(j.at("scenario"));
    cfg.model = model_from_json(j.at("model"));
    if (j.count("train")) cfg.train = train_from_json(j.at("train"));
    cfg.val_images = j.value("val_images", cfg.val_images);

    // Derived wiring: the model sees scene-sized images and the training seed.
    cfg.model.height = cfg.scene.height;
    cfg.model.width = cfg.scene.width;
    cfg.train.seed = cfg.scenario.seed;
    cfg.validate();
    return cfg;
}

ordered_json run_config_to_json(const RunConfig& cfg) {
    ordered_json j;
    j["scene"] = scene_to_json(cfg.scene);
    j["scenario"] = scenario_to_json(cfg.scenario);
    j["model"] = model_to_json(cfg.model);
    j["train"] = train_to_json(cfg.train);
    j["val_images"] = cfg.val_images;
    return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot read " + path.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("config: parse error in " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace combo
