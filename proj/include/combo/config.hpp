#pragma once

// Declarative run configuration: one JSON document combining the scene,
// scenario, model, and training sections. Parsing is fail-closed: unknown
// keys anywhere are errors.

#include <filesystem>
#include <string>

#include <json.hpp>

#include "combo/datagen.hpp"
#include "combo/model.hpp"
#include "combo/protocol.hpp"

namespace combo {

struct RunConfig {
    SceneSpec scene;
    ScenarioSpec scenario;
    ModelConfig model;
    TrainConfig train;
    int val_images = 40;

    void validate() const;
};

RunConfig run_config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json run_config_to_json(const RunConfig& cfg);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace combo
