#pragma once

// Versioned binary checkpoint: model config and step, every parameter array
// (row-major little-endian f32), adapter metadata, per-parameter
// trainability, and the importance vector (f64). Round-trips are bit-exact.

#include <filesystem>

#include "combo/importance.hpp"
#include "combo/model.hpp"

namespace combo {

struct Checkpoint {
    ModelState model;
    ImportanceVector importance;
};

void save_checkpoint(const ModelState& model, const ImportanceVector& importance,
                     const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace combo
