#pragma once

// Scenario report emission: schema-versioned JSON, per-class metric CSV, and
// static SVG plots (loss curves, per-step PQ/mIoU bars, importance strip).

#include <filesystem>

#include <json.hpp>

#include "combo/protocol.hpp"

namespace combo {

nlohmann::ordered_json report_to_json(const ScenarioReport& report,
                                      const nlohmann::ordered_json& config_blob);

// Validates presence/types of the required schema fields; throws on failure.
void validate_report_json(const nlohmann::ordered_json& j);

// Copy with every wall-clock field removed (determinism comparisons).
nlohmann::ordered_json strip_wall_clock(nlohmann::ordered_json j);

// Writes report.json, metrics.csv, and plots (loss_curve.svg, metrics.svg,
// importance.svg) into `dir`.
void write_report_files(const ScenarioReport& report, const nlohmann::ordered_json& config_blob,
                        const std::filesystem::path& dir);

// Metric CSV: one row per (step, class, PQ, SQ, RQ, IoU), stable column order.
std::string metrics_csv(const ScenarioReport& report);

}  // namespace combo
