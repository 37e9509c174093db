#pragma once

// Synthetic shape-segmentation scenes and the on-disk dataset format.
//
// Determinism contract: (SceneSpec, seed) fully determines every byte, and
// image channel values are quantized to k/255 at generation time so the
// PPM round-trip is bit-exact. Each image derives its own RNG stream from
// (seed, sample index); parallel and serial generation agree.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "combo/domain.hpp"

namespace combo {

enum class ShapeKind { kDisk, kSquare, kTriangle, kStripe };

const char* shape_kind_name(ShapeKind k);
ShapeKind shape_kind_from_name(const std::string& name);

struct CatalogEntry {
    ClassId class_id = 0;
    ShapeKind kind = ShapeKind::kDisk;
    float color[3] = {0, 0, 0};  // RGB in [0,1]
};

struct SceneSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::vector<CatalogEntry> class_catalog;
    int instances_min = 1;
    int instances_max = 3;
    double noise_std = 0.02;

    void validate() const;  // unique ids, colors pairwise >= 0.1 apart
    const CatalogEntry& entry(ClassId c) const;
};

struct ScenarioSpec {
    int n_ini = 4;
    int n_inc = 1;
    int steps = 3;
    int images_per_step = 80;
    std::uint64_t seed = 0;

    void validate(std::size_t catalog_size) const;
};

// Class set per step, in catalog order: C^1 = first n_ini entries, then
// n_inc entries per incremental step.
std::vector<std::vector<ClassId>> step_classes(const ScenarioSpec& scenario,
                                               const std::vector<CatalogEntry>& catalog);

// One placed shape: analytic geometry, evaluable per pixel.
struct PlacedShape {
    ClassId class_id = 0;
    ShapeKind kind = ShapeKind::kDisk;
    double cx = 0, cy = 0;    // center, pixel coordinates
    double size = 0;          // radius / half-side / half-height / half-length
    double aux = 0;           // stripe: half-thickness; triangle: half-base
    double angle = 0;         // stripe orientation

    bool contains(double x, double y) const;
};

struct ScenePlan {
    std::vector<PlacedShape> shapes;  // non-overlapping, instance i -> id i+1
};

ScenePlan plan_scene(const SceneSpec& spec, const std::vector<ClassId>& active_classes,
                     std::uint64_t rng_seed);
ImageSample render_scene(const SceneSpec& spec, const ScenePlan& plan, std::uint64_t rng_seed,
                         const std::string& sample_id);

// plan + render with the same stream layout.
ImageSample generate_scene(const SceneSpec& spec, const std::vector<ClassId>& active_classes,
                           std::uint64_t rng_seed, const std::string& sample_id = "");

struct Dataset {
    SceneSpec scene;
    std::vector<ImageSample> samples;
};

// Full dataset: every image drawn with all catalog classes active.
Dataset generate_dataset(const SceneSpec& spec, std::size_t n_images, std::uint64_t seed,
                         const std::string& id_prefix = "img");

// Step t keeps the images containing at least one C^t instance, with labels
// filtered to C^t. Throws (listing them) when a scenario class never occurs.
std::vector<std::vector<ImageSample>> split_incremental(const std::vector<ImageSample>& dataset,
                                                        const ScenarioSpec& scenario,
                                                        const std::vector<CatalogEntry>& catalog);

// On-disk format: manifest.json + one folder per sample with image.ppm (P6),
// class.pgm and instance.pgm (P5, 16-bit big-endian, 0 = unlabeled).
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

bool operator==(const SegmentLabel& a, const SegmentLabel& b);
bool operator==(const ImageSample& a, const ImageSample& b);

}  // namespace combo
