#include "combo/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "combo/rng.hpp"

namespace combo {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::kDisk: return "disk";
        case ShapeKind::kSquare: return "square";
        case ShapeKind::kTriangle: return "triangle";
        case ShapeKind::kStripe: return "stripe";
    }
    throw std::logic_error("unknown shape kind");
}

ShapeKind shape_kind_from_name(const std::string& name) {
    if (name == "disk") return ShapeKind::kDisk;
    if (name == "square") return ShapeKind::kSquare;
    if (name == "triangle") return ShapeKind::kTriangle;
    if (name == "stripe") return ShapeKind::kStripe;
    throw std::invalid_argument("unknown shape kind: " + name);
}

void SceneSpec::validate() const {
    if (height < 8 || width < 8) throw std::invalid_argument("scene: H, W must be >= 8");
    if (class_catalog.empty()) throw std::invalid_argument("scene: empty class catalog");
    if (instances_min < 1 || instances_max < instances_min)
        throw std::invalid_argument("scene: bad instance range");
    std::set<ClassId> ids;
    for (const auto& e : class_catalog) {
        if (e.class_id < 1) throw std::invalid_argument("scene: class ids are 1-based");
        if (!ids.insert(e.class_id).second)
            throw std::invalid_argument("scene: duplicate class id in catalog");
    }
    for (std::size_t i = 0; i < class_catalog.size(); ++i) {
        for (std::size_t j = i + 1; j < class_catalog.size(); ++j) {
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                double d = class_catalog[i].color[c] - class_catalog[j].color[c];
                d2 += d * d;
            }
            if (std::sqrt(d2) < 0.1)
                throw std::invalid_argument("scene: catalog colors closer than 0.1");
        }
    }
}

const CatalogEntry& SceneSpec::entry(ClassId c) const {
    for (const auto& e : class_catalog)
        if (e.class_id == c) return e;
    throw std::invalid_argument("scene: class id not in catalog");
}

void ScenarioSpec::validate(std::size_t catalog_size) const {
    if (steps < 1) throw std::invalid_argument("scenario: steps must be >= 1");
    if (n_ini < 1 || n_inc < 0) throw std::invalid_argument("scenario: bad class counts");
    if (steps > 1 && n_inc < 1)
        throw std::invalid_argument("scenario: incremental steps need n_inc >= 1");
    std::size_t needed = static_cast<std::size_t>(n_ini) +
                         static_cast<std::size_t>(n_inc) * static_cast<std::size_t>(steps - 1);
    if (needed > catalog_size)
        throw std::invalid_argument("scenario: class demand exceeds catalog size");
    if (images_per_step < 1) throw std::invalid_argument("scenario: images_per_step >= 1");
}

std::vector<std::vector<ClassId>> step_classes(const ScenarioSpec& scenario,
                                               const std::vector<CatalogEntry>& catalog) {
    scenario.validate(catalog.size());
    std::vector<std::vector<ClassId>> out;
    std::size_t cursor = 0;
    for (int t = 0; t < scenario.steps; ++t) {
        std::size_t take = (t == 0) ? static_cast<std::size_t>(scenario.n_ini)
                                    : static_cast<std::size_t>(scenario.n_inc);
        std::vector<ClassId> cs;
        for (std::size_t i = 0; i < take; ++i) cs.push_back(catalog[cursor + i].class_id);
        cursor += take;
        out.push_back(std::move(cs));
    }
    return out;
}

bool PlacedShape::contains(double x, double y) const {
    double dx = x - cx, dy = y - cy;
    switch (kind) {
        case ShapeKind::kDisk:
            return dx * dx + dy * dy <= size * size;
        case ShapeKind::kSquare:
            return std::abs(dx) <= size && std::abs(dy) <= size;
        case ShapeKind::kTriangle: {
            // Upward triangle: apex at cy - size, base at cy + size.
            if (dy < -size || dy > size) return false;
            double frac = (dy + size) / (2.0 * size);
            return std::abs(dx) <= frac * aux;
        }
        case ShapeKind::kStripe: {
            double c = std::cos(angle), s = std::sin(angle);
            double along = dx * c + dy * s;
            double across = -dx * s + dy * c;
            return std::abs(along) <= size && std::abs(across) <= aux;
        }
    }
    return false;
}

namespace {

// Rasterized footprint at pixel centers.
std::vector<std::size_t> shape_pixels(const PlacedShape& sh, std::size_t h, std::size_t w) {
    std::vector<std::size_t> px;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            if (sh.contains(static_cast<double>(x), static_cast<double>(y)))
                px.push_back(y * w + x);
    return px;
}

float quantize_8bit(double v) {
    double c = std::min(1.0, std::max(0.0, v));
    int level = static_cast<int>(std::lround(c * 255.0));
    return static_cast<float>(level) / 255.0f;
}

}  // namespace

ScenePlan plan_scene(const SceneSpec& spec, const std::vector<ClassId>& active_classes,
                     std::uint64_t rng_seed) {
    spec.validate();
    if (active_classes.empty()) throw std::invalid_argument("plan_scene: active_classes empty");
    std::vector<ClassId> active = active_classes;
    std::sort(active.begin(), active.end());
    for (ClassId c : active) spec.entry(c);  // membership check

    Pcg32 rng(derive_seed(rng_seed, 0x5ce9e));
    double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
    double min_dim = std::min(h, w);

    int want = rng.next_int(spec.instances_min, spec.instances_max);
    ScenePlan plan;
    std::vector<std::uint8_t> occupied(spec.height * spec.width, 0);

    for (int inst = 0; inst < want; ++inst) {
        ClassId cid = active[static_cast<std::size_t>(rng.next_int(0, static_cast<int>(active.size()) - 1))];
        const CatalogEntry& cat = spec.entry(cid);
        bool placed = false;
        // The first instance gets extra attempts so every image carries at
        // least one label.
        int attempts = (inst == 0) ? 250 : 50;
        for (int a = 0; a < attempts && !placed; ++a) {
            PlacedShape sh;
            sh.class_id = cid;
            sh.kind = cat.kind;
            double scale_lo = 0.10, scale_hi = 0.22;
            sh.size = rng.next_uniform(scale_lo * min_dim, scale_hi * min_dim);
            sh.cx = rng.next_uniform(sh.size, w - 1 - sh.size);
            sh.cy = rng.next_uniform(sh.size, h - 1 - sh.size);
            if (sh.kind == ShapeKind::kTriangle) {
                sh.aux = rng.next_uniform(0.8 * sh.size, 1.4 * sh.size);
            } else if (sh.kind == ShapeKind::kStripe) {
                sh.size = rng.next_uniform(0.25 * min_dim, 0.42 * min_dim);  // half-length
                sh.aux = rng.next_uniform(0.05 * min_dim, 0.09 * min_dim);   // half-thickness
                sh.angle = rng.next_uniform(0.0, 3.141592653589793);
                sh.cx = rng.next_uniform(0.25 * w, 0.75 * w);
                sh.cy = rng.next_uniform(0.25 * h, 0.75 * h);
            }
            auto px = shape_pixels(sh, spec.height, spec.width);
            if (px.size() < 4) continue;
            bool clash = false;
            for (std::size_t p : px)
                if (occupied[p]) { clash = true; break; }
            if (clash) continue;
            for (std::size_t p : px) occupied[p] = 1;
            plan.shapes.push_back(sh);
            placed = true;
        }
    }
    if (plan.shapes.empty()) throw std::runtime_error("plan_scene: could not place any shape");
    return plan;
}

ImageSample render_scene(const SceneSpec& spec, const ScenePlan& plan, std::uint64_t rng_seed,
                         const std::string& sample_id) {
    Pcg32 rng(derive_seed(rng_seed, 0x2e4de2));
    std::size_t h = spec.height, w = spec.width;
    ImageSample out;
    out.sample_id = sample_id;
    out.image = Tensor<float>({3, h, w});

    // Textured background: soft gradient + noise.
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double base = 0.25 + 0.12 * (static_cast<double>(y) / static_cast<double>(h)) +
                          0.06 * (static_cast<double>(x) / static_cast<double>(w));
            for (int c = 0; c < 3; ++c)
                out.image.at3(static_cast<std::size_t>(c), y, x) =
                    quantize_8bit(base + spec.noise_std * rng.next_gaussian());
        }
    }

    int next_instance = 1;
    for (const auto& sh : plan.shapes) {
        const CatalogEntry& cat = spec.entry(sh.class_id);
        SegmentLabel lab;
        lab.class_id = sh.class_id;
        lab.instance_id = next_instance++;
        lab.is_pseudo = false;
        lab.mask = Tensor<std::uint8_t>({h, w});
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                if (!sh.contains(static_cast<double>(x), static_cast<double>(y))) continue;
                lab.mask.at(y, x) = 1;
                for (int c = 0; c < 3; ++c)
                    out.image.at3(static_cast<std::size_t>(c), y, x) =
                        quantize_8bit(cat.color[c] + spec.noise_std * rng.next_gaussian());
            }
        }
        out.labels.push_back(std::move(lab));
    }
    return out;
}

ImageSample generate_scene(const SceneSpec& spec, const std::vector<ClassId>& active_classes,
                           std::uint64_t rng_seed, const std::string& sample_id) {
    return render_scene(spec, plan_scene(spec, active_classes, rng_seed), rng_seed, sample_id);
}

Dataset generate_dataset(const SceneSpec& spec, std::size_t n_images, std::uint64_t seed,
                         const std::string& id_prefix) {
    spec.validate();
    std::vector<ClassId> all;
    for (const auto& e : spec.class_catalog) all.push_back(e.class_id);
    Dataset ds;
    ds.scene = spec;
    ds.samples.reserve(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%06zu", id_prefix.c_str(), i);
        ds.samples.push_back(generate_scene(spec, all, derive_seed(seed, i), buf));
    }
    return ds;
}

std::vector<std::vector<ImageSample>> split_incremental(const std::vector<ImageSample>& dataset,
                                                        const ScenarioSpec& scenario,
                                                        const std::vector<CatalogEntry>& catalog) {
    auto classes = step_classes(scenario, catalog);

    std::set<ClassId> present;
    for (const auto& img : dataset)
        for (const auto& lab : img.labels) present.insert(lab.class_id);
    std::string missing;
    for (const auto& cs : classes)
        for (ClassId c : cs)
            if (!present.count(c)) missing += (missing.empty() ? "" : ", ") + std::to_string(c);
    if (!missing.empty())
        throw std::invalid_argument("split_incremental: classes absent from dataset: " + missing);

    std::vector<std::vector<ImageSample>> steps;
    for (const auto& cs : classes) {
        std::set<ClassId> current(cs.begin(), cs.end());
        std::vector<ImageSample> step_set;
        for (const auto& img : dataset) {
            std::vector<SegmentLabel> kept;
            for (const auto& lab : img.labels)
                if (current.count(lab.class_id)) kept.push_back(lab);
            if (kept.empty()) continue;
            ImageSample filtered;
            filtered.image = img.image;  // pixels untouched
            filtered.sample_id = img.sample_id;
            filtered.labels = std::move(kept);
            step_set.push_back(std::move(filtered));
        }
        steps.push_back(std::move(step_set));
    }
    return steps;
}

// ----------------------------------------------------------------- file I/O

namespace {

void write_ppm(const fs::path& path, const Tensor<float>& image) {
    std::size_t h = image.dim(1), w = image.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                row[x * 3 + static_cast<std::size_t>(c)] = static_cast<unsigned char>(
                    std::lround(image.at3(static_cast<std::size_t>(c), y, x) * 255.0f));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

void write_pgm16(const fs::path& path, const Tensor<std::uint16_t>& map) {
    std::size_t h = map.dim(0), w = map.dim(1);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P5\n" << w << " " << h << "\n65535\n";
    std::vector<unsigned char> row(w * 2);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            std::uint16_t v = map.at(y, x);
            row[x * 2] = static_cast<unsigned char>(v >> 8);  // big-endian per PGM spec
            row[x * 2 + 1] = static_cast<unsigned char>(v & 0xff);
        }
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
}

// Reads one whitespace-delimited token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

void parse_pnm_header(std::istream& in, const std::string& magic, const fs::path& path,
                      std::size_t& w, std::size_t& h, long& maxval) {
    std::string m = next_token(in);
    if (m != magic)
        throw std::runtime_error(path.string() + ": malformed header (want " + magic + ")");
    try {
        w = std::stoul(next_token(in));
        h = std::stoul(next_token(in));
        maxval = std::stol(next_token(in));
    } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": malformed header");
    }
    if (w == 0 || h == 0) throw std::runtime_error(path.string() + ": malformed header");
}

Tensor<float> read_ppm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::size_t w, h;
    long maxval;
    parse_pnm_header(f, "P6", path, w, h, maxval);
    if (maxval != 255) throw std::runtime_error(path.string() + ": expected 8-bit PPM");
    Tensor<float> img({3, h, w});
    std::vector<unsigned char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw std::runtime_error(path.string() + ": truncated pixel data");
        for (std::size_t x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at3(static_cast<std::size_t>(c), y, x) =
                    static_cast<float>(row[x * 3 + static_cast<std::size_t>(c)]) / 255.0f;
    }
    return img;
}

Tensor<std::uint16_t> read_pgm16(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path.string());
    std::size_t w, h;
    long maxval;
    parse_pnm_header(f, "P5", path, w, h, maxval);
    if (maxval != 65535) throw std::runtime_error(path.string() + ": expected 16-bit PGM");
    Tensor<std::uint16_t> map({h, w});
    std::vector<unsigned char> row(w * 2);
    for (std::size_t y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw std::runtime_error(path.string() + ": truncated pixel data");
        for (std::size_t x = 0; x < w; ++x)
            map.at(y, x) = static_cast<std::uint16_t>((row[x * 2] << 8) | row[x * 2 + 1]);
    }
    return map;
}

}  // namespace

void write_dataset(const Dataset& dataset, const fs::path& dir) {
    dataset.scene.validate();
    fs::create_directories(dir);

    std::map<ClassId, std::size_t> class_counts;
    for (const auto& e : dataset.scene.class_catalog) class_counts[e.class_id] = 0;

    for (const auto& img : dataset.samples) {
        if (img.sample_id.empty()) throw std::invalid_argument("write_dataset: empty sample id");
        std::size_t h = img.height(), w = img.width();
        if (h != dataset.scene.height || w != dataset.scene.width)
            throw std::invalid_argument("write_dataset: sample dimensions do not match scene");
        fs::path sdir = dir / img.sample_id;
        fs::create_directories(sdir);
        write_ppm(sdir / "image.ppm", img.image);

        Tensor<std::uint16_t> class_map({h, w});
        Tensor<std::uint16_t> instance_map({h, w});
        for (const auto& lab : img.labels) {
            ++class_counts[lab.class_id];
            for (std::size_t p = 0; p < h * w; ++p) {
                if (!lab.mask.data[p]) continue;
                if (instance_map.data[p] != 0)
                    throw std::invalid_argument("write_dataset: overlapping label masks");
                class_map.data[p] = static_cast<std::uint16_t>(lab.class_id);
                instance_map.data[p] = static_cast<std::uint16_t>(lab.instance_id);
            }
        }
        write_pgm16(sdir / "class.pgm", class_map);
        write_pgm16(sdir / "instance.pgm", instance_map);
    }

    ordered_json manifest;
    manifest["version"] = 1;
    manifest["height"] = dataset.scene.height;
    manifest["width"] = dataset.scene.width;
    manifest["instances_min"] = dataset.scene.instances_min;
    manifest["instances_max"] = dataset.scene.instances_max;
    manifest["noise_std"] = dataset.scene.noise_std;
    ordered_json catalog = ordered_json::array();
    for (const auto& e : dataset.scene.class_catalog) {
        ordered_json entry;
        entry["id"] = e.class_id;
        entry["shape"] = shape_kind_name(e.kind);
        entry["color"] = {e.color[0], e.color[1], e.color[2]};
        catalog.push_back(entry);
    }
    manifest["class_catalog"] = catalog;
    ordered_json samples = ordered_json::array();
    for (const auto& img : dataset.samples) samples.push_back(img.sample_id);
    manifest["samples"] = samples;
    ordered_json counts;
    for (const auto& [cid, cnt] : class_counts) counts[std::to_string(cid)] = cnt;
    manifest["class_counts"] = counts;

    std::ofstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("cannot write manifest.json");
    mf << manifest.dump(2) << "\n";
}

Dataset read_dataset(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
    ordered_json manifest;
    try {
        mf >> manifest;
    } catch (const std::exception& e) {
        throw std::runtime_error("manifest.json: parse error: " + std::string(e.what()));
    }
    if (manifest.value("version", 0) != 1)
        throw std::runtime_error("manifest.json: unsupported version");

    Dataset ds;
    ds.scene.height = manifest.at("height").get<std::size_t>();
    ds.scene.width = manifest.at("width").get<std::size_t>();
    ds.scene.instances_min = manifest.value("instances_min", 1);
    ds.scene.instances_max = manifest.value("instances_max", 3);
    ds.scene.noise_std = manifest.value("noise_std", 0.0);
    for (const auto& entry : manifest.at("class_catalog")) {
        CatalogEntry e;
        e.class_id = entry.at("id").get<int>();
        e.kind = shape_kind_from_name(entry.at("shape").get<std::string>());
        for (int c = 0; c < 3; ++c) e.color[c] = entry.at("color").at(c).get<float>();
        ds.scene.class_catalog.push_back(e);
    }
    ds.scene.validate();

    std::set<ClassId> known;
    for (const auto& e : ds.scene.class_catalog) known.insert(e.class_id);

    for (const auto& sid : manifest.at("samples")) {
        fs::path sdir = dir / sid.get<std::string>();
        ImageSample img;
        img.sample_id = sid.get<std::string>();
        img.image = read_ppm(sdir / "image.ppm");
        auto class_map = read_pgm16(sdir / "class.pgm");
        auto instance_map = read_pgm16(sdir / "instance.pgm");
        std::size_t h = img.height(), w = img.width();
        if (h != ds.scene.height || w != ds.scene.width ||
            class_map.dim(0) != h || class_map.dim(1) != w ||
            instance_map.dim(0) != h || instance_map.dim(1) != w)
            throw std::runtime_error(sdir.string() + ": dimension mismatch");

        std::map<int, SegmentLabel> by_instance;
        for (std::size_t p = 0; p < h * w; ++p) {
            int inst = instance_map.data[p];
            int cid = class_map.data[p];
            if ((inst == 0) != (cid == 0))
                throw std::runtime_error(sdir.string() + ": class/instance maps disagree");
            if (inst == 0) continue;
            if (!known.count(cid))
                throw std::runtime_error(sdir.string() + ": unknown class id " +
                                         std::to_string(cid));
            auto& lab = by_instance[inst];
            if (lab.mask.size() == 0) {
                lab.class_id = cid;
                lab.instance_id = inst;
                lab.mask = Tensor<std::uint8_t>({h, w});
            } else if (lab.class_id != cid) {
                throw std::runtime_error(sdir.string() + ": instance with inconsistent class");
            }
            lab.mask.data[p] = 1;
        }
        for (auto& [inst, lab] : by_instance) img.labels.push_back(std::move(lab));
        ds.samples.push_back(std::move(img));
    }
    return ds;
}

bool operator==(const SegmentLabel& a, const SegmentLabel& b) {
    return a.class_id == b.class_id && a.instance_id == b.instance_id &&
           a.is_pseudo == b.is_pseudo && a.mask.shape == b.mask.shape &&
           a.mask.data == b.mask.data;
}

bool operator==(const ImageSample& a, const ImageSample& b) {
    return a.sample_id == b.sample_id && a.image.shape == b.image.shape &&
           a.image.data == b.image.data && a.labels == b.labels;
}

}  // namespace combo
