#include "combo/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace combo {

using ordered_json = nlohmann::ordered_json;

namespace {

ordered_json aggregate_json(const SubsetAggregate& a) {
    ordered_json j;
    j["pq"] = a.pq;
    j["sq"] = a.sq;
    j["rq"] = a.rq;
    j["miou"] = a.miou;
    j["pq_classes"] = a.pq_classes;
    j["miou_classes"] = a.miou_classes;
    return j;
}

ordered_json metrics_json(const MetricReport& m) {
    ordered_json j;
    j["base"] = aggregate_json(m.base);
    j["incremental"] = aggregate_json(m.incremental);
    j["all"] = aggregate_json(m.all);
    ordered_json per_class = ordered_json::array();
    for (const auto& [cid, cm] : m.per_class) {
        ordered_json c;
        c["class"] = cid;
        c["pq"] = cm.pq();
        c["sq"] = cm.sq();
        c["rq"] = cm.rq();
        c["iou"] = cm.iou();
        c["pq_defined"] = cm.pq_defined();
        c["iou_defined"] = cm.iou_defined();
        per_class.push_back(c);
    }
    j["per_class"] = per_class;
    return j;
}

// Downsample a loss curve to at most `cap` points by block means.
std::vector<double> downsample(const std::vector<double>& curve, std::size_t cap = 200) {
    if (curve.size() <= cap) return curve;
    std::vector<double> out;
    out.reserve(cap);
    double block = static_cast<double>(curve.size()) / static_cast<double>(cap);
    for (std::size_t b = 0; b < cap; ++b) {
        std::size_t lo = static_cast<std::size_t>(b * block);
        std::size_t hi = std::min(curve.size(), static_cast<std::size_t>((b + 1) * block));
        if (hi <= lo) hi = lo + 1;
        double acc = 0;
        for (std::size_t i = lo; i < hi; ++i) acc += curve[i];
        out.push_back(acc / static_cast<double>(hi - lo));
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream ss;
    ss.precision(6);
    ss << v;
    return ss.str();
}

// ------------------------------------------------------------- svg helpers

std::string svg_header(int w, int h) {
    std::ostringstream ss;
    ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
       << "\" viewBox=\"0 0 " << w << " " << h << "\">\n"
       << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
    return ss.str();
}

std::string polyline(const std::vector<double>& ys, double x0, double y0, double w, double h,
                     double ymin, double ymax, const char* color) {
    std::ostringstream ss;
    ss << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < ys.size(); ++i) {
        double x = x0 + w * static_cast<double>(i) / std::max<std::size_t>(1, ys.size() - 1);
        double frac = (ymax > ymin) ? (ys[i] - ymin) / (ymax - ymin) : 0.5;
        double y = y0 + h - h * frac;
        ss << fmt(x) << "," << fmt(y) << " ";
    }
    ss << "\"/>\n";
    return ss.str();
}

std::string text_at(double x, double y, const std::string& s, int size = 11) {
    std::ostringstream ss;
    ss << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" font-size=\"" << size
       << "\" font-family=\"sans-serif\">" << s << "</text>\n";
    return ss.str();
}

void write_loss_svg(const ScenarioReport& report, const std::filesystem::path& path) {
    std::vector<double> all;
    std::vector<std::size_t> boundaries;
    for (const auto& step : report.steps) {
        auto ds = downsample(step.loss_curve);
        all.insert(all.end(), ds.begin(), ds.end());
        boundaries.push_back(all.size());
    }
    if (all.empty()) return;
    double lo = *std::min_element(all.begin(), all.end());
    double hi = *std::max_element(all.begin(), all.end());
    std::ofstream f(path);
    f << svg_header(640, 320);
    f << text_at(10, 16, "training loss (downsampled, steps concatenated)");
    f << text_at(10, 32, "max " + fmt(hi) + "   min " + fmt(lo));
    f << polyline(all, 40, 48, 560, 230, lo, hi, "#1f77b4");
    std::size_t start = 0;
    for (std::size_t b = 0; b < boundaries.size(); ++b) {
        double x = 40 + 560 * static_cast<double>(start) / std::max<std::size_t>(1, all.size() - 1);
        f << "<line x1=\"" << fmt(x) << "\" y1=\"48\" x2=\"" << fmt(x)
          << "\" y2=\"278\" stroke=\"#cccccc\"/>\n";
        f << text_at(x + 3, 292, "step " + std::to_string(report.steps[b].step));
        start = boundaries[b];
    }
    f << "</svg>\n";
}

void write_metrics_svg(const ScenarioReport& report, const std::filesystem::path& path) {
    std::ofstream f(path);
    f << svg_header(640, 320);
    f << text_at(10, 16, "per-step PQ and mIoU (base / incremental / all)");
    const char* colors[3] = {"#1f77b4", "#ff7f0e", "#2ca02c"};
    double x = 50;
    for (const auto& step : report.steps) {
        double vals_pq[3] = {step.metrics.base.pq, step.metrics.incremental.pq,
                             step.metrics.all.pq};
        double vals_iou[3] = {step.metrics.base.miou, step.metrics.incremental.miou,
                              step.metrics.all.miou};
        for (int g = 0; g < 3; ++g) {
            double h1 = 200 * vals_pq[g];
            f << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(260 - h1)
              << "\" width=\"12\" height=\"" << fmt(h1) << "\" fill=\"" << colors[g] << "\"/>\n";
            double h2 = 200 * vals_iou[g];
            f << "<rect x=\"" << fmt(x + 13) << "\" y=\"" << fmt(260 - h2)
              << "\" width=\"12\" height=\"" << fmt(h2) << "\" fill=\"" << colors[g]
              << "\" opacity=\"0.45\"/>\n";
            x += 30;
        }
        f << text_at(x - 90, 278, "step " + std::to_string(step.step));
        x += 24;
    }
    f << text_at(10, 306, "solid = PQ, translucent = mIoU; blue base, orange incremental, green all");
    f << "</svg>\n";
}

void write_importance_svg(const ScenarioReport& report, const std::filesystem::path& path) {
    if (report.steps.empty()) return;
    std::size_t n = report.steps.back().importance_next.size();
    std::ofstream f(path);
    int cell = 14;
    f << svg_header(60 + static_cast<int>(n) * cell,
                    40 + static_cast<int>(report.steps.size()) * cell);
    f << text_at(10, 16, "importance vector per step (dark = retain)");
    for (std::size_t r = 0; r < report.steps.size(); ++r) {
        const auto& imp = report.steps[r].importance_next;
        for (std::size_t q = 0; q < imp.size(); ++q) {
            int shade = static_cast<int>(std::lround(255.0 * (1.0 - imp[q])));
            f << "<rect x=\"" << 50 + static_cast<int>(q) * cell << "\" y=\""
              << 24 + static_cast<int>(r) * cell << "\" width=\"" << cell - 1 << "\" height=\""
              << cell - 1 << "\" fill=\"rgb(" << shade << "," << shade << ",255)\"/>\n";
        }
        f << text_at(8, 24 + static_cast<int>(r) * cell + 11,
                     "t" + std::to_string(report.steps[r].step), 10);
    }
    f << "</svg>\n";
}

}  // namespace

ordered_json report_to_json(const ScenarioReport& report, const ordered_json& config_blob) {
    ordered_json j;
    j["schema_version"] = report.schema_version;
    j["scenario"] = {{"n_ini", report.scenario.n_ini},
                     {"n_inc", report.scenario.n_inc},
                     {"steps", report.scenario.steps},
                     {"images_per_step", report.scenario.images_per_step},
                     {"seed", report.scenario.seed}};
    j["seed"] = report.seed;
    j["strict_deterministic"] = report.strict_deterministic;
    j["config"] = config_blob;
    ordered_json steps = ordered_json::array();
    for (const auto& s : report.steps) {
        ordered_json sj;
        sj["step"] = s.step;
        sj["classes"] = s.classes;
        sj["metrics"] = metrics_json(s.metrics);
        sj["loss_curve"] = downsample(s.loss_curve);
        sj["importance"] = s.importance_next;
        sj["selection_consistency"] = s.selection_consistency;
        sj["kl_clamp_events"] = s.kl_clamp_events;
        sj["wall_clock_sec"] = s.wall_clock_sec;
        steps.push_back(sj);
    }
    j["steps"] = steps;
    j["wall_clock_sec"] = report.wall_clock_sec;
    return j;
}

void validate_report_json(const ordered_json& j) {
    auto need = [&](const ordered_json& node, const char* key, const char* where) {
        if (!node.count(key))
            throw std::runtime_error(std::string("report schema: missing ") + where + "." + key);
    };
    need(j, "schema_version", "root");
    if (j.at("schema_version").get<int>() != 1)
        throw std::runtime_error("report schema: unsupported version");
    for (const char* key : {"scenario", "seed", "strict_deterministic", "config", "steps",
                            "wall_clock_sec"})
        need(j, key, "root");
    if (!j.at("steps").is_array()) throw std::runtime_error("report schema: steps must be array");
    for (const auto& s : j.at("steps")) {
        for (const char* key : {"step", "classes", "metrics", "loss_curve", "importance",
                                "selection_consistency", "kl_clamp_events", "wall_clock_sec"})
            need(s, key, "steps[]");
        for (const char* key : {"base", "incremental", "all", "per_class"})
            need(s.at("metrics"), key, "steps[].metrics");
    }
}

ordered_json strip_wall_clock(ordered_json j) {
    j.erase("wall_clock_sec");
    for (auto& s : j.at("steps")) s.erase("wall_clock_sec");
    return j;
}

std::string metrics_csv(const ScenarioReport& report) {
    std::ostringstream ss;
    ss << "step,class,pq,sq,rq,iou\n";
    for (const auto& s : report.steps) {
        for (const auto& [cid, cm] : s.metrics.per_class) {
            ss << s.step << "," << cid << "," << fmt(cm.pq()) << "," << fmt(cm.sq()) << ","
               << fmt(cm.rq()) << "," << fmt(cm.iou()) << "\n";
        }
    }
    return ss.str();
}

void write_report_files(const ScenarioReport& report, const ordered_json& config_blob,
                        const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ordered_json j = report_to_json(report, config_blob);
    validate_report_json(j);
    {
        std::ofstream f(dir / "report.json");
        if (!f) throw std::runtime_error("report: cannot write report.json");
        f << j.dump(2) << "\n";
    }
    {
        std::ofstream f(dir / "metrics.csv");
        f << metrics_csv(report);
    }
    write_loss_svg(report, dir / "loss_curve.svg");
    write_metrics_svg(report, dir / "metrics.svg");
    write_importance_svg(report, dir / "importance.svg");
}

}  // namespace combo
