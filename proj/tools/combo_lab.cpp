// combo_lab: dataset generation, scenario runs, ablation sweeps, evaluation,
// and report emission for the continual segmentation lab.
//
//   combo_lab generate --config cfg.json --out DIR
//   combo_lab run      --config cfg.json --data DIR --out DIR [--resume CKPT]
//   combo_lab evaluate --config cfg.json --checkpoint CKPT --data DIR --out DIR
//   combo_lab sweep    --config cfg.json --data DIR --out DIR --param NAME --values a,b,c
//   combo_lab report   --run DIR
//
// COMBO_LAB_THREADS caps sweep parallelism (default 1).

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "combo/checkpoint.hpp"
#include "combo/config.hpp"
#include "combo/datagen.hpp"
#include "combo/protocol.hpp"
#include "combo/report.hpp"

namespace fs = std::filesystem;
using combo::RunConfig;
using ordered_json = nlohmann::ordered_json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string data_dir;
    std::string out_dir;
    std::string flags_override;
    std::int64_t seed_override = -1;
    bool strict = false;
};

int thread_cap(bool strict) {
    if (strict) return 1;
    const char* env = std::getenv("COMBO_LAB_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

RunConfig load_config(const CommonArgs& args) {
    RunConfig cfg = combo::load_run_config(args.config_path);
    if (args.seed_override >= 0) {
        cfg.scenario.seed = static_cast<std::uint64_t>(args.seed_override);
        cfg.train.seed = cfg.scenario.seed;
    }
    if (!args.flags_override.empty()) {
        cfg.train.hdhl = cfg.train.ikd = cfg.train.qcr = cfg.train.pseudo = false;
        if (args.flags_override != "none") {
            std::stringstream ss(args.flags_override);
            std::string flag;
            while (std::getline(ss, flag, ',')) {
                if (flag == "hdhl") cfg.train.hdhl = true;
                else if (flag == "ikd") cfg.train.ikd = true;
                else if (flag == "qcr") cfg.train.qcr = true;
                else if (flag == "pseudo") cfg.train.pseudo = true;
                else throw std::invalid_argument("unknown method flag: " + flag +
                                                 " (valid: hdhl, ikd, qcr, pseudo, none)");
            }
        }
    }
    cfg.train.strict_deterministic = args.strict;
    return cfg;
}

void archive_config(const RunConfig& cfg, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream f(dir / "config.json");
    f << combo::run_config_to_json(cfg).dump(2) << "\n";
}

int cmd_generate(const CommonArgs& args) {
    RunConfig cfg = load_config(args);
    fs::path out = args.out_dir;
    std::size_t train_images = static_cast<std::size_t>(cfg.scenario.images_per_step) *
                               static_cast<std::size_t>(cfg.scenario.steps);
    auto train = combo::generate_dataset(cfg.scene, train_images, cfg.scenario.seed);
    auto val = combo::generate_dataset(cfg.scene, static_cast<std::size_t>(cfg.val_images),
                                       combo::derive_seed(cfg.scenario.seed, 0xa11d), "val");
    combo::write_dataset(train, out / "train");
    combo::write_dataset(val, out / "val");
    archive_config(cfg, out);
    std::cout << "dataset: " << train.samples.size() << " train / " << val.samples.size()
              << " val images under " << out << "\n";
    return 0;
}

combo::ScenarioReport run_one(const RunConfig& cfg, const fs::path& data,
                              const fs::path& run_dir,
                              const std::optional<fs::path>& resume) {
    combo::Dataset train = combo::read_dataset(data / "train");
    combo::Dataset val = combo::read_dataset(data / "val");
    combo::ScenarioRunOptions opts;
    opts.checkpoint_dir = run_dir / "checkpoints";
    if (resume) opts.resume = resume;
    auto report = combo::run_scenario(train, val, cfg.scenario, cfg.model, cfg.train, opts);
    combo::write_report_files(report, combo::run_config_to_json(cfg), run_dir);
    archive_config(cfg, run_dir);
    return report;
}

int cmd_run(const CommonArgs& args, const std::string& resume_path) {
    RunConfig cfg = load_config(args);
    std::optional<fs::path> resume;
    if (!resume_path.empty()) resume = resume_path;
    auto report = run_one(cfg, args.data_dir, args.out_dir, resume);
    const auto& last = report.steps.back();
    std::cout << "run complete: " << report.steps.size() << " step(s); final all-PQ "
              << last.metrics.all.pq << ", all-mIoU " << last.metrics.all.miou << "\n"
              << "report: " << (fs::path(args.out_dir) / "report.json") << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args, const std::string& checkpoint_path) {
    RunConfig cfg = load_config(args);
    combo::Checkpoint ckpt = combo::load_checkpoint(checkpoint_path);
    combo::Dataset val = combo::read_dataset(fs::path(args.data_dir) / "val");
    auto metrics = combo::evaluate_model(ckpt.model, val.samples, cfg.train.qcr,
                                         cfg.train.score_threshold, cfg.train.overlap_threshold);
    ordered_json j;
    j["checkpoint"] = checkpoint_path;
    j["step"] = ckpt.model.step();
    j["pq"] = {{"base", metrics.base.pq},
               {"incremental", metrics.incremental.pq},
               {"all", metrics.all.pq}};
    j["miou"] = {{"base", metrics.base.miou},
                 {"incremental", metrics.incremental.miou},
                 {"all", metrics.all.miou}};
    fs::create_directories(args.out_dir);
    std::ofstream f(fs::path(args.out_dir) / "evaluation.json");
    f << j.dump(2) << "\n";
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args, const std::string& param, const std::string& values_csv) {
    if (param != "lambda_kl" && param != "lambda_ikd" && param != "adapter_rank")
        throw std::invalid_argument(
            "unknown sweep parameter: " + param +
            " (valid: lambda_kl, lambda_ikd, adapter_rank)");
    std::vector<double> values;
    std::stringstream ss(values_csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) values.push_back(std::stod(tok));
    if (values.empty()) throw std::invalid_argument("sweep: empty value list");

    RunConfig base_cfg = load_config(args);
    fs::path out = args.out_dir;
    fs::create_directories(out);

    std::vector<combo::ScenarioReport> reports(values.size());
    std::vector<RunConfig> cfgs(values.size(), base_cfg);
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (param == "lambda_kl") cfgs[i].train.weights.lambda_kl = values[i];
        if (param == "lambda_ikd") cfgs[i].train.weights.lambda_ikd = values[i];
        if (param == "adapter_rank")
            cfgs[i].model.adapter_rank = static_cast<std::size_t>(values[i]);
    }

    int cap = thread_cap(args.strict);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= values.size()) return;
            std::ostringstream name;
            name << param << "_" << values[i];
            reports[i] = run_one(cfgs[i], args.data_dir, out / name.str(), std::nullopt);
        }
    };
    if (cap <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < cap; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    // Combined table mirroring the hyperparameter-study layout.
    ordered_json table = ordered_json::array();
    std::ostringstream csv;
    csv << "value,pq_base,pq_incremental,pq_all,miou_all";
    if (param == "adapter_rank") csv << ",adapter_params_per_class";
    csv << "\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& m = reports[i].steps.back().metrics;
        ordered_json row;
        row["value"] = values[i];
        row["pq"] = {{"base", m.base.pq}, {"incremental", m.incremental.pq}, {"all", m.all.pq}};
        row["miou_all"] = m.all.miou;
        csv << values[i] << "," << m.base.pq << "," << m.incremental.pq << "," << m.all.pq << ","
            << m.all.miou;
        if (param == "adapter_rank") {
            std::size_t params = 2 * cfgs[i].model.query_dim * cfgs[i].model.adapter_rank;
            row["adapter_params_per_class"] = params;
            csv << "," << params;
        }
        csv << "\n";
        table.push_back(row);
    }
    ordered_json j;
    j["parameter"] = param;
    j["rows"] = table;
    std::ofstream jf(out / "sweep.json");
    jf << j.dump(2) << "\n";
    std::ofstream cf(out / "sweep.csv");
    cf << csv.str();
    std::cout << csv.str();
    return 0;
}

int cmd_report(const std::string& run_dir) {
    std::ifstream f(fs::path(run_dir) / "report.json");
    if (!f) throw std::runtime_error("report: cannot read " + run_dir + "/report.json");
    ordered_json j;
    f >> j;
    combo::validate_report_json(j);
    std::cout << "schema ok: " << run_dir << "/report.json\n";
    for (const auto& s : j.at("steps")) {
        std::cout << "step " << s.at("step") << ": all-PQ "
                  << s.at("metrics").at("all").at("pq").get<double>() << ", all-mIoU "
                  << s.at("metrics").at("all").at("miou").get<double>() << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual segmentation lab"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string resume_path, checkpoint_path, sweep_param, sweep_values, report_dir;

    auto add_common = [&](CLI::App* cmd, bool need_data) {
        cmd->add_option("--config", args.config_path, "run configuration JSON")->required();
        cmd->add_option("--out", args.out_dir, "output directory")->required();
        cmd->add_option("--seed", args.seed_override, "override the configured seed");
        cmd->add_option("--flags", args.flags_override,
                        "enable exactly these method flags (comma list of "
                        "hdhl,ikd,qcr,pseudo; 'none' disables all)");
        cmd->add_flag("--strict-deterministic", args.strict,
                      "fully serial execution for bitwise reproducibility");
        if (need_data)
            cmd->add_option("--data", args.data_dir, "dataset directory (from 'generate')")
                ->required();
    };

    auto* generate = app.add_subcommand("generate", "write the synthetic dataset");
    add_common(generate, false);

    auto* run = app.add_subcommand("run", "train and evaluate a scenario");
    add_common(run, true);
    run->add_option("--resume", resume_path, "continue from a step checkpoint");

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on the val split");
    add_common(evaluate, true);
    evaluate->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();

    auto* sweep = app.add_subcommand("sweep", "run a hyperparameter sweep");
    add_common(sweep, true);
    sweep->add_option("--param", sweep_param, "lambda_kl | lambda_ikd | adapter_rank")
        ->required();
    sweep->add_option("--values", sweep_values, "comma-separated values")->required();

    auto* report = app.add_subcommand("report", "validate and summarize a run directory");
    report->add_option("--run", report_dir, "run directory containing report.json")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (generate->parsed()) return cmd_generate(args);
        if (run->parsed()) return cmd_run(args, resume_path);
        if (evaluate->parsed()) return cmd_evaluate(args, checkpoint_path);
        if (sweep->parsed()) return cmd_sweep(args, sweep_param, sweep_values);
        if (report->parsed()) return cmd_report(report_dir);
    } catch (const std::exception& e) {
        ordered_json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
    return 2;
}
