// Experiment runner: synthetic data generation, teacher/student training with
// PKDOT or point-to-point distillation baselines, ablation sweeps, and run
// comparison reports. stdout carries machine-readable JSON only; progress and
// diagnostics go to stderr.

#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pkdot/config.hpp"
#include "pkdot/pkdot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitMissingCheckpoint = 4;
constexpr int kExitDivergence = 5;

struct StageSpec {
    pkdot::Stage stage;
    pkdot::PointwiseKind kind;
    bool needs_teacher;
};

StageSpec stage_from_flag(const std::string& s) {
    if (s == "teacher") return {pkdot::Stage::Teacher, pkdot::PointwiseKind::Mse, false};
    if (s == "student-pkdot") return {pkdot::Stage::StudentPkdot, pkdot::PointwiseKind::Mse, true};
    if (s == "student-mse") return {pkdot::Stage::StudentPointwise, pkdot::PointwiseKind::Mse, true};
    if (s == "student-cosine") return {pkdot::Stage::StudentPointwise, pkdot::PointwiseKind::Cosine, true};
    if (s == "student-kl") return {pkdot::Stage::StudentPointwise, pkdot::PointwiseKind::Kl, true};
    if (s == "prevalent-only") return {pkdot::Stage::PrevalentOnly, pkdot::PointwiseKind::Mse, false};
    throw pkdot::ConfigError("unknown stage '" + s + "'");
}

std::string stage_label(const StageSpec& spec) {
    if (spec.stage == pkdot::Stage::Teacher) return "teacher";
    if (spec.stage == pkdot::Stage::PrevalentOnly) return "prevalent-only";
    if (spec.stage == pkdot::Stage::StudentPkdot) return "student-pkdot";
    switch (spec.kind) {
        case pkdot::PointwiseKind::Mse: return "student-mse";
        case pkdot::PointwiseKind::Cosine: return "student-cosine";
        case pkdot::PointwiseKind::Kl: return "student-kl";
    }
    return "?";
}

std::vector<std::string> metric_names(const pkdot::Dataset& ds) {
    if (ds.task == pkdot::TaskKind::Classification) return {"accuracy"};
    std::vector<std::string> names;
    for (int t = 0; t < ds.targets.cols(); ++t) names.push_back("ccc_" + std::to_string(t + 1));
    return names;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw pkdot::IoError("cannot open for writing: " + path);
    out << text;
}

void emit(const json& j) { std::cout << j.dump(2) << '\n'; }

int run_generate_data(const std::string& config_path, const std::string& out_path) {
    const pkdot::ExperimentConfig cfg = pkdot::load_experiment_config(config_path);
    if (!cfg.synthetic) {
        throw pkdot::ConfigError("generate-data: config.data must be a synthetic spec, not a path");
    }
    const pkdot::Dataset ds = pkdot::generate(*cfg.synthetic);
    pkdot::save_dataset(ds, out_path);
    std::cerr << "[pkdot] wrote " << ds.n() << " samples to " << out_path << "\n";

    json summary;
    summary["task"] = ds.task == pkdot::TaskKind::Classification ? "classification" : "regression";
    summary["n_samples"] = ds.n();
    summary["path"] = out_path;
    if (ds.task == pkdot::TaskKind::Classification) {
        std::vector<int> counts(static_cast<std::size_t>(ds.classes), 0);
        for (int l : ds.labels) counts[static_cast<std::size_t>(l)]++;
        summary["class_counts"] = counts;
    }
    const pkdot::ProbeReport prev = pkdot::linear_probe(ds, pkdot::Modality::Prevalent);
    const pkdot::ProbeReport priv = pkdot::linear_probe(ds, pkdot::Modality::Privileged);
    if (ds.task == pkdot::TaskKind::Classification) {
        summary["probe_val_accuracy"] = {{"prevalent", prev.val_accuracy}, {"privileged", priv.val_accuracy}};
    } else {
        summary["probe_val_ccc"] = {{"prevalent", prev.val_ccc}, {"privileged", priv.val_ccc}};
    }
    emit(summary);
    return 0;
}

int run_train(const std::string& config_path, const std::string& stage_flag, const std::string& out_dir) {
    const StageSpec spec = stage_from_flag(stage_flag);
    pkdot::ExperimentConfig cfg = pkdot::load_experiment_config(config_path);
    if (spec.stage == pkdot::Stage::Teacher && !cfg.has_teacher) {
        throw pkdot::ConfigError("train --stage teacher: config has no 'teacher' section");
    }
    if (spec.stage != pkdot::Stage::Teacher && !cfg.has_student) {
        throw pkdot::ConfigError("train --stage " + stage_flag + ": config has no 'student' section");
    }

    const pkdot::Dataset ds = pkdot::load_config_dataset(cfg);
    fs::create_directories(out_dir);

    json summary;
    summary["stage"] = stage_label(spec);
    summary["task"] = ds.task == pkdot::TaskKind::Classification ? "classification" : "regression";
    summary["metric_names"] = metric_names(ds);

    if (spec.stage == pkdot::Stage::Teacher) {
        std::cerr << "[pkdot] training teacher for " << cfg.teacher.epochs << " epochs\n";
        const pkdot::TeacherTrainResult r = pkdot::train_teacher(ds, cfg.teacher);
        pkdot::save_teacher_checkpoint(out_dir + "/checkpoint.json", r.teacher, r.tnet);
        r.log.write(out_dir + "/metrics.csv");
        summary["seed"] = cfg.teacher.seed;
        summary["best_epoch"] = r.best_epoch;
        summary["val_task_loss"] = r.best_val.task_loss;
        summary["val_metrics"] = r.best_val.metrics;
    } else {
        pkdot::TrainConfig scfg = cfg.student;
        scfg.stage = spec.stage;
        scfg.pointwise_kind = spec.kind;
        if (scfg.snapshot_every > 0) scfg.snapshot_dir = out_dir + "/snapshots";

        pkdot::TeacherModel teacher;
        pkdot::TNet tnet;
        const pkdot::TeacherModel* teacher_ptr = nullptr;
        const pkdot::TNet* tnet_ptr = nullptr;
        if (spec.needs_teacher) {
            if (cfg.teacher_checkpoint.empty()) {
                throw pkdot::ConfigError("student.teacher_checkpoint is required for stage " + stage_flag);
            }
            if (!fs::exists(cfg.teacher_checkpoint)) {
                std::cerr << "[pkdot] missing teacher checkpoint: " << cfg.teacher_checkpoint << "\n";
                return kExitMissingCheckpoint;
            }
            std::tie(teacher, tnet) = pkdot::load_teacher_checkpoint(cfg.teacher_checkpoint);
            teacher_ptr = &teacher;
            tnet_ptr = &tnet;
        }
        std::cerr << "[pkdot] training " << stage_label(spec) << " for " << scfg.epochs << " epochs\n";
        const pkdot::StudentTrainResult r = pkdot::train_student(ds, teacher_ptr, tnet_ptr, scfg);
        if (r.student) {
            pkdot::save_student_checkpoint(out_dir + "/checkpoint.json", *r.student);
        } else {
            pkdot::save_prevalent_only_checkpoint(out_dir + "/checkpoint.json", *r.prevalent_only);
        }
        r.log.write(out_dir + "/metrics.csv");
        summary["seed"] = scfg.seed;
        summary["best_epoch"] = r.best_epoch;
        summary["val_task_loss"] = r.best_val.task_loss;
        summary["val_metrics"] = r.best_val.metrics;
        summary["lambda"] = scfg.lambda;
    }

    write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
    emit(summary);
    return 0;
}

int run_ablate(const std::string& config_path, const std::string& grid_flag, const std::string& out_path) {
    pkdot::ExperimentConfig cfg = pkdot::load_experiment_config(config_path);
    if (!cfg.has_teacher || !cfg.has_student) {
        throw pkdot::ConfigError("ablate: config needs 'teacher' and 'student' sections");
    }
    if (cfg.seeds.empty()) throw pkdot::ConfigError("ablate: config needs a non-empty 'seeds' list");

    pkdot::AblationGrid grid;
    if (grid_flag == "anchors") {
        grid.k_anchors = cfg.ablation.k_anchors;
    } else if (grid_flag == "epsilon") {
        grid.epsilons = cfg.ablation.epsilons;
    } else if (grid_flag == "batch") {
        grid.batch_sizes = cfg.ablation.batch_sizes;
    } else {
        throw pkdot::ConfigError("ablate: unknown grid '" + grid_flag + "'");
    }
    if (grid.empty()) {
        throw pkdot::ConfigError("ablate: the '" + grid_flag + "' grid is empty in config.ablation");
    }

    const pkdot::Dataset ds = pkdot::load_config_dataset(cfg);
    std::cerr << "[pkdot] ablating over " << grid_flag << " with " << cfg.seeds.size() << " seeds\n";
    const std::vector<pkdot::AblateRow> rows = pkdot::ablate(ds, cfg.teacher, cfg.student, grid, cfg.seeds);
    const int metric_count = ds.task == pkdot::TaskKind::Classification ? 1 : ds.targets.cols();
    write_text(out_path, pkdot::ablate_csv(rows, metric_count));

    json summary;
    summary["grid"] = grid_flag;
    summary["rows"] = rows.size();
    summary["path"] = out_path;
    emit(summary);
    return 0;
}

int run_report(const std::vector<std::string>& run_dirs, const std::string& out_path) {
    struct Group {
        std::vector<double> task_losses;
        std::vector<std::vector<double>> metrics;
    };
    std::map<std::string, Group> groups;
    std::string task;
    std::vector<std::string> names;

    int valid = 0;
    for (const std::string& dir : run_dirs) {
        const std::string path = dir + "/summary.json";
        if (!fs::exists(path)) {
            std::cerr << "[pkdot] skipping " << dir << ": no summary.json\n";
            continue;
        }
        std::ifstream in(path);
        json j;
        try {
            in >> j;
        } catch (const json::parse_error& e) {
            std::cerr << "[pkdot] skipping " << dir << ": " << e.what() << "\n";
            continue;
        }
        const std::string run_task = j.value("task", "");
        if (task.empty()) {
            task = run_task;
            names = j.value("metric_names", std::vector<std::string>{});
        } else if (task != run_task) {
            throw pkdot::ConfigError("report: mixed task types ('" + task + "' vs '" + run_task +
                                     "'); report runs of one task at a time");
        }
        Group& g = groups[j.value("stage", "unknown")];
        g.task_losses.push_back(j.value("val_task_loss", 0.0));
        g.metrics.push_back(j.value("val_metrics", std::vector<double>{}));
        ++valid;
    }
    if (valid == 0) throw pkdot::ConfigError("report: no valid runs found");

    auto mean_std = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        return std::pair<double, double>(mean, std::sqrt(var / static_cast<double>(v.size())));
    };

    std::ostringstream csv;
    csv << "method,runs";
    for (const std::string& n : names) csv << ",mean_" << n << ",std_" << n;
    csv << ",mean_task_loss,std_task_loss\n";
    for (const auto& [label, g] : groups) {
        csv << label << ',' << g.task_losses.size();
        const std::size_t metric_count = g.metrics.front().size();
        for (std::size_t m = 0; m < metric_count; ++m) {
            std::vector<double> column;
            for (const auto& row : g.metrics) column.push_back(m < row.size() ? row[m] : 0.0);
            const auto [mean, sd] = mean_std(column);
            csv << ',' << pkdot::format_double(mean) << ',' << pkdot::format_double(sd);
        }
        const auto [mean, sd] = mean_std(g.task_losses);
        csv << ',' << pkdot::format_double(mean) << ',' << pkdot::format_double(sd) << '\n';
    }
    write_text(out_path, csv.str());

    json summary;
    summary["methods"] = groups.size();
    summary["runs"] = valid;
    summary["path"] = out_path;
    emit(summary);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"PKDOT: privileged knowledge distillation with optimal transport"};
    app.require_subcommand(1);

    std::string config_path, out_path, stage_flag, grid_flag;
    std::vector<std::string> run_dirs;

    CLI::App* gen = app.add_subcommand("generate-data", "Generate a synthetic multimodal dataset CSV");
    gen->add_option("--config", config_path, "experiment config JSON")->required();
    gen->add_option("--out", out_path, "output dataset CSV path")->required();

    CLI::App* train = app.add_subcommand("train", "Train one stage and write checkpoint + metrics");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    train
        ->add_option("--stage", stage_flag,
                     "teacher|student-pkdot|student-mse|student-cosine|student-kl|prevalent-only")
        ->required();
    train->add_option("--out", out_path, "output run directory")->required();

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "Sweep one factor over the config grids");
    ablate_cmd->add_option("--config", config_path, "experiment config JSON")->required();
    ablate_cmd->add_option("--grid", grid_flag, "anchors|epsilon|batch")->required();
    ablate_cmd->add_option("--out", out_path, "output CSV path")->required();

    CLI::App* report = app.add_subcommand("report", "Merge run summaries into a comparison CSV");
    report->add_option("--runs", run_dirs, "run directories containing summary.json")->required();
    report->add_option("--out", out_path, "output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (gen->parsed()) return run_generate_data(config_path, out_path);
        if (train->parsed()) return run_train(config_path, stage_flag, out_path);
        if (ablate_cmd->parsed()) return run_ablate(config_path, grid_flag, out_path);
        if (report->parsed()) return run_report(run_dirs, out_path);
    } catch (const pkdot::ConfigError& e) {
        std::cerr << "[pkdot] config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const pkdot::ParseError& e) {
        std::cerr << "[pkdot] parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const pkdot::ContractError& e) {
        std::cerr << "[pkdot] config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const pkdot::IoError& e) {
        std::cerr << "[pkdot] io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const pkdot::DivergenceError& e) {
        std::cerr << "[pkdot] divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        std::cerr << "[pkdot] error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
