#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pkdot/datagen.hpp"
#include "pkdot/errors.hpp"
#include "pkdot/models.hpp"
#include "pkdot/trainer.hpp"

namespace pkdot {

// Parsed experiment file: data source, architecture, per-stage training
// configs, ablation grids, and the seed list. Validation is strict; unknown
// keys are rejected so typos cannot silently fall back to defaults.
struct ExperimentConfig {
    std::optional<std::string> data_path;
    std::optional<SyntheticSpec> synthetic;
    ArchSpec arch;
    TrainConfig teacher;
    TrainConfig student;
    std::string teacher_checkpoint;
    AblationGrid ablation;
    std::vector<std::uint64_t> seeds;
    bool has_teacher = false;
    bool has_student = false;
    bool has_ablation = false;
};

namespace cfgdetail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                           const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& item : j.items()) {
        if (known.find(item.key()) == known.end()) {
            throw ConfigError(where + ": unknown key '" + item.key() + "'");
        }
    }
}

template <typename T>
T get_as(const nlohmann::json& j, const std::string& key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

template <typename T>
void maybe(const nlohmann::json& j, const std::string& key, T& out, const std::string& where) {
    if (j.contains(key)) out = get_as<T>(j, key, where);
}

inline void require(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError(where + ": missing required key '" + key + "'");
}

inline SyntheticSpec parse_synthetic(const nlohmann::json& j) {
    reject_unknown(j,
                   {"task", "classes", "regression_targets", "n_samples", "latent_dim", "d_prevalent",
                    "d_privileged", "noise_prevalent", "noise_privileged", "seed", "path"},
                   "data");
    SyntheticSpec s;
    require(j, "task", "data");
    const std::string task = get_as<std::string>(j, "task", "data");
    if (task == "classification") {
        s.task = TaskKind::Classification;
    } else if (task == "regression") {
        s.task = TaskKind::Regression;
    } else {
        throw ConfigError("data.task: expected 'classification' or 'regression', got '" + task + "'");
    }
    maybe(j, "classes", s.classes, "data");
    maybe(j, "regression_targets", s.regression_targets, "data");
    maybe(j, "n_samples", s.n_samples, "data");
    maybe(j, "latent_dim", s.latent_dim, "data");
    maybe(j, "d_prevalent", s.d_prevalent, "data");
    maybe(j, "d_privileged", s.d_privileged, "data");
    maybe(j, "noise_prevalent", s.noise_prevalent, "data");
    maybe(j, "noise_privileged", s.noise_privileged, "data");
    maybe(j, "seed", s.seed, "data");
    try {
        s.validate();
    } catch (const ContractError& e) {
        throw ConfigError(std::string("data: ") + e.what());
    }
    return s;
}

inline ArchSpec parse_arch(const nlohmann::json& j) {
    reject_unknown(j,
                   {"backbone_hidden", "prevalent_embed", "privileged_embed", "tnet_encoder_hidden",
                    "tnet_code", "tnet_decoder_hidden", "fusion_hidden", "embed_dim", "activation"},
                   "model");
    ArchSpec a;
    maybe(j, "backbone_hidden", a.backbone_hidden, "model");
    maybe(j, "prevalent_embed", a.prevalent_embed, "model");
    maybe(j, "privileged_embed", a.privileged_embed, "model");
    maybe(j, "tnet_encoder_hidden", a.tnet_encoder_hidden, "model");
    maybe(j, "tnet_code", a.tnet_code, "model");
    maybe(j, "tnet_decoder_hidden", a.tnet_decoder_hidden, "model");
    maybe(j, "fusion_hidden", a.fusion_hidden, "model");
    maybe(j, "embed_dim", a.embed_dim, "model");
    if (j.contains("activation")) {
        try {
            a.activation = activation_from_name(get_as<std::string>(j, "activation", "model"));
        } catch (const ContractError& e) {
            throw ConfigError(std::string("model.activation: ") + e.what());
        }
    }
    return a;
}

inline SinkhornConfig parse_sinkhorn(const nlohmann::json& j, const std::string& where) {
    reject_unknown(j, {"epsilon", "max_iters", "tolerance"}, where);
    SinkhornConfig s;
    maybe(j, "epsilon", s.epsilon, where);
    maybe(j, "max_iters", s.max_iters, where);
    maybe(j, "tolerance", s.tolerance, where);
    return s;
}

inline TrainConfig parse_train(const nlohmann::json& j, const std::string& where, bool student) {
    std::set<std::string> known{"epochs", "batch_size", "learning_rate", "momentum", "seed", "snapshot_every"};
    if (student) {
        known.insert({"lambda", "k_anchors", "kd_temperature", "sinkhorn", "teacher_checkpoint"});
    }
    reject_unknown(j, known, where);
    TrainConfig c;
    maybe(j, "epochs", c.epochs, where);
    maybe(j, "batch_size", c.batch_size, where);
    maybe(j, "learning_rate", c.learning_rate, where);
    maybe(j, "momentum", c.momentum, where);
    maybe(j, "seed", c.seed, where);
    maybe(j, "snapshot_every", c.snapshot_every, where);
    if (student) {
        maybe(j, "lambda", c.lambda, where);
        maybe(j, "k_anchors", c.k_anchors, where);
        maybe(j, "kd_temperature", c.kd_temperature, where);
        if (j.contains("sinkhorn")) c.sinkhorn = parse_sinkhorn(j.at("sinkhorn"), where + ".sinkhorn");
    }
    return c;
}

inline AblationGrid parse_ablation(const nlohmann::json& j) {
    reject_unknown(j, {"batch_sizes", "k_anchors", "epsilons"}, "ablation");
    AblationGrid g;
    maybe(j, "batch_sizes", g.batch_sizes, "ablation");
    maybe(j, "k_anchors", g.k_anchors, "ablation");
    maybe(j, "epsilons", g.epsilons, "ablation");
    return g;
}

} // namespace cfgdetail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    cfgdetail::reject_unknown(j, {"data", "model", "teacher", "student", "ablation", "seeds"}, "config");
    cfgdetail::require(j, "data", "config");

    ExperimentConfig cfg;
    const nlohmann::json& data = j.at("data");
    if (!data.is_object()) throw ConfigError("data: expected an object");
    if (data.contains("path")) {
        cfgdetail::reject_unknown(data, {"path"}, "data");
        cfg.data_path = cfgdetail::get_as<std::string>(data, "path", "data");
    } else {
        cfg.synthetic = cfgdetail::parse_synthetic(data);
    }

    if (j.contains("model")) cfg.arch = cfgdetail::parse_arch(j.at("model"));

    if (j.contains("teacher")) {
        cfg.teacher = cfgdetail::parse_train(j.at("teacher"), "teacher", false);
        cfg.has_teacher = true;
    }
    cfg.teacher.stage = Stage::Teacher;
    cfg.teacher.arch = cfg.arch;

    if (j.contains("student")) {
        const nlohmann::json& s = j.at("student");
        cfg.student = cfgdetail::parse_train(s, "student", true);
        cfgdetail::maybe(s, "teacher_checkpoint", cfg.teacher_checkpoint, "student");
        cfg.has_student = true;
    }
    cfg.student.arch = cfg.arch;

    if (j.contains("ablation")) {
        cfg.ablation = cfgdetail::parse_ablation(j.at("ablation"));
        cfg.has_ablation = true;
    }
    if (j.contains("seeds")) {
        cfg.seeds = cfgdetail::get_as<std::vector<std::uint64_t>>(j, "seeds", "config");
        if (cfg.seeds.empty()) throw ConfigError("seeds: must not be empty when present");
    }
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_experiment_config(j);
}

inline Dataset load_config_dataset(const ExperimentConfig& cfg) {
    if (cfg.data_path) return load_dataset(*cfg.data_path);
    return generate(*cfg.synthetic);
}

} // namespace pkdot
