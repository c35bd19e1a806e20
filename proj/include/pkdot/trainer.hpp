#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pkdot/datagen.hpp"
#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/io.hpp"
#include "pkdot/losses.hpp"
#include "pkdot/models.hpp"
#include "pkdot/otsolver.hpp"
#include "pkdot/rng.hpp"
#include "pkdot/simgraph.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

enum class Stage { Teacher, StudentPkdot, StudentPointwise, PrevalentOnly };

inline std::string stage_name(Stage s) {
    switch (s) {
        case Stage::Teacher: return "teacher";
        case Stage::StudentPkdot: return "student_pkdot";
        case Stage::StudentPointwise: return "student_pointwise";
        case Stage::PrevalentOnly: return "prevalent_only";
    }
    return "?";
}

struct TrainConfig {
    Stage stage = Stage::Teacher;
    PointwiseKind pointwise_kind = PointwiseKind::Mse;
    int epochs = 30;
    int batch_size = 32;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double lambda = 0.4;
    int k_anchors = 8;
    SinkhornConfig sinkhorn{};
    std::uint64_t seed = 1;
    int snapshot_every = 0;          // 0 disables similarity snapshots
    std::string snapshot_dir;        // where epoch_<E>_{teacher,student}.csv go
    double kd_temperature = 4.0;
    ArchSpec arch;

    void validate() const {
        if (epochs < 0) throw ContractError("TrainConfig: epochs must be >= 0");
        if (batch_size < 2) throw ContractError("TrainConfig: batch_size must be >= 2 (similarity needs b >= 2)");
        if (!(learning_rate > 0.0)) throw ContractError("TrainConfig: learning_rate must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) throw ContractError("TrainConfig: momentum must be in [0, 1)");
        if (lambda < 0.0) throw ContractError("TrainConfig: lambda must be >= 0");
        if (k_anchors < 1 || k_anchors > batch_size) {
            throw ContractError("TrainConfig: k_anchors must be in [1, batch_size]");
        }
        sinkhorn.validate();
    }
};

struct MetricsRow {
    int epoch = 0;
    Split split = Split::Train;
    double task_loss = 0.0;
    double ot_loss = 0.0;
    double total_loss = 0.0;
    std::vector<double> metrics; // accuracy, or CCC per regression target
    double sinkhorn_converged_frac = 1.0;
    double frobenius_gap = 0.0;
};

struct MetricsLog {
    bool classification = true;
    int metric_count = 1;
    std::vector<MetricsRow> rows;

    std::string to_csv() const {
        std::ostringstream out;
        out << "epoch,split,task_loss,ot_loss,total_loss,metric_1";
        if (metric_count > 1) out << ",metric_2";
        out << ",sinkhorn_converged_frac,frobenius_gap\n";
        for (const MetricsRow& r : rows) {
            out << r.epoch << ',' << (r.split == Split::Train ? "train" : "val") << ','
                << format_double(r.task_loss) << ',' << format_double(r.ot_loss) << ','
                << format_double(r.total_loss);
            for (int m = 0; m < metric_count; ++m) {
                out << ',' << format_double(m < static_cast<int>(r.metrics.size()) ? r.metrics[m] : 0.0);
            }
            out << ',' << format_double(r.sinkhorn_converged_frac) << ',' << format_double(r.frobenius_gap)
                << '\n';
        }
        return out.str();
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path);
        out << to_csv();
    }
};

struct EvalResult {
    double task_loss = 0.0;
    std::vector<double> metrics;

    double primary() const {
        if (metrics.empty()) return 0.0;
        double s = 0.0;
        for (double m : metrics) s += m;
        return s / static_cast<double>(metrics.size());
    }
};

namespace detail {

inline std::uint64_t epoch_seed(std::uint64_t base, const char* component, int epoch) {
    std::uint64_t s = base ^ fnv1a(component) ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(epoch + 1));
    return splitmix64(s);
}

inline ClassTargets batch_labels(const Dataset& ds, const std::vector<int>& rows) {
    std::vector<int> labels;
    labels.reserve(rows.size());
    for (int i : rows) labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    return ClassTargets(std::move(labels), ds.classes);
}

inline Tensor2 batch_targets(const Dataset& ds, const std::vector<int>& rows) {
    Tensor2 out(static_cast<int>(rows.size()), ds.targets.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (int t = 0; t < ds.targets.cols(); ++t) out(static_cast<int>(r), t) = ds.targets(rows[r], t);
    return out;
}

// Task loss on the graph: cross-entropy for classification, or the sum of
// per-target 1-CCC losses for regression.
inline NodeId task_loss_node(DiffGraph& g, const Dataset& ds, const std::vector<int>& rows, NodeId output) {
    if (ds.task == TaskKind::Classification) {
        return cross_entropy_loss(g, output, batch_labels(ds, rows));
    }
    const Tensor2 targets = batch_targets(ds, rows);
    NodeId loss = -1;
    for (int t = 0; t < targets.cols(); ++t) {
        Tensor2 col(targets.rows(), 1);
        for (int i = 0; i < targets.rows(); ++i) col(i, 0) = targets(i, t);
        const NodeId term = ccc_loss(g, g.select_cols(output, {t}), col);
        loss = t == 0 ? term : g.add(loss, term);
    }
    return loss;
}

inline double cross_entropy_value(const Tensor2& logits, const std::vector<int>& labels) {
    double acc = 0.0;
    for (int i = 0; i < logits.rows(); ++i) {
        double m = logits(i, 0);
        for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
        double z = 0.0;
        for (int j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - m);
        acc += m + std::log(z) - logits(i, labels[static_cast<std::size_t>(i)]);
    }
    return acc / logits.rows();
}

inline double accuracy_value(const Tensor2& logits, const std::vector<int>& labels) {
    int hits = 0;
    for (int i = 0; i < logits.rows(); ++i) {
        int arg = 0;
        for (int j = 1; j < logits.cols(); ++j) {
            if (logits(i, j) > logits(i, arg)) arg = j;
        }
        if (arg == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / logits.rows();
}

inline EvalResult eval_outputs(const Dataset& ds, const std::vector<int>& rows, const Tensor2& outputs) {
    EvalResult r;
    if (ds.task == TaskKind::Classification) {
        std::vector<int> labels;
        labels.reserve(rows.size());
        for (int i : rows) labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
        r.task_loss = cross_entropy_value(outputs, labels);
        r.metrics.push_back(accuracy_value(outputs, labels));
    } else {
        const Tensor2 targets = batch_targets(ds, rows);
        double loss = 0.0;
        for (int t = 0; t < targets.cols(); ++t) {
            Tensor2 p(outputs.rows(), 1), y(outputs.rows(), 1);
            for (int i = 0; i < outputs.rows(); ++i) {
                p(i, 0) = outputs(i, t);
                y(i, 0) = targets(i, t);
            }
            const double c = ccc_value(p, y);
            r.metrics.push_back(c);
            loss += 1.0 - c;
        }
        r.task_loss = loss;
    }
    return r;
}

// Momentum SGD over (model tensor, graph node) bindings. Velocity order is
// the binding order, so updates are reproducible.
struct SgdState {
    std::vector<Tensor2> velocity;

    void step(std::vector<std::pair<Tensor2*, NodeId>>& params, const DiffGraph& g, double lr, double mu) {
        if (velocity.empty()) {
            for (auto& [tensor, node] : params) velocity.emplace_back(tensor->rows(), tensor->cols(), 0.0);
        }
        for (std::size_t p = 0; p < params.size(); ++p) {
            const Tensor2& grad = g.grad(params[p].second);
            Tensor2& v = velocity[p];
            Tensor2& t = *params[p].first;
            for (std::size_t f = 0; f < t.size(); ++f) {
                v.at(f) = mu * v.at(f) + grad.at(f);
                t.at(f) -= lr * v.at(f);
            }
        }
    }
};

inline int output_dim(const Dataset& ds) {
    return ds.task == TaskKind::Classification ? ds.classes : ds.targets.cols();
}

// First batch_size training samples in original order: the fixed probe batch
// behind the Frobenius-gap diagnostic and similarity snapshots. Training
// samples are the ones the distillation loss acts on, so their similarity
// evolution tracks the transfer itself.
inline std::vector<int> probe_batch(const Dataset& ds, int batch_size) {
    std::vector<int> idx = ds.indices_of(Split::Train);
    if (static_cast<int>(idx.size()) > batch_size) idx.resize(static_cast<std::size_t>(batch_size));
    return idx;
}

} // namespace detail

inline EvalResult evaluate(const TeacherModel& t, const Dataset& ds, Split split) {
    const std::vector<int> rows = ds.indices_of(split);
    if (rows.empty()) throw ContractError("evaluate: empty split");
    const ForwardValues f = forward_teacher_value(t, ds.gather(Modality::Prevalent, rows),
                                                  ds.gather(Modality::Privileged, rows));
    return detail::eval_outputs(ds, rows, f.output);
}

inline EvalResult evaluate(const StudentModel& s, const Dataset& ds, Split split) {
    const std::vector<int> rows = ds.indices_of(split);
    if (rows.empty()) throw ContractError("evaluate: empty split");
    const ForwardValues f = forward_student_value(s, ds.gather(Modality::Prevalent, rows));
    return detail::eval_outputs(ds, rows, f.output);
}

inline EvalResult evaluate(const PrevalentOnlyModel& p, const Dataset& ds, Split split) {
    const std::vector<int> rows = ds.indices_of(split);
    if (rows.empty()) throw ContractError("evaluate: empty split");
    const ForwardValues f = forward_prevalent_only_value(p, ds.gather(Modality::Prevalent, rows));
    return detail::eval_outputs(ds, rows, f.output);
}

struct TeacherTrainResult {
    TeacherModel teacher;
    TNet tnet;
    MetricsLog log;
    int best_epoch = 0;
    EvalResult best_val;
};

// Teacher stage: task loss on the fused model, with the T-Net trained in the
// same pass against detached privileged embeddings (its loss adds no gradient
// to the teacher).
inline TeacherTrainResult train_teacher(const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.stage != Stage::Teacher) throw ContractError("train_teacher: cfg.stage must be teacher");

    Rng teacher_rng = Rng::stream(cfg.seed, "teacher_init");
    Rng tnet_rng = Rng::stream(cfg.seed, "tnet_init");
    TeacherTrainResult result;
    result.teacher = make_teacher(cfg.arch, ds.prevalent.cols(), ds.privileged.cols(),
                                  detail::output_dim(ds), teacher_rng);
    result.tnet = make_tnet(cfg.arch, ds.prevalent.cols(), tnet_rng);
    result.log.classification = ds.task == TaskKind::Classification;
    result.log.metric_count = ds.task == TaskKind::Classification ? 1 : ds.targets.cols();

    TeacherModel best = result.teacher;
    TNet best_tnet = result.tnet;
    EvalResult best_val = evaluate(result.teacher, ds, Split::Val);
    int best_epoch = 0;

    detail::SgdState sgd;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto epoch_batches =
            batches(ds, Split::Train, cfg.batch_size, detail::epoch_seed(cfg.seed, "teacher_batches", epoch));
        double task_sum = 0.0;
        int batch_no = 0;
        for (const std::vector<int>& rows : epoch_batches) {
            ++batch_no;
            try {
                DiffGraph g;
                const TeacherNodes tn = register_teacher(g, result.teacher, true);
                const TNetNodes hn = register_tnet(g, result.tnet, true);
                const NodeId prev_x = g.constant(ds.gather(Modality::Prevalent, rows));
                const NodeId priv_x = g.constant(ds.gather(Modality::Privileged, rows));
                const ModelForward f = forward_teacher(g, result.teacher, tn, prev_x, priv_x);
                const NodeId task = detail::task_loss_node(g, ds, rows, f.output);

                // Hallucination regression target is detached: T-Net gradients
                // never leak into the teacher.
                const NodeId target = g.constant(g.value(f.privileged_embedding));
                const NodeId halluc = forward_tnet(g, result.tnet, hn, prev_x);
                const NodeId diff = g.sub(halluc, target);
                const NodeId tnet_loss = g.mean(g.mul(diff, diff));

                const NodeId combined = g.add(task, tnet_loss);
                g.backward(combined);
                task_sum += g.value(task)(0, 0);

                std::vector<std::pair<Tensor2*, NodeId>> params;
                collect_params(tn.prevalent, result.teacher.prevalent_backbone, params);
                collect_params(tn.privileged, result.teacher.privileged_backbone, params);
                collect_params(tn.fusion, result.teacher.fusion_head, params);
                collect_params(hn.encoder, result.tnet.encoder, params);
                collect_params(hn.decoder, result.tnet.decoder, params);
                sgd.step(params, g, cfg.learning_rate, cfg.momentum);
            } catch (const DomainError& e) {
                throw DivergenceError("teacher diverged at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batch_no) + ": " + e.what());
            }
        }

        const EvalResult train_eval = evaluate(result.teacher, ds, Split::Train);
        const EvalResult val_eval = evaluate(result.teacher, ds, Split::Val);
        const double mean_task =
            epoch_batches.empty() ? train_eval.task_loss : task_sum / static_cast<double>(epoch_batches.size());
        result.log.rows.push_back({epoch, Split::Train, mean_task, 0.0, mean_task, train_eval.metrics, 1.0, 0.0});
        result.log.rows.push_back(
            {epoch, Split::Val, val_eval.task_loss, 0.0, val_eval.task_loss, val_eval.metrics, 1.0, 0.0});

        if (val_eval.primary() > best_val.primary()) {
            best_val = val_eval;
            best = result.teacher;
            best_tnet = result.tnet;
            best_epoch = epoch;
        }
    }

    result.teacher = std::move(best);
    result.tnet = std::move(best_tnet);
    result.tnet.frozen = true;
    result.best_epoch = best_epoch;
    result.best_val = best_val;
    return result;
}

struct StudentTrainResult {
    std::optional<StudentModel> student;                // pkdot / pointwise stages
    std::optional<PrevalentOnlyModel> prevalent_only;   // prevalent_only stage
    MetricsLog log;
    int best_epoch = 0;
    EvalResult best_val;
    std::vector<int> last_anchor_indices; // anchors of the final training batch

    EvalResult final_eval(const Dataset& ds, Split split) const {
        if (student) return evaluate(*student, ds, split);
        return evaluate(*prevalent_only, ds, split);
    }
};

// Student stage. Per batch: frozen teacher forward -> S_theta -> anchors ->
// restrict both sides -> Sinkhorn -> W_p; Eq. 9 backpropagated into student
// parameters only. Pointwise stages swap W_p for the selected baseline loss;
// prevalent_only trains the no-T-Net architecture on the task loss alone.
inline StudentTrainResult train_student(const Dataset& ds, const TeacherModel* teacher, const TNet* tnet,
                                        const TrainConfig& cfg) {
    cfg.validate();
    const bool needs_teacher = cfg.stage == Stage::StudentPkdot || cfg.stage == Stage::StudentPointwise;
    if (cfg.stage == Stage::Teacher) throw ContractError("train_student: teacher stage not allowed here");
    if (needs_teacher && (teacher == nullptr || tnet == nullptr)) {
        throw ContractError("train_student: stage " + stage_name(cfg.stage) + " requires a teacher checkpoint");
    }
    if (needs_teacher && teacher->embed_dim != cfg.arch.embed_dim) {
        throw ShapeError("train_student: teacher embed dim " + std::to_string(teacher->embed_dim) +
                         " does not match configured " + std::to_string(cfg.arch.embed_dim));
    }

    Rng student_rng = Rng::stream(cfg.seed, "student_init");
    StudentTrainResult result;
    if (cfg.stage == Stage::PrevalentOnly) {
        result.prevalent_only =
            make_prevalent_only(cfg.arch, ds.prevalent.cols(), detail::output_dim(ds), student_rng);
    } else {
        TNet frozen = *tnet;
        frozen.frozen = true;
        result.student =
            make_student(cfg.arch, ds.prevalent.cols(), std::move(frozen), detail::output_dim(ds), student_rng);
    }
    result.log.classification = ds.task == TaskKind::Classification;
    result.log.metric_count = ds.task == TaskKind::Classification ? 1 : ds.targets.cols();

    const std::vector<int> probe = detail::probe_batch(ds, cfg.batch_size);
    Tensor2 probe_teacher_sim;
    if (teacher != nullptr && probe.size() >= 2) {
        const ForwardValues tf = forward_teacher_value(*teacher, ds.gather(Modality::Prevalent, probe),
                                                       ds.gather(Modality::Privileged, probe));
        probe_teacher_sim = cosine_similarity_value(tf.embedding);
    }

    auto probe_student_sim = [&]() -> Tensor2 {
        const Tensor2 prev = ds.gather(Modality::Prevalent, probe);
        const Tensor2 emb = result.student ? forward_student_value(*result.student, prev).embedding
                                           : forward_prevalent_only_value(*result.prevalent_only, prev).embedding;
        return cosine_similarity_value(emb);
    };

    auto frobenius_gap = [&]() -> double {
        if (probe_teacher_sim.size() == 0) return 0.0;
        const Tensor2 s = probe_student_sim();
        double acc = 0.0;
        for (std::size_t f = 0; f < s.size(); ++f) {
            const double d = s.at(f) - probe_teacher_sim.at(f);
            acc += d * d;
        }
        return std::sqrt(acc);
    };

    auto maybe_snapshot = [&](int epoch) {
        if (cfg.snapshot_every <= 0 || cfg.snapshot_dir.empty()) return;
        if (epoch != 1 && epoch != cfg.epochs && epoch % cfg.snapshot_every != 0) return;
        std::filesystem::create_directories(cfg.snapshot_dir);
        const std::string base = cfg.snapshot_dir + "/epoch_" + std::to_string(epoch) + "_";
        if (probe_teacher_sim.size() != 0) write_similarity_csv(probe_teacher_sim, base + "teacher.csv");
        write_similarity_csv(probe_student_sim(), base + "student.csv");
    };

    EvalResult best_val = result.final_eval(ds, Split::Val);
    std::optional<StudentModel> best_student = result.student;
    std::optional<PrevalentOnlyModel> best_prevalent = result.prevalent_only;
    int best_epoch = 0;

    detail::SgdState sgd;
    const Marginals* cached_marginals = nullptr;
    std::optional<Marginals> marginals_store;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto epoch_batches =
            batches(ds, Split::Train, cfg.batch_size, detail::epoch_seed(cfg.seed, "student_batches", epoch));
        double task_sum = 0.0;
        double distill_sum = 0.0;
        double converged_count = 0.0;
        int batch_no = 0;
        for (const std::vector<int>& rows : epoch_batches) {
            ++batch_no;
            try {
                DiffGraph g;
                const int b = static_cast<int>(rows.size());
                const NodeId prev_x = g.constant(ds.gather(Modality::Prevalent, rows));

                NodeId embedding = -1;
                NodeId output = -1;
                std::vector<std::pair<Tensor2*, NodeId>> params;
                if (result.student) {
                    const StudentNodes sn = register_student(g, *result.student, true);
                    const ModelForward f = forward_student(g, *result.student, sn, prev_x);
                    embedding = f.embedding;
                    output = f.output;
                    collect_params(sn.prevalent, result.student->prevalent_backbone, params);
                    collect_params(sn.fusion, result.student->fusion_head, params);
                } else {
                    const PrevalentOnlyNodes pn = register_prevalent_only(g, *result.prevalent_only, true);
                    const ModelForward f = forward_prevalent_only(g, *result.prevalent_only, pn, prev_x);
                    embedding = f.embedding;
                    output = f.output;
                    collect_params(pn.prevalent, result.prevalent_only->prevalent_backbone, params);
                    collect_params(pn.fusion, result.prevalent_only->fusion_head, params);
                }

                const NodeId task = detail::task_loss_node(g, ds, rows, output);
                NodeId distill = -1;
                bool converged = true;

                if (cfg.stage == Stage::StudentPkdot) {
                    const ForwardValues tf =
                        forward_teacher_value(*teacher, ds.gather(Modality::Prevalent, rows),
                                              ds.gather(Modality::Privileged, rows));
                    const Tensor2 s_teacher = cosine_similarity_value(tf.embedding);
                    // Anchors come from the teacher matrix; the same indices
                    // restrict the student side.
                    const int k = std::min(cfg.k_anchors, b);
                    const AnchorSet anchors = select_anchors(s_teacher, k);
                    result.last_anchor_indices = anchors.indices;
                    const Tensor2 teacher_rows = restrict_to_anchors_value(s_teacher, anchors);
                    const NodeId s_student = cosine_similarity_matrix(g, embedding);
                    const NodeId student_rows = restrict_to_anchors(g, s_student, anchors);
                    if (cached_marginals == nullptr || static_cast<int>(marginals_store->mu.size()) != b) {
                        marginals_store = Marginals::uniform(b);
                        cached_marginals = &*marginals_store;
                    }
                    const OtLossResult ot =
                        ot_loss_and_grad(g, teacher_rows, student_rows, *cached_marginals, cfg.sinkhorn);
                    distill = ot.loss;
                    converged = ot.sinkhorn.converged;
                } else if (cfg.stage == Stage::StudentPointwise) {
                    const ForwardValues tf =
                        forward_teacher_value(*teacher, ds.gather(Modality::Prevalent, rows),
                                              ds.gather(Modality::Privileged, rows));
                    if (cfg.pointwise_kind == PointwiseKind::Kl) {
                        distill = pointwise_kd_loss(g, PointwiseKind::Kl, tf.output, output, cfg.kd_temperature);
                    } else {
                        distill = pointwise_kd_loss(g, cfg.pointwise_kind, tf.embedding, embedding);
                    }
                }

                const NodeId total = distill >= 0 ? total_loss(g, task, distill, cfg.lambda) : task;
                g.backward(total);
                task_sum += g.value(task)(0, 0);
                if (distill >= 0) distill_sum += g.value(distill)(0, 0);
                converged_count += converged ? 1.0 : 0.0;

                sgd.step(params, g, cfg.learning_rate, cfg.momentum);
            } catch (const DomainError& e) {
                throw DivergenceError("student diverged at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(batch_no) + ": " + e.what());
            }
        }

        const int nb = static_cast<int>(epoch_batches.size());
        const EvalResult train_eval = result.final_eval(ds, Split::Train);
        const EvalResult val_eval = result.final_eval(ds, Split::Val);
        const double mean_task = nb > 0 ? task_sum / nb : train_eval.task_loss;
        const double mean_distill = nb > 0 ? distill_sum / nb : 0.0;
        const double frac = nb > 0 ? converged_count / nb : 1.0;
        const double gap = frobenius_gap();

        result.log.rows.push_back({epoch, Split::Train, mean_task, mean_distill,
                                   mean_task + cfg.lambda * mean_distill, train_eval.metrics, frac, gap});

        // Probe-batch distillation diagnostics for the validation row.
        double val_distill = 0.0;
        double val_frac = 1.0;
        if (cfg.stage == Stage::StudentPkdot && probe_teacher_sim.size() != 0) {
            const Tensor2 s_student = probe_student_sim();
            const int k = std::min(cfg.k_anchors, static_cast<int>(probe.size()));
            const AnchorSet anchors = select_anchors(probe_teacher_sim, k);
            const CostMatrix cost = ground_cost(restrict_to_anchors_value(probe_teacher_sim, anchors),
                                                restrict_to_anchors_value(s_student, anchors));
            const SinkhornResult sk =
                sinkhorn(cost, Marginals::uniform(static_cast<int>(probe.size())), cfg.sinkhorn);
            val_distill = sk.objective;
            val_frac = sk.converged ? 1.0 : 0.0;
        }
        result.log.rows.push_back({epoch, Split::Val, val_eval.task_loss, val_distill,
                                   val_eval.task_loss + cfg.lambda * val_distill, val_eval.metrics, val_frac,
                                   gap});

        maybe_snapshot(epoch);

        if (val_eval.primary() > best_val.primary()) {
            best_val = val_eval;
            best_student = result.student;
            best_prevalent = result.prevalent_only;
            best_epoch = epoch;
        }
    }

    result.student = std::move(best_student);
    result.prevalent_only = std::move(best_prevalent);
    result.best_epoch = best_epoch;
    result.best_val = best_val;
    return result;
}

// --- ablation ------------------------------------------------------------------

struct AblationGrid {
    std::vector<int> batch_sizes;
    std::vector<int> k_anchors;
    std::vector<double> epsilons;

    bool empty() const { return batch_sizes.empty() && k_anchors.empty() && epsilons.empty(); }
};

struct AblateRow {
    int batch_size = 0;
    int k_anchors = 0;
    double epsilon = 0.0;
    std::uint64_t seed = 0;
    double val_task_loss = 0.0;
    std::vector<double> val_metrics;
};

inline std::string ablate_csv(const std::vector<AblateRow>& rows, int metric_count) {
    std::ostringstream out;
    out << "batch_size,k_anchors,epsilon,seed,val_metric_1";
    if (metric_count > 1) out << ",val_metric_2";
    out << ",val_task_loss\n";
    for (const AblateRow& r : rows) {
        out << r.batch_size << ',' << r.k_anchors << ',' << format_double(r.epsilon) << ',' << r.seed;
        for (int m = 0; m < metric_count; ++m) {
            out << ',' << format_double(m < static_cast<int>(r.val_metrics.size()) ? r.val_metrics[m] : 0.0);
        }
        out << ',' << format_double(r.val_task_loss) << '\n';
    }
    return out.str();
}

// One PKDOT student per grid point per seed, sharing one teacher per seed.
// Grid points run concurrently; rows come back in grid order regardless of
// completion order.
inline std::vector<AblateRow> ablate(const Dataset& ds, const TrainConfig& teacher_cfg,
                                     const TrainConfig& student_cfg, const AblationGrid& grid,
                                     const std::vector<std::uint64_t>& seeds) {
    if (grid.empty()) throw ContractError("ablate: empty grid");
    if (seeds.empty()) throw ContractError("ablate: needs at least one seed");

    const std::vector<int> batch_sizes =
        grid.batch_sizes.empty() ? std::vector<int>{student_cfg.batch_size} : grid.batch_sizes;
    const std::vector<int> anchor_counts =
        grid.k_anchors.empty() ? std::vector<int>{student_cfg.k_anchors} : grid.k_anchors;
    const std::vector<double> epsilons =
        grid.epsilons.empty() ? std::vector<double>{student_cfg.sinkhorn.epsilon} : grid.epsilons;

    std::vector<TeacherTrainResult> teachers;
    teachers.reserve(seeds.size());
    for (std::uint64_t seed : seeds) {
        TrainConfig tc = teacher_cfg;
        tc.stage = Stage::Teacher;
        tc.seed = seed;
        teachers.push_back(train_teacher(ds, tc));
    }

    struct Job {
        TrainConfig cfg;
        std::size_t teacher_index;
    };
    std::vector<Job> jobs;
    for (int bs : batch_sizes) {
        for (int k : anchor_counts) {
            for (double eps : epsilons) {
                for (std::size_t s = 0; s < seeds.size(); ++s) {
                    TrainConfig sc = student_cfg;
                    sc.stage = Stage::StudentPkdot;
                    sc.batch_size = bs;
                    sc.k_anchors = std::min(k, bs);
                    sc.sinkhorn.epsilon = eps;
                    sc.seed = seeds[s];
                    sc.snapshot_every = 0;
                    jobs.push_back({std::move(sc), s});
                }
            }
        }
    }

    std::vector<std::future<AblateRow>> futures;
    futures.reserve(jobs.size());
    for (const Job& job : jobs) {
        futures.push_back(std::async(std::launch::async, [&ds, &teachers, job]() {
            const TeacherTrainResult& t = teachers[job.teacher_index];
            const StudentTrainResult r = train_student(ds, &t.teacher, &t.tnet, job.cfg);
            AblateRow row;
            row.batch_size = job.cfg.batch_size;
            row.k_anchors = job.cfg.k_anchors;
            row.epsilon = job.cfg.sinkhorn.epsilon;
            row.seed = job.cfg.seed;
            row.val_task_loss = r.best_val.task_loss;
            row.val_metrics = r.best_val.metrics;
            return row;
        }));
    }
    std::vector<AblateRow> rows;
    rows.reserve(futures.size());
    for (auto& f : futures) rows.push_back(f.get());
    return rows;
}

} // namespace pkdot
