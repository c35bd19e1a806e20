#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

// Batch moments behind the concordance correlation coefficient. Biased
// (divide-by-b) estimators throughout.
struct CccComponents {
    double mean_x = 0.0;
    double mean_y = 0.0;
    double var_x = 0.0;
    double var_y = 0.0;
    double covariance = 0.0;
};

inline CccComponents ccc_components(const Tensor2& x, const Tensor2& y) {
    if (!x.same_shape(y) || x.cols() != 1) {
        throw ShapeError("ccc: expected matching b x 1 vectors, got " + x.shape_str() + " and " +
                         y.shape_str());
    }
    const int b = x.rows();
    if (b < 2) throw ContractError("ccc: needs at least 2 samples, got " + std::to_string(b));
    CccComponents c;
    for (int i = 0; i < b; ++i) {
        c.mean_x += x(i, 0);
        c.mean_y += y(i, 0);
    }
    c.mean_x /= b;
    c.mean_y /= b;
    for (int i = 0; i < b; ++i) {
        const double dx = x(i, 0) - c.mean_x;
        const double dy = y(i, 0) - c.mean_y;
        c.var_x += dx * dx;
        c.var_y += dy * dy;
        c.covariance += dx * dy;
    }
    c.var_x /= b;
    c.var_y /= b;
    c.covariance /= b;
    return c;
}

// Concordance value in [-1, 1]; the evaluation metric for regression targets.
inline double ccc_value(const Tensor2& pred, const Tensor2& target) {
    const CccComponents c = ccc_components(pred, target);
    const double md = c.mean_x - c.mean_y;
    return 2.0 * c.covariance / (c.var_x + c.var_y + md * md + 1e-12);
}

// 1 - CCC on the graph. pred is b x 1; target is a constant b x 1.
inline NodeId ccc_loss(DiffGraph& g, NodeId pred, const Tensor2& target) {
    const Tensor2& p = g.value(pred);
    if (p.cols() != 1 || !p.same_shape(target)) {
        throw ShapeError("ccc_loss: expected matching b x 1 vectors, got " + p.shape_str() + " and " +
                         target.shape_str());
    }
    if (p.rows() < 2) throw ContractError("ccc_loss: needs at least 2 samples");

    const NodeId t = g.constant(target);
    const NodeId mean_x = g.mean(pred);
    const NodeId mean_y = g.mean(t);
    const NodeId dx = g.sub(pred, mean_x);
    const NodeId dy = g.sub(t, mean_y);
    const NodeId var_x = g.mean(g.mul(dx, dx));
    const NodeId var_y = g.mean(g.mul(dy, dy));
    const NodeId cov = g.mean(g.mul(dx, dy));
    const NodeId mean_diff = g.sub(mean_x, mean_y);
    const NodeId denom = g.add(g.add(var_x, var_y),
                               g.add(g.mul(mean_diff, mean_diff), g.scalar_constant(1e-12)));
    const NodeId ccc = g.divide(g.scale(cov, 2.0), denom);
    return g.sub(g.scalar_constant(1.0), ccc);
}

// Per-sample class indices in [0, class_count).
struct ClassTargets {
    std::vector<int> labels;
    int class_count;

    ClassTargets(std::vector<int> l, int m) : labels(std::move(l)), class_count(m) {
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || labels[i] >= class_count) {
                throw ContractError("label " + std::to_string(labels[i]) + " at sample " + std::to_string(i) +
                                    " out of range [0, " + std::to_string(class_count) + ")");
            }
        }
    }
};

namespace detail {

// Row-wise log-sum-exp with the row max detached; the shift cancels in the
// gradient, so treating it as constant is exact.
inline NodeId row_logsumexp(DiffGraph& g, NodeId logits) {
    const Tensor2& x = g.value(logits);
    Tensor2 row_max(x.rows(), 1, 0.0);
    for (int i = 0; i < x.rows(); ++i) {
        double m = x(i, 0);
        for (int j = 1; j < x.cols(); ++j) m = std::max(m, x(i, j));
        row_max(i, 0) = m;
    }
    const NodeId mx = g.constant(row_max);
    const NodeId ones_row = g.constant(Tensor2(1, x.cols(), 1.0));
    const NodeId shifted = g.sub(logits, g.matmul(mx, ones_row));
    return g.add(g.log(g.row_sums(g.exp(shifted))), mx);
}

} // namespace detail

// Mean negative log-likelihood of softmaxed logits, log-sum-exp stabilized.
inline NodeId cross_entropy_loss(DiffGraph& g, NodeId logits, const ClassTargets& targets) {
    const Tensor2& x = g.value(logits);
    if (x.rows() != static_cast<int>(targets.labels.size()) || x.cols() != targets.class_count) {
        throw ShapeError("cross_entropy_loss: logits " + x.shape_str() + " do not match " +
                         std::to_string(targets.labels.size()) + " labels over " +
                         std::to_string(targets.class_count) + " classes");
    }
    Tensor2 onehot(x.rows(), x.cols(), 0.0);
    for (int i = 0; i < x.rows(); ++i) onehot(i, targets.labels[i]) = 1.0;
    const NodeId lse = detail::row_logsumexp(g, logits);
    const NodeId picked = g.row_sums(g.mul(logits, g.constant(onehot)));
    return g.mean(g.sub(lse, picked));
}

// L_total = task + lambda * distillation term.
inline NodeId total_loss(DiffGraph& g, NodeId task, NodeId distill, double lambda) {
    if (lambda < 0.0) throw ContractError("total_loss: lambda must be >= 0");
    if (lambda == 0.0) return task;
    return g.add(task, g.scale(distill, lambda));
}

enum class PointwiseKind { Mse, Cosine, Kl };

// Point-to-point KD baselines. The teacher side is a constant target:
//   mse    - mean squared difference of embeddings
//   cosine - mean over the batch of 1 - cos(teacher_i, student_i)
//   kl     - mean KL(softmax(t/T) || softmax(s/T)) * T^2 over softened logits
inline NodeId pointwise_kd_loss(DiffGraph& g, PointwiseKind kind, const Tensor2& teacher_out,
                                NodeId student_out, double temperature = 4.0) {
    const Tensor2& s = g.value(student_out);
    if (!teacher_out.same_shape(s)) {
        throw ShapeError("pointwise_kd_loss: shapes disagree, " + teacher_out.shape_str() + " vs " +
                         s.shape_str());
    }
    switch (kind) {
        case PointwiseKind::Mse: {
            const NodeId diff = g.sub(g.constant(teacher_out), student_out);
            return g.mean(g.mul(diff, diff));
        }
        case PointwiseKind::Cosine: {
            for (const Tensor2* m : {&teacher_out, &s}) {
                for (int i = 0; i < m->rows(); ++i) {
                    double n2 = 0.0;
                    for (int j = 0; j < m->cols(); ++j) n2 += (*m)(i, j) * (*m)(i, j);
                    if (n2 == 0.0) {
                        throw DegenerateInputError("cosine KD: embedding row " + std::to_string(i) +
                                                   " has zero norm");
                    }
                }
            }
            const NodeId t = g.constant(teacher_out);
            const NodeId dots = g.row_sums(g.mul(t, student_out));
            const NodeId tn = g.sqrt(g.row_sums(g.mul(t, t)));
            const NodeId sn = g.sqrt(g.row_sums(g.mul(student_out, student_out)));
            const NodeId cos = g.divide(dots, g.mul(tn, sn));
            return g.mean(g.sub(g.scalar_constant(1.0), cos));
        }
        case PointwiseKind::Kl: {
            if (!(temperature > 0.0)) throw ContractError("kl KD: temperature must be > 0");
            // Teacher probabilities are plain values.
            Tensor2 tp(teacher_out.rows(), teacher_out.cols(), 0.0);
            for (int i = 0; i < teacher_out.rows(); ++i) {
                double m = teacher_out(i, 0) / temperature;
                for (int j = 1; j < teacher_out.cols(); ++j) m = std::max(m, teacher_out(i, j) / temperature);
                double z = 0.0;
                for (int j = 0; j < teacher_out.cols(); ++j) {
                    tp(i, j) = std::exp(teacher_out(i, j) / temperature - m);
                    z += tp(i, j);
                }
                for (int j = 0; j < teacher_out.cols(); ++j) tp(i, j) /= z;
            }
            const NodeId soft_student = g.scale(student_out, 1.0 / temperature);
            const NodeId lse = detail::row_logsumexp(g, soft_student);
            const NodeId ones_row = g.constant(Tensor2(1, s.cols(), 1.0));
            const NodeId log_ps = g.sub(soft_student, g.matmul(lse, ones_row));
            // sum_j p_t (log p_t - log p_s), averaged over the batch
            Tensor2 tlogt(tp.rows(), 1, 0.0);
            for (int i = 0; i < tp.rows(); ++i) {
                double acc = 0.0;
                for (int j = 0; j < tp.cols(); ++j) {
                    if (tp(i, j) > 0.0) acc += tp(i, j) * std::log(tp(i, j));
                }
                tlogt(i, 0) = acc;
            }
            const NodeId cross = g.row_sums(g.mul(g.constant(tp), log_ps));
            const NodeId kl_rows = g.sub(g.constant(tlogt), cross);
            return g.scale(g.mean(kl_rows), temperature * temperature);
        }
    }
    throw ContractError("pointwise_kd_loss: unknown kind");
}

} // namespace pkdot
