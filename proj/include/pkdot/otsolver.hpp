#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

// Non-negative finite ground-cost matrix; rows index the source side, columns
// the target side.
struct CostMatrix {
    Tensor2 matrix;

    explicit CostMatrix(Tensor2 m) : matrix(std::move(m)) {
        matrix.require_finite("cost matrix");
        for (std::size_t f = 0; f < matrix.size(); ++f) {
            if (matrix.at(f) < 0.0) {
                throw DomainError("cost matrix: negative entry at flat index " + std::to_string(f));
            }
        }
    }
};

// Strictly positive marginal weights, each summing to 1.
struct Marginals {
    std::vector<double> mu;
    std::vector<double> nu;

    Marginals(std::vector<double> mu_in, std::vector<double> nu_in)
        : mu(std::move(mu_in)), nu(std::move(nu_in)) {
        validate(mu, "mu");
        validate(nu, "nu");
    }

    static Marginals uniform(int n) {
        std::vector<double> w(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
        return Marginals(w, w);
    }

private:
    static void validate(const std::vector<double>& w, const char* name) {
        if (w.empty()) throw ContractError(std::string("marginals: ") + name + " is empty");
        double s = 0.0;
        for (double v : w) {
            if (!(v > 0.0)) throw DomainError(std::string("marginals: ") + name + " has a non-positive entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-12) {
            throw DomainError(std::string("marginals: ") + name + " sums to " + std::to_string(s) +
                              ", expected 1");
        }
    }
};

struct SinkhornConfig {
    double epsilon = 0.1;
    int max_iters = 500;
    double tolerance = 1e-6;

    void validate() const {
        if (!(epsilon > 0.0)) throw ContractError("sinkhorn: epsilon must be > 0");
        if (!(tolerance > 0.0)) throw ContractError("sinkhorn: tolerance must be > 0");
        if (max_iters < 1) throw ContractError("sinkhorn: max_iters must be >= 1");
    }
};

struct SinkhornResult {
    Tensor2 plan;            // coupling pi, rows x cols of the cost
    double transport_cost;   // <pi, C>
    double entropy_term;     // KL(pi || mu x nu)
    double objective;        // transport_cost + epsilon * entropy_term
    int iterations_used;
    bool converged;
};

// KL of the plan from the product of the marginals; 0 log 0 := 0.
inline double plan_relative_entropy(const Tensor2& plan, const Marginals& marg) {
    if (plan.rows() != static_cast<int>(marg.mu.size()) ||
        plan.cols() != static_cast<int>(marg.nu.size())) {
        throw ShapeError("plan_relative_entropy: plan " + plan.shape_str() + " does not match marginals " +
                         std::to_string(marg.mu.size()) + "/" + std::to_string(marg.nu.size()));
    }
    double h = 0.0;
    for (int i = 0; i < plan.rows(); ++i) {
        for (int j = 0; j < plan.cols(); ++j) {
            const double p = plan(i, j);
            if (p < 0.0) throw DomainError("plan_relative_entropy: negative plan entry");
            if (p > 0.0) h += p * std::log(p / (marg.mu[i] * marg.nu[j]));
        }
    }
    return h;
}

// Squared Euclidean distance between every teacher row and every student row.
inline CostMatrix ground_cost(const Tensor2& teacher_rows, const Tensor2& student_rows) {
    if (!teacher_rows.same_shape(student_rows)) {
        throw ShapeError("ground_cost: shapes disagree, " + teacher_rows.shape_str() + " vs " +
                         student_rows.shape_str());
    }
    const int n = teacher_rows.rows();
    const int k = teacher_rows.cols();
    Tensor2 c(n, n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int d = 0; d < k; ++d) {
                const double diff = teacher_rows(i, d) - student_rows(j, d);
                acc += diff * diff;
            }
            c(i, j) = acc;
        }
    }
    return CostMatrix(std::move(c));
}

// Same cost registered on the graph so gradients flow into the student rows:
// C = t2 1^T + 1 s2^T - 2 T S^T with the teacher side constant.
inline NodeId ground_cost_node(DiffGraph& g, const Tensor2& teacher_rows, NodeId student_rows) {
    const Tensor2& s = g.value(student_rows);
    if (!teacher_rows.same_shape(s)) {
        throw ShapeError("ground_cost: shapes disagree, " + teacher_rows.shape_str() + " vs " + s.shape_str());
    }
    const int n = teacher_rows.rows();
    const NodeId t = g.constant(teacher_rows);
    const NodeId t2 = g.row_sums(g.mul(t, t));                       // n x 1, constant
    const NodeId s2 = g.row_sums(g.mul(student_rows, student_rows)); // n x 1
    const NodeId ones_row = g.constant(Tensor2(1, n, 1.0));
    const NodeId ones_col = g.constant(Tensor2(n, 1, 1.0));
    const NodeId cross = g.matmul(t, g.transpose(student_rows));
    return g.sub(g.add(g.matmul(t2, ones_row), g.matmul(ones_col, g.transpose(s2))), g.scale(cross, 2.0));
}

namespace detail {

inline double logsumexp(const double* v, int count) {
    double m = v[0];
    for (int i = 1; i < count; ++i) m = std::max(m, v[i]);
    double s = 0.0;
    for (int i = 0; i < count; ++i) s += std::exp(v[i] - m);
    return m + std::log(s);
}

} // namespace detail

// Entropy-regularized OT by alternating dual updates in the log domain, so
// small epsilon cannot underflow the kernel exp(-C/eps). Small target epsilons
// are reached by warm-starting the potentials through a short epsilon-scaling
// schedule; the final phase iterates at the target epsilon with the stated
// stopping rule. Non-convergence within max_iters is reported through the
// flag, not thrown.
inline SinkhornResult sinkhorn(const CostMatrix& cost, const Marginals& marg, const SinkhornConfig& cfg) {
    cfg.validate();
    const Tensor2& c = cost.matrix;
    const int n = c.rows();
    const int m = c.cols();
    if (n != static_cast<int>(marg.mu.size()) || m != static_cast<int>(marg.nu.size())) {
        throw ShapeError("sinkhorn: cost " + c.shape_str() + " does not match marginals " +
                         std::to_string(marg.mu.size()) + "/" + std::to_string(marg.nu.size()));
    }
    const double eps = cfg.epsilon;

    std::vector<double> f(n, 0.0), gpot(m, 0.0);
    std::vector<double> scratch(static_cast<std::size_t>(std::max(n, m)), 0.0);

    Tensor2 plan(n, m, 0.0);
    auto materialize = [&](double level) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) plan(i, j) = std::exp((f[i] + gpot[j] - c(i, j)) / level);
    };

    auto violation = [&]() {
        double v = 0.0;
        for (int i = 0; i < n; ++i) {
            double rs = 0.0;
            for (int j = 0; j < m; ++j) rs += plan(i, j);
            v = std::max(v, std::abs(rs - marg.mu[i]));
        }
        for (int j = 0; j < m; ++j) {
            double cs = 0.0;
            for (int i = 0; i < n; ++i) cs += plan(i, j);
            v = std::max(v, std::abs(cs - marg.nu[j]));
        }
        return v;
    };

    // One row rescale (rows match mu exactly) plus one column rescale
    // (columns match nu exactly) at regularization `level`.
    auto iterate = [&](double level) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < m; ++j) scratch[static_cast<std::size_t>(j)] = (gpot[j] - c(i, j)) / level;
            f[i] = level * std::log(marg.mu[i]) - level * detail::logsumexp(scratch.data(), m);
        }
        for (int j = 0; j < m; ++j) {
            for (int i = 0; i < n; ++i) scratch[static_cast<std::size_t>(i)] = (f[i] - c(i, j)) / level;
            gpot[j] = level * std::log(marg.nu[j]) - level * detail::logsumexp(scratch.data(), n);
        }
    };

    int iters = 0;
    bool converged = false;

    // Warm-start levels down to the target; each level gets a loose pass.
    for (double level = 1.0; level > eps && iters < cfg.max_iters; level *= 0.25) {
        for (int step = 0; step < 50 && iters < cfg.max_iters; ++step) {
            iterate(level);
            ++iters;
            materialize(level);
            if (violation() < 1e-3) break;
        }
    }

    while (iters < cfg.max_iters) {
        iterate(eps);
        ++iters;
        materialize(eps);
        if (violation() < cfg.tolerance) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        materialize(eps);
        converged = violation() < cfg.tolerance;
    }

    SinkhornResult result{std::move(plan), 0.0, 0.0, 0.0, iters, converged};
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) result.transport_cost += result.plan(i, j) * c(i, j);
    result.entropy_term = plan_relative_entropy(result.plan, marg);
    result.objective = result.transport_cost + eps * result.entropy_term;
    return result;
}

// Brute-force minimum of (1/n) sum_i C[i, sigma(i)] over all permutations.
// The oracle for sinkhorn with uniform marginals as epsilon -> 0.
inline std::pair<std::vector<int>, double> exact_assignment(const CostMatrix& cost) {
    const Tensor2& c = cost.matrix;
    const int n = c.rows();
    if (c.cols() != n) throw ContractError("exact_assignment: cost must be square, got " + c.shape_str());
    if (n > 8) throw ContractError("exact_assignment: n=" + std::to_string(n) + " exceeds brute-force limit 8");

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_total = 0.0;
    for (int i = 0; i < n; ++i) best_total += c(i, perm[i]);
    while (std::next_permutation(perm.begin(), perm.end())) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += c(i, perm[i]);
        if (total < best_total) {
            best_total = total;
            best = perm;
        }
    }
    return {best, best_total / static_cast<double>(n)};
}

struct OtLossResult {
    NodeId loss;              // W_p on the graph
    SinkhornResult sinkhorn;  // solver diagnostics; plan is frozen in the loss
};

// Registers W_p = <pi, C(student)> + eps H(pi) on the graph with the plan held
// constant (envelope convention: dW/dC_ij = pi_ij), so gradients reach the
// student rows through the cost only.
inline OtLossResult ot_loss_and_grad(DiffGraph& g, const Tensor2& teacher_rows, NodeId student_rows,
                                     const Marginals& marg, const SinkhornConfig& cfg) {
    const CostMatrix cost = ground_cost(teacher_rows, g.value(student_rows));
    SinkhornResult sk = sinkhorn(cost, marg, cfg);
    const NodeId cost_node = ground_cost_node(g, teacher_rows, student_rows);
    const NodeId plan_const = g.constant(sk.plan);
    const NodeId transport = g.sum(g.mul(plan_const, cost_node));
    const NodeId loss = g.add(transport, g.scalar_constant(cfg.epsilon * sk.entropy_term));
    return {loss, std::move(sk)};
}

} // namespace pkdot
