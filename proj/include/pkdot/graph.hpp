#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

using NodeId = int;

enum class OpKind {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Relu,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Sum,
    Mean,
    RowSums,
    ColSums,
    ConcatCols,
    SelectCols,
};

// Define-by-run tape over Tensor2 values. Nodes are appended in topological
// order (parents always precede children), values are computed eagerly, and
// backward() runs one reverse sweep. A graph is built per training step and
// discarded; it is single-threaded by contract.
class DiffGraph {
    struct Node {
        Tensor2 value;
        OpKind op = OpKind::Leaf;
        std::vector<NodeId> parents;
        bool trainable = false;
        double scalar = 0.0;            // Scale factor
        std::vector<int> columns;       // SelectCols source columns
        int left_cols = 0;              // ConcatCols split point
    };

public:
    NodeId leaf(Tensor2 value, bool trainable = false) {
        value.require_finite("leaf");
        Node n;
        n.value = std::move(value);
        n.op = OpKind::Leaf;
        n.trainable = trainable;
        return push(std::move(n));
    }

    NodeId constant(Tensor2 value) {
        value.require_finite("constant");
        Node n;
        n.value = std::move(value);
        n.op = OpKind::Constant;
        return push(std::move(n));
    }

    NodeId scalar_constant(double v) { return constant(Tensor2(1, 1, {v})); }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Tensor2& value(NodeId id) const { return nodes_[check(id)].value; }
    bool trainable(NodeId id) const { return nodes_[check(id)].trainable; }

    // Gradient of the last backward() root w.r.t. node id.
    const Tensor2& grad(NodeId id) const {
        if (grads_.size() != nodes_.size()) throw ContractError("grad: backward() has not run");
        return grads_[check(id)];
    }

    // --- graph ops -----------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b) {
        Node n;
        n.value = matmul_value(value(a), value(b));
        n.op = OpKind::MatMul;
        n.parents = {a, b};
        return push(std::move(n));
    }

    NodeId transpose(NodeId x) {
        Node n;
        n.value = value(x).transposed();
        n.op = OpKind::Transpose;
        n.parents = {x};
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b) { return binary(OpKind::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(OpKind::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(OpKind::Mul, a, b); }

    NodeId divide(NodeId a, NodeId b) {
        const Tensor2& d = value(b);
        for (std::size_t f = 0; f < d.size(); ++f) {
            if (d.at(f) == 0.0) {
                throw DomainError("div: zero denominator at (" +
                                  std::to_string(static_cast<int>(f) / d.cols()) + "," +
                                  std::to_string(static_cast<int>(f) % d.cols()) + ")");
            }
        }
        return binary(OpKind::Div, a, b);
    }

    NodeId scale(NodeId x, double c) {
        Node n;
        n.value = value(x);
        for (auto& v : n.value.data()) v *= c;
        n.op = OpKind::Scale;
        n.parents = {x};
        n.scalar = c;
        return push(std::move(n));
    }

    NodeId relu(NodeId x) {
        return unary(OpKind::Relu, x, [](double v) { return v > 0.0 ? v : 0.0; });
    }

    NodeId tanh(NodeId x) {
        return unary(OpKind::Tanh, x, [](double v) { return std::tanh(v); });
    }

    NodeId exp(NodeId x) {
        return unary(OpKind::Exp, x, [](double v) { return std::exp(v); });
    }

    NodeId log(NodeId x) {
        const Tensor2& v = value(x);
        for (std::size_t f = 0; f < v.size(); ++f) {
            if (v.at(f) <= 0.0) {
                throw DomainError("log: non-positive entry at (" +
                                  std::to_string(static_cast<int>(f) / v.cols()) + "," +
                                  std::to_string(static_cast<int>(f) % v.cols()) + ")");
            }
        }
        return unary(OpKind::Log, x, [](double w) { return std::log(w); });
    }

    NodeId sqrt(NodeId x) {
        const Tensor2& v = value(x);
        for (std::size_t f = 0; f < v.size(); ++f) {
            if (v.at(f) <= 0.0) {
                throw DomainError("sqrt: non-positive entry at (" +
                                  std::to_string(static_cast<int>(f) / v.cols()) + "," +
                                  std::to_string(static_cast<int>(f) % v.cols()) + ")");
            }
        }
        return unary(OpKind::Sqrt, x, [](double w) { return std::sqrt(w); });
    }

    NodeId sum(NodeId x) {
        double acc = 0.0;
        for (double v : value(x).data()) acc += v;
        Node n;
        n.value = Tensor2(1, 1, {acc});
        n.op = OpKind::Sum;
        n.parents = {x};
        return push(std::move(n));
    }

    NodeId mean(NodeId x) {
        double acc = 0.0;
        for (double v : value(x).data()) acc += v;
        Node n;
        n.value = Tensor2(1, 1, {acc / static_cast<double>(value(x).size())});
        n.op = OpKind::Mean;
        n.parents = {x};
        return push(std::move(n));
    }

    NodeId row_sums(NodeId x) {
        const Tensor2& v = value(x);
        Tensor2 out(v.rows(), 1, 0.0);
        for (int i = 0; i < v.rows(); ++i) {
            double acc = 0.0;
            for (int j = 0; j < v.cols(); ++j) acc += v(i, j);
            out(i, 0) = acc;
        }
        Node n;
        n.value = std::move(out);
        n.op = OpKind::RowSums;
        n.parents = {x};
        return push(std::move(n));
    }

    NodeId col_sums(NodeId x) {
        const Tensor2& v = value(x);
        Tensor2 out(1, v.cols(), 0.0);
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < v.cols(); ++j) out(0, j) += v(i, j);
        Node n;
        n.value = std::move(out);
        n.op = OpKind::ColSums;
        n.parents = {x};
        return push(std::move(n));
    }

    NodeId concat_cols(NodeId a, NodeId b) {
        const Tensor2& va = value(a);
        const Tensor2& vb = value(b);
        if (va.rows() != vb.rows()) {
            throw ShapeError("concat_cols: row counts disagree, " + va.shape_str() + " vs " + vb.shape_str());
        }
        Tensor2 out(va.rows(), va.cols() + vb.cols());
        for (int i = 0; i < va.rows(); ++i) {
            for (int j = 0; j < va.cols(); ++j) out(i, j) = va(i, j);
            for (int j = 0; j < vb.cols(); ++j) out(i, va.cols() + j) = vb(i, j);
        }
        Node n;
        n.value = std::move(out);
        n.op = OpKind::ConcatCols;
        n.parents = {a, b};
        n.left_cols = va.cols();
        return push(std::move(n));
    }

    // Keeps the given source columns, in the given order. Selection is a
    // constant w.r.t. gradients; the backward pass scatters into the kept columns.
    NodeId select_cols(NodeId x, std::vector<int> columns) {
        const Tensor2& v = value(x);
        for (int c : columns) {
            if (c < 0 || c >= v.cols()) {
                throw ContractError("select_cols: column " + std::to_string(c) + " out of range for " +
                                    v.shape_str());
            }
        }
        Tensor2 out(v.rows(), static_cast<int>(columns.size()));
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < static_cast<int>(columns.size()); ++j) out(i, j) = v(i, columns[j]);
        Node n;
        n.value = std::move(out);
        n.op = OpKind::SelectCols;
        n.parents = {x};
        n.columns = std::move(columns);
        return push(std::move(n));
    }

    // --- backward ------------------------------------------------------------

    // Reverse accumulation from a scalar root. Gradients are re-zeroed on every
    // call; accumulation order is fixed by node order, so results are
    // bit-reproducible.
    void backward(NodeId root) {
        check(root);
        if (!nodes_[root].value.is_scalar()) {
            throw ContractError("backward: root must be 1x1, got " + nodes_[root].value.shape_str());
        }
        grads_.clear();
        grads_.reserve(nodes_.size());
        for (const Node& n : nodes_) grads_.emplace_back(n.value.rows(), n.value.cols(), 0.0);

        // Only ancestors of the root receive flow.
        std::vector<char> live(nodes_.size(), 0);
        live[root] = 1;
        for (NodeId id = root; id >= 0; --id) {
            if (!live[id]) continue;
            for (NodeId p : nodes_[id].parents) live[p] = 1;
        }

        grads_[root](0, 0) = 1.0;
        for (NodeId id = root; id >= 0; --id) {
            if (!live[id]) continue;
            propagate(id);
        }
    }

private:
    NodeId push(Node n) {
        n.value.require_finite("op result");
        nodes_.push_back(std::move(n));
        grads_.clear();
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId check(NodeId id) const {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
            throw ContractError("node id " + std::to_string(id) + " out of range");
        }
        return id;
    }

    template <typename F>
    NodeId unary(OpKind op, NodeId x, F f) {
        Node n;
        n.value = value(x);
        for (auto& v : n.value.data()) v = f(v);
        n.op = op;
        n.parents = {x};
        return push(std::move(n));
    }

    // Binary elementwise op. Equal shapes, or one operand may be a 1x1 scalar
    // that broadcasts; any other mismatch is a hard error.
    NodeId binary(OpKind op, NodeId a, NodeId b) {
        const Tensor2& va = value(a);
        const Tensor2& vb = value(b);
        if (!va.same_shape(vb) && !va.is_scalar() && !vb.is_scalar()) {
            throw ShapeError(op_name(op) + ": shapes disagree, " + va.shape_str() + " vs " + vb.shape_str());
        }
        const Tensor2& big = va.is_scalar() && !vb.is_scalar() ? vb : va;
        Tensor2 out(big.rows(), big.cols());
        for (std::size_t f = 0; f < out.size(); ++f) {
            const double x = va.is_scalar() ? va.at(0) : va.at(f);
            const double y = vb.is_scalar() ? vb.at(0) : vb.at(f);
            out.at(f) = apply(op, x, y);
        }
        Node n;
        n.value = std::move(out);
        n.op = op;
        n.parents = {a, b};
        return push(std::move(n));
    }

    static double apply(OpKind op, double x, double y) {
        switch (op) {
            case OpKind::Add: return x + y;
            case OpKind::Sub: return x - y;
            case OpKind::Mul: return x * y;
            case OpKind::Div: return x / y;
            default: throw ContractError("apply: not a binary op");
        }
    }

    static std::string op_name(OpKind op) {
        switch (op) {
            case OpKind::Add: return "add";
            case OpKind::Sub: return "sub";
            case OpKind::Mul: return "mul";
            case OpKind::Div: return "div";
            default: return "op";
        }
    }

    // Adds g into the parent's accumulator, sum-reducing when the parent was a
    // broadcast 1x1 scalar.
    void accumulate(NodeId parent, const Tensor2& g) {
        Tensor2& acc = grads_[parent];
        if (acc.same_shape(g)) {
            for (std::size_t f = 0; f < g.size(); ++f) acc.at(f) += g.at(f);
        } else if (acc.is_scalar()) {
            double s = 0.0;
            for (double v : g.data()) s += v;
            acc(0, 0) += s;
        } else {
            throw ShapeError("gradient shape " + g.shape_str() + " does not match node " + acc.shape_str());
        }
    }

    void propagate(NodeId id) {
        const Node& n = nodes_[id];
        const Tensor2& g = grads_[id];
        switch (n.op) {
            case OpKind::Leaf:
            case OpKind::Constant:
                return;
            case OpKind::MatMul: {
                const Tensor2& a = nodes_[n.parents[0]].value;
                const Tensor2& b = nodes_[n.parents[1]].value;
                accumulate(n.parents[0], matmul_value(g, b.transposed()));
                accumulate(n.parents[1], matmul_value(a.transposed(), g));
                return;
            }
            case OpKind::Transpose:
                accumulate(n.parents[0], g.transposed());
                return;
            case OpKind::Add:
            case OpKind::Sub:
            case OpKind::Mul:
            case OpKind::Div: {
                const Tensor2& va = nodes_[n.parents[0]].value;
                const Tensor2& vb = nodes_[n.parents[1]].value;
                Tensor2 ga(g.rows(), g.cols());
                Tensor2 gb(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) {
                    const double x = va.is_scalar() ? va.at(0) : va.at(f);
                    const double y = vb.is_scalar() ? vb.at(0) : vb.at(f);
                    const double up = g.at(f);
                    switch (n.op) {
                        case OpKind::Add:
                            ga.at(f) = up;
                            gb.at(f) = up;
                            break;
                        case OpKind::Sub:
                            ga.at(f) = up;
                            gb.at(f) = -up;
                            break;
                        case OpKind::Mul:
                            ga.at(f) = up * y;
                            gb.at(f) = up * x;
                            break;
                        case OpKind::Div:
                            ga.at(f) = up / y;
                            gb.at(f) = -up * x / (y * y);
                            break;
                        default: break;
                    }
                }
                accumulate(n.parents[0], ga);
                accumulate(n.parents[1], gb);
                return;
            }
            case OpKind::Scale: {
                Tensor2 gx = g;
                for (auto& v : gx.data()) v *= n.scalar;
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Relu: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                Tensor2 gx(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) gx.at(f) = x.at(f) > 0.0 ? g.at(f) : 0.0;
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Tanh: {
                Tensor2 gx(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) {
                    const double t = n.value.at(f);
                    gx.at(f) = g.at(f) * (1.0 - t * t);
                }
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Exp: {
                Tensor2 gx(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) gx.at(f) = g.at(f) * n.value.at(f);
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Log: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                Tensor2 gx(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) gx.at(f) = g.at(f) / x.at(f);
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Sqrt: {
                Tensor2 gx(g.rows(), g.cols());
                for (std::size_t f = 0; f < g.size(); ++f) gx.at(f) = g.at(f) * 0.5 / n.value.at(f);
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::Sum: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                accumulate(n.parents[0], Tensor2(x.rows(), x.cols(), g(0, 0)));
                return;
            }
            case OpKind::Mean: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                accumulate(n.parents[0],
                           Tensor2(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size())));
                return;
            }
            case OpKind::RowSums: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                Tensor2 gx(x.rows(), x.cols());
                for (int i = 0; i < x.rows(); ++i)
                    for (int j = 0; j < x.cols(); ++j) gx(i, j) = g(i, 0);
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::ColSums: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                Tensor2 gx(x.rows(), x.cols());
                for (int i = 0; i < x.rows(); ++i)
                    for (int j = 0; j < x.cols(); ++j) gx(i, j) = g(0, j);
                accumulate(n.parents[0], gx);
                return;
            }
            case OpKind::ConcatCols: {
                const Tensor2& va = nodes_[n.parents[0]].value;
                const Tensor2& vb = nodes_[n.parents[1]].value;
                Tensor2 ga(va.rows(), va.cols());
                Tensor2 gb(vb.rows(), vb.cols());
                for (int i = 0; i < g.rows(); ++i) {
                    for (int j = 0; j < n.left_cols; ++j) ga(i, j) = g(i, j);
                    for (int j = 0; j < vb.cols(); ++j) gb(i, j) = g(i, n.left_cols + j);
                }
                accumulate(n.parents[0], ga);
                accumulate(n.parents[1], gb);
                return;
            }
            case OpKind::SelectCols: {
                const Tensor2& x = nodes_[n.parents[0]].value;
                Tensor2 gx(x.rows(), x.cols(), 0.0);
                for (int i = 0; i < g.rows(); ++i)
                    for (int j = 0; j < g.cols(); ++j) gx(i, n.columns[j]) += g(i, j);
                accumulate(n.parents[0], gx);
                return;
            }
        }
    }

    // Deque keeps value() references stable while new nodes are appended.
    std::deque<Node> nodes_;
    std::vector<Tensor2> grads_;
};

// Named trainable parameter values. Names are unique and used in gradient
// checker diagnostics and optimizer bookkeeping.
class ParamSet {
public:
    void add(const std::string& name, Tensor2 value) {
        for (const auto& e : entries_) {
            if (e.first == name) throw ContractError("ParamSet: duplicate name '" + name + "'");
        }
        entries_.emplace_back(name, std::move(value));
    }

    std::size_t size() const { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i].first; }
    const Tensor2& value(std::size_t i) const { return entries_[i].second; }
    Tensor2& value(std::size_t i) { return entries_[i].second; }

private:
    std::vector<std::pair<std::string, Tensor2>> entries_;
};

// Builds the scalar objective on a fresh graph from trainable leaves created
// in ParamSet order.
using GraphObjective = std::function<NodeId(DiffGraph&, const std::vector<NodeId>&)>;

// Central-difference check of backward() against (f(p+h) - f(p-h)) / 2h for
// every parameter entry. Returns the max over entries of
// |analytic - numeric| / max(1e-12, |numeric|).
inline double finite_diff_check(const GraphObjective& objective, const ParamSet& params, double step) {
    if (!(step > 0.0)) throw ContractError("finite_diff_check: step must be > 0");

    auto build = [&](const std::vector<Tensor2>& values, DiffGraph& g, std::vector<NodeId>& ids) {
        ids.clear();
        for (const Tensor2& v : values) ids.push_back(g.leaf(v, true));
        return objective(g, ids);
    };

    std::vector<Tensor2> base;
    base.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) base.push_back(params.value(p));

    DiffGraph g;
    std::vector<NodeId> ids;
    const NodeId root = build(base, g, ids);
    if (!g.value(root).is_scalar()) throw ContractError("finite_diff_check: objective is not scalar");
    g.backward(root);
    std::vector<Tensor2> analytic;
    analytic.reserve(ids.size());
    for (NodeId id : ids) analytic.push_back(g.grad(id));

    auto eval_at = [&](const std::vector<Tensor2>& values, const std::string& where) {
        try {
            DiffGraph h;
            std::vector<NodeId> tmp;
            const NodeId r = build(values, h, tmp);
            const double v = h.value(r)(0, 0);
            if (!std::isfinite(v)) throw DomainError("non-finite");
            return v;
        } catch (const DomainError&) {
            throw DomainError("finite_diff_check: objective non-finite at perturbed point " + where);
        }
    };

    double max_rel = 0.0;
    std::vector<Tensor2> work = base;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t f = 0; f < work[p].size(); ++f) {
            const double saved = work[p].at(f);
            const std::string where = params.name(p) + "[" + std::to_string(f) + "]";
            work[p].at(f) = saved + step;
            const double up = eval_at(work, where + " +step");
            work[p].at(f) = saved - step;
            const double down = eval_at(work, where + " -step");
            work[p].at(f) = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double rel = std::abs(analytic[p].at(f) - numeric) / std::max(1e-12, std::abs(numeric));
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace pkdot
