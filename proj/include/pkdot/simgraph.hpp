#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/io.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

enum class EmbeddingSource { Teacher, Student };

// A batch of embeddings living on a graph: b rows of m-dimensional features.
struct EmbeddingBatch {
    NodeId node;
    EmbeddingSource source;
};

// The k retained column indices, strictly increasing.
struct AnchorSet {
    std::vector<int> indices;
    int k() const { return static_cast<int>(indices.size()); }
};

namespace detail {

inline void check_batch(const Tensor2& x) {
    if (x.rows() < 2) throw ContractError("embedding batch needs at least 2 rows, got " + x.shape_str());
}

inline void check_no_zero_rows(const Tensor2& x) {
    for (int i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (int j = 0; j < x.cols(); ++j) s += x(i, j) * x(i, j);
        if (s == 0.0) {
            throw DegenerateInputError("embedding row " + std::to_string(i) +
                                       " is all-zero; cosine similarity is undefined");
        }
    }
}

} // namespace detail

// C = X . X^T, the b x b matrix of pairwise dot products.
inline NodeId gram(DiffGraph& g, NodeId x) {
    detail::check_batch(g.value(x));
    return g.matmul(x, g.transpose(x));
}

// b x 1 vector of row l2 norms. Rejects all-zero rows.
inline NodeId row_l2_norms(DiffGraph& g, NodeId x) {
    detail::check_no_zero_rows(g.value(x));
    return g.sqrt(g.row_sums(g.mul(x, x)));
}

// S = C / (N . N^T): entrywise-normalized gram matrix, differentiable
// end-to-end. Symmetric with unit diagonal, entries in [-1, 1].
inline NodeId cosine_similarity_matrix(DiffGraph& g, NodeId x) {
    detail::check_batch(g.value(x));
    const NodeId c = gram(g, x);
    const NodeId n = row_l2_norms(g, x);
    const NodeId denom = g.matmul(n, g.transpose(n));
    return g.divide(c, denom);
}

// Value-only route for frozen teacher batches; no graph involved.
inline Tensor2 cosine_similarity_value(const Tensor2& x) {
    DiffGraph g;
    return g.value(cosine_similarity_matrix(g, g.constant(x)));
}

// Validates the SimilarityMatrix invariants; used by tests and assertions.
inline bool is_valid_similarity(const Tensor2& s, double tol = 1e-9) {
    if (s.rows() != s.cols()) return false;
    for (int i = 0; i < s.rows(); ++i) {
        if (std::abs(s(i, i) - 1.0) > tol) return false;
        for (int j = 0; j < s.cols(); ++j) {
            if (std::abs(s(i, j) - s(j, i)) > tol) return false;
            if (s(i, j) < -1.0 - tol || s(i, j) > 1.0 + tol) return false;
        }
    }
    return true;
}

// Scores each sample by its off-diagonal row sum and keeps the k lowest
// (the most dissimilar overall). Ties break toward the lower index; the
// result is sorted ascending.
inline AnchorSet select_anchors(const Tensor2& s, int k) {
    if (s.rows() != s.cols()) throw ContractError("select_anchors: matrix must be square, got " + s.shape_str());
    const int b = s.rows();
    if (k < 1 || k > b) {
        throw ContractError("select_anchors: k=" + std::to_string(k) + " out of range [1, " +
                            std::to_string(b) + "]");
    }
    std::vector<double> score(b, 0.0);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) {
            if (j != i) score[i] += s(i, j);
        }
    }
    std::vector<int> order(b);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int c) { return score[a] < score[c]; });
    AnchorSet anchors;
    anchors.indices.assign(order.begin(), order.begin() + k);
    std::sort(anchors.indices.begin(), anchors.indices.end());
    return anchors;
}

// b x k restriction keeping all rows and only the anchor columns.
inline NodeId restrict_to_anchors(DiffGraph& g, NodeId s, const AnchorSet& anchors) {
    if (anchors.k() < 1) throw ContractError("restrict_to_anchors: empty anchor set");
    return g.select_cols(s, anchors.indices);
}

inline Tensor2 restrict_to_anchors_value(const Tensor2& s, const AnchorSet& anchors) {
    DiffGraph g;
    return g.value(restrict_to_anchors(g, g.constant(s), anchors));
}

inline void write_similarity_csv(const Tensor2& s, const std::string& path) {
    write_matrix_csv(s, path);
}

} // namespace pkdot
