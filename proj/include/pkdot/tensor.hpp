#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "pkdot/errors.hpp"

namespace pkdot {

// Dense 2-D matrix of doubles, row-major. The universal value type:
// embeddings, similarity matrices, transport plans, gradients.
class Tensor2 {
public:
    Tensor2() = default;

    Tensor2(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(check_dims(rows, cols)), fill) {}

    Tensor2(int rows, int cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        check_dims(rows, cols);
        if (data_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
            throw ShapeError("Tensor2: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    Tensor2(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = static_cast<int>(rows.size());
        cols_ = rows_ > 0 ? static_cast<int>(rows.begin()->size()) : 0;
        check_dims(rows_, cols_);
        data_.reserve(static_cast<std::size_t>(rows_) * cols_);
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != cols_) {
                throw ShapeError("Tensor2: ragged initializer rows");
            }
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Tensor2 zeros(int rows, int cols) { return Tensor2(rows, cols, 0.0); }
    static Tensor2 full(int rows, int cols, double v) { return Tensor2(rows, cols, v); }

    static Tensor2 identity(int n) {
        Tensor2 t(n, n, 0.0);
        for (int i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

    double& operator()(int i, int j) { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    double operator()(int i, int j) const { return data_[static_cast<std::size_t>(i) * cols_ + j]; }
    double& at(std::size_t flat) { return data_[flat]; }
    double at(std::size_t flat) const { return data_[flat]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    bool same_shape(const Tensor2& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

    // Throws DomainError naming the first non-finite entry, if any.
    void require_finite(const std::string& what) const {
        for (std::size_t f = 0; f < data_.size(); ++f) {
            if (!std::isfinite(data_[f])) {
                const int i = static_cast<int>(f) / std::max(cols_, 1);
                const int j = static_cast<int>(f) % std::max(cols_, 1);
                throw DomainError(what + ": non-finite entry at (" + std::to_string(i) + "," +
                                  std::to_string(j) + ")");
            }
        }
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    double max_abs_diff(const Tensor2& o) const {
        if (!same_shape(o)) {
            throw ShapeError("max_abs_diff: shapes " + shape_str() + " vs " + o.shape_str());
        }
        double m = 0.0;
        for (std::size_t f = 0; f < data_.size(); ++f) m = std::max(m, std::abs(data_[f] - o.data_[f]));
        return m;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    Tensor2 transposed() const {
        Tensor2 t(cols_, rows_);
        for (int i = 0; i < rows_; ++i)
            for (int j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    bool operator==(const Tensor2& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
    }

private:
    static int check_dims(int rows, int cols) {
        if (rows < 0 || cols < 0) throw ShapeError("Tensor2: negative dimension");
        return rows * cols;
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

// Plain matrix product, shape-checked. The graph op in graph.hpp delegates here.
inline Tensor2 matmul_value(const Tensor2& a, const Tensor2& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions disagree, " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor2 out(a.rows(), b.cols(), 0.0);
    for (int i = 0; i < a.rows(); ++i) {
        for (int j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (int k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            out(i, j) = acc;
        }
    }
    return out;
}

} // namespace pkdot
