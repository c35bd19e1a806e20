#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "pkdot/errors.hpp"
#include "pkdot/io.hpp"
#include "pkdot/losses.hpp"
#include "pkdot/rng.hpp"
#include "pkdot/tensor.hpp"

namespace pkdot {

enum class TaskKind { Classification, Regression };
enum class Split { Train, Val };
enum class Modality { Prevalent, Privileged };

// Linear-Gaussian latent model: one latent z per sample drives both modality
// views and the target, and a single noise knob per modality sets how
// informative that view is (the SEW/WES switch).
struct SyntheticSpec {
    TaskKind task = TaskKind::Classification;
    int classes = 5;            // classification only
    int regression_targets = 2; // regression only: 1 or 2
    int n_samples = 2000;
    int latent_dim = 4;
    int d_prevalent = 16;
    int d_privileged = 16;
    double noise_prevalent = 0.1;
    double noise_privileged = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_samples < 2 || latent_dim < 1 || d_prevalent < 1 || d_privileged < 1) {
            throw ContractError("SyntheticSpec: counts must be positive");
        }
        if (task == TaskKind::Classification && classes < 2) {
            throw ContractError("SyntheticSpec: needs at least 2 classes");
        }
        if (task == TaskKind::Regression && (regression_targets < 1 || regression_targets > 2)) {
            throw ContractError("SyntheticSpec: regression targets must be 1 or 2");
        }
        if (noise_prevalent < 0.0 || noise_privileged < 0.0) {
            throw ContractError("SyntheticSpec: noises must be >= 0");
        }
    }

    // Privileged modality clean, prevalent noisy: the strong channel is the
    // one the student never sees. The sample count is deliberately small
    // relative to the noise level; with abundant data the prevalent-only
    // model saturates the (linear) Bayes limit of this generator and no
    // distillation method has room left to help.
    static SyntheticSpec default_sew() {
        SyntheticSpec s;
        s.n_samples = 400;
        s.noise_prevalent = 4.0;
        s.noise_privileged = 0.1;
        return s;
    }

    static SyntheticSpec default_wes() {
        SyntheticSpec s;
        s.n_samples = 400;
        s.noise_prevalent = 0.1;
        s.noise_privileged = 4.0;
        return s;
    }
};

struct Dataset {
    TaskKind task = TaskKind::Classification;
    int classes = 0;
    Tensor2 prevalent;        // n x d_p
    Tensor2 privileged;       // n x d_q
    std::vector<int> labels;  // classification
    Tensor2 targets;          // regression, n x T
    std::vector<Split> split; // per sample

    int n() const { return prevalent.rows(); }
    int target_count() const { return task == TaskKind::Classification ? 1 : targets.cols(); }

    std::vector<int> indices_of(Split s) const {
        std::vector<int> out;
        for (int i = 0; i < n(); ++i) {
            if (split[i] == s) out.push_back(i);
        }
        return out;
    }

    Tensor2 gather(Modality m, const std::vector<int>& rows) const {
        const Tensor2& src = m == Modality::Prevalent ? prevalent : privileged;
        Tensor2 out(static_cast<int>(rows.size()), src.cols());
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (int j = 0; j < src.cols(); ++j) out(static_cast<int>(r), j) = src(rows[r], j);
        return out;
    }
};

namespace detail {

// Class centroids on a sphere of radius `scale`, rejection-resampled until no
// pair is closer than `min_dist` so every pair of classes stays separable.
inline std::vector<std::vector<double>> sample_class_means(int classes, int dim, double scale,
                                                           double min_dist, Rng& rng) {
    std::vector<std::vector<double>> means;
    while (static_cast<int>(means.size()) < classes) {
        std::vector<double> m(static_cast<std::size_t>(dim));
        double norm2 = 0.0;
        for (double& v : m) {
            v = rng.gaussian();
            norm2 += v * v;
        }
        const double norm = std::sqrt(norm2);
        if (norm == 0.0) continue;
        for (double& v : m) v *= scale / norm;
        bool ok = true;
        for (const auto& other : means) {
            double d2 = 0.0;
            for (int k = 0; k < dim; ++k) d2 += (m[k] - other[k]) * (m[k] - other[k]);
            if (d2 < min_dist * min_dist) {
                ok = false;
                break;
            }
        }
        if (ok) means.push_back(std::move(m));
    }
    return means;
}

// Rows drawn Gaussian then normalized to unit length, so the per-feature
// signal scale is independent of the latent dimension.
inline Tensor2 unit_row_mixing(int rows, int cols, Rng& rng) {
    Tensor2 m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        double norm2 = 0.0;
        for (int j = 0; j < cols; ++j) {
            m(i, j) = rng.gaussian();
            norm2 += m(i, j) * m(i, j);
        }
        const double norm = std::sqrt(norm2);
        for (int j = 0; j < cols; ++j) m(i, j) = norm > 0.0 ? m(i, j) / norm : 1.0;
    }
    return m;
}

} // namespace detail

inline Dataset generate(const SyntheticSpec& spec) {
    spec.validate();
    constexpr double kClassScale = 3.0;
    constexpr double kClassMinDist = 2.5;
    constexpr double kWithinStd = 0.4;

    Rng structure_rng = Rng::stream(spec.seed, "structure");
    Rng latent_rng = Rng::stream(spec.seed, "latents");
    Rng noise_prev_rng = Rng::stream(spec.seed, "noise_prevalent");
    Rng noise_priv_rng = Rng::stream(spec.seed, "noise_privileged");
    Rng split_rng = Rng::stream(spec.seed, "split");

    Dataset ds;
    ds.task = spec.task;
    ds.classes = spec.task == TaskKind::Classification ? spec.classes : 0;
    ds.prevalent = Tensor2(spec.n_samples, spec.d_prevalent);
    ds.privileged = Tensor2(spec.n_samples, spec.d_privileged);

    std::vector<std::vector<double>> means;
    Tensor2 target_map;
    if (spec.task == TaskKind::Classification) {
        means = detail::sample_class_means(spec.classes, spec.latent_dim, kClassScale, kClassMinDist,
                                           structure_rng);
    } else {
        target_map = detail::unit_row_mixing(spec.regression_targets, spec.latent_dim, structure_rng);
        ds.targets = Tensor2(spec.n_samples, spec.regression_targets);
    }
    const Tensor2 mix_prevalent = detail::unit_row_mixing(spec.d_prevalent, spec.latent_dim, structure_rng);
    const Tensor2 mix_privileged = detail::unit_row_mixing(spec.d_privileged, spec.latent_dim, structure_rng);

    std::vector<double> z(static_cast<std::size_t>(spec.latent_dim));
    for (int i = 0; i < spec.n_samples; ++i) {
        if (spec.task == TaskKind::Classification) {
            const int c = i % spec.classes; // round-robin keeps classes balanced within one sample
            ds.labels.push_back(c);
            for (int k = 0; k < spec.latent_dim; ++k) {
                z[static_cast<std::size_t>(k)] = means[c][static_cast<std::size_t>(k)] +
                                                 kWithinStd * latent_rng.gaussian();
            }
        } else {
            for (int k = 0; k < spec.latent_dim; ++k) z[static_cast<std::size_t>(k)] = latent_rng.gaussian();
            for (int t = 0; t < spec.regression_targets; ++t) {
                double dot = 0.0;
                for (int k = 0; k < spec.latent_dim; ++k) dot += target_map(t, k) * z[static_cast<std::size_t>(k)];
                ds.targets(i, t) = std::tanh(dot);
            }
        }
        for (int j = 0; j < spec.d_prevalent; ++j) {
            double dot = 0.0;
            for (int k = 0; k < spec.latent_dim; ++k) dot += mix_prevalent(j, k) * z[static_cast<std::size_t>(k)];
            ds.prevalent(i, j) = dot + spec.noise_prevalent * noise_prev_rng.gaussian();
        }
        for (int j = 0; j < spec.d_privileged; ++j) {
            double dot = 0.0;
            for (int k = 0; k < spec.latent_dim; ++k) dot += mix_privileged(j, k) * z[static_cast<std::size_t>(k)];
            ds.privileged(i, j) = dot + spec.noise_privileged * noise_priv_rng.gaussian();
        }
    }

    // 80/20 split by seeded shuffle.
    std::vector<int> order(static_cast<std::size_t>(spec.n_samples));
    std::iota(order.begin(), order.end(), 0);
    split_rng.shuffle(order);
    const int n_train = spec.n_samples * 8 / 10;
    ds.split.assign(static_cast<std::size_t>(spec.n_samples), Split::Val);
    for (int r = 0; r < n_train; ++r) ds.split[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = Split::Train;
    return ds;
}

// Seeded per-epoch shuffle into index batches; a final batch of fewer than
// two samples is dropped (similarity matrices and CCC need b >= 2).
inline std::vector<std::vector<int>> batches(const Dataset& ds, Split split, int batch_size,
                                             std::uint64_t epoch_seed) {
    if (batch_size < 2) throw ContractError("batches: batch_size must be >= 2");
    std::vector<int> idx = ds.indices_of(split);
    Rng rng = Rng::stream(epoch_seed, "batch_order");
    rng.shuffle(idx);
    std::vector<std::vector<int>> out;
    for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
        if (end - start < 2) break;
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(start),
                         idx.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

// --- CSV round trip ------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "sample_id,split";
    if (ds.task == TaskKind::Classification) {
        out << ",label";
    } else {
        for (int t = 0; t < ds.targets.cols(); ++t) out << ",target_" << t;
    }
    for (int j = 0; j < ds.prevalent.cols(); ++j) out << ",prev_" << j;
    for (int j = 0; j < ds.privileged.cols(); ++j) out << ",priv_" << j;
    out << '\n';
    for (int i = 0; i < ds.n(); ++i) {
        out << i << ',' << (ds.split[static_cast<std::size_t>(i)] == Split::Train ? "train" : "val");
        if (ds.task == TaskKind::Classification) {
            out << ',' << ds.labels[static_cast<std::size_t>(i)];
        } else {
            for (int t = 0; t < ds.targets.cols(); ++t) out << ',' << format_double(ds.targets(i, t));
        }
        for (int j = 0; j < ds.prevalent.cols(); ++j) out << ',' << format_double(ds.prevalent(i, j));
        for (int j = 0; j < ds.privileged.cols(); ++j) out << ',' << format_double(ds.privileged(i, j));
        out << '\n';
    }
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("line 1: empty file");
    const std::vector<std::string> header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "sample_id" || header[1] != "split") {
        throw ParseError("line 1: expected header starting with 'sample_id,split'");
    }

    std::size_t col = 2;
    TaskKind task;
    int target_cols = 0;
    if (col < header.size() && header[col] == "label") {
        task = TaskKind::Classification;
        ++col;
    } else {
        task = TaskKind::Regression;
        while (col < header.size() && header[col] == "target_" + std::to_string(target_cols)) {
            ++target_cols;
            ++col;
        }
        if (target_cols == 0) throw ParseError("line 1: expected column 'label' or 'target_0'");
    }
    int d_prev = 0;
    while (col < header.size() && header[col] == "prev_" + std::to_string(d_prev)) {
        ++d_prev;
        ++col;
    }
    if (d_prev == 0) throw ParseError("line 1: expected column 'prev_0'");
    int d_priv = 0;
    while (col < header.size() && header[col] == "priv_" + std::to_string(d_priv)) {
        ++d_priv;
        ++col;
    }
    if (d_priv == 0) throw ParseError("line 1: expected column 'priv_0'");
    if (col != header.size()) throw ParseError("line 1: unexpected column '" + header[col] + "'");

    std::vector<std::vector<std::string>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields = split_csv_line(line);
        if (fields.size() != header.size()) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(header.size()) + " fields, got " + std::to_string(fields.size()));
        }
        rows.push_back(std::move(fields));
    }
    if (rows.empty()) throw ParseError("line 2: no data rows");

    Dataset ds;
    ds.task = task;
    const int n = static_cast<int>(rows.size());
    ds.prevalent = Tensor2(n, d_prev);
    ds.privileged = Tensor2(n, d_priv);
    if (task == TaskKind::Regression) ds.targets = Tensor2(n, target_cols);
    ds.split.resize(static_cast<std::size_t>(n));

    for (int i = 0; i < n; ++i) {
        const auto& f = rows[static_cast<std::size_t>(i)];
        const int ln = i + 2;
        std::size_t c = 0;
        const long sid = parse_long_field(f[c++], ln);
        if (sid != i) throw ParseError("line " + std::to_string(ln) + ": sample_id out of order");
        if (f[c] == "train") {
            ds.split[static_cast<std::size_t>(i)] = Split::Train;
        } else if (f[c] == "val") {
            ds.split[static_cast<std::size_t>(i)] = Split::Val;
        } else {
            throw ParseError("line " + std::to_string(ln) + ": split must be 'train' or 'val'");
        }
        ++c;
        if (task == TaskKind::Classification) {
            ds.labels.push_back(static_cast<int>(parse_long_field(f[c++], ln)));
        } else {
            for (int t = 0; t < target_cols; ++t) ds.targets(i, t) = parse_double_field(f[c++], ln);
        }
        for (int j = 0; j < d_prev; ++j) ds.prevalent(i, j) = parse_double_field(f[c++], ln);
        for (int j = 0; j < d_priv; ++j) ds.privileged(i, j) = parse_double_field(f[c++], ln);
    }
    if (task == TaskKind::Classification) {
        ds.classes = 1 + *std::max_element(ds.labels.begin(), ds.labels.end());
    }
    return ds;
}

// --- linear probes ---------------------------------------------------------------
// Ridge least squares on the train split; the measuring stick for how
// informative each modality is on its own.

namespace detail {

// Solves A X = B for square A by Gaussian elimination with partial pivoting.
inline Tensor2 solve_linear(Tensor2 a, Tensor2 b) {
    const int n = a.rows();
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int r = col + 1; r < n; ++r) {
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        }
        if (a(pivot, col) == 0.0) throw DomainError("solve_linear: singular matrix");
        if (pivot != col) {
            for (int j = 0; j < n; ++j) std::swap(a(col, j), a(pivot, j));
            for (int j = 0; j < b.cols(); ++j) std::swap(b(col, j), b(pivot, j));
        }
        const double inv = 1.0 / a(col, col);
        for (int r = col + 1; r < n; ++r) {
            const double factor = a(r, col) * inv;
            if (factor == 0.0) continue;
            for (int j = col; j < n; ++j) a(r, j) -= factor * a(col, j);
            for (int j = 0; j < b.cols(); ++j) b(r, j) -= factor * b(col, j);
        }
    }
    Tensor2 x(n, b.cols());
    for (int col = n - 1; col >= 0; --col) {
        for (int j = 0; j < b.cols(); ++j) {
            double acc = b(col, j);
            for (int r = col + 1; r < n; ++r) acc -= a(col, r) * x(r, j);
            x(col, j) = acc / a(col, col);
        }
    }
    return x;
}

inline Tensor2 with_bias_column(const Tensor2& x) {
    Tensor2 out(x.rows(), x.cols() + 1);
    for (int i = 0; i < x.rows(); ++i) {
        for (int j = 0; j < x.cols(); ++j) out(i, j) = x(i, j);
        out(i, x.cols()) = 1.0;
    }
    return out;
}

} // namespace detail

struct ProbeReport {
    double train_accuracy = 0.0;       // classification
    double val_accuracy = 0.0;         // classification
    std::vector<double> train_ccc;     // regression, per target
    std::vector<double> val_ccc;       // regression, per target
};

inline ProbeReport linear_probe(const Dataset& ds, Modality modality, double ridge = 1e-3) {
    const std::vector<int> train_idx = ds.indices_of(Split::Train);
    const std::vector<int> val_idx = ds.indices_of(Split::Val);
    if (train_idx.empty() || val_idx.empty()) throw ContractError("linear_probe: empty split");

    const Tensor2 x_train = detail::with_bias_column(ds.gather(modality, train_idx));
    const Tensor2 x_val = detail::with_bias_column(ds.gather(modality, val_idx));

    const int out_cols = ds.task == TaskKind::Classification ? ds.classes : ds.targets.cols();
    Tensor2 y_train(x_train.rows(), out_cols, 0.0);
    for (int r = 0; r < x_train.rows(); ++r) {
        const int i = train_idx[static_cast<std::size_t>(r)];
        if (ds.task == TaskKind::Classification) {
            y_train(r, ds.labels[static_cast<std::size_t>(i)]) = 1.0;
        } else {
            for (int t = 0; t < out_cols; ++t) y_train(r, t) = ds.targets(i, t);
        }
    }

    Tensor2 gram = matmul_value(x_train.transposed(), x_train);
    for (int d = 0; d < gram.rows(); ++d) gram(d, d) += ridge;
    const Tensor2 w = detail::solve_linear(std::move(gram), matmul_value(x_train.transposed(), y_train));

    ProbeReport report;
    auto score = [&](const Tensor2& x, const std::vector<int>& idx, double& accuracy,
                     std::vector<double>& ccc) {
        const Tensor2 pred = matmul_value(x, w);
        if (ds.task == TaskKind::Classification) {
            int hits = 0;
            for (int r = 0; r < pred.rows(); ++r) {
                int arg = 0;
                for (int c = 1; c < pred.cols(); ++c) {
                    if (pred(r, c) > pred(r, arg)) arg = c;
                }
                if (arg == ds.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])]) ++hits;
            }
            accuracy = static_cast<double>(hits) / pred.rows();
        } else {
            for (int t = 0; t < pred.cols(); ++t) {
                Tensor2 p(pred.rows(), 1), y(pred.rows(), 1);
                for (int r = 0; r < pred.rows(); ++r) {
                    p(r, 0) = pred(r, t);
                    y(r, 0) = ds.targets(idx[static_cast<std::size_t>(r)], t);
                }
                ccc.push_back(ccc_value(p, y));
            }
        }
    };
    score(x_train, train_idx, report.train_accuracy, report.train_ccc);
    score(x_val, val_idx, report.val_accuracy, report.val_ccc);
    return report;
}

} // namespace pkdot
