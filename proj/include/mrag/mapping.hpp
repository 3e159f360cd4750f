// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mrag/embedio.hpp"
#include "mrag/errors.hpp"

namespace mrag::mapping {

enum class MapMethod : std::uint8_t { ols = 0, ridge = 1, procrustes = 2 };

inline std::string method_name(MapMethod m) {
    switch (m) {
        case MapMethod::ols: return "ols";
        case MapMethod::ridge: return "ridge";
        case MapMethod::procrustes: return "procrustes";
    }
    return "?";
}

inline MapMethod parse_method(std::string_view name) {
    if (name == "ols") return MapMethod::ols;
    if (name == "ridge") return MapMethod::ridge;
    if (name == "procrustes") return MapMethod::procrustes;
    throw ConfigError("unknown mapping method '" + std::string(name) + "'");
}

/// The d x d linear map from image-embedding space to text-embedding space.
/// Multiplies column vectors: text = matrix * image. Carries the training
/// preprocessing statistics needed to apply it to unseen vectors.
struct MappingModel {
    Eigen::MatrixXd matrix;
    MapMethod method = MapMethod::ols;
    double lambda = 0.0;
    embedio::PreprocessStats stats;
    int dim = 0;

    // fit diagnostics, not persisted
    double condition_estimate = 0.0;
    bool used_pseudoinverse = false;
};

// Emitted as a warning, never an error.
constexpr double kConditionWarnThreshold = 1e8;

struct FitOptions {
    bool allow_pseudoinverse = true; // minimum-norm fallback for rank-deficient designs at lambda = 0
};

namespace detail {

inline void check_pairs(const std::vector<embedio::Vec>& images, const std::vector<embedio::Vec>& texts,
                        const char* what) {
    if (images.empty() || images.size() != texts.size())
        throw DimensionError(std::string(what) + ": need >= 1 pair with equal counts");
    std::size_t d = images.front().size();
    for (std::size_t i = 0; i < images.size(); ++i)
        if (images[i].size() != d || texts[i].size() != d)
            throw DimensionError(std::string(what) + ": inconsistent dimensions at pair " +
                                 std::to_string(i));
}

// Gram = sum v v^T and Cross = sum v e^T accumulated in double. O(n d^2).
inline void accumulate(const std::vector<embedio::Vec>& images, const std::vector<embedio::Vec>& texts,
                       Eigen::MatrixXd& gram, Eigen::MatrixXd& cross) {
    auto d = static_cast<Eigen::Index>(images.front().size());
    gram.setZero(d, d);
    cross.setZero(d, d);
    Eigen::VectorXd v(d), e(d);
    for (std::size_t i = 0; i < images.size(); ++i) {
        for (Eigen::Index j = 0; j < d; ++j) {
            v[j] = images[i][j];
            e[j] = texts[i][j];
        }
        gram.selfadjointView<Eigen::Lower>().rankUpdate(v);
        cross.noalias() += v * e.transpose();
    }
    gram = gram.selfadjointView<Eigen::Lower>();
}

} // namespace detail

/// Closed-form least squares: minimizes sum_i ||L v_i - e_i||^2 + lambda ||L||_F^2.
/// Solves the normal equations with an LDLT factorization; at lambda = 0 a
/// rank-deficient Gram matrix falls back to the eigendecomposition
/// pseudoinverse, which yields the minimum-Frobenius-norm solution.
inline MappingModel fit_ols(const std::vector<embedio::Vec>& images, const std::vector<embedio::Vec>& texts,
                            double lambda = 0.0, const FitOptions& options = {}) {
    detail::check_pairs(images, texts, "fit_ols");
    if (lambda < 0.0) throw ConfigError("fit_ols: lambda must be non-negative");
    auto d = static_cast<Eigen::Index>(images.front().size());

    Eigen::MatrixXd gram, cross;
    detail::accumulate(images, texts, gram, cross);
    if (lambda > 0.0) gram.diagonal().array() += lambda;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
    if (eig.info() != Eigen::Success) throw SingularSystemError("fit_ols: eigendecomposition failed");
    const Eigen::VectorXd& evals = eig.eigenvalues();
    double max_ev = evals.cwiseAbs().maxCoeff();
    double rank_tol = std::max(max_ev, 1.0) * static_cast<double>(d) * 1e-14;
    double min_ev = evals.minCoeff();
    bool rank_deficient = min_ev <= rank_tol;

    MappingModel model;
    model.dim = static_cast<int>(d);
    model.method = lambda > 0.0 ? MapMethod::ridge : MapMethod::ols;
    model.lambda = lambda;
    model.condition_estimate = rank_deficient ? std::numeric_limits<double>::infinity()
                                              : max_ev / std::max(min_ev, 1e-300);

    if (!rank_deficient) {
        // Normal equations: (V^T V + lambda I) L^T = V^T E.
        Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
        if (ldlt.info() != Eigen::Success) throw SingularSystemError("fit_ols: factorization failed");
        model.matrix = ldlt.solve(cross).transpose();
    } else {
        if (!options.allow_pseudoinverse)
            throw SingularSystemError("fit_ols: rank-deficient design with pseudoinverse fallback disabled");
        // L^T = pinv(V^T V) V^T E, the minimum-norm least-squares solution.
        Eigen::VectorXd inv = evals.unaryExpr(
            [&](double ev) { return ev > rank_tol ? 1.0 / ev : 0.0; });
        Eigen::MatrixXd pinv =
            eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
        model.matrix = (pinv * cross).transpose();
        model.used_pseudoinverse = true;
    }
    if (!model.matrix.allFinite()) throw SingularSystemError("fit_ols: non-finite solution");
    return model;
}

/// Orthogonal Procrustes: the orthogonal matrix minimizing
/// sum_i ||L v_i - e_i||^2, from the SVD of the cross-covariance sum v_i e_i^T.
inline MappingModel fit_procrustes(const std::vector<embedio::Vec>& images,
                                   const std::vector<embedio::Vec>& texts) {
    detail::check_pairs(images, texts, "fit_procrustes");
    auto d = static_cast<Eigen::Index>(images.front().size());
    Eigen::MatrixXd gram, cross;
    detail::accumulate(images, texts, gram, cross);
    if (cross.cwiseAbs().maxCoeff() == 0.0)
        throw DegenerateInputError("fit_procrustes: all-zero cross-covariance");

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
    MappingModel model;
    model.dim = static_cast<int>(d);
    model.method = MapMethod::procrustes;
    // cross = U S W^T maximizes tr(L * cross) at L = W U^T.
    model.matrix = svd.matrixV() * svd.matrixU().transpose();
    return model;
}

inline embedio::Embedding apply_map(const MappingModel& model, const embedio::Embedding& v) {
    if (v.dim() != model.dim)
        throw DimensionError("apply_map: vector dimension " + std::to_string(v.dim()) +
                             " does not match model dimension " + std::to_string(model.dim));
    Eigen::VectorXd x(model.dim);
    for (int i = 0; i < model.dim; ++i) x[i] = v.values[i];
    Eigen::VectorXd y = model.matrix * x;
    embedio::Embedding out;
    out.id = v.id;
    out.values.resize(static_cast<std::size_t>(model.dim));
    for (int i = 0; i < model.dim; ++i) out.values[static_cast<std::size_t>(i)] = static_cast<float>(y[i]);
    return out;
}

/// Sum of squared residuals sum_i ||L v_i - e_i||^2 over the given pairs.
inline double residual(const MappingModel& model, const std::vector<embedio::Vec>& images,
                       const std::vector<embedio::Vec>& texts) {
    if (images.size() != texts.size()) throw DimensionError("residual: pair count mismatch");
    double total = 0.0;
    Eigen::VectorXd v(model.dim), e(model.dim);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (static_cast<int>(images[i].size()) != model.dim ||
            static_cast<int>(texts[i].size()) != model.dim)
            throw DimensionError("residual: dimension mismatch at pair " + std::to_string(i));
        for (int j = 0; j < model.dim; ++j) {
            v[j] = images[i][j];
            e[j] = texts[i][j];
        }
        total += (model.matrix * v - e).squaredNorm();
    }
    return total;
}

/// Largest absolute deviation of L^T L from the identity.
inline double orthogonality_defect(const MappingModel& model) {
    Eigen::MatrixXd g = model.matrix.transpose() * model.matrix;
    g.diagonal().array() -= 1.0;
    return g.cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Persistence: magic "MAP1", u32le d, u8 method tag, f64le lambda,
// d*d f64le row-major matrix, image mean (d f64le), text mean (d f64le),
// then two flag bytes (center, normalize).
// ---------------------------------------------------------------------------

inline void save_map(const MappingModel& model, const std::filesystem::path& path) {
    if (model.stats.dim() != model.dim)
        throw DimensionError("save_map: model carries no preprocessing statistics of matching dimension");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("save_map: cannot open " + path.string());
    out.write("MAP1", 4);
    embedio::detail::put_u32(out, static_cast<std::uint32_t>(model.dim));
    char tag = static_cast<char>(model.method);
    out.write(&tag, 1);
    embedio::detail::put_f64(out, model.lambda);
    for (int r = 0; r < model.dim; ++r)
        for (int c = 0; c < model.dim; ++c) embedio::detail::put_f64(out, model.matrix(r, c));
    for (double x : model.stats.image_mean) embedio::detail::put_f64(out, x);
    for (double x : model.stats.text_mean) embedio::detail::put_f64(out, x);
    char flags[2] = {static_cast<char>(model.stats.flags.center ? 1 : 0),
                     static_cast<char>(model.stats.flags.normalize ? 1 : 0)};
    out.write(flags, 2);
    if (!out) throw FormatError("save_map: write failed for " + path.string());
}

inline MappingModel load_map(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("load_map: cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "MAP1", 4) != 0)
        throw FormatError("load_map: bad magic in " + path.string());
    std::uint32_t d = embedio::detail::get_u32(in, path.string());
    if (d < 1 || d > embedio::kMaxDim) throw FormatError("load_map: dimension out of range");
    char tag;
    if (!in.read(&tag, 1)) throw FormatError("load_map: truncated method tag");
    if (tag < 0 || tag > 2) throw FormatError("load_map: unknown method tag");
    MappingModel model;
    model.dim = static_cast<int>(d);
    model.method = static_cast<MapMethod>(tag);
    model.lambda = embedio::detail::get_f64(in, path.string());
    model.matrix.resize(d, d);
    for (std::uint32_t r = 0; r < d; ++r)
        for (std::uint32_t c = 0; c < d; ++c) model.matrix(r, c) = embedio::detail::get_f64(in, path.string());
    model.stats.image_mean.resize(d);
    model.stats.text_mean.resize(d);
    for (double& x : model.stats.image_mean) x = embedio::detail::get_f64(in, path.string());
    for (double& x : model.stats.text_mean) x = embedio::detail::get_f64(in, path.string());
    char flags[2];
    if (!in.read(flags, 2)) throw FormatError("load_map: truncated flags");
    model.stats.flags.center = flags[0] != 0;
    model.stats.flags.normalize = flags[1] != 0;
    if (!model.matrix.allFinite()) throw ValueError("load_map: non-finite matrix entries");
    return model;
}

} // namespace mrag::mapping
