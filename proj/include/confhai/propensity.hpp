#pragma once

// Nominal propensity π̃₀(t|x), expert-assignment rule d₀(h|x), and the
// observed-covariate calibration of a reference Γ.

#include "confhai/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

namespace confhai {

struct LogisticFitOptions {
    double l2 = 0.0;                  // ridge penalty on standardized slopes (intercept free)
    int max_iterations = 5000;
    double gradient_tolerance = 1e-8; // on the mean log-loss gradient
};

struct LogisticFitResult {
    LinearSoftmax model;  // on the original covariate scale
    double log_loss = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
};

namespace detail {

struct Standardizer {
    Vector mean, scale;

    static Standardizer fit(const Matrix& X) {
        Standardizer s;
        const double n = static_cast<double>(X.rows());
        s.mean = X.colwise().mean().transpose();
        s.scale = Vector::Ones(X.cols());
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            const double var = (X.col(j).array() - s.mean(j)).square().sum() / n;
            if (var > 1e-24) s.scale(j) = std::sqrt(var);
        }
        return s;
    }
    Matrix apply(const Matrix& X) const {
        return ((X.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array()).matrix();
    }
    // Parameters fitted on standardized inputs, mapped back to raw inputs.
    Matrix unstandardize(const Matrix& params) const {
        Matrix out = params;
        const Eigen::Index d = mean.size();
        for (Eigen::Index k = 0; k < params.rows(); ++k) {
            double intercept = params(k, 0);
            for (Eigen::Index j = 0; j < d; ++j) {
                out(k, j + 1) = params(k, j + 1) / scale(j);
                intercept -= out(k, j + 1) * mean(j);
            }
            out(k, 0) = intercept;
        }
        return out;
    }
};

struct LossAndGradient {
    double loss;
    Matrix gradient;
};

inline LossAndGradient multinomial_loss(const LinearSoftmax& model, const Matrix& Z, const std::vector<int>& labels,
                                        double l2) {
    const Matrix P = model.probabilities(Z);
    const double n = static_cast<double>(Z.rows());
    double loss = 0.0;
    Matrix G = Matrix::Zero(P.rows(), P.cols());
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
        const auto y = labels[static_cast<std::size_t>(i)];
        const double p = std::max(P(i, y), 1e-300);
        loss -= std::log(p);
        G(i, y) = -1.0 / (p * n);
    }
    loss /= n;
    Matrix grad = LinearSoftmax::backprop(Z, P, G);
    if (l2 > 0.0) {
        const auto& W = model.params();
        loss += 0.5 * l2 * W.rightCols(W.cols() - 1).squaredNorm();
        grad.rightCols(W.cols() - 1) += l2 * W.rightCols(W.cols() - 1);
    }
    return {loss, grad};
}

}  // namespace detail

// L2-regularized multinomial logistic regression by full-batch gradient
// descent with Armijo backtracking (Barzilai-Borwein trial steps), on
// internally standardized covariates.
inline LogisticFitResult fit_multinomial_logistic(const Matrix& X, const std::vector<int>& labels, int classes,
                                                  const LogisticFitOptions& opt = {}) {
    if (X.rows() == 0 || static_cast<std::size_t>(X.rows()) != labels.size())
        throw std::invalid_argument("logistic fit: empty or mismatched inputs");
    if (classes < 1) throw std::invalid_argument("logistic fit: need at least one class");
    for (int y : labels)
        if (y < 0 || y >= classes) throw std::invalid_argument("logistic fit: label out of range");

    const auto standardizer = detail::Standardizer::fit(X);
    const Matrix Z = standardizer.apply(X);
    LinearSoftmax model(classes, static_cast<int>(X.cols()));

    LogisticFitResult result;
    if (classes == 1) {
        result.model = model;
        return result;
    }

    auto current = detail::multinomial_loss(model, Z, labels, opt.l2);
    double step = 1.0;
    Matrix prev_params, prev_grad;
    int it = 0;
    double gnorm = current.gradient.norm();
    for (; it < opt.max_iterations && gnorm > opt.gradient_tolerance; ++it) {
        if (it > 0) {
            const Matrix s = model.params() - prev_params;
            const Matrix yv = current.gradient - prev_grad;
            const double sy = (s.array() * yv.array()).sum();
            if (sy > 0.0) step = std::clamp(s.squaredNorm() / sy, 1e-10, 1e10);
        }
        prev_params = model.params();
        prev_grad = current.gradient;

        const double gg = gnorm * gnorm;
        LinearSoftmax trial = model;
        detail::LossAndGradient next{0.0, {}};
        bool accepted = false;
        for (int backtrack = 0; backtrack <= 60; ++backtrack) {
            trial.params() = prev_params - step * prev_grad;
            next = detail::multinomial_loss(trial, Z, labels, opt.l2);
            // the strict comparison matters once the Armijo margin is below one ulp of the loss
            if (std::isfinite(next.loss) && next.loss < current.loss && next.loss <= current.loss - 1e-4 * step * gg) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no sufficient decrease left at machine precision
        model = trial;
        current = std::move(next);
        gnorm = current.gradient.norm();
    }
    if (gnorm > opt.gradient_tolerance && it >= opt.max_iterations)
        throw ConvergenceError("logistic fit did not converge; final gradient norm " + std::to_string(gnorm), gnorm);

    result.model = LinearSoftmax(classes, standardizer.unstandardize(model.params()));
    result.log_loss = current.loss;
    result.gradient_norm = gnorm;
    result.iterations = it;
    return result;
}

// Floors every entry at eps and renormalizes the rest, repeating until no
// entry is below eps. With at least two classes every entry then lies in
// [eps, 1 - eps].
inline Vector clip_probabilities(Vector p, double eps) {
    const Eigen::Index m = p.size();
    if (m < 2) return p;
    std::vector<bool> floored(static_cast<std::size_t>(m), false);
    for (int pass = 0; pass < m; ++pass) {
        double free_mass = 0.0;
        int floored_count = 0;
        for (Eigen::Index k = 0; k < m; ++k) {
            if (floored[static_cast<std::size_t>(k)])
                ++floored_count;
            else
                free_mass += p(k);
        }
        const double target = 1.0 - eps * floored_count;
        bool changed = false;
        for (Eigen::Index k = 0; k < m; ++k) {
            if (floored[static_cast<std::size_t>(k)]) {
                p(k) = eps;
            } else {
                p(k) = free_mass > 0.0 ? p(k) * target / free_mass : target / (m - floored_count);
                if (p(k) < eps) {
                    floored[static_cast<std::size_t>(k)] = true;
                    changed = true;
                }
            }
        }
        if (!changed) break;
    }
    for (Eigen::Index k = 0; k < m; ++k)
        if (p(k) < eps) p(k) = eps;
    return p;
}

// ---------------------------------------------------------------------------
// PropensityModel
// ---------------------------------------------------------------------------

class PropensityModel {
public:
    PropensityModel() = default;
    PropensityModel(LinearSoftmax model, double epsilon, double log_loss = 0.0)
        : model_(std::move(model)), epsilon_(epsilon), log_loss_(log_loss) {
        if (!(epsilon > 0.0 && epsilon < 0.5)) throw std::invalid_argument("propensity epsilon must be in (0, 0.5)");
    }

    int num_arms() const noexcept { return model_.outputs(); }
    double epsilon() const noexcept { return epsilon_; }
    double training_log_loss() const noexcept { return log_loss_; }
    const LinearSoftmax& model() const noexcept { return model_; }

    Vector predict(const Vector& x) const { return predict(Eigen::Ref<const Vector>(x)); }
    Vector predict(const Eigen::Ref<const Vector>& x) const {
        return clip_probabilities(model_.probabilities(x), epsilon_);
    }
    Matrix predict(const Matrix& X) const {
        Matrix P = model_.probabilities(X);
        for (Eigen::Index i = 0; i < P.rows(); ++i)
            P.row(i) = clip_probabilities(P.row(i).transpose(), epsilon_).transpose();
        return P;
    }
    // π̃₀(T_i | X_i) for every logged row.
    Vector observed(const LoggedDataset& ds) const {
        const Matrix P = predict(ds.covariates);
        Vector out(static_cast<Eigen::Index>(ds.size()));
        for (std::size_t i = 0; i < ds.size(); ++i)
            out(static_cast<Eigen::Index>(i)) = P(static_cast<Eigen::Index>(i), ds.treatments[i]);
        return out;
    }

private:
    LinearSoftmax model_;
    double epsilon_ = 0.01;
    double log_loss_ = 0.0;
};

inline PropensityModel fit_nominal_propensity(const LoggedDataset& ds, double regularization = 0.0,
                                              double epsilon = 0.01, int max_iterations = 5000) {
    require_valid(ds);
    const auto counts = ds.arm_counts();
    for (std::size_t t = 0; t < counts.size(); ++t)
        if (counts[t] == 0)
            throw std::invalid_argument("propensity fit: treatment arm " + std::to_string(t) + " is empty");
    if (regularization < 0.0) throw std::invalid_argument("propensity fit: regularization must be >= 0");
    LogisticFitOptions opt;
    opt.l2 = regularization;
    opt.max_iterations = max_iterations;
    auto fit = fit_multinomial_logistic(ds.covariates, ds.treatments, ds.num_arms, opt);
    return PropensityModel(std::move(fit.model), epsilon, fit.log_loss);
}

// Fits one nominal propensity per expert on that expert's rows and returns
// π̃₀(T_i | X_i, H_i) for every row.
inline Vector fit_per_expert_nominal(const LoggedDataset& ds, double regularization = 0.0, double epsilon = 0.01) {
    if (!ds.has_experts()) throw std::invalid_argument("per-expert propensity needs expert ids");
    Vector out(static_cast<Eigen::Index>(ds.size()));
    for (int h = 0; h < ds.num_experts; ++h) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.expert(i) == h) rows.push_back(i);
        if (rows.empty()) continue;
        const auto sub = ds.subset(rows);
        const auto model = fit_nominal_propensity(sub, regularization, epsilon);
        const Vector p = model.observed(sub);
        for (std::size_t k = 0; k < rows.size(); ++k)
            out(static_cast<Eigen::Index>(rows[k])) = p(static_cast<Eigen::Index>(k));
    }
    return out;
}

// ---------------------------------------------------------------------------
// AssignmentModel
// ---------------------------------------------------------------------------

enum class AssignmentMode { empirical, logistic };

class AssignmentModel {
public:
    AssignmentModel() = default;
    static AssignmentModel empirical(Vector frequencies, double epsilon = 0.01) {
        AssignmentModel a;
        a.epsilon_ = epsilon;
        a.model_ = clip_probabilities(std::move(frequencies), epsilon);
        return a;
    }
    static AssignmentModel logistic(LinearSoftmax model, double epsilon = 0.01) {
        AssignmentModel a;
        a.epsilon_ = epsilon;
        a.model_ = std::move(model);
        return a;
    }
    // d₀ ≡ 1 for a single expert.
    static AssignmentModel single_expert() {
        AssignmentModel a;
        a.model_ = Vector::Ones(1);
        return a;
    }

    int num_experts() const {
        if (const auto* f = std::get_if<Vector>(&model_)) return static_cast<int>(f->size());
        return std::get<LinearSoftmax>(model_).outputs();
    }
    bool is_empirical() const noexcept { return std::holds_alternative<Vector>(model_); }

    Vector predict(const Vector& x) const { return predict(Eigen::Ref<const Vector>(x)); }
    Vector predict(const Eigen::Ref<const Vector>& x) const {
        if (const auto* f = std::get_if<Vector>(&model_)) return *f;
        return clip_probabilities(std::get<LinearSoftmax>(model_).probabilities(x), epsilon_);
    }
    Matrix predict(const Matrix& X) const {
        if (const auto* f = std::get_if<Vector>(&model_)) return f->transpose().replicate(X.rows(), 1);
        Matrix P = std::get<LinearSoftmax>(model_).probabilities(X);
        for (Eigen::Index i = 0; i < P.rows(); ++i)
            P.row(i) = clip_probabilities(P.row(i).transpose(), epsilon_).transpose();
        return P;
    }
    // d₀(H_i | X_i) for every logged row.
    Vector observed(const LoggedDataset& ds) const {
        if (!ds.has_experts()) throw std::invalid_argument("assignment: dataset has no expert ids");
        const Matrix P = predict(ds.covariates);
        Vector out(static_cast<Eigen::Index>(ds.size()));
        for (std::size_t i = 0; i < ds.size(); ++i)
            out(static_cast<Eigen::Index>(i)) = P(static_cast<Eigen::Index>(i), ds.expert(i));
        return out;
    }

private:
    std::variant<Vector, LinearSoftmax> model_{Vector::Ones(1)};
    double epsilon_ = 0.01;
};

inline AssignmentModel fit_assignment(const LoggedDataset& ds, AssignmentMode mode = AssignmentMode::empirical,
                                      double epsilon = 0.01, double regularization = 0.0) {
    if (!ds.has_experts()) throw std::invalid_argument("fit_assignment: dataset has no expert ids");
    require_valid(ds);
    const auto counts = ds.expert_counts();
    for (std::size_t h = 0; h < counts.size(); ++h)
        if (counts[h] == 0) throw std::invalid_argument("fit_assignment: expert " + std::to_string(h) + " is empty");
    if (mode == AssignmentMode::empirical) {
        Vector freq(ds.num_experts);
        for (std::size_t h = 0; h < counts.size(); ++h)
            freq(static_cast<Eigen::Index>(h)) = static_cast<double>(counts[h]) / static_cast<double>(ds.size());
        return AssignmentModel::empirical(freq, epsilon);
    }
    LogisticFitOptions opt;
    opt.l2 = regularization;
    auto fit = fit_multinomial_logistic(ds.covariates, *ds.expert_ids, ds.num_experts, opt);
    return AssignmentModel::logistic(std::move(fit.model), epsilon);
}

// ---------------------------------------------------------------------------
// Γ calibration
// ---------------------------------------------------------------------------

struct CalibrationReport {
    double gamma_ref = 1.0;
    double quantile = 0.95;
    double ratio_min = 1.0;
    double ratio_median = 1.0;
    double ratio_max = 1.0;
    std::vector<double> per_row;  // max(ratio, 1/ratio) per row
};

// Linear-interpolation sample quantile (Hyndman-Fan type 7).
inline double sample_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile of empty sample");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

// Reference Γ from the odds-ratio shift in π̃₀(T|·) when the z columns are
// dropped from the propensity model.
inline CalibrationReport calibrate_gamma(const LoggedDataset& ds, const std::vector<int>& z_columns,
                                         double quantile = 0.95, double regularization = 0.0,
                                         double epsilon = 0.01) {
    if (z_columns.empty()) throw std::invalid_argument("calibrate_gamma: z_columns is empty");
    if (!(quantile > 0.0 && quantile <= 1.0)) throw std::invalid_argument("calibrate_gamma: quantile must be in (0, 1]");
    std::vector<int> z = z_columns;
    std::sort(z.begin(), z.end());
    z.erase(std::unique(z.begin(), z.end()), z.end());
    for (int j : z)
        if (j < 0 || j >= ds.dim()) throw std::invalid_argument("calibrate_gamma: z column out of range");
    if (static_cast<int>(z.size()) >= ds.dim())
        throw std::invalid_argument("calibrate_gamma: z_columns must be a strict subset of the covariates");

    const auto full = fit_nominal_propensity(ds, regularization, epsilon);
    const auto reduced_ds = ds.drop_columns(z);
    const auto reduced = fit_nominal_propensity(reduced_ds, regularization, epsilon);
    const Vector p_full = full.observed(ds);
    const Vector p_reduced = reduced.observed(reduced_ds);

    const double lo = epsilon * (1.0 + 1e-9), hi = (1.0 - epsilon) * (1.0 - 1e-9);
    const bool all_clipped_full = (p_full.array() <= lo || p_full.array() >= hi).all();
    const bool all_clipped_reduced = (p_reduced.array() <= lo || p_reduced.array() >= hi).all();
    if (all_clipped_full || all_clipped_reduced)
        throw std::runtime_error("calibrate_gamma: degenerate propensity fit (all predictions clipped)");

    CalibrationReport report;
    report.quantile = quantile;
    report.per_row.reserve(ds.size());
    for (Eigen::Index i = 0; i < p_full.size(); ++i) {
        const double ratio = (1.0 - p_reduced(i)) * p_full(i) / (p_reduced(i) * (1.0 - p_full(i)));
        report.per_row.push_back(std::max(ratio, 1.0 / ratio));
    }
    report.gamma_ref = std::max(1.0, sample_quantile(report.per_row, quantile));
    report.ratio_min = *std::min_element(report.per_row.begin(), report.per_row.end());
    report.ratio_max = *std::max_element(report.per_row.begin(), report.per_row.end());
    report.ratio_median = sample_quantile(report.per_row, 0.5);
    return report;
}

}  // namespace confhai
