#pragma once

// Empirical team-risk and regret estimators for a deferral system (router φ
// plus policy π), their worst case over the MSM weight box, and gradients
// with the weights held at the inner maximizer.

#include "confhai/core.hpp"
#include "confhai/msm.hpp"
#include "confhai/propensity.hpp"

#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace confhai {

struct ObjectiveValue {
    double total = 0.0;
    double human_term = 0.0;
    std::vector<double> per_arm_terms;  // 0 for arms with no logged rows
    Vector worst_case_weights;
};

struct ParameterGradient {
    Matrix policy;
    Matrix router;
};

// What the system is compared against.
//   baseline: regret against π_c (homogeneous or personalized router)
//   human:    regret against the incumbent humans, i.e. the system φ ≡ 1
enum class Contrast { baseline, human };

// Evaluates one regret objective on a fixed log. The router kind selects the
// homogeneous or personalized estimator; the personalized one reweights the
// human term by 1 / d₀(h_i | x_i).
class DeferralObjective {
public:
    DeferralObjective(const LoggedDataset& ds, Contrast contrast, const BaselinePolicy& baseline,
                      const CostModel& cost, WeightBounds bounds,
                      std::optional<AssignmentModel> assignment = std::nullopt)
        : ds_(&ds), contrast_(contrast), bounds_(std::move(bounds)) {
        require_valid(ds);
        cost.check_rows(ds.size());
        if (bounds_.size() != ds.size()) throw std::invalid_argument("weight bounds do not match dataset size");
        const auto n = static_cast<Eigen::Index>(ds.size());

        risk_plus_cost_.resize(n);
        baseline_prob_ = Vector::Zero(n);
        const Matrix base = contrast == Contrast::baseline ? baseline.probabilities(ds.covariates, ds.num_arms)
                                                           : Matrix::Zero(n, ds.num_arms);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            risk_plus_cost_(i) = ds.risks(i) + cost.at(iu);
            baseline_prob_(i) = base(i, ds.treatments[iu]);
        }
        arm_rows_.assign(static_cast<std::size_t>(ds.num_arms), {});
        for (std::size_t i = 0; i < ds.size(); ++i) arm_rows_[static_cast<std::size_t>(ds.treatments[i])].push_back(i);
        arm_lower_.resize(arm_rows_.size());
        arm_upper_.resize(arm_rows_.size());
        for (std::size_t t = 0; t < arm_rows_.size(); ++t)
            for (std::size_t i : arm_rows_[t]) {
                arm_lower_[t].push_back(bounds_.lower(static_cast<Eigen::Index>(i)));
                arm_upper_[t].push_back(bounds_.upper(static_cast<Eigen::Index>(i)));
            }

        if (assignment) {
            if (!ds.has_experts()) throw std::invalid_argument("assignment model given but dataset has no expert ids");
            if (assignment->num_experts() != ds.num_experts)
                throw std::invalid_argument("assignment model expert count does not match dataset");
            human_scale_ = assignment->observed(ds).cwiseInverse();
        }
    }

    Contrast contrast() const noexcept { return contrast_; }
    const WeightBounds& bounds() const noexcept { return bounds_; }
    const LoggedDataset& data() const noexcept { return *ds_; }

    // Worst case over the weight box.
    ObjectiveValue evaluate(const LinearPolicy& policy, const LinearRouter& router) const {
        check_shapes(policy, router);
        return worst_case(row_terms(policy.probabilities(ds_->covariates), router.probabilities(ds_->covariates),
                                    router));
    }

    // Worst-case value and its envelope gradient, sharing one forward pass.
    std::pair<ObjectiveValue, ParameterGradient> evaluate_with_gradient(const LinearPolicy& policy,
                                                                        const LinearRouter& router) const {
        check_shapes(policy, router);
        const Matrix P = policy.probabilities(ds_->covariates);
        const Matrix R = router.probabilities(ds_->covariates);
        auto value = worst_case(row_terms(P, R, router));
        auto grad = gradient_from(P, R, router, value.worst_case_weights);
        return {std::move(value), std::move(grad)};
    }

    // Same estimator at fixed weights (e.g. nominal 1/π̃₀ for the plug-in value).
    ObjectiveValue evaluate_at(const LinearPolicy& policy, const LinearRouter& router, const Vector& weights) const {
        check_weights(weights);
        check_shapes(policy, router);
        const auto rows =
            row_terms(policy.probabilities(ds_->covariates), router.probabilities(ds_->covariates), router);
        ObjectiveValue out;
        out.human_term = rows.human_term;
        out.worst_case_weights = weights;
        out.per_arm_terms.assign(arm_rows_.size(), 0.0);
        double total = out.human_term;
        for (std::size_t t = 0; t < arm_rows_.size(); ++t) {
            double num = 0.0, den = 0.0;
            for (std::size_t i : arm_rows_[t]) {
                const auto ii = static_cast<Eigen::Index>(i);
                num += weights(ii) * rows.r(ii);
                den += weights(ii);
            }
            if (arm_rows_[t].empty()) continue;
            out.per_arm_terms[t] = num / den;
            total += num / den;
        }
        out.total = total;
        return out;
    }

    // Gradient of evaluate_at(policy, router, weights) in the policy and
    // router parameters. With `weights` set to the inner maximizer this is
    // the envelope (Danskin) gradient of the worst-case objective.
    ParameterGradient gradient(const LinearPolicy& policy, const LinearRouter& router, const Vector& weights) const {
        check_weights(weights);
        check_shapes(policy, router);
        return gradient_from(policy.probabilities(ds_->covariates), router.probabilities(ds_->covariates), router,
                             weights);
    }

private:
    struct RowTerms {
        Vector r;
        double human_term = 0.0;
    };

    // Each arm's term is its own linear fractional program since the arm
    // indicator partitions the rows.
    ObjectiveValue worst_case(const RowTerms& rows) const {
        ObjectiveValue out;
        out.human_term = rows.human_term;
        out.worst_case_weights.resize(static_cast<Eigen::Index>(ds_->size()));
        out.per_arm_terms.assign(arm_rows_.size(), 0.0);
        double total = out.human_term;
        for (std::size_t t = 0; t < arm_rows_.size(); ++t) {
            const auto& idx = arm_rows_[t];
            if (idx.empty()) continue;
            std::vector<double> r(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) r[k] = rows.r(static_cast<Eigen::Index>(idx[k]));
            const auto sol = solve_lfp(r, arm_lower_[t], arm_upper_[t]);
            out.per_arm_terms[t] = sol.value;
            total += sol.value;
            for (std::size_t k = 0; k < idx.size(); ++k)
                out.worst_case_weights(static_cast<Eigen::Index>(idx[k])) = sol.weights(static_cast<Eigen::Index>(k));
        }
        out.total = total;
        return out;
    }

    ParameterGradient gradient_from(const Matrix& P, const Matrix& R, const LinearRouter& router,
                                    const Vector& weights) const {
        const LoggedDataset& ds = *ds_;
        const auto n = static_cast<Eigen::Index>(ds.size());

        std::vector<double> arm_weight(arm_rows_.size(), 0.0);
        for (std::size_t t = 0; t < arm_rows_.size(); ++t)
            for (std::size_t i : arm_rows_[t]) arm_weight[t] += weights(static_cast<Eigen::Index>(i));

        Matrix GP = Matrix::Zero(n, P.cols());
        Matrix GR = Matrix::Zero(n, R.cols());
        const double inv_n = 1.0 / static_cast<double>(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            const int t = ds.treatments[iu];
            const double q = weights(i) * ds.risks(i) / arm_weight[static_cast<std::size_t>(t)];
            GP(i, t) = R(i, 0) * q;
            GR(i, 0) = P(i, t) * q;
            GR(i, human_destination(router, iu)) += human_scale(i) * risk_plus_cost_(i) * inv_n;
        }
        if (!GP.allFinite() || !GR.allFinite())
            for (Eigen::Index i = 0; i < n; ++i)
                if (!GP.row(i).allFinite() || !GR.row(i).allFinite())
                    throw NonFiniteError("non-finite gradient term", static_cast<std::size_t>(i));
        ParameterGradient g;
        g.policy = LinearSoftmax::backprop(ds.covariates, P, GP);
        g.router = LinearSoftmax::backprop(ds.covariates, R, GR);
        return g;
    }

    int human_destination(const LinearRouter& router, std::size_t i) const {
        return router.homogeneous() ? 1 : 1 + ds_->expert(i);
    }
    double human_scale(Eigen::Index i) const { return human_scale_ ? (*human_scale_)(i) : 1.0; }

    void check_shapes(const LinearPolicy& policy, const LinearRouter& router) const {
        const LoggedDataset& ds = *ds_;
        if (policy.num_arms() != ds.num_arms || policy.dim() != ds.dim())
            throw std::invalid_argument("policy shape does not match dataset");
        if (router.dim() != ds.dim()) throw std::invalid_argument("router dimension does not match dataset");
        if (router.homogeneous()) {
            if (bounds_.per_expert)
                throw std::invalid_argument("per-expert weight bounds need a personalized router");
        } else {
            if (!ds.has_experts()) throw std::invalid_argument("personalized router needs expert ids");
            if (!human_scale_) throw std::invalid_argument("personalized router needs an assignment model");
            if (router.num_experts() != ds.num_experts)
                throw std::invalid_argument("router expert count does not match dataset");
        }
    }

    void check_weights(const Vector& weights) const {
        if (static_cast<std::size_t>(weights.size()) != ds_->size())
            throw std::invalid_argument("weights length does not match dataset");
        if (!(weights.array() > 0.0).all()) throw std::invalid_argument("weights must be positive");
    }

    RowTerms row_terms(const Matrix& P, const Matrix& R, const LinearRouter& router) const {
        const LoggedDataset& ds = *ds_;
        const auto n = static_cast<Eigen::Index>(ds.size());
        RowTerms out;
        out.r.resize(n);
        double human = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto iu = static_cast<std::size_t>(i);
            const int t = ds.treatments[iu];
            out.r(i) = (R(i, 0) * P(i, t) - baseline_prob_(i)) * ds.risks(i);
            const double phi = R(i, human_destination(router, iu)) * human_scale(i);
            human += contrast_ == Contrast::human ? (phi - 1.0) * risk_plus_cost_(i) : phi * risk_plus_cost_(i);
            if (!std::isfinite(out.r(i))) throw NonFiniteError("non-finite objective term", iu);
        }
        out.human_term = human / static_cast<double>(n);
        return out;
    }

    const LoggedDataset* ds_;
    Contrast contrast_;
    WeightBounds bounds_;
    Vector risk_plus_cost_;
    Vector baseline_prob_;  // π_c(T_i | X_i), zero for the human contrast
    std::vector<std::vector<std::size_t>> arm_rows_;
    std::vector<std::vector<double>> arm_lower_, arm_upper_;  // bounds gathered per arm
    std::optional<Vector> human_scale_;  // 1 / d₀(H_i | X_i)
};

// ---------------------------------------------------------------------------
// Free-function estimators
// ---------------------------------------------------------------------------

// Hájek team risk at fixed weights, homogeneous router.
inline double team_risk(const LoggedDataset& ds, const LinearPolicy& policy, const LinearRouter& router,
                        const CostModel& cost, const Vector& weights) {
    if (!router.homogeneous()) throw std::invalid_argument("team_risk needs a homogeneous router");
    if (static_cast<std::size_t>(weights.size()) != ds.size()) throw std::invalid_argument("weights length mismatch");
    require_valid(ds);
    cost.check_rows(ds.size());
    if (!(weights.array() > 0.0).all()) throw std::invalid_argument("weights must be positive");
    const LoggedDataset& d = ds;
    const Matrix P = policy.probabilities(d.covariates);
    const Matrix R = router.probabilities(d.covariates);
    double human = 0.0;
    std::vector<double> num(static_cast<std::size_t>(d.num_arms), 0.0), den(num.size(), 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const auto t = static_cast<std::size_t>(d.treatments[i]);
        human += R(ii, 1) * (d.risks(ii) + cost.at(i));
        num[t] += weights(ii) * P(ii, d.treatments[i]) * R(ii, 0) * d.risks(ii);
        den[t] += weights(ii);
    }
    double total = human / static_cast<double>(d.size());
    for (std::size_t t = 0; t < num.size(); ++t)
        if (den[t] > 0.0) total += num[t] / den[t];
    return total;
}

inline ObjectiveValue worst_case_regret(const LoggedDataset& ds, const LinearPolicy& policy,
                                        const LinearRouter& router, const BaselinePolicy& baseline,
                                        const CostModel& cost, const WeightBounds& bounds) {
    if (!router.homogeneous()) throw std::invalid_argument("worst_case_regret needs a homogeneous router");
    return DeferralObjective(ds, Contrast::baseline, baseline, cost, bounds).evaluate(policy, router);
}

inline ObjectiveValue worst_case_regret_vs_human(const LoggedDataset& ds, const LinearPolicy& policy,
                                                 const LinearRouter& router, const CostModel& cost,
                                                 const WeightBounds& bounds) {
    if (!router.homogeneous()) throw std::invalid_argument("worst_case_regret_vs_human needs a homogeneous router");
    return DeferralObjective(ds, Contrast::human, BaselinePolicy::never_treat(), cost, bounds).evaluate(policy, router);
}

inline ObjectiveValue personalized_worst_case_regret(const LoggedDataset& ds, const LinearPolicy& policy,
                                                     const LinearRouter& router, const BaselinePolicy& baseline,
                                                     const CostModel& cost, const WeightBounds& bounds,
                                                     const AssignmentModel& assignment) {
    if (router.homogeneous()) throw std::invalid_argument("personalized objective needs a personalized router");
    return DeferralObjective(ds, Contrast::baseline, baseline, cost, bounds, assignment).evaluate(policy, router);
}

// Plug-in (non-robust) regret with fixed Hájek weights, e.g. nominal 1/π̃₀.
inline ObjectiveValue hajek_regret(const LoggedDataset& ds, const LinearPolicy& policy, const LinearRouter& router,
                                   const BaselinePolicy& baseline, const CostModel& cost, const Vector& weights) {
    WeightBounds box{weights, weights, false};
    return DeferralObjective(ds, Contrast::baseline, baseline, cost, box).evaluate_at(policy, router, weights);
}

}  // namespace confhai
