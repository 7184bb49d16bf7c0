#pragma once

// Alternating minimax training of a deferral system (inner: exact worst-case
// weights; outer: one optimizer step at those weights) and the comparison
// methods: human only, IPW algorithm only (AO), its robust counterpart
// (ConfAO), and unconfounded human-AI deferral (HAI).

#include "confhai/core.hpp"
#include "confhai/msm.hpp"
#include "confhai/objective.hpp"
#include "confhai/propensity.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace confhai {

enum class OptimizerKind { plain_gd, adam };
enum class InitKind { zeros, gaussian };

struct TrainConfig {
    int iterations = 2000;
    double learning_rate = 0.05;
    OptimizerKind optimizer = OptimizerKind::adam;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 0;
    InitKind init = InitKind::zeros;
    double init_scale = 0.01;
    Contrast contrast = Contrast::baseline;
    bool freeze_router = false;
    // Warm starts; override `init` for the corresponding block when set.
    std::optional<LinearPolicy> initial_policy;
    std::optional<LinearRouter> initial_router;

    void check() const {
        if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
        if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
        if (!(init_scale >= 0.0)) throw std::invalid_argument("init scale must be >= 0");
    }
};

struct Certificates {
    double vs_baseline = 0.0;
    double vs_human = 0.0;
};

struct TrainedSystem {
    LinearPolicy policy;
    LinearRouter router;
    std::vector<double> objective_trace;  // objective at each iterate, before its step
    double objective = 0.0;               // best (= returned) iterate's objective
    int best_iteration = 0;
    Certificates certificates;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::vector<double> trace)
        : std::runtime_error(what), trace_(std::move(trace)) {}
    const std::vector<double>& trace() const noexcept { return trace_; }

private:
    std::vector<double> trace_;
};

namespace detail {

class Adam {
public:
    explicit Adam(const TrainConfig& c) : cfg_(c) {}

    void step(Matrix& params, const Matrix& grad, Matrix& m, Matrix& v) {
        if (m.size() != params.size()) {
            m = Matrix::Zero(params.rows(), params.cols());
            v = Matrix::Zero(params.rows(), params.cols());
        }
        m = cfg_.adam_beta1 * m + (1.0 - cfg_.adam_beta1) * grad;
        v = cfg_.adam_beta2 * v + (1.0 - cfg_.adam_beta2) * grad.cwiseProduct(grad);
        const double c1 = 1.0 - std::pow(cfg_.adam_beta1, t_);
        const double c2 = 1.0 - std::pow(cfg_.adam_beta2, t_);
        params.array() -= cfg_.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_epsilon);
    }
    void tick() { ++t_; }

private:
    const TrainConfig& cfg_;
    int t_ = 1;
};

inline void initialize(Matrix& params, const TrainConfig& cfg, std::mt19937_64& rng) {
    params.setZero();
    if (cfg.init == InitKind::gaussian) {
        std::normal_distribution<double> normal(0.0, cfg.init_scale);
        for (Eigen::Index k = 0; k < params.size(); ++k) params.data()[k] = normal(rng);
    }
}

// One evaluation of the training objective: its value and gradient.
struct Evaluation {
    double value;
    ParameterGradient gradient;
};

using Evaluator = std::function<Evaluation(const LinearPolicy&, const LinearRouter&)>;

struct LoopResult {
    LinearPolicy policy;
    LinearRouter router;
    std::vector<double> trace;
    double best = std::numeric_limits<double>::infinity();
    int best_iteration = 0;
};

// Shared optimizer loop with best-iterate selection.
inline LoopResult optimize(LinearPolicy policy, LinearRouter router, const Evaluator& evaluate,
                           const TrainConfig& cfg, bool train_router) {
    cfg.check();
    std::mt19937_64 rng(cfg.seed);
    if (cfg.initial_policy) {
        if (cfg.initial_policy->params().rows() != policy.params().rows() ||
            cfg.initial_policy->params().cols() != policy.params().cols())
            throw std::invalid_argument("initial policy shape mismatch");
        policy = *cfg.initial_policy;
    } else {
        initialize(policy.params(), cfg, rng);
    }
    if (cfg.initial_router) {
        if (cfg.initial_router->kind() != router.kind() ||
            cfg.initial_router->params().rows() != router.params().rows() ||
            cfg.initial_router->params().cols() != router.params().cols())
            throw std::invalid_argument("initial router shape mismatch");
        router = *cfg.initial_router;
    } else if (train_router) {
        initialize(router.params(), cfg, rng);
    }

    LoopResult out;
    out.trace.reserve(static_cast<std::size_t>(cfg.iterations));
    Adam adam(cfg);
    Matrix mp, vp, mr, vr;
    for (int it = 0; it < cfg.iterations; ++it) {
        auto ev = evaluate(policy, router);
        out.trace.push_back(ev.value);
        if (!std::isfinite(ev.value) || ev.value > 1e6)
            throw DivergenceError("training diverged at iteration " + std::to_string(it), out.trace);
        if (ev.value < out.best) {
            out.best = ev.value;
            out.best_iteration = it;
            out.policy = policy;
            out.router = router;
        }
        if (cfg.optimizer == OptimizerKind::adam) {
            adam.step(policy.params(), ev.gradient.policy, mp, vp);
            if (train_router) adam.step(router.params(), ev.gradient.router, mr, vr);
            adam.tick();
        } else {
            policy.params() -= cfg.learning_rate * ev.gradient.policy;
            if (train_router) router.params() -= cfg.learning_rate * ev.gradient.router;
        }
        if (!policy.params().allFinite() || !router.params().allFinite())
            throw DivergenceError("non-finite parameters after iteration " + std::to_string(it), out.trace);
    }
    return out;
}

inline Vector observed_inverse(const Vector& nominal) {
    if (!(nominal.array() > 0.0).all()) throw std::invalid_argument("nominal propensities must be positive");
    return nominal.cwiseInverse();
}

}  // namespace detail

// Worst-case certificates against the baseline and against the humans.
inline Certificates certify(const LoggedDataset& ds, const LinearPolicy& policy, const LinearRouter& router,
                            const BaselinePolicy& baseline, const CostModel& cost, const WeightBounds& bounds,
                            const std::optional<AssignmentModel>& assignment = std::nullopt) {
    Certificates c;
    c.vs_baseline = DeferralObjective(ds, Contrast::baseline, baseline, cost, bounds, assignment)
                        .evaluate(policy, router)
                        .total;
    c.vs_human = DeferralObjective(ds, Contrast::human, baseline, cost, bounds, assignment)
                     .evaluate(policy, router)
                     .total;
    return c;
}

namespace detail {

inline TrainedSystem train_deferral(const LoggedDataset& ds, const WeightBounds& bounds,
                                    const BaselinePolicy& baseline, const CostModel& cost,
                                    std::optional<AssignmentModel> assignment, LinearRouter router,
                                    const TrainConfig& cfg) {
    const DeferralObjective objective(ds, cfg.contrast, baseline, cost, bounds, assignment);
    const Evaluator evaluate = [&](const LinearPolicy& p, const LinearRouter& r) {
        auto [value, grad] = objective.evaluate_with_gradient(p, r);
        return Evaluation{value.total, std::move(grad)};
    };
    auto loop = optimize(LinearPolicy(ds.num_arms, ds.dim()), std::move(router), evaluate, cfg, !cfg.freeze_router);

    TrainedSystem sys;
    sys.policy = loop.policy;
    sys.router = loop.router;
    sys.objective_trace = std::move(loop.trace);
    sys.best_iteration = loop.best_iteration;
    sys.objective = objective.evaluate(sys.policy, sys.router).total;
    sys.certificates = certify(ds, sys.policy, sys.router, baseline, cost, bounds, assignment);
    return sys;
}

}  // namespace detail

// ConfHAI: homogeneous router, uniform Γ bounds.
inline TrainedSystem train_confhai(const LoggedDataset& ds, const WeightBounds& bounds,
                                   const BaselinePolicy& baseline, const CostModel& cost, const TrainConfig& cfg) {
    if (bounds.per_expert) throw std::invalid_argument("train_confhai needs homogeneous (single-Γ) bounds");
    LinearRouter router = cfg.freeze_router && !cfg.initial_router
                              ? LinearRouter::never_defer(RouterKind::homogeneous, 1, ds.dim())
                              : LinearRouter::homogeneous(ds.dim());
    return detail::train_deferral(ds, bounds, baseline, cost, std::nullopt, std::move(router), cfg);
}

// ConfHAIPerson: router over the algorithm and each expert, expert-specific Γ.
inline TrainedSystem train_confhai_personalized(const LoggedDataset& ds, const WeightBounds& bounds,
                                                const BaselinePolicy& baseline, const CostModel& cost,
                                                const AssignmentModel& assignment, const TrainConfig& cfg) {
    if (!ds.has_experts()) throw std::invalid_argument("train_confhai_personalized needs expert ids");
    LinearRouter router = cfg.freeze_router && !cfg.initial_router
                              ? LinearRouter::never_defer(RouterKind::personalized, ds.num_experts, ds.dim())
                              : LinearRouter::personalized(ds.num_experts, ds.dim());
    return detail::train_deferral(ds, bounds, baseline, cost, assignment, std::move(router), cfg);
}

// ConfAO: the ConfHAI machinery with the router frozen at φ ≡ 0.
inline LinearPolicy train_confao(const LoggedDataset& ds, const WeightBounds& bounds, const BaselinePolicy& baseline,
                                 const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.freeze_router = true;
    c.initial_router.reset();
    c.contrast = Contrast::baseline;
    return train_confhai(ds, bounds, baseline, CostModel(0.0), c).policy;
}

// AO: minimizes the unnormalized IPW risk (1/n) Σ π(T_i|X_i) Y_i / π̂₀(T_i|X_i).
inline LinearPolicy train_ao(const LoggedDataset& ds, const Vector& nominal, const TrainConfig& cfg) {
    require_valid(ds);
    if (static_cast<std::size_t>(nominal.size()) != ds.size()) throw std::invalid_argument("nominal length mismatch");
    const Vector w = detail::observed_inverse(nominal);
    const auto n = static_cast<Eigen::Index>(ds.size());
    const detail::Evaluator evaluate = [&](const LinearPolicy& p, const LinearRouter& r) {
        const Matrix P = p.probabilities(ds.covariates);
        Matrix G = Matrix::Zero(n, P.cols());
        double value = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int t = ds.treatments[static_cast<std::size_t>(i)];
            const double coef = w(i) * ds.risks(i) / static_cast<double>(n);
            value += coef * P(i, t);
            G(i, t) = coef;
        }
        return detail::Evaluation{value, {LinearSoftmax::backprop(ds.covariates, P, G),
                                          Matrix::Zero(r.params().rows(), r.params().cols())}};
    };
    auto loop = detail::optimize(LinearPolicy(ds.num_arms, ds.dim()),
                                 LinearRouter::never_defer(RouterKind::homogeneous, 1, ds.dim()), evaluate, cfg, false);
    return loop.policy;
}

inline LinearPolicy train_ao(const LoggedDataset& ds, const PropensityModel& propensity, const TrainConfig& cfg) {
    return train_ao(ds, propensity.observed(ds), cfg);
}

enum class HaiWeighting {
    ipw,    // (1/n) Σ φ(Y + C) + (1 - φ) π Y / π̂₀, unnormalized
    hajek,  // plug-in regret against the baseline with nominal Hájek weights
};

// HAI: joint router/policy training assuming no unobserved confounding.
inline TrainedSystem train_hai(const LoggedDataset& ds, const Vector& nominal, const CostModel& cost,
                               const TrainConfig& cfg, HaiWeighting weighting = HaiWeighting::ipw,
                               const BaselinePolicy& baseline = BaselinePolicy::never_treat()) {
    require_valid(ds);
    cost.check_rows(ds.size());
    if (static_cast<std::size_t>(nominal.size()) != ds.size()) throw std::invalid_argument("nominal length mismatch");
    const Vector w = detail::observed_inverse(nominal);
    const auto n = static_cast<Eigen::Index>(ds.size());
    // Γ = 1 box around the nominal weights
    const WeightBounds nominal_box = weight_bounds(nominal, GammaSpec::uniform(1.0));

    detail::Evaluator evaluate;
    std::optional<DeferralObjective> hajek;
    if (weighting == HaiWeighting::hajek) {
        hajek.emplace(ds, Contrast::baseline, baseline, cost, nominal_box);
        evaluate = [&](const LinearPolicy& p, const LinearRouter& r) {
            const Vector& weights = hajek->bounds().lower;
            return detail::Evaluation{hajek->evaluate_at(p, r, weights).total, hajek->gradient(p, r, weights)};
        };
    } else {
        evaluate = [&](const LinearPolicy& p, const LinearRouter& r) {
            const Matrix P = p.probabilities(ds.covariates);
            const Matrix R = r.probabilities(ds.covariates);
            Matrix GP = Matrix::Zero(n, P.cols());
            Matrix GR = Matrix::Zero(n, R.cols());
            double value = 0.0;
            const double inv_n = 1.0 / static_cast<double>(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                const auto iu = static_cast<std::size_t>(i);
                const int t = ds.treatments[iu];
                const double human = (ds.risks(i) + cost.at(iu)) * inv_n;
                const double algo = w(i) * ds.risks(i) * inv_n;
                value += R(i, 1) * human + R(i, 0) * P(i, t) * algo;
                GR(i, 1) = human;
                GR(i, 0) = P(i, t) * algo;
                GP(i, t) = R(i, 0) * algo;
            }
            return detail::Evaluation{value, {LinearSoftmax::backprop(ds.covariates, P, GP),
                                              LinearSoftmax::backprop(ds.covariates, R, GR)}};
        };
    }
    auto loop = detail::optimize(LinearPolicy(ds.num_arms, ds.dim()), LinearRouter::homogeneous(ds.dim()), evaluate,
                                 cfg, !cfg.freeze_router);
    TrainedSystem sys;
    sys.policy = loop.policy;
    sys.router = loop.router;
    sys.objective = loop.best;
    sys.best_iteration = loop.best_iteration;
    sys.objective_trace = std::move(loop.trace);
    sys.certificates = certify(ds, sys.policy, sys.router, baseline, cost, nominal_box);
    return sys;
}

inline TrainedSystem train_hai(const LoggedDataset& ds, const PropensityModel& propensity, const CostModel& cost,
                               const TrainConfig& cfg, HaiWeighting weighting = HaiWeighting::ipw) {
    return train_hai(ds, propensity.observed(ds), cost, cfg, weighting);
}

// Human-only team risk: mean of Y + C over the log.
inline double evaluate_human_only(const LoggedDataset& ds, const CostModel& cost) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate_human_only: empty dataset");
    cost.check_rows(ds.size());
    double s = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) s += ds.risks(static_cast<Eigen::Index>(i)) + cost.at(i);
    return s / static_cast<double>(ds.size());
}

}  // namespace confhai
