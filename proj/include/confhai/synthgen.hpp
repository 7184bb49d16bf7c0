#pragma once

// Confounded synthetic logs with stored potential outcomes, the single-context
// toy example, and ground-truth (oracle) evaluation of deferral systems.

#include "confhai/core.hpp"
#include "confhai/train.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace confhai {

// Ground truth for each logged row. Arm 1 is "treat".
struct SyntheticTruth {
    Vector y0, y1;                 // potential outcomes
    std::vector<int> xi;           // latent class
    std::vector<int> u;            // 1 when treating lowers the risk
    Vector nominal;                // π̃₀(1 | x)
    Vector true_propensity;        // π₀(1 | x, U) under the row's expert
    std::vector<int> expert;       // expert that logged the row
    std::vector<double> gammas;    // true Γ per expert

    std::size_t size() const noexcept { return static_cast<std::size_t>(y0.size()); }
};

struct SyntheticDraw {
    LoggedDataset data;
    SyntheticTruth truth;
};

// Γ-tilted treatment probability whose odds are exactly Γ (U = 1) or 1/Γ
// (U = 0) times the nominal odds.
inline double tilt_propensity(double nominal, double gamma, int u) {
    const double U = static_cast<double>(u);
    return (gamma * U + 1.0 - U) * nominal /
           ((1.0 + 2.0 * (gamma - 1.0) * nominal - gamma) * U + gamma + (1.0 - gamma) * nominal);
}

struct SyntheticParams {
    std::size_t n = 1000;
    std::vector<double> gamma_true{1.0};  // one entry per expert
    std::uint64_t seed = 0;
    Vector beta0 = Vector::Zero(5);       // non-treatment covariate effect on Y(t)
};

namespace synthetic_constants {
inline const std::array<double, 5> beta_treat{1.5, 1.0, 1.5, 1.0, 0.5};
inline const std::array<double, 5> mu_x{1.0, 0.5, 1.0, 0.0, 1.0};
// entry 0 is the intercept
inline const std::array<double, 6> beta_nominal{0.0, 0.75, 0.5, 0.0, 1.0, 0.0};
inline constexpr double eta = 2.5;
inline constexpr double alpha = -2.0;
inline constexpr double w = 1.5;
}  // namespace synthetic_constants

inline SyntheticDraw generate_synthetic(const SyntheticParams& params) {
    namespace k = synthetic_constants;
    if (params.n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
    if (params.gamma_true.empty()) throw std::invalid_argument("generate_synthetic: need at least one expert");
    for (double g : params.gamma_true)
        if (!(g >= 1.0) || !std::isfinite(g)) throw std::invalid_argument("generate_synthetic: gamma must be >= 1");
    if (params.beta0.size() != 5) throw std::invalid_argument("generate_synthetic: beta0 must have 5 entries");

    const auto n = static_cast<Eigen::Index>(params.n);
    const int experts = static_cast<int>(params.gamma_true.size());
    std::mt19937_64 rng(params.seed);
    std::bernoulli_distribution coin(0.5);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> pick_expert(0, experts - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    SyntheticDraw draw;
    LoggedDataset& ds = draw.data;
    SyntheticTruth& truth = draw.truth;
    ds.num_arms = 2;
    ds.num_experts = experts;
    ds.covariates.resize(n, 5);
    ds.risks.resize(n);
    ds.treatments.resize(params.n);
    ds.expert_ids.emplace(params.n);
    truth.y0.resize(n);
    truth.y1.resize(n);
    truth.nominal.resize(n);
    truth.true_propensity.resize(n);
    truth.xi.resize(params.n);
    truth.u.resize(params.n);
    truth.expert.resize(params.n);
    truth.gammas = params.gamma_true;

    for (Eigen::Index i = 0; i < n; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const int xi = coin(rng) ? 1 : 0;
        double treat_effect = 0.0, base = 0.0, logit = k::beta_nominal[0];
        for (int j = 0; j < 5; ++j) {
            const double x = (2.0 * xi - 1.0) * k::mu_x[static_cast<std::size_t>(j)] + normal(rng);
            ds.covariates(i, j) = x;
            treat_effect += k::beta_treat[static_cast<std::size_t>(j)] * x;
            base += params.beta0(j) * x;
            logit += k::beta_nominal[static_cast<std::size_t>(j) + 1] * x;
        }
        const double eps = normal(rng);
        const double y0 = base + k::eta + k::w * xi + eps;
        const double y1 = y0 + treat_effect + 0.5 * k::alpha * xi;
        const int u = y1 < y0 ? 1 : 0;
        const double nominal = sigmoid(logit);
        const int h = pick_expert(rng);
        const double p_true = tilt_propensity(nominal, params.gamma_true[static_cast<std::size_t>(h)], u);
        const int t = unif(rng) < p_true ? 1 : 0;

        ds.treatments[iu] = t;
        ds.risks(i) = t == 1 ? y1 : y0;
        (*ds.expert_ids)[iu] = h;
        truth.y0(i) = y0;
        truth.y1(i) = y1;
        truth.xi[iu] = xi;
        truth.u[iu] = u;
        truth.nominal(i) = nominal;
        truth.true_propensity(i) = p_true;
        truth.expert[iu] = h;
    }
    return draw;
}

// ---------------------------------------------------------------------------
// Toy example: one context, P(U = 1) = 0.5,
//   U = 1: Y(1) = -2, Y(0) =  0;  U = 0: Y(1) = 0, Y(0) = -1,
//   P(T = 1 | U = 1) = 0.5 + γ,   P(T = 1 | U = 0) = 0.5 - γ.
// ---------------------------------------------------------------------------

struct ToyTruth {
    double gamma = 0.0;

    // MSM level attained by the human's propensities.
    double implied_gamma() const { return (0.5 + gamma) / (0.5 - gamma); }
};

struct ToyDraw {
    LoggedDataset data;
    SyntheticTruth truth;
    ToyTruth toy;
};

inline ToyDraw generate_toy(std::size_t n, double gamma, std::uint64_t seed) {
    if (!(gamma >= 0.0 && gamma < 0.5)) throw std::invalid_argument("generate_toy: gamma must be in [0, 0.5)");
    if (n < 1) throw std::invalid_argument("generate_toy: n must be >= 1");
    ToyDraw draw;
    draw.toy.gamma = gamma;
    LoggedDataset& ds = draw.data;
    SyntheticTruth& truth = draw.truth;
    const auto N = static_cast<Eigen::Index>(n);
    ds.num_arms = 2;
    ds.num_experts = 1;
    ds.covariates = Matrix::Ones(N, 1);
    ds.risks.resize(N);
    ds.treatments.resize(n);
    ds.expert_ids.emplace(n, 0);
    truth.y0.resize(N);
    truth.y1.resize(N);
    truth.nominal = Vector::Constant(N, 0.5);
    truth.true_propensity.resize(N);
    truth.xi.assign(n, 0);
    truth.u.resize(n);
    truth.expert.assign(n, 0);
    truth.gammas = {draw.toy.implied_gamma()};

    std::mt19937_64 rng(seed);
    std::bernoulli_distribution coin(0.5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (Eigen::Index i = 0; i < N; ++i) {
        const auto iu = static_cast<std::size_t>(i);
        const int u = coin(rng) ? 1 : 0;
        const double p = u == 1 ? 0.5 + gamma : 0.5 - gamma;
        const int t = unif(rng) < p ? 1 : 0;
        truth.u[iu] = u;
        truth.y1(i) = u == 1 ? -2.0 : 0.0;
        truth.y0(i) = u == 1 ? 0.0 : -1.0;
        truth.true_propensity(i) = p;
        ds.treatments[iu] = t;
        ds.risks(i) = t == 1 ? truth.y1(i) : truth.y0(i);
    }
    return draw;
}

// ---------------------------------------------------------------------------
// Oracle evaluation
// ---------------------------------------------------------------------------

namespace detail {

// Expected risk when expert h decides row i (T redrawn from its true
// propensity, in expectation).
inline double expert_risk(const SyntheticTruth& truth, std::size_t i, int h) {
    const auto ii = static_cast<Eigen::Index>(i);
    const double p = tilt_propensity(truth.nominal(ii), truth.gammas.at(static_cast<std::size_t>(h)), truth.u[i]);
    return p * truth.y1(ii) + (1.0 - p) * truth.y0(ii);
}

// Randomly queried human pool (experts uniformly at random).
inline double pooled_human_risk(const SyntheticTruth& truth, std::size_t i) {
    double s = 0.0;
    for (std::size_t h = 0; h < truth.gammas.size(); ++h) s += expert_risk(truth, i, static_cast<int>(h));
    return s / static_cast<double>(truth.gammas.size());
}

inline double policy_risk(const Vector& probs, const SyntheticTruth& truth, std::size_t i) {
    const auto ii = static_cast<Eigen::Index>(i);
    return probs(0) * truth.y0(ii) + probs(1) * truth.y1(ii);
}

}  // namespace detail

struct OracleResult {
    double regret = 0.0;
    std::vector<double> routing_fraction;  // per destination (0 = algorithm)
};

// Ground-truth regret of a deployed system against π_c on a test draw. The
// router is applied deterministically (see LinearRouter::hard_destination);
// the policy stays stochastic.
inline OracleResult oracle_regret(const LinearPolicy& policy, const LinearRouter& router, const LoggedDataset& test,
                                  const SyntheticTruth& truth, const BaselinePolicy& baseline, const CostModel& cost) {
    if (truth.size() == 0 || truth.size() != test.size())
        throw std::invalid_argument("oracle_regret: truth missing or does not match the test draw");
    if (test.num_arms != 2) throw std::invalid_argument("oracle_regret: binary treatments only");
    cost.check_rows(test.size());
    const Matrix P = policy.probabilities(test.covariates);
    const Matrix B = baseline.probabilities(test.covariates, 2);
    OracleResult out;
    out.routing_fraction.assign(static_cast<std::size_t>(router.destinations()), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const int dest = router.hard_destination(test.covariates.row(ii).transpose());
        out.routing_fraction[static_cast<std::size_t>(dest)] += 1.0;
        double system;
        if (dest == 0)
            system = detail::policy_risk(P.row(ii).transpose(), truth, i);
        else if (router.homogeneous())
            system = detail::pooled_human_risk(truth, i) + cost.at(i);
        else
            system = detail::expert_risk(truth, i, dest - 1) + cost.at(i);
        total += system - detail::policy_risk(B.row(ii).transpose(), truth, i);
    }
    const double n = static_cast<double>(test.size());
    out.regret = total / n;
    for (double& f : out.routing_fraction) f /= n;
    return out;
}

// Human-only system: every row goes to a randomly chosen expert.
inline OracleResult oracle_regret_human(const LoggedDataset& test, const SyntheticTruth& truth,
                                        const BaselinePolicy& baseline, const CostModel& cost) {
    const auto router = LinearRouter::constant_destination(RouterKind::homogeneous, 1, test.dim(), 1);
    return oracle_regret(LinearPolicy(2, test.dim()), router, test, truth, baseline, cost);
}

// Conditional-on-x quantities that decide routing when the truth is known.
struct ConditionalRisks {
    double human = 0.0;  // E[Y | X] under the human's behavior policy
    Vector arm;          // E[Y(t) | X]
};

enum class Destination { human, algorithm };

// Human exactly when E_h[Y + C | X] < E_{T∼π}[Y | X].
inline Destination oracle_route(const ConditionalRisks& risks, const Vector& policy_probs, double cost) {
    if (policy_probs.size() != risks.arm.size()) throw std::invalid_argument("oracle_route: arm count mismatch");
    const double algorithm = policy_probs.dot(risks.arm);
    return risks.human + cost < algorithm ? Destination::human : Destination::algorithm;
}

// Closed-form conditional risks of the toy example at level γ.
inline ConditionalRisks toy_conditional_risks(double gamma) {
    ConditionalRisks r;
    // E_h[Y] = 0.5 (0.5 + γ)(-2) + 0.5 (0.5 + γ)(-1)
    r.human = 0.5 * (0.5 + gamma) * -2.0 + 0.5 * (0.5 + gamma) * -1.0;
    r.arm.resize(2);
    r.arm << -0.5, -1.0;
    return r;
}

}  // namespace confhai
