#include "test_util.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace confhai;
using namespace confhai::testing;

namespace {

struct Point {
    LinearPolicy policy;
    LinearRouter router;
};

Point random_point(const LoggedDataset& ds, RouterKind kind, std::mt19937_64& rng, double scale = 0.7) {
    const int K = kind == RouterKind::homogeneous ? 1 : ds.num_experts;
    return {LinearPolicy(ds.num_arms, random_matrix(ds.num_arms - 1, ds.dim() + 1, rng, scale)),
            LinearRouter(kind, K, random_matrix(K, ds.dim() + 1, rng, scale))};
}

// Policy and router gradients stacked into one column.
Vector stacked(const Matrix& a, const Matrix& b) {
    Vector v(a.size() + b.size());
    v << a.reshaped(), b.reshaped();
    return v;
}

Vector finite_difference(const DeferralObjective& obj, const Point& x, const std::function<double(const Point&)>& f) {
    const auto on_policy = [&](const Matrix& w) { return f({LinearPolicy(x.policy.num_arms(), w), x.router}); };
    const auto on_router = [&](const Matrix& w) {
        return f({x.policy, LinearRouter(x.router.kind(), x.router.num_experts(), w)});
    };
    (void)obj;
    return stacked(central_difference(on_policy, x.policy.params()), central_difference(on_router, x.router.params()));
}

double rel(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(b.norm(), 1e-8); }

// Plug-in regret with fixed weights, written out row by row.
double plug_in_regret(const LoggedDataset& ds, const Point& x, const BaselinePolicy& baseline, const Vector& w) {
    const Matrix P = x.policy.probabilities(ds.covariates);
    const Matrix R = x.router.probabilities(ds.covariates);
    const Matrix B = baseline.probabilities(ds.covariates, ds.num_arms);
    double human = 0.0;
    std::vector<double> num(static_cast<std::size_t>(ds.num_arms)), den(num.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const int t = ds.treatments[i];
        human += R(ii, 1) * ds.risks(ii);
        num[static_cast<std::size_t>(t)] += w(ii) * (R(ii, 0) * P(ii, t) - B(ii, t)) * ds.risks(ii);
        den[static_cast<std::size_t>(t)] += w(ii);
    }
    double total = human / static_cast<double>(ds.size());
    for (std::size_t t = 0; t < num.size(); ++t)
        if (den[t] > 0.0) total += num[t] / den[t];
    return total;
}

}  // namespace

class GradientCheck : public ::testing::TestWithParam<Contrast> {};

TEST_P(GradientCheck, HomogeneousMatchesCentralDifferences) {
    std::mt19937_64 rng(100 + static_cast<int>(GetParam()));
    for (int k = 0; k < 10; ++k) {
        const auto ds = random_dataset(200, 3, k % 2 ? 3 : 2, 0, 500 + static_cast<std::uint64_t>(k));
        const auto bounds = weight_bounds(random_nominal(200, 600 + static_cast<std::uint64_t>(k)), GammaSpec::uniform(3.0));
        const DeferralObjective obj(ds, GetParam(), BaselinePolicy::never_treat(), CostModel(0.2), bounds);
        const auto x = random_point(ds, RouterKind::homogeneous, rng);
        const auto [value, grad] = obj.evaluate_with_gradient(x.policy, x.router);
        const Vector w = value.worst_case_weights;

        const Vector fd_fixed = finite_difference(obj, x, [&](const Point& p) {
            return obj.evaluate_at(p.policy, p.router, w).total;
        });
        EXPECT_LT(rel(stacked(grad.policy, grad.router), fd_fixed), 1e-6);

        const Vector fd_max = finite_difference(obj, x, [&](const Point& p) {
            return obj.evaluate(p.policy, p.router).total;
        });
        EXPECT_LT(rel(stacked(grad.policy, grad.router), fd_max), 1e-4);
    }
}

INSTANTIATE_TEST_SUITE_P(Contrasts, GradientCheck, ::testing::Values(Contrast::baseline, Contrast::human));

TEST(Gradient, PersonalizedMatchesCentralDifferences) {
    std::mt19937_64 rng(200);
    for (int k = 0; k < 10; ++k) {
        const auto ds = random_dataset(200, 3, 2, 3, 700 + static_cast<std::uint64_t>(k));
        const auto bounds =
            weight_bounds(random_nominal(200, 800 + static_cast<std::uint64_t>(k)), GammaSpec::per_expert({1.5, 3.0, 8.0}), ds);
        const DeferralObjective obj(ds, Contrast::baseline, BaselinePolicy::never_treat(), CostModel(0.1), bounds,
                                    fit_assignment(ds));
        const auto x = random_point(ds, RouterKind::personalized, rng);
        const auto [value, grad] = obj.evaluate_with_gradient(x.policy, x.router);
        const Vector fd = finite_difference(obj, x, [&](const Point& p) {
            return obj.evaluate(p.policy, p.router).total;
        });
        EXPECT_LT(rel(stacked(grad.policy, grad.router), fd), 1e-4);
    }
}

TEST(Gradient, AtTheBaselineWithHalfRouting) {
    const auto ds = random_dataset(200, 2, 2, 0, 9);
    const auto bounds = weight_bounds(random_nominal(200, 10), GammaSpec::uniform(2.0));
    const DeferralObjective obj(ds, Contrast::baseline, BaselinePolicy::never_treat(), CostModel(0.0), bounds);
    // π = π_c is expressible: a saturated never-treat policy; zero router logits give φ = 0.5
    const Point x{LinearPolicy(2, Matrix::Constant(1, 3, -5.0)), LinearRouter::homogeneous(2)};
    const auto [value, grad] = obj.evaluate_with_gradient(x.policy, x.router);
    const Vector fd = finite_difference(obj, x, [&](const Point& p) { return obj.evaluate(p.policy, p.router).total; });
    EXPECT_LT(rel(stacked(grad.policy, grad.router), fd), 1e-4);
}

TEST(Gradient, ConstantRisksAreNearlyFlatInPolicy) {
    // Per-arm Hájek means of π(t|x) sum to 1 only in expectation, so the slope
    // vanishes as n grows when the weights are the true inverse propensities.
    const std::size_t n = 50000;
    std::mt19937_64 rng(12);
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> unif;
    LoggedDataset ds;
    ds.covariates.resize(static_cast<Eigen::Index>(n), 2);
    ds.risks = Vector::Constant(static_cast<Eigen::Index>(n), -1.0);
    Vector observed(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        ds.covariates(ii, 0) = gauss(rng);
        ds.covariates(ii, 1) = gauss(rng);
        const double p1 = sigmoid(0.5 * ds.covariates(ii, 0) - 0.5 * ds.covariates(ii, 1));
        ds.treatments.push_back(unif(rng) < p1 ? 1 : 0);
        observed(ii) = ds.treatments.back() == 1 ? p1 : 1.0 - p1;
    }
    const auto bounds = weight_bounds(observed, GammaSpec::uniform(1.0));
    const LinearPolicy baseline(2, Matrix::Constant(1, 3, 0.3));
    const DeferralObjective obj(ds, Contrast::baseline, BaselinePolicy::linear(baseline), CostModel(0.0), bounds);
    const auto router = LinearRouter::never_defer(RouterKind::homogeneous, 1, 2);
    EXPECT_EQ(obj.evaluate(baseline, router).total, 0.0);
    const auto f = [&](const Matrix& w) { return obj.evaluate(LinearPolicy(2, w), router).total; };
    EXPECT_LE(central_difference(f, baseline.params()).cwiseAbs().maxCoeff(), 0.02);

    // with informative risks the same slope is far from zero
    LoggedDataset varied = ds;
    for (std::size_t i = 0; i < n; ++i) varied.risks(static_cast<Eigen::Index>(i)) = ds.treatments[i] == 1 ? -2.0 : 0.0;
    const DeferralObjective obj2(varied, Contrast::baseline, BaselinePolicy::linear(baseline), CostModel(0.0), bounds);
    const auto g = [&](const Matrix& w) { return obj2.evaluate(LinearPolicy(2, w), router).total; };
    EXPECT_GE(central_difference(g, baseline.params()).cwiseAbs().maxCoeff(), 0.1);
}

TEST(Gradient, NonFiniteTermsReportTheRow) {
    auto ds = random_dataset(10, 2, 2, 0, 14);
    ds.risks(3) = 1e308;
    ds.treatments[3] = 1;
    const auto bounds = weight_bounds(Vector::Constant(10, 0.2), GammaSpec::uniform(1.0));
    const DeferralObjective obj(ds, Contrast::baseline, BaselinePolicy::never_treat(), CostModel(0.0), bounds);
    const Point x{LinearPolicy(2, 2), LinearRouter::homogeneous(2)};
    try {
        obj.gradient(x.policy, x.router, bounds.lower);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_EQ(e.row(), 3U);
    }
}

TEST(Reductions, UnitGammaIsThePlugInRegret) {
    std::mt19937_64 rng(15);
    for (int k = 0; k < 5; ++k) {
        const auto ds = random_dataset(300, 3, 3, 0, 16 + static_cast<std::uint64_t>(k));
        const Vector nominal = random_nominal(300, 30 + static_cast<std::uint64_t>(k));
        const auto baseline = BaselinePolicy::linear(LinearPolicy(3, random_matrix(2, 4, rng)));
        const auto x = random_point(ds, RouterKind::homogeneous, rng);
        const double worst =
            worst_case_regret(ds, x.policy, x.router, baseline, CostModel(0.0), weight_bounds(nominal, GammaSpec::uniform(1.0)))
                .total;
        EXPECT_NEAR(worst, plug_in_regret(ds, x, baseline, nominal.cwiseInverse()), 1e-12);
    }
}

TEST(Reductions, SingleExpertPersonalizedIsHomogeneous) {
    std::mt19937_64 rng(17);
    for (int k = 0; k < 5; ++k) {
        const auto ds = random_dataset(300, 3, 2, 1, 40 + static_cast<std::uint64_t>(k));
        const Vector nominal = random_nominal(300, 50 + static_cast<std::uint64_t>(k));
        const Matrix router_w = random_matrix(1, 4, rng);
        const LinearPolicy policy(2, random_matrix(1, 4, rng));
        const auto cost = CostModel(0.3);
        const double homog = worst_case_regret(ds, policy, LinearRouter(RouterKind::homogeneous, 1, router_w),
                                               BaselinePolicy::never_treat(), cost,
                                               weight_bounds(nominal, GammaSpec::uniform(5.0)))
                                 .total;
        const double person = personalized_worst_case_regret(
                                  ds, policy, LinearRouter(RouterKind::personalized, 1, router_w),
                                  BaselinePolicy::never_treat(), cost,
                                  weight_bounds(nominal, GammaSpec::per_expert({5.0}), ds), AssignmentModel::single_expert())
                                  .total;
        EXPECT_NEAR(person, homog, 1e-12);
    }
}

TEST(Reductions, ZeroCertificates) {
    const auto ds = random_dataset(200, 3, 2, 0, 60);
    const auto bounds = weight_bounds(random_nominal(200, 61), GammaSpec::uniform(10.0));
    const auto never = LinearRouter::never_defer(RouterKind::homogeneous, 1, 3);
    const auto always = LinearRouter::constant_destination(RouterKind::homogeneous, 1, 3, 1);
    const auto pi_c = LinearPolicy::deterministic(0, 2, 3);
    EXPECT_EQ(worst_case_regret(ds, pi_c, never, BaselinePolicy::never_treat(), CostModel(0.5), bounds).total, 0.0);

    std::mt19937_64 rng(62);
    const LinearPolicy any(2, random_matrix(1, 4, rng));
    EXPECT_EQ(worst_case_regret_vs_human(ds, any, always, CostModel(0.5), bounds).total, 0.0);

    // a linear baseline reproduced exactly by the policy
    const LinearPolicy lin(2, random_matrix(1, 4, rng));
    EXPECT_EQ(worst_case_regret(ds, lin, never, BaselinePolicy::linear(lin), CostModel(0.0), bounds).total, 0.0);
}

TEST(Reductions, NeverDeferPersonalizedDropsTheHumanTerm) {
    const auto ds = random_dataset(200, 2, 2, 3, 63);
    const auto bounds = weight_bounds(random_nominal(200, 64), GammaSpec::per_expert({1.0, 2.0, 4.0}), ds);
    std::mt19937_64 rng(65);
    const LinearPolicy policy(2, random_matrix(1, 3, rng));
    const auto value = personalized_worst_case_regret(ds, policy, LinearRouter::never_defer(RouterKind::personalized, 3, 2),
                                                      BaselinePolicy::never_treat(), CostModel(1.0), bounds,
                                                      fit_assignment(ds));
    EXPECT_EQ(value.human_term, 0.0);
}

TEST(Estimators, Decomposition) {
    std::mt19937_64 rng(66);
    const auto ds = random_dataset(250, 3, 3, 2, 67);
    const Vector nominal = random_nominal(250, 68);
    const auto bounds = weight_bounds(nominal, GammaSpec::uniform(3.0));
    const auto pbounds = weight_bounds(nominal, GammaSpec::per_expert({2.0, 3.0}), ds);
    const auto x = random_point(ds, RouterKind::homogeneous, rng);
    const auto xp = random_point(ds, RouterKind::personalized, rng);
    const auto check = [](const ObjectiveValue& v) {
        double sum = v.human_term;
        for (double t : v.per_arm_terms) sum += t;
        EXPECT_NEAR(v.total, sum, 1e-12);
    };
    check(worst_case_regret(ds, x.policy, x.router, BaselinePolicy::never_treat(), CostModel(0.1), bounds));
    check(worst_case_regret_vs_human(ds, x.policy, x.router, CostModel(0.1), bounds));
    check(personalized_worst_case_regret(ds, xp.policy, xp.router, BaselinePolicy::never_treat(), CostModel(0.1),
                                         pbounds, fit_assignment(ds)));
    const DeferralObjective obj(ds, Contrast::baseline, BaselinePolicy::never_treat(), CostModel(0.1), bounds);
    check(obj.evaluate_at(x.policy, x.router, nominal.cwiseInverse()));
}

TEST(Estimators, PessimismIsMonotoneInGamma) {
    std::mt19937_64 rng(69);
    const auto ds = random_dataset(300, 3, 2, 0, 70);
    const Vector nominal = random_nominal(300, 71);
    const auto x = random_point(ds, RouterKind::homogeneous, rng);
    double previous = -std::numeric_limits<double>::infinity();
    for (double g : {1.0, 2.0, 4.0, 8.0, 16.0}) {
        const double v = worst_case_regret(ds, x.policy, x.router, BaselinePolicy::never_treat(), CostModel(0.0),
                                           weight_bounds(nominal, GammaSpec::uniform(g)))
                             .total;
        EXPECT_GE(v, previous);
        previous = v;
    }
}

TEST(Estimators, PerExpertBoxNesting) {
    SyntheticParams p;
    p.n = 1500;
    p.seed = 72;
    p.gamma_true = {1.0, 1.0, std::exp(1.0)};
    const auto draw = generate_synthetic(p);
    const auto& ds = draw.data;
    const Vector nominal = fit_per_expert_nominal(ds);
    const auto assignment = fit_assignment(ds);
    std::mt19937_64 rng(73);
    for (int k = 0; k < 10; ++k) {
        const auto x = random_point(ds, RouterKind::personalized, rng);
        const auto at = [&](std::vector<double> g) {
            return personalized_worst_case_regret(ds, x.policy, x.router, BaselinePolicy::never_treat(), CostModel(0.0),
                                                  weight_bounds(nominal, GammaSpec::per_expert(std::move(g)), ds),
                                                  assignment)
                .total;
        };
        EXPECT_GE(at({1.0, 1.0, std::exp(1.0)}), at({1.0, 1.0, 1.0}));
    }
}

TEST(Estimators, ShapeErrors) {
    const auto ds = random_dataset(50, 2, 2, 2, 74);
    const Vector nominal = random_nominal(50, 75);
    const auto pbounds = weight_bounds(nominal, GammaSpec::per_expert({2.0, 3.0}), ds);
    const LinearPolicy policy(2, 2);
    EXPECT_THROW(worst_case_regret(ds, policy, LinearRouter::homogeneous(2), BaselinePolicy::never_treat(),
                                   CostModel(0.0), pbounds),
                 std::invalid_argument);
    const DeferralObjective no_assignment(ds, Contrast::baseline, BaselinePolicy::never_treat(), CostModel(0.0), pbounds);
    EXPECT_THROW(no_assignment.evaluate(policy, LinearRouter::personalized(2, 2)), std::invalid_argument);
    EXPECT_THROW(no_assignment.evaluate(LinearPolicy(3, 2), LinearRouter::personalized(2, 2)), std::invalid_argument);
}

TEST(Estimators, TeamRiskSpecialCases) {
    const auto ds = random_dataset(100, 2, 2, 0, 76);
    const Vector w = random_nominal(100, 77).cwiseInverse();
    const LinearPolicy policy(2, 2);
    const auto always = LinearRouter::constant_destination(RouterKind::homogeneous, 1, 2, 1);
    EXPECT_NEAR(team_risk(ds, policy, always, CostModel(0.25), w), ds.risks.mean() + 0.25, 1e-12);

    LoggedDataset one_arm = ds;
    one_arm.num_arms = 1;
    for (auto& t : one_arm.treatments) t = 0;
    const auto never = LinearRouter::never_defer(RouterKind::homogeneous, 1, 2);
    const double hajek = (w.array() * ds.risks.array()).sum() / w.sum();
    EXPECT_NEAR(team_risk(one_arm, LinearPolicy(1, 2), never, CostModel(0.0), w), hajek, 1e-12);
    EXPECT_NEAR(team_risk(one_arm, LinearPolicy(1, 2), never, CostModel(0.0), Vector(7.0 * w)), hajek, 1e-12);
}

TEST(Toy, GoldenValues) {
    const auto draw = generate_toy(50000, 0.3, 1);
    const auto& ds = draw.data;
    const Vector nominal = fit_nominal_propensity(ds).observed(ds);
    const auto always_treat = LinearPolicy::deterministic(1, 2, 1);
    const auto never = LinearRouter::never_defer(RouterKind::homogeneous, 1, 1);

    EXPECT_NEAR(team_risk(ds, always_treat, never, CostModel(0.0), nominal.cwiseInverse()), -1.6, 0.05);

    const auto bounds = weight_bounds(nominal, GammaSpec::uniform(4.0));
    const auto vs_base = worst_case_regret(ds, always_treat, never, BaselinePolicy::never_treat(), CostModel(0.0), bounds);
    EXPECT_NEAR(vs_base.per_arm_terms.at(1), -1.0, 0.05);

    const auto vs_human = worst_case_regret_vs_human(ds, always_treat, never, CostModel(0.0), bounds);
    EXPECT_NEAR(vs_human.total, 0.2, 0.05);
    EXPECT_GT(vs_human.total, 0.0);
}
