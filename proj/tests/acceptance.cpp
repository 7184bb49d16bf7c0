// Acceptance checks. One PASS/FAIL line per criterion; exit status is 0 unless
// --strict is given and some criterion failed.

#include "test_util.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <numeric>
#ifdef __GLIBC__
#include <malloc.h>
#endif

using namespace confhai;
using namespace confhai::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void verdict(int id, bool pass, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double variance(const std::vector<double>& v) {
    const double m = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return ss / static_cast<double>(v.size() - 1);
}

// 1. Toy population: seed-averaged value estimates and full deferral.
void toy() {
    const auto start = Clock::now();
    std::vector<double> human, ipw, worst, defer, team;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto r = run_toy(50000, 0.3, 4.0, seed);
        human.push_back(r.human_value);
        ipw.push_back(r.ipw_treat_value);
        worst.push_back(r.worst_case_treat_value);
        defer.push_back(r.defer_fraction);
        team.push_back(r.team_risk);
    }
    const double elapsed = seconds_since(start);
    const bool ok = std::abs(mean(human) + 1.2) <= 0.05 && std::abs(mean(ipw) + 1.6) <= 0.05 &&
                    std::abs(mean(worst) + 1.0) <= 0.05 && mean(defer) >= 0.99 && std::abs(mean(team) + 1.2) <= 0.05 &&
                    elapsed <= 60.0;
    verdict(1, ok,
           fmt("human %.4f ipw %.4f worst %.4f defer %.4f team %.4f (means over 5 seeds), %.1f s", mean(human), mean(ipw),
               mean(worst), mean(defer), mean(team), elapsed));
}

bool is_threshold(const std::vector<double>& r, const std::vector<double>& a, const std::vector<double>& b,
                  const Vector& w) {
    double lowest_upper = std::numeric_limits<double>::infinity(), highest_lower = -lowest_upper;
    for (std::size_t i = 0; i < r.size(); ++i) {
        const double wi = w(static_cast<Eigen::Index>(i));
        if (a[i] == b[i]) {
            if (wi != a[i]) return false;
        } else if (wi == b[i]) {
            lowest_upper = std::min(lowest_upper, r[i]);
        } else if (wi == a[i]) {
            highest_lower = std::max(highest_lower, r[i]);
        } else {
            return false;
        }
    }
    return highest_lower <= lowest_upper;
}

// 2. Fractional program against enumeration of box vertices.
void lfp() {
    const auto start = Clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> size(1, 12);
    std::uniform_real_distribution<double> prop(0.02, 0.98), val(-5.0, 5.0), loggamma(0.0, std::log(100.0));
    double worst_gap = 0.0;
    int structure_failures = 0;
    for (int k = 0; k < 1000; ++k) {
        const auto n = static_cast<std::size_t>(size(rng));
        const double gamma = std::exp(loggamma(rng));
        std::vector<double> r(n), a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double excess = 1.0 / prop(rng) - 1.0;
            r[i] = val(rng);
            a[i] = 1.0 + excess / gamma;
            b[i] = 1.0 + gamma * excess;
        }
        const auto oracle = solve_lfp_bruteforce(r, a, b);
        for (const auto& sol : {solve_lfp(r, a, b), solve_lfp_sorted(r, a, b)}) {
            worst_gap = std::max(worst_gap, std::abs(sol.value - oracle.value) / std::max(1.0, std::abs(oracle.value)));
            if (!is_threshold(r, a, b, sol.weights)) ++structure_failures;
        }
    }
    const double elapsed = seconds_since(start);
    verdict(2, worst_gap <= 1e-9 && structure_failures == 0 && elapsed <= 30.0,
           fmt("max gap %.2e, %d non-threshold solutions, %.2f s", worst_gap, structure_failures, elapsed));
}

// 3. Analytic gradients against central differences.
void gradients() {
    std::mt19937_64 rng(3);
    double worst[3] = {0, 0, 0};
    for (int variant = 0; variant < 3; ++variant)
        for (int k = 0; k < 50; ++k) {
            const bool person = variant == 2;
            const auto seed = static_cast<std::uint64_t>(1000 * variant + k);
            const auto ds = random_dataset(200, 3, 2 + k % 2, person ? 3 : 0, seed);
            const Vector nominal = random_nominal(200, seed + 500);
            const auto bounds = person ? weight_bounds(nominal, GammaSpec::per_expert({1.5, 3.0, 8.0}), ds)
                                       : weight_bounds(nominal, GammaSpec::uniform(3.0));
            const DeferralObjective obj(ds, variant == 1 ? Contrast::human : Contrast::baseline,
                                        BaselinePolicy::never_treat(), CostModel(0.1), bounds,
                                        person ? std::optional(fit_assignment(ds)) : std::nullopt);
            const int K = person ? 3 : 1;
            const auto kind = person ? RouterKind::personalized : RouterKind::homogeneous;
            const LinearPolicy policy(ds.num_arms, random_matrix(ds.num_arms - 1, 4, rng, 0.7));
            const LinearRouter router(kind, K, random_matrix(K, 4, rng, 0.7));
            const auto grad = obj.evaluate_with_gradient(policy, router).second;
            const Matrix fd_policy = central_difference(
                [&](const Matrix& w) { return obj.evaluate(LinearPolicy(ds.num_arms, w), router).total; }, policy.params());
            const Matrix fd_router = central_difference(
                [&](const Matrix& w) { return obj.evaluate(policy, LinearRouter(kind, K, w)).total; }, router.params());
            Vector analytic(grad.policy.size() + grad.router.size()), numeric(analytic.size());
            analytic << grad.policy.reshaped(), grad.router.reshaped();
            numeric << fd_policy.reshaped(), fd_router.reshaped();
            worst[variant] = std::max(worst[variant], relative_error(analytic, numeric));
        }
    verdict(3, worst[0] <= 1e-4 && worst[1] <= 1e-4 && worst[2] <= 1e-4,
           fmt("max relative error: vs-baseline %.2e, vs-human %.2e, personalized %.2e", worst[0], worst[1], worst[2]));
}

// 4. Reductions: unit Γ, one expert, zero certificates.
void reductions() {
    std::mt19937_64 rng(4);
    double unit_gap = 0.0, single_gap = 0.0;
    for (int k = 0; k < 20; ++k) {
        const auto ds = random_dataset(300, 3, 2 + k % 2, 1, 40 + static_cast<std::uint64_t>(k));
        const Vector nominal = random_nominal(300, 80 + static_cast<std::uint64_t>(k));
        const LinearPolicy policy(ds.num_arms, random_matrix(ds.num_arms - 1, 4, rng));
        const Matrix rw = random_matrix(1, 4, rng);
        const LinearRouter router(RouterKind::homogeneous, 1, rw);
        const auto baseline = BaselinePolicy::linear(LinearPolicy(ds.num_arms, random_matrix(ds.num_arms - 1, 4, rng)));
        const double robust =
            worst_case_regret(ds, policy, router, baseline, CostModel(0.2), weight_bounds(nominal, GammaSpec::uniform(1.0))).total;
        const double plug_in = hajek_regret(ds, policy, router, baseline, CostModel(0.2), nominal.cwiseInverse()).total;
        unit_gap = std::max(unit_gap, std::abs(robust - plug_in));

        const double homog =
            worst_case_regret(ds, policy, router, baseline, CostModel(0.2), weight_bounds(nominal, GammaSpec::uniform(5.0))).total;
        const double person = personalized_worst_case_regret(ds, policy, LinearRouter(RouterKind::personalized, 1, rw), baseline,
                                                             CostModel(0.2), weight_bounds(nominal, GammaSpec::per_expert({5.0}), ds),
                                                             AssignmentModel::single_expert())
                                  .total;
        single_gap = std::max(single_gap, std::abs(homog - person));
    }
    const auto ds = random_dataset(300, 3, 2, 0, 99);
    const auto never = LinearRouter::never_defer(RouterKind::homogeneous, 1, 3);
    const double zero = worst_case_regret(ds, LinearPolicy::deterministic(0, 2, 3), never, BaselinePolicy::never_treat(),
                                          CostModel(0.5), weight_bounds(random_nominal(300, 98), GammaSpec::uniform(10.0)))
                            .total;
    verdict(4, unit_gap <= 1e-12 && single_gap <= 1e-12 && zero == 0.0,
           fmt("unit-gamma gap %.2e, single-expert gap %.2e, baseline certificate %g", unit_gap, single_gap, zero));
}

// 5. Synthetic confounding sits on the sensitivity boundary.
void tightness() {
    SyntheticParams p;
    p.n = 20000;
    p.gamma_true = {std::exp(1.0), std::exp(2.5), std::exp(4.0)};
    p.seed = 5;
    const auto d = generate_synthetic(p);
    const auto odds = [](double q) { return q / (1.0 - q); };
    double worst = 0.0;
    for (std::size_t i = 0; i < d.truth.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double g = d.truth.gammas[static_cast<std::size_t>(d.truth.expert[i])];
        const double ratio = odds(d.truth.true_propensity(ii)) / odds(d.truth.nominal(ii));
        worst = std::max(worst, std::abs(ratio / (d.truth.u[i] == 1 ? g : 1.0 / g) - 1.0));
    }
    double identity = 0.0;
    for (double q : {0.01, 0.2, 0.5, 0.9, 0.99})
        for (int u : {0, 1}) identity = std::max(identity, std::abs(tilt_propensity(q, 1.0, u) - q));
    verdict(5, worst <= 1e-12 && identity <= 1e-12,
           fmt("max odds-ratio deviation %.2e, unit-gamma deviation %.2e", worst, identity));
}

ExperimentConfig synthetic_config(std::vector<double> log_gamma_true, std::vector<Method> methods,
                                  std::vector<LogGammaSpec> grid) {
    ExperimentConfig c;
    SyntheticSource s;
    s.n_train = 2000;
    s.n_test = 20000;
    s.log_gamma_true = std::move(log_gamma_true);
    c.source = s;
    c.methods = std::move(methods);
    c.log_gamma_grid = std::move(grid);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) c.seeds.push_back(seed);
    return c;
}

std::vector<double> regrets(const EvalReport& report, Method m, double log_gamma) {
    std::vector<double> out;
    for (const auto& r : report.rows)
        if (r.method == m && r.log_gamma.max() == log_gamma && r.ok()) out.push_back(r.regret);
    return out;
}

// 6. Synthetic sweep against the baselines.
void sweep() {
    const auto start = Clock::now();
    const auto report = run_experiment(synthetic_config(
        {2.5}, {Method::human, Method::confao, Method::hai, Method::confhai}, {{{0.01}}, {{1.0}}, {{2.5}}, {{4.0}}}));
    const double elapsed = seconds_since(start);
    const auto confhai = regrets(report, Method::confhai, 2.5), human = regrets(report, Method::human, 2.5),
               confao = regrets(report, Method::confao, 2.5);
    const auto confhai0 = regrets(report, Method::confhai, 0.01), hai0 = regrets(report, Method::hai, 0.01);
    const bool complete = !report.partial();
    const double se = std::sqrt(variance(confhai0) / static_cast<double>(confhai0.size()) +
                                variance(hai0) / static_cast<double>(hai0.size()));
    const double gap0 = std::abs(mean(confhai0) - mean(hai0));
    const bool ok = complete && mean(confhai) < 0.0 && mean(confhai) < mean(human) && mean(confhai) < mean(confao) &&
                    gap0 <= 2.0 * se && elapsed <= 600.0;
    verdict(6, ok,
           fmt("at log gamma 2.5: confhai %.4f human %.4f confao %.4f; at 0.01: |confhai - hai| %.4f vs 2se %.4f; %.0f s",
               mean(confhai), mean(human), mean(confao), gap0, 2.0 * se, elapsed));
}

// 7. Per-expert sensitivity beats one pessimistic Γ for everyone.
void personalized() {
    const auto report = run_experiment(
        synthetic_config({1.0, 2.5, 4.0}, {Method::confhai, Method::confhai_person}, {{{1.0, 2.5, 4.0}}}));
    const auto homog = regrets(report, Method::confhai, 4.0), person = regrets(report, Method::confhai_person, 4.0);
    verdict(7, !report.partial() && mean(person) <= mean(homog),
           fmt("mean regret over 10 seeds: personalized %.4f, homogeneous %.4f", mean(person), mean(homog)));
}

// 8. Certificates never shrink as Γ grows.
void monotone() {
    std::mt19937_64 rng(8);
    const std::vector<double> gammas{1.0, 2.0, 4.0, 8.0, 16.0};
    int violations = 0, checked = 0;
    for (int k = 0; k < 50; ++k) {
        const auto ds = random_dataset(400, 3, 2 + k % 2, 0, 800 + static_cast<std::uint64_t>(k));
        const Vector nominal = random_nominal(400, 900 + static_cast<std::uint64_t>(k));
        const LinearPolicy policy(ds.num_arms, random_matrix(ds.num_arms - 1, 4, rng));
        const LinearRouter router(RouterKind::homogeneous, 1, random_matrix(1, 4, rng));
        Certificates prev{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
        for (double g : gammas) {
            const auto c = certify(ds, policy, router, BaselinePolicy::never_treat(), CostModel(0.1),
                                   weight_bounds(nominal, GammaSpec::uniform(g)));
            violations += (c.vs_baseline < prev.vs_baseline) + (c.vs_human < prev.vs_human);
            checked += 2;
            prev = c;
        }
    }
    verdict(8, violations == 0, fmt("%d of %d consecutive certificate pairs decreased", violations, checked));
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    const bool strict = argc > 1 && std::strcmp(argv[1], "--strict") == 0;
    const auto run = [](int id, void (*check)()) {
        try {
            check();
        } catch (const std::exception& e) {
            verdict(id, false, std::string("exception: ") + e.what());
        }
    };
    run(1, toy);
    run(2, lfp);
    run(3, gradients);
    run(4, reductions);
    run(5, tightness);
    run(6, sweep);
    run(7, personalized);
    run(8, monotone);
    std::printf("%d of 8 criteria failed\n", failures);
    return strict && failures > 0 ? 1 : 0;
}
