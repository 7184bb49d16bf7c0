#pragma once

// Γ-sweep runner: one cell per (method, Γ specification, seed). Synthetic
// and toy sources are scored by oracle regret on a fresh draw; CSV sources
// by worst-case certificates, with routing measured on a held-out split.

#include "confhai/core.hpp"
#include "confhai/io.hpp"
#include "confhai/msm.hpp"
#include "confhai/objective.hpp"
#include "confhai/propensity.hpp"
#include "confhai/synthgen.hpp"
#include "confhai/train.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace confhai {

enum class Method { human, ao, confao, hai, confhai, confhai_person };

inline const std::vector<Method>& all_methods() {
    static const std::vector<Method> methods{Method::human,   Method::ao,      Method::confao,
                                             Method::hai,     Method::confhai, Method::confhai_person};
    return methods;
}

inline std::string method_name(Method m) {
    switch (m) {
        case Method::human: return "human";
        case Method::ao: return "ao";
        case Method::confao: return "confao";
        case Method::hai: return "hai";
        case Method::confhai: return "confhai";
        case Method::confhai_person: return "confhai-person";
    }
    return "unknown";
}

// Human, AO and HAI ignore the specified Γ during training.
inline bool depends_on_gamma(Method m) {
    return m == Method::confao || m == Method::confhai || m == Method::confhai_person;
}

inline Method parse_method(const std::string& s) {
    for (Method m : all_methods())
        if (method_name(m) == s) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

// A grid point: one log Γ for everyone, or one per expert.
struct LogGammaSpec {
    std::vector<double> values;

    bool per_expert() const noexcept { return values.size() > 1; }
    double max() const { return *std::max_element(values.begin(), values.end()); }

    std::string label() const {
        std::string s;
        for (std::size_t k = 0; k < values.size(); ++k) s += (k ? ";" : "") + io_detail::format_double(values[k]);
        return s;
    }
};

struct SyntheticSource {
    std::size_t n_train = 2000;
    std::size_t n_test = 20000;
    std::vector<double> log_gamma_true{2.5};  // one per expert
    Vector beta0 = Vector::Zero(5);
};

struct ToySource {
    std::size_t n_train = 50000;
    std::size_t n_test = 50000;
    double gamma = 0.3;
};

struct CsvSource {
    std::string path;
    double test_fraction = 0.2;
};

struct ExperimentConfig {
    std::variant<SyntheticSource, ToySource, CsvSource> source = SyntheticSource{};
    std::vector<Method> methods;
    std::vector<LogGammaSpec> log_gamma_grid;
    std::vector<std::uint64_t> seeds;
    TrainConfig train;
    double cost = 0.0;
    BaselinePolicy baseline = BaselinePolicy::never_treat();
    double propensity_epsilon = 0.01;
    double propensity_regularization = 0.0;
    std::string output_dir = "out";

    void check() const {
        if (methods.empty()) throw std::invalid_argument("config: methods must be nonempty");
        if (log_gamma_grid.empty()) throw std::invalid_argument("config: gamma grid must be nonempty");
        if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
        train.check();
        if (!(cost >= 0.0) || !std::isfinite(cost)) throw std::invalid_argument("config: cost must be finite and >= 0");
        for (const auto& g : log_gamma_grid) {
            if (g.values.empty()) throw std::invalid_argument("config: empty gamma specification");
            for (double v : g.values)
                if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("config: log gamma must be >= 0");
        }
        const int k = known_experts();
        if (k > 0)
            for (const auto& g : log_gamma_grid)
                if (g.per_expert() && static_cast<int>(g.values.size()) != k)
                    throw std::invalid_argument("config: per-expert gamma has " + std::to_string(g.values.size()) +
                                                " entries but the data has " + std::to_string(k) + " experts");
        if (const auto* s = std::get_if<SyntheticSource>(&source)) {
            if (s->n_train < 2 || s->n_test < 1) throw std::invalid_argument("config: synthetic sizes too small");
            if (s->log_gamma_true.empty()) throw std::invalid_argument("config: log_gamma_true must be nonempty");
        }
        if (const auto* c = std::get_if<CsvSource>(&source))
            if (!(c->test_fraction > 0.0 && c->test_fraction < 1.0))
                throw std::invalid_argument("config: test_fraction must be in (0, 1)");
    }

    // Expert count implied by the source, 0 when only known after loading.
    int known_experts() const {
        if (const auto* s = std::get_if<SyntheticSource>(&source)) return static_cast<int>(s->log_gamma_true.size());
        if (std::holds_alternative<ToySource>(source)) return 1;
        return 0;
    }
    bool has_truth() const { return !std::holds_alternative<CsvSource>(source); }
};

struct ReportRow {
    Method method = Method::human;
    LogGammaSpec log_gamma;
    std::uint64_t seed = 0;
    double regret = std::numeric_limits<double>::quiet_NaN();  // oracle; NaN without ground truth
    Certificates certificates;
    std::vector<double> routing_fraction;  // per destination, 0 = algorithm
    double wall_seconds = 0.0;
    std::string error;  // empty on success

    bool ok() const noexcept { return error.empty(); }
    double human_fraction() const {
        double s = 0.0;
        for (std::size_t k = 1; k < routing_fraction.size(); ++k) s += routing_fraction[k];
        return s;
    }
};

struct EvalReport {
    bool has_truth = true;
    std::vector<ReportRow> rows;

    bool partial() const {
        return std::any_of(rows.begin(), rows.end(), [](const ReportRow& r) { return !r.ok(); });
    }
};

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

inline LinearPolicy read_policy_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    if (std::filesystem::path(path).extension() == ".json") return policy_from_json(json::parse(in));
    // headerless CSV: one row per non-reference arm, intercept first
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (io_detail::trim(line).empty()) continue;
        std::vector<double> row;
        for (auto cell : io_detail::split(line)) row.push_back(io_detail::parse_double(cell, lineno));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("policy file is empty: " + path);
    Matrix w(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size()) throw std::runtime_error("ragged policy file: " + path);
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return LinearPolicy(static_cast<int>(rows.size()) + 1, std::move(w));
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.iterations = j.value("iterations", c.iterations);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.init_scale = j.value("init_scale", c.init_scale);
    const auto optimizer = j.value("optimizer", std::string("adam"));
    if (optimizer == "adam")
        c.optimizer = OptimizerKind::adam;
    else if (optimizer == "gd")
        c.optimizer = OptimizerKind::plain_gd;
    else
        throw std::invalid_argument("config: optimizer must be adam or gd");
    const auto init = j.value("init", std::string("zeros"));
    if (init == "zeros")
        c.init = InitKind::zeros;
    else if (init == "gaussian")
        c.init = InitKind::gaussian;
    else
        throw std::invalid_argument("config: init must be zeros or gaussian");
    const auto objective = j.value("objective", std::string("vs-baseline"));
    if (objective == "vs-baseline")
        c.contrast = Contrast::baseline;
    else if (objective == "vs-human")
        c.contrast = Contrast::human;
    else
        throw std::invalid_argument("config: objective must be vs-baseline or vs-human");
    return c;
}

inline LogGammaSpec log_gamma_from_json(const json& j) {
    LogGammaSpec g;
    if (j.is_number())
        g.values = {j.get<double>()};
    else if (j.is_array())
        g.values = j.get<std::vector<double>>();
    else
        throw std::invalid_argument("config: gamma grid entries must be numbers or arrays");
    return g;
}

// Relative paths inside the config resolve against `base_dir`.
inline ExperimentConfig experiment_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
    ExperimentConfig c;
    const auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).string();
    };

    const json& data = j.at("data");
    if (data.contains("synthetic")) {
        const json& s = data.at("synthetic");
        SyntheticSource src;
        src.n_train = s.value("n_train", src.n_train);
        src.n_test = s.value("n_test", src.n_test);
        if (s.contains("log_gamma_true")) src.log_gamma_true = log_gamma_from_json(s.at("log_gamma_true")).values;
        if (s.contains("beta0")) {
            const auto b = s.at("beta0").get<std::vector<double>>();
            src.beta0 = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
        }
        c.source = src;
    } else if (data.contains("toy")) {
        const json& s = data.at("toy");
        ToySource src;
        src.n_train = s.value("n_train", src.n_train);
        src.n_test = s.value("n_test", src.n_test);
        src.gamma = s.value("gamma", src.gamma);
        c.source = src;
    } else if (data.contains("csv")) {
        const json& s = data.at("csv");
        CsvSource src;
        src.path = resolve(s.at("path").get<std::string>());
        src.test_fraction = s.value("test_fraction", src.test_fraction);
        c.source = src;
    } else {
        throw std::invalid_argument("config: data must contain synthetic, toy or csv");
    }

    for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    for (const auto& g : j.at("log_gamma_grid")) c.log_gamma_grid.push_back(log_gamma_from_json(g));
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.cost = j.value("cost", c.cost);
    if (j.contains("baseline")) {
        const json& b = j.at("baseline");
        if (b.is_string() && b.get<std::string>() == "never-treat")
            c.baseline = BaselinePolicy::never_treat();
        else if (b.is_object() && b.contains("policy_file"))
            c.baseline = BaselinePolicy::linear(read_policy_file(resolve(b.at("policy_file").get<std::string>())));
        else
            throw std::invalid_argument("config: baseline must be \"never-treat\" or {\"policy_file\": ...}");
    }
    if (j.contains("propensity")) {
        c.propensity_epsilon = j.at("propensity").value("epsilon", c.propensity_epsilon);
        c.propensity_regularization = j.at("propensity").value("regularization", c.propensity_regularization);
    }
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>());
    c.check();
    return c;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

namespace harness_detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace harness_detail

// Everything a seed's cells share.
struct PreparedData {
    LoggedDataset train;
    LoggedDataset test;
    std::optional<SyntheticTruth> test_truth;
    Vector nominal;                               // pooled fit, observed arm
    std::optional<Vector> nominal_per_expert;     // fit within each expert
    std::optional<AssignmentModel> assignment;
};

// Nominal propensities (and, with expert ids, per-expert fits and the
// assignment model) from the training split.
inline void fit_nuisances(PreparedData& d, double epsilon, double regularization) {
    d.nominal = fit_nominal_propensity(d.train, regularization, epsilon).observed(d.train);
    d.nominal_per_expert.reset();
    d.assignment.reset();
    if (d.train.has_experts()) {
        d.nominal_per_expert = fit_per_expert_nominal(d.train, regularization, epsilon);
        d.assignment = fit_assignment(d.train, AssignmentMode::empirical, epsilon);
    }
}

inline PreparedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    PreparedData d;
    const std::uint64_t train_seed = harness_detail::splitmix64(2 * seed);
    const std::uint64_t test_seed = harness_detail::splitmix64(2 * seed + 1);
    if (const auto* s = std::get_if<SyntheticSource>(&cfg.source)) {
        SyntheticParams p;
        p.gamma_true.clear();
        for (double lg : s->log_gamma_true) p.gamma_true.push_back(std::exp(lg));
        p.beta0 = s->beta0;
        p.n = s->n_train;
        p.seed = train_seed;
        d.train = generate_synthetic(p).data;
        p.n = s->n_test;
        p.seed = test_seed;
        auto test = generate_synthetic(p);
        d.test = std::move(test.data);
        d.test_truth = std::move(test.truth);
    } else if (const auto* t = std::get_if<ToySource>(&cfg.source)) {
        d.train = generate_toy(t->n_train, t->gamma, train_seed).data;
        auto test = generate_toy(t->n_test, t->gamma, test_seed);
        d.test = std::move(test.data);
        d.test_truth = std::move(test.truth);
    } else {
        const auto& c = std::get<CsvSource>(cfg.source);
        const LoggedDataset all = read_dataset_csv(c.path);
        require_valid(all);
        std::vector<std::size_t> order(all.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(train_seed);
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::round(c.test_fraction * static_cast<double>(all.size())));
        if (n_test < 1 || n_test >= all.size()) throw std::invalid_argument("csv too small for a train/test split");
        std::vector<std::size_t> test_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
        std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
        std::sort(test_rows.begin(), test_rows.end());
        std::sort(train_rows.begin(), train_rows.end());
        d.train = all.subset(train_rows);
        d.test = all.subset(test_rows);
    }
    fit_nuisances(d, cfg.propensity_epsilon, cfg.propensity_regularization);
    return d;
}

inline std::vector<double> routing_fractions(const LinearRouter& router, const Matrix& X) {
    std::vector<double> f(static_cast<std::size_t>(router.destinations()), 0.0);
    for (Eigen::Index i = 0; i < X.rows(); ++i)
        f[static_cast<std::size_t>(router.hard_destination(X.row(i).transpose()))] += 1.0;
    for (double& v : f) v /= static_cast<double>(X.rows());
    return f;
}

struct MethodSystem {
    LinearPolicy policy;
    LinearRouter router;
    std::vector<double> objective_trace;  // empty for methods without a training objective
    int best_iteration = -1;
};

inline std::vector<double> person_log_gammas(const LoggedDataset& ds, const LogGammaSpec& lg) {
    std::vector<double> logs = lg.values;
    if (logs.size() == 1) logs.assign(static_cast<std::size_t>(ds.num_experts), logs.front());
    if (static_cast<int>(logs.size()) != ds.num_experts)
        throw std::invalid_argument("per-expert gamma does not match the expert count");
    return logs;
}

// Homogeneous methods take the most pessimistic entry of a per-expert spec.
inline WeightBounds homogeneous_bounds(const PreparedData& d, const LogGammaSpec& lg) {
    return weight_bounds(d.nominal, GammaSpec::from_log(lg.max()));
}

inline MethodSystem train_method(const ExperimentConfig& cfg, const PreparedData& d, Method method, const LogGammaSpec& lg) {
    const LoggedDataset& ds = d.train;
    const CostModel cost(cfg.cost);
    const TrainConfig& tc = cfg.train;
    const auto never = LinearRouter::never_defer(RouterKind::homogeneous, 1, ds.dim());
    switch (method) {
        case Method::human:
            return {LinearPolicy(ds.num_arms, ds.dim()),
                    LinearRouter::constant_destination(RouterKind::homogeneous, 1, ds.dim(), 1), {}, -1};
        case Method::ao:
            return {train_ao(ds, d.nominal, tc), never, {}, -1};
        case Method::confao:
            return {train_confao(ds, homogeneous_bounds(d, lg), cfg.baseline, tc), never, {}, -1};
        case Method::hai: {
            auto sys = train_hai(ds, d.nominal, cost, tc, HaiWeighting::ipw, cfg.baseline);
            return {std::move(sys.policy), std::move(sys.router), std::move(sys.objective_trace), sys.best_iteration};
        }
        case Method::confhai: {
            auto sys = train_confhai(ds, homogeneous_bounds(d, lg), cfg.baseline, cost, tc);
            return {std::move(sys.policy), std::move(sys.router), std::move(sys.objective_trace), sys.best_iteration};
        }
        case Method::confhai_person: {
            if (!d.nominal_per_expert || !d.assignment)
                throw std::invalid_argument("confhai-person needs expert ids in the data");
            const auto bounds = weight_bounds(*d.nominal_per_expert, GammaSpec::from_log(person_log_gammas(ds, lg)), ds);
            auto sys = train_confhai_personalized(ds, bounds, cfg.baseline, cost, *d.assignment, tc);
            return {std::move(sys.policy), std::move(sys.router), std::move(sys.objective_trace), sys.best_iteration};
        }
    }
    throw std::logic_error("unhandled method");
}

// Worst-case certificates on the training split at the cell's Γ.
inline Certificates certify_method(const ExperimentConfig& cfg, const PreparedData& d, const MethodSystem& sys,
                                 const LogGammaSpec& lg) {
    const CostModel cost(cfg.cost);
    if (!sys.router.homogeneous()) {
        const auto bounds =
            weight_bounds(*d.nominal_per_expert, GammaSpec::from_log(person_log_gammas(d.train, lg)), d.train);
        return certify(d.train, sys.policy, sys.router, cfg.baseline, cost, bounds, d.assignment);
    }
    return certify(d.train, sys.policy, sys.router, cfg.baseline, cost, homogeneous_bounds(d, lg));
}


// Rows come back ordered by (method, Γ specification, seed) following the
// config's order. A failing seed or cell is recorded on its rows and the
// run continues.
inline EvalReport run_experiment(const ExperimentConfig& cfg) {
    cfg.check();
    EvalReport report;
    report.has_truth = cfg.has_truth();
    const std::size_t M = cfg.methods.size(), G = cfg.log_gamma_grid.size(), S = cfg.seeds.size();
    report.rows.resize(M * G * S);
    const auto at = [&](std::size_t m, std::size_t g, std::size_t s) -> ReportRow& {
        return report.rows[(m * G + g) * S + s];
    };
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t g = 0; g < G; ++g)
            for (std::size_t s = 0; s < S; ++s) {
                auto& row = at(m, g, s);
                row.method = cfg.methods[m];
                row.log_gamma = cfg.log_gamma_grid[g];
                row.seed = cfg.seeds[s];
            }

    for (std::size_t s = 0; s < S; ++s) {
        std::optional<PreparedData> data;
        std::string seed_error;
        try {
            data = prepare_data(cfg, cfg.seeds[s]);
        } catch (const std::exception& e) {
            seed_error = std::string("data preparation failed: ") + e.what();
        }
        for (std::size_t m = 0; m < M; ++m) {
            std::optional<MethodSystem> shared;  // Γ-free methods train once per seed
            for (std::size_t g = 0; g < G; ++g) {
                auto& row = at(m, g, s);
                if (!data) {
                    row.error = seed_error;
                    continue;
                }
                const auto start = std::chrono::steady_clock::now();
                try {
                    const bool reuse = shared && !depends_on_gamma(row.method);
                    const auto sys =
                        reuse ? *shared : train_method(cfg, *data, row.method, row.log_gamma);
                    if (!depends_on_gamma(row.method)) shared = sys;
                    row.certificates = certify_method(cfg, *data, sys, row.log_gamma);
                    if (data->test_truth) {
                        const auto oracle = oracle_regret(sys.policy, sys.router, data->test, *data->test_truth,
                                                          cfg.baseline, CostModel(cfg.cost));
                        row.regret = oracle.regret;
                        row.routing_fraction = oracle.routing_fraction;
                        if (!std::isfinite(row.regret)) row.error = "non-finite regret";
                    } else {
                        row.routing_fraction = routing_fractions(sys.router, data->test.covariates);
                    }
                } catch (const std::exception& e) {
                    row.error = e.what();
                }
                row.wall_seconds =
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            }
        }
    }
    return report;
}

// One toy draw: the logged human value, the always-treat value under nominal
// IPW and at its worst case for Γ, and a ConfHAI system trained at Γ and
// evaluated on a fresh draw.
struct ToyRun {
    double human_value = 0.0;
    double ipw_treat_value = 0.0;
    double worst_case_treat_value = 0.0;
    double defer_fraction = 0.0;
    double team_risk = 0.0;
};

inline ToyRun run_toy(std::size_t n, double gamma, double msm_gamma, std::uint64_t seed, const TrainConfig& tc = {}) {
    const auto train = generate_toy(n, gamma, harness_detail::splitmix64(2 * seed));
    const auto test = generate_toy(n, gamma, harness_detail::splitmix64(2 * seed + 1));
    const LoggedDataset& ds = train.data;
    const Vector nominal = fit_nominal_propensity(ds).observed(ds);
    const WeightBounds bounds = weight_bounds(nominal, GammaSpec::uniform(msm_gamma));

    ToyRun out;
    out.human_value = evaluate_human_only(ds, CostModel(0.0));
    std::vector<double> r, lo, hi;
    double ipw = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.treatments[i] != 1) continue;
        const auto ii = static_cast<Eigen::Index>(i);
        ipw += ds.risks(ii) / nominal(ii);
        r.push_back(ds.risks(ii));
        lo.push_back(bounds.lower(ii));
        hi.push_back(bounds.upper(ii));
    }
    out.ipw_treat_value = ipw / static_cast<double>(ds.size());
    out.worst_case_treat_value = solve_lfp(r, lo, hi).value;

    const auto sys = train_confhai(ds, bounds, BaselinePolicy::never_treat(), CostModel(0.0), tc);
    const auto oracle = oracle_regret(sys.policy, sys.router, test.data, test.truth, BaselinePolicy::never_treat(),
                                      CostModel(0.0));
    out.defer_fraction = oracle.routing_fraction.at(1);
    out.team_risk = oracle.regret + test.truth.y0.mean();
    return out;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

struct SummaryCell {
    Method method = Method::human;
    LogGammaSpec log_gamma;
    std::size_t count = 0;  // successful seeds
    double mean_regret = std::numeric_limits<double>::quiet_NaN();
    double std_regret = std::numeric_limits<double>::quiet_NaN();
    double mean_certificate_vs_baseline = std::numeric_limits<double>::quiet_NaN();
    double std_certificate_vs_baseline = std::numeric_limits<double>::quiet_NaN();
    double mean_certificate_vs_human = std::numeric_limits<double>::quiet_NaN();
    double mean_human_fraction = std::numeric_limits<double>::quiet_NaN();
};

namespace harness_detail {

// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline std::string csv_number(double v) { return std::isfinite(v) ? io_detail::format_double(v) : ""; }

}  // namespace harness_detail

// One entry per (method, Γ specification) in first-appearance order.
inline std::vector<SummaryCell> summarize(const EvalReport& report) {
    std::vector<SummaryCell> cells;
    std::vector<std::vector<const ReportRow*>> members;
    for (const auto& row : report.rows) {
        auto it = std::find_if(cells.begin(), cells.end(), [&](const SummaryCell& c) {
            return c.method == row.method && c.log_gamma.values == row.log_gamma.values;
        });
        if (it == cells.end()) {
            cells.push_back(SummaryCell{row.method, row.log_gamma});
            members.emplace_back();
            it = std::prev(cells.end());
        }
        if (row.ok()) members[static_cast<std::size_t>(it - cells.begin())].push_back(&row);
    }
    for (std::size_t k = 0; k < cells.size(); ++k) {
        std::vector<double> regret, cert_b, cert_h, human;
        for (const ReportRow* r : members[k]) {
            if (std::isfinite(r->regret)) regret.push_back(r->regret);
            cert_b.push_back(r->certificates.vs_baseline);
            cert_h.push_back(r->certificates.vs_human);
            human.push_back(r->human_fraction());
        }
        auto& c = cells[k];
        c.count = members[k].size();
        std::tie(c.mean_regret, c.std_regret) = harness_detail::mean_std(regret);
        std::tie(c.mean_certificate_vs_baseline, c.std_certificate_vs_baseline) = harness_detail::mean_std(cert_b);
        c.mean_certificate_vs_human = harness_detail::mean_std(cert_h).first;
        c.mean_human_fraction = harness_detail::mean_std(human).first;
    }
    return cells;
}

// Routing columns: `route_algorithm`, `route_human` (all human destinations)
// and `route_experts` (';'-joined per-expert fractions, personalized only).
inline void write_results_csv(std::ostream& out, const EvalReport& report) {
    using harness_detail::csv_number;
    out << "method,log_gamma,seed,status,oracle_regret,certificate_vs_baseline,certificate_vs_human,"
           "route_algorithm,route_human,route_experts,error\n";
    for (const auto& r : report.rows) {
        out << method_name(r.method) << ',' << r.log_gamma.label() << ',' << r.seed << ',' << (r.ok() ? "ok" : "failed")
            << ',';
        if (r.ok()) {
            out << csv_number(r.regret) << ',' << csv_number(r.certificates.vs_baseline) << ','
                << csv_number(r.certificates.vs_human) << ',';
            out << csv_number(r.routing_fraction.empty() ? std::nan("") : r.routing_fraction[0]) << ','
                << csv_number(r.human_fraction()) << ',';
            if (r.routing_fraction.size() > 2)
                for (std::size_t k = 1; k < r.routing_fraction.size(); ++k)
                    out << (k > 1 ? ";" : "") << csv_number(r.routing_fraction[k]);
            out << ',';
        } else {
            out << ",,,,,,";
        }
        std::string err = r.error;
        std::replace(err.begin(), err.end(), ',', ';');
        std::replace(err.begin(), err.end(), '\n', ' ');
        out << err << '\n';
    }
}

inline json summary_json(const EvalReport& report) {
    using harness_detail::number_or_null;
    json cells = json::array();
    for (const auto& c : summarize(report)) {
        cells.push_back(json{
            {"method", method_name(c.method)},
            {"log_gamma", c.log_gamma.values},
            {"seeds", c.count},
            {"oracle_regret", {{"mean", number_or_null(c.mean_regret)}, {"std", number_or_null(c.std_regret)}}},
            {"certificate_vs_baseline",
             {{"mean", number_or_null(c.mean_certificate_vs_baseline)},
              {"std", number_or_null(c.std_certificate_vs_baseline)}}},
            {"certificate_vs_human", {{"mean", number_or_null(c.mean_certificate_vs_human)}}},
            {"route_human", {{"mean", number_or_null(c.mean_human_fraction)}}},
        });
    }
    std::size_t failed = 0;
    for (const auto& r : report.rows) failed += r.ok() ? 0 : 1;
    return json{{"rows", report.rows.size()}, {"failed_rows", failed}, {"partial", failed > 0}, {"cells", cells}};
}

// Writes results.csv and summary.json (both deterministic given the config)
// plus timing.csv with per-cell wall time.
inline void emit_report(const EvalReport& report, const std::string& output_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(output_dir, ec);
    if (ec) throw std::runtime_error("cannot create " + output_dir + ": " + ec.message());
    const auto open = [&](const std::string& name) {
        std::ofstream f(fs::path(output_dir) / name);
        if (!f) throw std::runtime_error("cannot write " + (fs::path(output_dir) / name).string());
        return f;
    };
    {
        auto f = open("results.csv");
        write_results_csv(f, report);
    }
    {
        auto f = open("summary.json");
        f << summary_json(report).dump(2) << '\n';
    }
    {
        auto f = open("timing.csv");
        f << "method,log_gamma,seed,wall_seconds\n";
        for (const auto& r : report.rows)
            f << method_name(r.method) << ',' << r.log_gamma.label() << ',' << r.seed << ',' << r.wall_seconds << '\n';
    }
}

}  // namespace confhai
