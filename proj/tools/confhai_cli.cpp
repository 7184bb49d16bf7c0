// confhai: command-line front end for the library.
//
// Exit codes: 0 success, 1 invalid input (data, flags, config), 2 runtime failure.

#include "confhai/confhai.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

using namespace confhai;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

// Thrown for bad user input; mapped to exit code 1.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

LoggedDataset load_valid(const std::string& path) {
    LoggedDataset ds;
    try {
        ds = read_dataset_csv(path);
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }
    const auto report = validate(ds);
    if (!report.ok()) {
        std::string msg = path + " is not a valid dataset:";
        for (const auto& v : report.violations) msg += "\n  " + v;
        throw InputError(msg);
    }
    return ds;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

int cmd_validate(const std::string& path) {
    LoggedDataset ds;
    try {
        ds = read_dataset_csv(path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    }
    const auto report = validate(ds);
    for (const auto& w : report.warnings) std::cout << "warning: " << w << '\n';
    for (const auto& v : report.violations) std::cout << "violation: " << v << '\n';
    std::cout << "rows " << ds.size() << ", covariates " << ds.dim() << ", arms " << ds.num_arms;
    if (ds.has_experts()) std::cout << ", experts " << ds.num_experts;
    std::cout << '\n' << (report.ok() ? "ok" : "invalid") << '\n';
    return report.ok() ? kOk : kInvalid;
}

struct FitArgs {
    std::string csv;
    double epsilon = 0.01;
    double regularization = 0.0;
    std::string out;
};

int cmd_fit_propensity(const FitArgs& a) {
    const auto ds = load_valid(a.csv);
    const auto model = fit_nominal_propensity(ds, a.regularization, a.epsilon);
    const json j = to_json(model);
    if (a.out.empty())
        std::cout << j.dump(2) << '\n';
    else
        write_json(a.out, j);
    return kOk;
}

struct CalibrateArgs {
    std::string csv;
    std::vector<int> z_cols;
    double quantile = 0.95;
    double epsilon = 0.01;
    double regularization = 0.0;
};

int cmd_calibrate(const CalibrateArgs& a) {
    const auto ds = load_valid(a.csv);
    for (int c : a.z_cols)
        if (c < 0 || c >= ds.dim()) throw InputError("--z-cols: column " + std::to_string(c) + " out of range");
    const auto report = calibrate_gamma(ds, a.z_cols, a.quantile, a.regularization, a.epsilon);
    json j = to_json(report);
    j["log_gamma_ref"] = std::log(report.gamma_ref);
    std::cout << j.dump(2) << '\n';
    return kOk;
}

struct TrainArgs {
    std::string csv;
    bool synthetic = false;
    std::size_t n = 2000;
    std::vector<double> log_gamma_true{2.5};
    std::string method = "confhai";
    std::optional<double> gamma;
    std::optional<double> log_gamma;
    std::vector<double> gamma_per_expert;
    double cost = 0.0;
    std::string baseline = "never-treat";
    std::string baseline_policy;
    std::uint64_t seed = 0;
    int iterations = 2000;
    double learning_rate = 0.05;
    std::string objective = "vs-baseline";
    double epsilon = 0.01;
    std::string out = "out";
};

LogGammaSpec train_log_gamma(const TrainArgs& a) {
    LogGammaSpec lg;
    if (!a.gamma_per_expert.empty()) {
        for (double g : a.gamma_per_expert) {
            if (!(g >= 1.0)) throw InputError("--gamma-per-expert entries must be >= 1");
            lg.values.push_back(std::log(g));
        }
    } else if (a.gamma) {
        if (!(*a.gamma >= 1.0)) throw InputError("--gamma must be >= 1");
        lg.values = {std::log(*a.gamma)};
    } else {
        lg.values = {a.log_gamma.value_or(0.0)};
        if (!(lg.values[0] >= 0.0)) throw InputError("--log-gamma must be >= 0");
    }
    return lg;
}

int cmd_train(const TrainArgs& a) {
    if (a.synthetic == !a.csv.empty()) throw InputError("train needs exactly one of <csv> or --synthetic");
    Method method;
    try {
        method = parse_method(a.method);
    } catch (const std::exception& e) {
        throw InputError(e.what());
    }

    ExperimentConfig cfg;
    cfg.cost = a.cost;
    cfg.propensity_epsilon = a.epsilon;
    cfg.train.iterations = a.iterations;
    cfg.train.learning_rate = a.learning_rate;
    cfg.train.seed = a.seed;
    if (a.objective == "vs-human")
        cfg.train.contrast = Contrast::human;
    else if (a.objective != "vs-baseline")
        throw InputError("--objective must be vs-baseline or vs-human");
    if (a.baseline == "csv-policy") {
        if (a.baseline_policy.empty()) throw InputError("--baseline csv-policy needs --baseline-policy FILE");
        try {
            cfg.baseline = BaselinePolicy::linear(read_policy_file(a.baseline_policy));
        } catch (const std::exception& e) {
            throw InputError(e.what());
        }
    } else if (a.baseline != "never-treat") {
        throw InputError("--baseline must be never-treat or csv-policy");
    }
    const LogGammaSpec lg = train_log_gamma(a);

    fs::create_directories(a.out);
    PreparedData data;
    if (a.synthetic) {
        SyntheticParams p;
        p.n = a.n;
        p.seed = a.seed;
        p.gamma_true.clear();
        for (double v : a.log_gamma_true) p.gamma_true.push_back(std::exp(v));
        auto draw = generate_synthetic(p);
        p.seed = harness_detail::splitmix64(a.seed);
        auto test = generate_synthetic(p);
        write_dataset_csv((fs::path(a.out) / "data.csv").string(), draw.data);
        write_truth_csv((fs::path(a.out) / "truth.csv").string(), draw.truth);
        data.train = std::move(draw.data);
        data.test = std::move(test.data);
        data.test_truth = std::move(test.truth);
    } else {
        data.train = load_valid(a.csv);
    }
    if (!data.train.has_experts() && method == Method::confhai_person)
        throw InputError("confhai-person needs an h column");
    fit_nuisances(data, cfg.propensity_epsilon, cfg.propensity_regularization);

    const MethodSystem sys = train_method(cfg, data, method, lg);
    const Certificates cert = certify_method(cfg, data, sys, lg);

    TrainedSystem out{sys.policy, sys.router, sys.objective_trace, 0.0, sys.best_iteration, cert};
    if (sys.best_iteration >= 0) out.objective = sys.objective_trace.at(static_cast<std::size_t>(sys.best_iteration));
    json j = to_json(out);
    j["method"] = method_name(method);
    j["log_gamma"] = lg.values;
    if (sys.best_iteration < 0) {
        j["objective"] = nullptr;
        j["best_iteration"] = nullptr;
    }
    if (data.test_truth) {
        const auto oracle =
            oracle_regret(sys.policy, sys.router, data.test, *data.test_truth, cfg.baseline, CostModel(cfg.cost));
        j["oracle_regret"] = oracle.regret;
        j["routing_fraction"] = oracle.routing_fraction;
    } else {
        j["routing_fraction"] = routing_fractions(sys.router, data.train.covariates);
    }
    write_json(fs::path(a.out) / "system.json", j);

    std::cout << std::setprecision(6) << "method " << method_name(method) << "  log-gamma " << lg.label()
              << "\ncertificate vs baseline " << cert.vs_baseline << "\ncertificate vs human    " << cert.vs_human
              << '\n';
    if (j.contains("oracle_regret")) std::cout << "oracle regret " << j["oracle_regret"].get<double>() << '\n';
    std::cout << "deploy: " << (cert.vs_baseline < 0.0 && cert.vs_human < 0.0 ? "yes" : "no")
              << " (both certificates must be negative)\nwrote " << (fs::path(a.out) / "system.json").string() << '\n';
    return kOk;
}

int cmd_sweep(const std::string& config_path, const std::string& out_override) {
    ExperimentConfig cfg;
    try {
        std::ifstream in(config_path);
        if (!in) throw std::runtime_error("cannot open " + config_path);
        const json j = json::parse(in);
        cfg = experiment_config_from_json(j, fs::path(config_path).parent_path());
        if (!out_override.empty()) cfg.output_dir = out_override;
    } catch (const std::exception& e) {
        throw InputError(std::string("config: ") + e.what());
    }
    const auto report = run_experiment(cfg);
    emit_report(report, cfg.output_dir);

    std::cout << std::left << std::setw(16) << "method" << std::setw(18) << "log_gamma" << std::setw(6) << "ok"
              << std::setw(14) << (report.has_truth ? "regret" : "cert_base") << "route_human\n";
    for (const auto& c : summarize(report)) {
        const double v = report.has_truth ? c.mean_regret : c.mean_certificate_vs_baseline;
        std::cout << std::setw(16) << method_name(c.method) << std::setw(18) << c.log_gamma.label() << std::setw(6)
                  << c.count << std::setw(14) << v << c.mean_human_fraction << '\n';
    }
    std::cout << "wrote " << cfg.output_dir << "/{results.csv,summary.json,timing.csv}\n";
    if (report.partial()) {
        for (const auto& r : report.rows)
            if (!r.ok()) std::cerr << method_name(r.method) << " seed " << r.seed << ": " << r.error << '\n';
        return kRuntime;
    }
    return kOk;
}

struct ToyArgs {
    double gamma = 0.3;
    std::size_t n = 50000;
    double msm_gamma = 4.0;
    int seeds = 1;
    int iterations = 2000;
};

int cmd_toy(const ToyArgs& a) {
    TrainConfig tc;
    tc.iterations = a.iterations;
    std::cout << "seed  human  ipw_treat  worst_treat  defer  team_risk\n" << std::fixed << std::setprecision(4);
    for (int s = 0; s < a.seeds; ++s) {
        const auto r = run_toy(a.n, a.gamma, a.msm_gamma, static_cast<std::uint64_t>(s), tc);
        std::cout << s << "  " << r.human_value << "  " << r.ipw_treat_value << "  " << r.worst_case_treat_value
                  << "  " << r.defer_fraction << "  " << r.team_risk << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training reallocates n-row buffers every iteration; keep them on the
    // heap instead of trimming and re-faulting pages each time.
    mallopt(M_MMAP_THRESHOLD, 64 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
    CLI::App app{"Confounding-robust human-AI deferral"};
    app.require_subcommand(1);

    std::string validate_csv;
    auto* validate_cmd = app.add_subcommand("validate", "check a logged-data CSV");
    validate_cmd->add_option("csv", validate_csv)->required();

    FitArgs fit;
    auto* fit_cmd = app.add_subcommand("fit-propensity", "fit the nominal propensity model");
    fit_cmd->add_option("csv", fit.csv)->required();
    fit_cmd->add_option("--epsilon", fit.epsilon, "clipping floor")->check(CLI::Range(1e-12, 0.4999999));
    fit_cmd->add_option("--regularization", fit.regularization)->check(CLI::NonNegativeNumber);
    fit_cmd->add_option("--out", fit.out, "write JSON here instead of stdout");

    CalibrateArgs cal;
    auto* cal_cmd = app.add_subcommand("calibrate-gamma", "reference Γ from dropping observed covariates");
    cal_cmd->add_option("csv", cal.csv)->required();
    cal_cmd->add_option("--z-cols", cal.z_cols, "covariate columns to drop")->required();
    cal_cmd->add_option("--quantile", cal.quantile)->check(CLI::Range(1e-9, 1.0));
    cal_cmd->add_option("--epsilon", cal.epsilon)->check(CLI::Range(1e-12, 0.4999999));
    cal_cmd->add_option("--regularization", cal.regularization)->check(CLI::NonNegativeNumber);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train one method on a CSV or a synthetic draw");
    train_cmd->add_option("csv", tr.csv);
    train_cmd->add_flag("--synthetic", tr.synthetic, "generate training data instead of reading a CSV");
    train_cmd->add_option("--n", tr.n, "synthetic rows")->check(CLI::PositiveNumber);
    train_cmd->add_option("--log-gamma-true", tr.log_gamma_true, "synthetic confounding, one or one per expert");
    train_cmd->add_option("--method", tr.method, "human|ao|confao|hai|confhai|confhai-person");
    auto* g = train_cmd->add_option("--gamma", tr.gamma, "specified Γ (>= 1)");
    auto* lgo = train_cmd->add_option("--log-gamma", tr.log_gamma, "specified log Γ");
    auto* gpe = train_cmd->add_option("--gamma-per-expert", tr.gamma_per_expert, "one Γ per expert");
    g->excludes(lgo)->excludes(gpe);
    lgo->excludes(gpe);
    train_cmd->add_option("--cost", tr.cost, "human deferral cost");
    train_cmd->add_option("--baseline", tr.baseline, "never-treat|csv-policy");
    train_cmd->add_option("--baseline-policy", tr.baseline_policy, "policy file for --baseline csv-policy");
    train_cmd->add_option("--seed", tr.seed);
    train_cmd->add_option("--iterations", tr.iterations)->check(CLI::PositiveNumber);
    train_cmd->add_option("--lr", tr.learning_rate)->check(CLI::PositiveNumber);
    train_cmd->add_option("--objective", tr.objective, "vs-baseline|vs-human");
    train_cmd->add_option("--epsilon", tr.epsilon, "propensity clipping floor")->check(CLI::Range(1e-12, 0.4999999));
    train_cmd->add_option("--out", tr.out, "output directory");

    std::string sweep_config, sweep_out;
    auto* sweep_cmd = app.add_subcommand("sweep", "run a Γ sweep from a JSON config");
    sweep_cmd->add_option("--config", sweep_config)->required();
    sweep_cmd->add_option("--out", sweep_out, "override the config's output directory");

    ToyArgs toy;
    auto* toy_cmd = app.add_subcommand("toy", "the single-covariate confounded toy problem");
    toy_cmd->add_option("--gamma", toy.gamma, "confounding strength in [0, 0.5)")->check(CLI::Range(0.0, 0.4999999));
    toy_cmd->add_option("--n", toy.n)->check(CLI::PositiveNumber);
    toy_cmd->add_option("--msm-gamma", toy.msm_gamma, "Γ used for the worst case and for training")
        ->check(CLI::Range(1.0, 1e12));
    toy_cmd->add_option("--seeds", toy.seeds)->check(CLI::PositiveNumber);
    toy_cmd->add_option("--iterations", toy.iterations)->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kInvalid;
    }

    try {
        if (*validate_cmd) return cmd_validate(validate_csv);
        if (*fit_cmd) return cmd_fit_propensity(fit);
        if (*cal_cmd) return cmd_calibrate(cal);
        if (*train_cmd) return cmd_train(tr);
        if (*sweep_cmd) return cmd_sweep(sweep_config, sweep_out);
        if (*toy_cmd) return cmd_toy(toy);
    } catch (const InputError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kInvalid;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kRuntime;
}
