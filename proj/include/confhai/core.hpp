#pragma once

// Domain types shared by every stage of the pipeline: the logged dataset,
// sensitivity levels, human cost, and the linear softmax maps used for the
// treatment policy, the router, and the baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace confhai {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Thrown when an iterative fit stops at its iteration cap.
class ConvergenceError : public std::runtime_error {
public:
    ConvergenceError(const std::string& what, double gradient_norm)
        : std::runtime_error(what), gradient_norm_(gradient_norm) {}
    double gradient_norm() const noexcept { return gradient_norm_; }

private:
    double gradient_norm_;
};

// Thrown when a gradient or objective evaluation produces NaN/inf.
class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(const std::string& what, std::size_t row)
        : std::runtime_error(what + " (row " + std::to_string(row) + ")"), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

// ---------------------------------------------------------------------------
// LoggedDataset
// ---------------------------------------------------------------------------

// One observational log. Rows are (x_i, t_i, y_i[, h_i]); y is a risk, lower is better.
struct LoggedDataset {
    Matrix covariates;                          // n x d
    std::vector<int> treatments;                // in [0, num_arms)
    Vector risks;                               // n
    std::optional<std::vector<int>> expert_ids; // in [0, num_experts) when present
    int num_arms = 2;
    int num_experts = 0;

    std::size_t size() const noexcept { return treatments.size(); }
    int dim() const noexcept { return static_cast<int>(covariates.cols()); }
    bool has_experts() const noexcept { return expert_ids.has_value(); }
    int expert(std::size_t i) const { return expert_ids ? (*expert_ids)[i] : 0; }

    std::vector<std::size_t> arm_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_arms, 0)), 0);
        for (int t : treatments)
            if (t >= 0 && t < num_arms) ++counts[static_cast<std::size_t>(t)];
        return counts;
    }

    std::vector<std::size_t> expert_counts() const {
        std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(num_experts, 0)), 0);
        if (expert_ids)
            for (int h : *expert_ids)
                if (h >= 0 && h < num_experts) ++counts[static_cast<std::size_t>(h)];
        return counts;
    }

    // Row subset in the given order; arm and expert counts are kept.
    LoggedDataset subset(const std::vector<std::size_t>& rows) const {
        LoggedDataset out;
        out.num_arms = num_arms;
        out.num_experts = num_experts;
        out.covariates.resize(static_cast<Eigen::Index>(rows.size()), covariates.cols());
        out.risks.resize(static_cast<Eigen::Index>(rows.size()));
        out.treatments.reserve(rows.size());
        if (expert_ids) out.expert_ids.emplace().reserve(rows.size());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            const auto i = static_cast<Eigen::Index>(rows[k]);
            out.covariates.row(static_cast<Eigen::Index>(k)) = covariates.row(i);
            out.risks(static_cast<Eigen::Index>(k)) = risks(i);
            out.treatments.push_back(treatments[rows[k]]);
            if (expert_ids) out.expert_ids->push_back((*expert_ids)[rows[k]]);
        }
        return out;
    }

    // Covariates with selected columns removed.
    LoggedDataset drop_columns(const std::vector<int>& columns) const {
        std::vector<int> keep;
        for (int j = 0; j < dim(); ++j)
            if (std::find(columns.begin(), columns.end(), j) == columns.end()) keep.push_back(j);
        LoggedDataset out = *this;
        out.covariates.resize(covariates.rows(), static_cast<Eigen::Index>(keep.size()));
        for (std::size_t k = 0; k < keep.size(); ++k)
            out.covariates.col(static_cast<Eigen::Index>(k)) = covariates.col(keep[k]);
        return out;
    }
};

struct ValidationReport {
    std::vector<std::string> violations;
    std::vector<std::string> warnings;

    bool ok() const noexcept { return violations.empty(); }
};

inline ValidationReport validate(const LoggedDataset& ds) {
    ValidationReport report;
    auto& bad = report.violations;
    const std::size_t n = ds.size();

    if (n == 0) bad.emplace_back("dataset is empty");
    if (ds.dim() < 1) bad.emplace_back("covariate dimension must be at least 1");
    if (static_cast<std::size_t>(ds.covariates.rows()) != n)
        bad.push_back("covariate rows (" + std::to_string(ds.covariates.rows()) +
                      ") do not match treatment count (" + std::to_string(n) + ")");
    if (static_cast<std::size_t>(ds.risks.size()) != n)
        bad.push_back("risk count (" + std::to_string(ds.risks.size()) +
                      ") does not match treatment count (" + std::to_string(n) + ")");
    if (ds.num_arms < 1) bad.emplace_back("treatment arm count must be at least 1");
    if (ds.expert_ids && ds.expert_ids->size() != n)
        bad.emplace_back("expert id count does not match treatment count");
    if (ds.expert_ids && ds.num_experts < 1) bad.emplace_back("expert ids present but expert count is 0");
    if (!bad.empty()) return report;

    for (std::size_t i = 0; i < n; ++i) {
        const int t = ds.treatments[i];
        if (t < 0 || t >= ds.num_arms) {
            bad.push_back("treatment out of range at row " + std::to_string(i) + ": " + std::to_string(t));
        }
        if (!std::isfinite(ds.risks(static_cast<Eigen::Index>(i))))
            bad.push_back("non-finite risk at row " + std::to_string(i));
        if (!ds.covariates.row(static_cast<Eigen::Index>(i)).allFinite())
            bad.push_back("non-finite covariate at row " + std::to_string(i));
        if (ds.expert_ids) {
            const int h = (*ds.expert_ids)[i];
            if (h < 0 || h >= ds.num_experts)
                bad.push_back("expert id out of range at row " + std::to_string(i) + ": " + std::to_string(h));
        }
    }

    const auto counts = ds.arm_counts();
    for (std::size_t t = 0; t < counts.size(); ++t)
        if (counts[t] == 0) report.warnings.push_back("empty treatment arm " + std::to_string(t));
    const auto experts = ds.expert_counts();
    for (std::size_t h = 0; h < experts.size(); ++h)
        if (experts[h] == 0) report.warnings.push_back("empty expert " + std::to_string(h));
    return report;
}

inline void require_valid(const LoggedDataset& ds) {
    const auto report = validate(ds);
    if (!report.ok()) throw std::invalid_argument("invalid dataset: " + report.violations.front());
}

// ---------------------------------------------------------------------------
// GammaSpec and CostModel
// ---------------------------------------------------------------------------

// MSM sensitivity level: one Γ for every row, or one Γ per expert.
class GammaSpec {
public:
    static GammaSpec uniform(double gamma) { return GammaSpec({gamma}, false); }
    static GammaSpec per_expert(std::vector<double> gammas) {
        if (gammas.empty()) throw std::invalid_argument("per-expert gamma needs at least one expert");
        return GammaSpec(std::move(gammas), true);
    }
    static GammaSpec from_log(double log_gamma) { return uniform(std::exp(log_gamma)); }
    static GammaSpec from_log(const std::vector<double>& log_gammas) {
        std::vector<double> g;
        g.reserve(log_gammas.size());
        for (double lg : log_gammas) g.push_back(std::exp(lg));
        return per_expert(std::move(g));
    }

    bool is_per_expert() const noexcept { return per_expert_; }
    std::size_t num_experts() const noexcept { return per_expert_ ? values_.size() : 0; }
    const std::vector<double>& values() const noexcept { return values_; }

    double at(int expert) const {
        if (!per_expert_) return values_.front();
        if (expert < 0 || static_cast<std::size_t>(expert) >= values_.size())
            throw std::out_of_range("expert id has no gamma: " + std::to_string(expert));
        return values_[static_cast<std::size_t>(expert)];
    }
    double max() const { return *std::max_element(values_.begin(), values_.end()); }

private:
    GammaSpec(std::vector<double> values, bool per_expert) : values_(std::move(values)), per_expert_(per_expert) {
        for (double g : values_)
            if (!(g >= 1.0) || !std::isfinite(g))
                throw std::invalid_argument("gamma must be finite and >= 1, got " + std::to_string(g));
    }

    std::vector<double> values_;
    bool per_expert_ = false;
};

// Per-query human cost C(x): a constant or one value per row.
class CostModel {
public:
    CostModel() = default;
    explicit CostModel(double constant) : constant_(constant) {
        if (!std::isfinite(constant) || constant < 0.0) throw std::invalid_argument("cost must be finite and >= 0");
    }
    explicit CostModel(Vector per_row) : per_row_(std::move(per_row)) {
        if (!per_row_->allFinite() || (per_row_->size() > 0 && per_row_->minCoeff() < 0.0))
            throw std::invalid_argument("costs must be finite and >= 0");
    }

    double at(std::size_t i) const {
        return per_row_ ? (*per_row_)(static_cast<Eigen::Index>(i)) : constant_;
    }
    bool is_constant() const noexcept { return !per_row_; }
    double constant() const noexcept { return constant_; }

    void check_rows(std::size_t n) const {
        if (per_row_ && static_cast<std::size_t>(per_row_->size()) != n)
            throw std::invalid_argument("per-row cost length does not match dataset");
    }

private:
    double constant_ = 0.0;
    std::optional<Vector> per_row_;
};

// ---------------------------------------------------------------------------
// Linear softmax maps
// ---------------------------------------------------------------------------

namespace detail {

// Packet exp returns denormals where std::exp gives 0; saturated logits must
// give exact zeros.
template <class Derived>
void exp_in_place(Eigen::ArrayBase<Derived>& a) {
    a = (a < -708.0).select(0.0, a.exp());
}

}  // namespace detail

// Logit magnitude that rounds softmax outputs to exact 0/1 in double precision.
inline constexpr double kSaturatedLogit = 1000.0;

inline double sigmoid(double z) noexcept {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Softmax over `outputs` classes on the augmented input [1; x], with the
// logit of output 0 pinned to zero. For two outputs this is the sigmoid
// σ(θᵀ[1; x]) for output 1. Parameters are (outputs - 1) x (d + 1), column 0
// being the intercept.
class LinearSoftmax {
public:
    LinearSoftmax() = default;
    LinearSoftmax(int outputs, int dim)
        : outputs_(outputs), params_(Matrix::Zero(std::max(outputs - 1, 0), dim + 1)) {
        if (outputs < 1 || dim < 0) throw std::invalid_argument("LinearSoftmax: bad shape");
    }
    LinearSoftmax(int outputs, Matrix params) : outputs_(outputs), params_(std::move(params)) {
        if (outputs < 1 || params_.rows() != outputs - 1 || params_.cols() < 1)
            throw std::invalid_argument("LinearSoftmax: parameter shape does not match output count");
        if (!params_.allFinite()) throw std::invalid_argument("LinearSoftmax: non-finite parameters");
    }

    int outputs() const noexcept { return outputs_; }
    int dim() const noexcept { return static_cast<int>(params_.cols()) - 1; }
    const Matrix& params() const noexcept { return params_; }
    Matrix& params() noexcept { return params_; }

    // Probabilities for a single input.
    Vector probabilities(const Vector& x) const { return probabilities(Eigen::Ref<const Vector>(x)); }
    Vector probabilities(const Eigen::Ref<const Vector>& x) const {
        Vector logits(outputs_);
        logits(0) = 0.0;
        if (outputs_ > 1) logits.tail(outputs_ - 1) = params_.col(0) + params_.rightCols(dim()) * x;
        return softmax(logits);
    }

    // n x outputs probability matrix for row-wise inputs.
    Matrix probabilities(const Matrix& X) const {
        const Eigen::Index n = X.rows();
        Matrix P(n, outputs_);
        if (outputs_ == 1) {
            P.setOnes();
            return P;
        }
        if (outputs_ == 2) {
            // one exp per row: σ(z) = 1 / (1 + e^{-|z|}) or its complement
            const Vector z = (X * params_.rightCols(dim()).row(0).transpose()).array() + params_(0, 0);
            Eigen::ArrayXd e = -z.array().abs();
            detail::exp_in_place(e);
            const Eigen::ArrayXd big = 1.0 / (1.0 + e);
            P.col(1) = (z.array() >= 0.0).select(big, e * big).matrix();
            P.col(0) = (z.array() >= 0.0).select(e * big, big).matrix();
            return P;
        }
        P.col(0).setZero();
        P.rightCols(outputs_ - 1) = (X * params_.rightCols(dim()).transpose()).rowwise() +
                                    params_.col(0).transpose();
        const Vector top = P.rowwise().maxCoeff();
        P.colwise() -= top;
        auto A = P.array();
        detail::exp_in_place(A);
        const Vector total = P.rowwise().sum();
        P.array().colwise() /= total.array();
        return P;
    }

    static Vector softmax(const Vector& logits) {
        const double top = logits.maxCoeff();
        Vector e = (logits.array() - top).exp().matrix();
        return e / e.sum();
    }

    // Chain rule through the softmax: given per-row upstream derivatives G
    // (n x outputs) of a scalar with respect to the probabilities P, returns
    // the derivative with respect to the parameters.
    static Matrix backprop(const Matrix& X, const Matrix& P, const Matrix& G) {
        const int outputs = static_cast<int>(P.cols());
        const Eigen::Index d = X.cols();
        Matrix grad = Matrix::Zero(std::max(outputs - 1, 0), d + 1);
        if (outputs == 1) return grad;
        // dz_k = P_k (G_k - <G, P>) for k >= 1
        const Vector inner = (G.array() * P.array()).rowwise().sum().matrix();
        Matrix dz = (P.rightCols(outputs - 1).array() *
                     (G.rightCols(outputs - 1).colwise() - inner).array()).matrix();
        grad.col(0) = dz.colwise().sum().transpose();
        grad.rightCols(d) = dz.transpose() * X;
        return grad;
    }

private:
    int outputs_ = 1;
    Matrix params_;
};

// Treatment policy π(t|x) over m arms.
class LinearPolicy {
public:
    LinearPolicy() = default;
    LinearPolicy(int num_arms, int dim) : map_(num_arms, dim) {}
    LinearPolicy(int num_arms, Matrix params) : map_(num_arms, std::move(params)) {}

    // π(arm|x) = 1 for every x, to double precision.
    static LinearPolicy deterministic(int arm, int num_arms, int dim) {
        LinearPolicy p(num_arms, dim);
        if (arm < 0 || arm >= num_arms) throw std::invalid_argument("deterministic policy: arm out of range");
        if (arm == 0)
            p.params().col(0).setConstant(-kSaturatedLogit);
        else
            p.params()(arm - 1, 0) = kSaturatedLogit;
        return p;
    }

    int num_arms() const noexcept { return map_.outputs(); }
    int dim() const noexcept { return map_.dim(); }
    const Matrix& params() const noexcept { return map_.params(); }
    Matrix& params() noexcept { return map_.params(); }
    const LinearSoftmax& map() const noexcept { return map_; }

    Vector probabilities(const Vector& x) const { return map_.probabilities(x); }
    Vector probabilities(const Eigen::Ref<const Vector>& x) const { return map_.probabilities(x); }
    Matrix probabilities(const Matrix& X) const { return map_.probabilities(X); }

private:
    LinearSoftmax map_;
};

enum class RouterKind { homogeneous, personalized };

// Router φ over destinations. Output 0 is always the algorithm. Homogeneous
// routers have one more output, the (randomly queried) human pool, so that
// φ(x) = probabilities(x)(1). Personalized routers have K expert outputs,
// output 1 + k being expert k.
class LinearRouter {
public:
    LinearRouter() = default;
    LinearRouter(RouterKind kind, int num_experts, int dim)
        : kind_(kind), map_(destinations_for(kind, num_experts), dim) {}
    LinearRouter(RouterKind kind, int num_experts, Matrix params)
        : kind_(kind), map_(destinations_for(kind, num_experts), std::move(params)) {}

    static LinearRouter homogeneous(int dim) { return LinearRouter(RouterKind::homogeneous, 1, dim); }
    static LinearRouter personalized(int num_experts, int dim) {
        return LinearRouter(RouterKind::personalized, num_experts, dim);
    }

    // Routes every input to the algorithm (φ ≡ 0), to double precision.
    static LinearRouter never_defer(RouterKind kind, int num_experts, int dim) {
        LinearRouter r(kind, num_experts, dim);
        r.params().col(0).setConstant(-kSaturatedLogit);
        return r;
    }
    // Routes every input to one destination (0 = algorithm, 1 + k = expert k).
    static LinearRouter constant_destination(RouterKind kind, int num_experts, int dim, int destination) {
        LinearRouter r(kind, num_experts, dim);
        if (destination < 0 || destination >= r.destinations())
            throw std::invalid_argument("router destination out of range");
        if (destination == 0)
            r.params().col(0).setConstant(-kSaturatedLogit);
        else
            r.params()(destination - 1, 0) = kSaturatedLogit;
        return r;
    }

    RouterKind kind() const noexcept { return kind_; }
    bool homogeneous() const noexcept { return kind_ == RouterKind::homogeneous; }
    int destinations() const noexcept { return map_.outputs(); }
    int num_experts() const noexcept { return destinations() - 1; }
    int dim() const noexcept { return map_.dim(); }
    const Matrix& params() const noexcept { return map_.params(); }
    Matrix& params() noexcept { return map_.params(); }
    const LinearSoftmax& map() const noexcept { return map_; }

    Vector probabilities(const Vector& x) const { return map_.probabilities(x); }
    Vector probabilities(const Eigen::Ref<const Vector>& x) const { return map_.probabilities(x); }
    Matrix probabilities(const Matrix& X) const { return map_.probabilities(X); }

    // Deterministic deployment rule: threshold 0.5 on the human probability
    // (homogeneous) or argmax over destinations (personalized; ties go to the
    // lowest index, i.e. the algorithm first).
    int hard_destination(const Eigen::Ref<const Vector>& x) const {
        const Vector p = probabilities(x);
        if (homogeneous()) return p(1) > 0.5 ? 1 : 0;
        Eigen::Index best = 0;
        p.maxCoeff(&best);
        return static_cast<int>(best);
    }

private:
    static int destinations_for(RouterKind kind, int num_experts) {
        if (kind == RouterKind::homogeneous) return 2;
        if (num_experts < 1) throw std::invalid_argument("personalized router needs at least one expert");
        return num_experts + 1;
    }

    RouterKind kind_ = RouterKind::homogeneous;
    LinearSoftmax map_{2, 0};
};

// Baseline π_c: a fixed arm (e.g. never-treat = arm 0) or a linear policy.
class BaselinePolicy {
public:
    struct FixedArm {
        int arm = 0;
    };

    BaselinePolicy() = default;
    static BaselinePolicy never_treat() { return BaselinePolicy(FixedArm{0}); }
    static BaselinePolicy fixed(int arm) { return BaselinePolicy(FixedArm{arm}); }
    static BaselinePolicy linear(LinearPolicy policy) { return BaselinePolicy(std::move(policy)); }

    bool is_fixed() const noexcept { return std::holds_alternative<FixedArm>(value_); }
    int fixed_arm() const { return std::get<FixedArm>(value_).arm; }
    const LinearPolicy& linear_policy() const { return std::get<LinearPolicy>(value_); }

    // n x num_arms probabilities.
    Matrix probabilities(const Matrix& X, int num_arms) const {
        if (const auto* f = std::get_if<FixedArm>(&value_)) {
            if (f->arm < 0 || f->arm >= num_arms) throw std::invalid_argument("baseline arm out of range");
            Matrix P = Matrix::Zero(X.rows(), num_arms);
            P.col(f->arm).setOnes();
            return P;
        }
        const auto& p = std::get<LinearPolicy>(value_);
        if (p.num_arms() != num_arms) throw std::invalid_argument("baseline policy arm count mismatch");
        return p.probabilities(X);
    }

private:
    explicit BaselinePolicy(FixedArm f) : value_(f) {}
    explicit BaselinePolicy(LinearPolicy p) : value_(std::move(p)) {}

    std::variant<FixedArm, LinearPolicy> value_{FixedArm{0}};
};

}  // namespace confhai
