#pragma once

// CSV datasets (`x0,...,x{d-1},t,y[,h]`), the synthetic truth side-car
// (`y0,y1,xi,u,pnominal,ptrue,h`), and JSON forms of fitted objects.

#include "confhai/core.hpp"
#include "confhai/propensity.hpp"
#include "confhai/synthgen.hpp"
#include "confhai/train.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace confhai {

using json = nlohmann::json;

namespace io_detail {

inline std::vector<std::string_view> split(std::string_view line, char sep = ',') {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(sep, start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline double parse_double(std::string_view s, std::size_t line) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw std::runtime_error("line " + std::to_string(line) + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

inline int parse_int(std::string_view s, std::size_t line) {
    const double v = parse_double(s, line);
    if (v != std::floor(v)) throw std::runtime_error("line " + std::to_string(line) + ": expected an integer");
    return static_cast<int>(v);
}

// Shortest representation that round-trips.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace io_detail

struct CsvReadOptions {
    int num_arms = 0;     // 0: max(t) + 1, at least 2
    int num_experts = 0;  // 0: max(h) + 1
};

inline LoggedDataset read_dataset_csv(std::istream& in, const CsvReadOptions& opt = {}) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("csv: missing header");
    const auto header = io_detail::split(line);
    int d = 0, t_col = -1, y_col = -1, h_col = -1;
    for (std::size_t c = 0; c < header.size(); ++c) {
        const auto name = io_detail::trim(header[c]);
        if (name == "x" + std::to_string(d) && static_cast<int>(c) == d) {
            ++d;
        } else if (name == "t") {
            t_col = static_cast<int>(c);
        } else if (name == "y") {
            y_col = static_cast<int>(c);
        } else if (name == "h") {
            h_col = static_cast<int>(c);
        } else {
            throw std::runtime_error("csv: unexpected header column '" + std::string(name) + "'");
        }
    }
    if (d < 1 || t_col < 0 || y_col < 0) throw std::runtime_error("csv: header must be x0,...,x{d-1},t,y[,h]");

    std::vector<std::vector<double>> xs;
    std::vector<int> ts, hs;
    std::vector<double> ys;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (io_detail::trim(line).empty()) continue;
        const auto cells = io_detail::split(line);
        if (cells.size() != header.size())
            throw std::runtime_error("csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                     " fields, expected " + std::to_string(header.size()));
        std::vector<double> x(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(j)] = io_detail::parse_double(cells[static_cast<std::size_t>(j)], lineno);
        xs.push_back(std::move(x));
        ts.push_back(io_detail::parse_int(cells[static_cast<std::size_t>(t_col)], lineno));
        ys.push_back(io_detail::parse_double(cells[static_cast<std::size_t>(y_col)], lineno));
        if (h_col >= 0) hs.push_back(io_detail::parse_int(cells[static_cast<std::size_t>(h_col)], lineno));
    }

    LoggedDataset ds;
    const auto n = static_cast<Eigen::Index>(xs.size());
    ds.covariates.resize(n, d);
    ds.risks.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) ds.covariates(i, j) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        ds.risks(i) = ys[static_cast<std::size_t>(i)];
    }
    ds.treatments = std::move(ts);
    int max_t = 0;
    for (int t : ds.treatments) max_t = std::max(max_t, t);
    ds.num_arms = opt.num_arms > 0 ? opt.num_arms : std::max(2, max_t + 1);
    if (h_col >= 0) {
        int max_h = 0;
        for (int h : hs) max_h = std::max(max_h, h);
        ds.num_experts = opt.num_experts > 0 ? opt.num_experts : max_h + 1;
        ds.expert_ids = std::move(hs);
    }
    return ds;
}

inline LoggedDataset read_dataset_csv(const std::string& path, const CsvReadOptions& opt = {}) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return read_dataset_csv(in, opt);
}

inline void write_dataset_csv(std::ostream& out, const LoggedDataset& ds) {
    for (int j = 0; j < ds.dim(); ++j) out << 'x' << j << ',';
    out << "t,y" << (ds.has_experts() ? ",h" : "") << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        for (int j = 0; j < ds.dim(); ++j) out << io_detail::format_double(ds.covariates(ii, j)) << ',';
        out << ds.treatments[i] << ',' << io_detail::format_double(ds.risks(ii));
        if (ds.has_experts()) out << ',' << ds.expert(i);
        out << '\n';
    }
}

inline void write_dataset_csv(const std::string& path, const LoggedDataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    write_dataset_csv(out, ds);
}

inline void write_truth_csv(std::ostream& out, const SyntheticTruth& truth) {
    out << "y0,y1,xi,u,pnominal,ptrue,h\n";
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        out << io_detail::format_double(truth.y0(ii)) << ',' << io_detail::format_double(truth.y1(ii)) << ','
            << truth.xi[i] << ',' << truth.u[i] << ',' << io_detail::format_double(truth.nominal(ii)) << ','
            << io_detail::format_double(truth.true_propensity(ii)) << ',' << truth.expert[i] << '\n';
    }
}

inline void write_truth_csv(const std::string& path, const SyntheticTruth& truth) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    write_truth_csv(out, truth);
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline json matrix_to_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const json& j) {
    if (!j.is_array()) throw std::runtime_error("expected a matrix (array of arrays)");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        const auto& row = j.at(static_cast<std::size_t>(i));
        if (static_cast<Eigen::Index>(row.size()) != cols) throw std::runtime_error("ragged matrix");
        for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
    }
    return m;
}

inline json to_json(const TrainedSystem& sys) {
    return json{
        {"policy_weights", matrix_to_json(sys.policy.params())},
        {"num_arms", sys.policy.num_arms()},
        {"router_weights", matrix_to_json(sys.router.params())},
        {"router_kind", sys.router.homogeneous() ? "homogeneous" : "personalized"},
        {"objective_trace", sys.objective_trace},
        {"objective", sys.objective},
        {"best_iteration", sys.best_iteration},
        {"certificates", {{"vs_baseline", sys.certificates.vs_baseline}, {"vs_human", sys.certificates.vs_human}}},
    };
}

// Reads `policy_weights` (and `num_arms`, default rows + 1) from a system or policy JSON.
inline LinearPolicy policy_from_json(const json& j) {
    Matrix w = matrix_from_json(j.at("policy_weights"));
    const int arms = j.contains("num_arms") ? j.at("num_arms").get<int>() : static_cast<int>(w.rows()) + 1;
    return LinearPolicy(arms, std::move(w));
}

inline json to_json(const PropensityModel& model) {
    return json{
        {"num_arms", model.num_arms()},
        {"coefficients", matrix_to_json(model.model().params())},
        {"epsilon", model.epsilon()},
        {"training_log_loss", model.training_log_loss()},
    };
}

inline json to_json(const CalibrationReport& r) {
    return json{
        {"gamma_ref", r.gamma_ref},
        {"quantile", r.quantile},
        {"per_row_ratio_summary", {{"min", r.ratio_min}, {"median", r.ratio_median}, {"max", r.ratio_max}}},
    };
}

}  // namespace confhai
