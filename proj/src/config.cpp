#include "bmpc/config.hpp"

#include "json.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

namespace bmpc {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
    throw Error(ErrorCode::config, path + ": " + what);
}

const json& require(const json& obj, const std::string& key, const std::string& path) {
    if (!obj.is_object()) fail(path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(path, "missing required key \"" + key + "\"");
    return *it;
}

double number(const json& v, const std::string& path) {
    if (!v.is_number()) fail(path, "expected a number, got " + std::string(v.type_name()));
    return v.get<double>();
}

Index integer(const json& v, const std::string& path) {
    if (!v.is_number_integer()) fail(path, "expected an integer, got " + std::string(v.type_name()));
    return v.get<Index>();
}

// Accepts {"rows", "cols", "data" (row-major)}, a nested array of rows, or a
// bare number (1x1).
Matrix read_matrix(const json& v, const std::string& path) {
    if (v.is_number()) return Matrix::Constant(1, 1, v.get<double>());
    if (v.is_object()) {
        const Index rows = integer(require(v, "rows", path), path + ".rows");
        const Index cols = integer(require(v, "cols", path), path + ".cols");
        if (rows < 0 || cols < 0) fail(path, "negative dimensions");
        const json& data = require(v, "data", path);
        if (!data.is_array()) fail(path + ".data", "expected an array");
        if (static_cast<Index>(data.size()) != rows * cols) {
            fail(path + ".data", "has " + std::to_string(data.size()) + " entries, expected rows*cols = " +
                                     std::to_string(rows * cols));
        }
        Matrix m(rows, cols);
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j)
                m(i, j) = number(data[static_cast<size_t>(i * cols + j)],
                                 path + ".data[" + std::to_string(i * cols + j) + "] (row " +
                                     std::to_string(i) + ", col " + std::to_string(j) + ")");
        return m;
    }
    if (!v.is_array()) fail(path, "expected a matrix object or nested array");
    const Index rows = static_cast<Index>(v.size());
    if (rows == 0) return Matrix(0, 0);
    if (!v[0].is_array()) fail(path, "nested-array matrix rows must be arrays");
    const Index cols = static_cast<Index>(v[0].size());
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i) {
        const json& row = v[static_cast<size_t>(i)];
        if (!row.is_array()) fail(path + "[" + std::to_string(i) + "]", "expected an array");
        if (static_cast<Index>(row.size()) != cols) {
            fail(path, "row " + std::to_string(i) + " has " + std::to_string(row.size()) +
                           " entries, expected " + std::to_string(cols));
        }
        for (Index j = 0; j < cols; ++j)
            m(i, j) = number(row[static_cast<size_t>(j)],
                             path + "[" + std::to_string(i) + "][" + std::to_string(j) + "]");
    }
    return m;
}

Vector read_vector(const json& v, const std::string& path) {
    if (v.is_number()) return Vector::Constant(1, v.get<double>());
    if (!v.is_array()) fail(path, "expected an array of numbers");
    Vector x(static_cast<Index>(v.size()));
    for (size_t i = 0; i < v.size(); ++i) x(static_cast<Index>(i)) = number(v[i], path + "[" + std::to_string(i) + "]");
    return x;
}

void expect_shape(const Matrix& m, Index rows, Index cols, const std::string& path) {
    if (m.rows() != rows || m.cols() != cols) {
        fail(path, "is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
}

void expect_length(const Vector& v, Index n, const std::string& path) {
    if (v.size() != n) {
        fail(path, "has length " + std::to_string(v.size()) + ", expected " + std::to_string(n));
    }
}

std::vector<AffineStageConstraint> read_constraints(const json& v, Index n, Index m, Index N,
                                                    const std::string& path) {
    std::vector<AffineStageConstraint> out;
    if (v.is_null()) return out;
    if (!v.is_array()) fail(path, "expected an array of constraints");
    for (size_t k = 0; k < v.size(); ++k) {
        const std::string p = path + "[" + std::to_string(k) + "]";
        const json& c = v[k];
        AffineStageConstraint sc;
        sc.d = read_vector(require(c, "d", p), p + ".d");
        const Index r = sc.d.size();
        if (r < 1) fail(p + ".d", "needs at least one row");
        sc.Cx = c.contains("Cx") ? read_matrix(c["Cx"], p + ".Cx") : Matrix::Zero(r, n);
        sc.Cu = c.contains("Cu") ? read_matrix(c["Cu"], p + ".Cu") : Matrix::Zero(r, m);
        expect_shape(sc.Cx, r, n, p + ".Cx");
        expect_shape(sc.Cu, r, m, p + ".Cu");
        if (c.contains("stages")) {
            const json& st = c["stages"];
            if (!st.is_array() || st.size() != 2) fail(p + ".stages", "expected [first, last]");
            sc.first_stage = integer(st[0], p + ".stages[0]");
            sc.last_stage = integer(st[1], p + ".stages[1]");
        }
        try {
            validate_stage_constraint(sc, n, m, N);
        } catch (const Error& e) {
            fail(p, e.what());
        }
        out.push_back(std::move(sc));
    }
    return out;
}

json write_matrix(const Matrix& m) {
    json data = json::array();
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
    return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

json write_vector(const Vector& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json write_constraints(const std::vector<AffineStageConstraint>& cs) {
    json a = json::array();
    for (const auto& c : cs) {
        json o{{"Cx", write_matrix(c.Cx)}, {"Cu", write_matrix(c.Cu)}, {"d", write_vector(c.d)}};
        if (c.first_stage != 0 || c.last_stage >= 0) o["stages"] = json::array({c.first_stage, c.last_stage});
        a.push_back(o);
    }
    return a;
}

// Weights must be symmetric PSD (PD for R); checked here so the message
// names the config path rather than a derived stack.
void check_weight(const Matrix& w, Index size, bool definite, const std::string& path) {
    expect_shape(w, size, size, path);
    if ((w - w.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + w.cwiseAbs().maxCoeff())) {
        fail(path, "is not symmetric");
    }
    const double lo = Eigen::SelfAdjointEigenSolver<Matrix>(w).eigenvalues().minCoeff();
    const double scale = 1e-12 * (1.0 + w.cwiseAbs().maxCoeff());
    if (definite ? lo <= scale : lo < -scale) {
        fail(path, std::string("is not positive ") + (definite ? "definite" : "semidefinite") +
                       " (min eigenvalue " + std::to_string(lo) + ")");
    }
}

}  // namespace

ProblemConfig parse_config(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        fail("config", std::string("invalid JSON: ") + e.what());
    }
    if (!root.is_object()) fail("config", "top level must be an object");
    ProblemConfig cfg;
    const json& plant = require(root, "plant", "config");
    cfg.A = read_matrix(require(plant, "A", "plant"), "plant.A");
    cfg.B = read_matrix(require(plant, "B", "plant"), "plant.B");
    const Index n = cfg.A.rows();
    if (n < 1 || cfg.A.cols() != n) fail("plant.A", "must be square with n >= 1");
    if (cfg.B.rows() != n || cfg.B.cols() < 1) {
        fail("plant.B", "is " + std::to_string(cfg.B.rows()) + "x" + std::to_string(cfg.B.cols()) +
                            ", expected " + std::to_string(n) + "xm with m >= 1");
    }
    const Index m = cfg.B.cols();
    cfg.N = integer(require(root, "horizon", "config"), "horizon");
    if (cfg.N < 1) fail("horizon", "must be >= 1");

    const json& lower = require(root, "lower", "config");
    const json& lw = require(lower, "weights", "lower");
    if (lw.contains("Qbar") || lw.contains("Rbar")) {
        cfg.Qbar = read_matrix(require(lw, "Qbar", "lower.weights"), "lower.weights.Qbar");
        cfg.Rbar = read_matrix(require(lw, "Rbar", "lower.weights"), "lower.weights.Rbar");
        check_weight(*cfg.Qbar, cfg.N * n, false, "lower.weights.Qbar");
        check_weight(*cfg.Rbar, cfg.N * m, true, "lower.weights.Rbar");
    } else {
        cfg.Q = read_matrix(require(lw, "Q", "lower.weights"), "lower.weights.Q");
        cfg.R = read_matrix(require(lw, "R", "lower.weights"), "lower.weights.R");
        cfg.P = lw.contains("P") ? read_matrix(lw["P"], "lower.weights.P") : cfg.Q;
        check_weight(cfg.Q, n, false, "lower.weights.Q");
        check_weight(cfg.P, n, false, "lower.weights.P");
        check_weight(cfg.R, m, true, "lower.weights.R");
    }
    cfg.lower_constraints = read_constraints(lower.value("constraints", json()), n, m, cfg.N, "lower.constraints");

    const json& upper = require(root, "upper", "config");
    cfg.x_target = read_vector(require(upper, "x_target", "upper"), "upper.x_target");
    cfg.u_target = upper.contains("u_target") ? read_vector(upper["u_target"], "upper.u_target") : Vector::Zero(m);
    expect_length(cfg.x_target, n, "upper.x_target");
    expect_length(cfg.u_target, m, "upper.u_target");
    const json& uw = require(upper, "weights", "upper");
    cfg.Qu = read_matrix(require(uw, "Q", "upper.weights"), "upper.weights.Q");
    cfg.Ru = read_matrix(require(uw, "R", "upper.weights"), "upper.weights.R");
    cfg.Pu = uw.contains("P") ? read_matrix(uw["P"], "upper.weights.P") : cfg.Qu;
    check_weight(cfg.Qu, n, false, "upper.weights.Q");
    check_weight(cfg.Pu, n, false, "upper.weights.P");
    check_weight(cfg.Ru, m, true, "upper.weights.R");
    cfg.upper_constraints = read_constraints(upper.value("constraints", json()), n, m, cfg.N, "upper.constraints");

    cfg.x0 = read_vector(require(root, "x0", "config"), "x0");
    expect_length(cfg.x0, n, "x0");

    if (root.contains("tolerances")) {
        const json& t = root["tolerances"];
        if (!t.is_object()) fail("tolerances", "expected an object");
        auto opt = [&](const char* key, double& dst) {
            if (!t.contains(key)) return;
            dst = number(t[key], std::string("tolerances.") + key);
            if (!(dst > 0.0)) fail(std::string("tolerances.") + key, "must be positive");
        };
        if (t.contains("rank_rtol") && !t["rank_rtol"].is_null()) {
            double r = 0.0;
            opt("rank_rtol", r);
            cfg.tol.rank_rtol = r;
        }
        opt("gamma_rtol", cfg.tol.gamma_rtol);
        opt("blocking_rtol", cfg.tol.blocking_rtol);
        opt("qp_kkt", cfg.tol.qp_kkt);
        opt("qp_feas", cfg.tol.qp_feas);
        opt("qp_active", cfg.tol.qp_active);
        opt("cert_active", cfg.tol.cert_active);
        opt("settle", cfg.tol.settle);
    }
    if (root.contains("sampling")) {
        const json& s = root["sampling"];
        if (!s.is_object()) fail("sampling", "expected an object");
        if (s.contains("samples")) {
            cfg.sampling.samples = static_cast<int>(integer(s["samples"], "sampling.samples"));
            if (cfg.sampling.samples < 1) fail("sampling.samples", "must be >= 1");
        }
        if (s.contains("half_width")) {
            cfg.sampling.half_width = read_vector(s["half_width"], "sampling.half_width");
            expect_length(cfg.sampling.half_width, n, "sampling.half_width");
            if (cfg.sampling.half_width.minCoeff() < 0.0) fail("sampling.half_width", "must be nonnegative");
        }
        if (s.contains("seed")) {
            const Index seed = integer(s["seed"], "sampling.seed");
            if (seed < 0) fail("sampling.seed", "must be nonnegative");
            cfg.sampling.seed = static_cast<std::uint64_t>(seed);
        }
    }
    return cfg;
}

ProblemConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(path, "cannot open file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string dump_config(const ProblemConfig& cfg) {
    json root;
    root["plant"] = {{"A", write_matrix(cfg.A)}, {"B", write_matrix(cfg.B)}};
    root["horizon"] = cfg.N;
    json lw;
    if (cfg.Qbar && cfg.Rbar) {
        lw = {{"Qbar", write_matrix(*cfg.Qbar)}, {"Rbar", write_matrix(*cfg.Rbar)}};
    } else {
        lw = {{"Q", write_matrix(cfg.Q)}, {"P", write_matrix(cfg.P)}, {"R", write_matrix(cfg.R)}};
    }
    root["lower"] = {{"weights", lw}, {"constraints", write_constraints(cfg.lower_constraints)}};
    root["upper"] = {{"weights", {{"Q", write_matrix(cfg.Qu)}, {"P", write_matrix(cfg.Pu)}, {"R", write_matrix(cfg.Ru)}}},
                     {"x_target", write_vector(cfg.x_target)},
                     {"u_target", write_vector(cfg.u_target)},
                     {"constraints", write_constraints(cfg.upper_constraints)}};
    root["x0"] = write_vector(cfg.x0);
    json t{{"gamma_rtol", cfg.tol.gamma_rtol},     {"blocking_rtol", cfg.tol.blocking_rtol},
           {"qp_kkt", cfg.tol.qp_kkt},             {"qp_feas", cfg.tol.qp_feas},
           {"qp_active", cfg.tol.qp_active},       {"cert_active", cfg.tol.cert_active},
           {"settle", cfg.tol.settle}};
    if (cfg.tol.rank_rtol) t["rank_rtol"] = *cfg.tol.rank_rtol;
    root["tolerances"] = t;
    json s{{"samples", cfg.sampling.samples}, {"seed", cfg.sampling.seed}};
    if (cfg.sampling.half_width.size() > 0) s["half_width"] = write_vector(cfg.sampling.half_width);
    root["sampling"] = s;
    // nlohmann prints doubles with the shortest round-trip representation,
    // which never needs more than 17 significant digits.
    return root.dump(2) + "\n";
}

void save_config(const ProblemConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(path, "cannot open file for writing");
    out << dump_config(cfg);
}

ProblemConfig toy_config() {
    const double ts = 0.3;
    ProblemConfig cfg;
    cfg.A.resize(2, 2);
    cfg.A << 1.0, ts, 0.0, 1.0;
    cfg.B.resize(2, 1);
    cfg.B << 0.5 * ts * ts, ts;
    cfg.N = 10;
    cfg.Q = Matrix::Identity(2, 2);
    cfg.P = Matrix::Identity(2, 2);
    cfg.R = 0.1 * Matrix::Identity(1, 1);
    AffineStageConstraint box;
    box.Cx = Matrix::Zero(2, 2);
    box.Cu.resize(2, 1);
    box.Cu << 1.0, -1.0;
    box.d = Vector::Ones(2);
    cfg.lower_constraints = {box};
    AffineStageConstraint pos;
    pos.Cx.resize(1, 2);
    pos.Cx << 1.0, 0.0;
    pos.Cu = Matrix::Zero(1, 1);
    pos.d = Vector::Zero(1);
    cfg.upper_constraints = {pos};
    cfg.x_target.resize(2);
    cfg.x_target << 1.0, 0.0;
    cfg.u_target = Vector::Zero(1);
    cfg.Qu = cfg.Q;
    cfg.Pu = cfg.P;
    cfg.Ru = cfg.R;
    cfg.x0.resize(2);
    cfg.x0 << -1.0, 0.0;
    cfg.sampling.half_width = Vector::Constant(2, 0.2);
    return cfg;
}

BilevelInstance make_instance(const ProblemConfig& cfg) {
    const char* stage = "plant";
    try {
        const LtiPlant plant(cfg.A, cfg.B, cfg.tol.rank_rtol);
        stage = "lower.weights";
        Matrix Qbar;
        Matrix Rbar;
        if (cfg.Qbar && cfg.Rbar) {
            Qbar = *cfg.Qbar;
            Rbar = *cfg.Rbar;
        } else {
            std::tie(Qbar, Rbar) = blkdiag_weights(cfg.Q, cfg.P, cfg.R, cfg.N);
        }
        stage = "instance";
        StageCost cost{cfg.x_target, cfg.u_target, cfg.Qu, cfg.Ru, cfg.Pu};
        InstanceOptions opts;
        opts.rank_rtol = cfg.tol.rank_rtol;
        opts.gamma_rtol = cfg.tol.gamma_rtol;
        return BilevelInstance(plant, cfg.N, Qbar, Rbar, cfg.lower_constraints, cfg.upper_constraints,
                               cost, opts);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::config) throw;
        throw Error(ErrorCode::config, std::string(stage) + ": " + e.what() + " [" + to_string(e.code()) + "]");
    }
}

QpTolerances qp_tolerances(const ProblemConfig& cfg) {
    QpTolerances t;
    t.kkt = cfg.tol.qp_kkt;
    t.feas = cfg.tol.qp_feas;
    t.active = cfg.tol.qp_active;
    return t;
}

std::uint64_t sampling_seed(const ProblemConfig& cfg) {
    if (const char* env = std::getenv("BMPC_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end != env && *end == '\0') return static_cast<std::uint64_t>(v);
    }
    return cfg.sampling.seed;
}

std::vector<Vector> sample_box(const Vector& center, const Vector& half_width, int count,
                               std::uint64_t seed) {
    if (half_width.size() != center.size()) {
        throw Error(ErrorCode::dimension_mismatch, "sample_box: half_width and center lengths differ");
    }
    std::mt19937_64 gen(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<Vector> out;
    out.reserve(static_cast<size_t>(std::max(count, 0)));
    for (int k = 0; k < count; ++k) {
        Vector x = center;
        for (Index i = 0; i < x.size(); ++i) x(i) += half_width(i) * unit(gen);
        out.push_back(std::move(x));
    }
    return out;
}

}  // namespace bmpc
