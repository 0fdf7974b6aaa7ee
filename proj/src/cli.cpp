#include "advspde/cli.hpp"

#include "advspde/rng.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#ifndef ADVSPDE_VERSION
#define ADVSPDE_VERSION "0.0.0"
#endif

namespace advspde::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double value) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, sep)) parts.push_back(trim(item));
    if (!s.empty() && s.back() == sep) parts.emplace_back();
    return parts;
}

double to_double(const std::string& text, const std::string& what, ErrorKind kind = ErrorKind::Config) {
    const std::string s = trim(text);
    char* end = nullptr;
    const double value = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) fail(kind, what + ": not a number: '" + text + "'");
    return value;
}

long to_long(const std::string& text, const std::string& what) {
    const std::string s = trim(text);
    char* end = nullptr;
    const long value = std::strtol(s.c_str(), &end, 10);
    if (s.empty() || end != s.c_str() + s.size()) fail(ErrorKind::Config, what + ": not an integer: '" + text + "'");
    return value;
}

std::uint64_t to_u64(const std::string& text, const std::string& what) {
    const std::string s = trim(text);
    char* end = nullptr;
    const unsigned long long value = std::strtoull(s.c_str(), &end, 10);
    if (s.empty() || s[0] == '-' || end != s.c_str() + s.size())
        fail(ErrorKind::Config, what + ": not an unsigned integer: '" + text + "'");
    return value;
}

bool to_bool(const std::string& text, const std::string& what) {
    const std::string s = trim(text);
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    fail(ErrorKind::Config, what + ": not a boolean: '" + text + "'");
}

std::string join_methods(const std::vector<Method>& methods) {
    std::string out;
    for (const Method m : methods) out += (out.empty() ? "" : ",") + std::string(to_string(m));
    return out;
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
    std::string name() const { return section + "." + key; }
};

template <class Get>
Field real(const char* section, const char* key, Get get) {
    const std::string what = std::string(section) + "." + key;
    return {section, key, [=](RunConfig& c, const std::string& v) { get(c) = to_double(v, what); },
            [=](const RunConfig& c) { return fmt(get(c)); }};
}

template <class Get>
Field integer(const char* section, const char* key, Get get) {
    const std::string what = std::string(section) + "." + key;
    return {section, key,
            [=](RunConfig& c, const std::string& v) {
                using T = std::remove_reference_t<decltype(get(c))>;
                const long value = to_long(v, what);
                if (value < std::numeric_limits<T>::min() || value > std::numeric_limits<T>::max())
                    fail(ErrorKind::Config, what + ": out of range");
                get(c) = static_cast<T>(value);
            },
            [=](const RunConfig& c) { return std::to_string(get(c)); }};
}

template <class Get>
Field flag(const char* section, const char* key, Get get) {
    const std::string what = std::string(section) + "." + key;
    return {section, key, [=](RunConfig& c, const std::string& v) { get(c) = to_bool(v, what); },
            [=](const RunConfig& c) { return std::string(get(c) ? "true" : "false"); }};
}

Field u64(const char* section, const char* key, std::uint64_t RunConfig::*member) {
    const std::string what = std::string(section) + "." + key;
    return {section, key, [=](RunConfig& c, const std::string& v) { c.*member = to_u64(v, what); },
            [=](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field choice(const char* section, const char* key, std::function<void(RunConfig&, const std::string&)> set,
             std::function<std::string(const RunConfig&)> get) {
    return {section, key, std::move(set), std::move(get)};
}

Method parse_method_or_config(const std::string& name) {
    try {
        return parse_method(name);
    } catch (const Error& e) {
        fail(ErrorKind::Config, e.what());
    }
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        choice("run", "workflow", [](RunConfig& c, const std::string& v) { c.workflow = parse_workflow(v); },
               [](const RunConfig& c) { return std::string(to_string(c.workflow)); }),
        u64("run", "seed", &RunConfig::seed),
        integer("run", "threads", [](auto& c) -> auto& { return c.threads; }),
        choice("run", "out", [](RunConfig& c, const std::string& v) { c.out = v; },
               [](const RunConfig& c) { return c.out.string(); }),

        real("mesh", "x_min", [](auto& c) -> auto& { return c.mesh.x.lo; }),
        real("mesh", "x_max", [](auto& c) -> auto& { return c.mesh.x.hi; }),
        real("mesh", "y_min", [](auto& c) -> auto& { return c.mesh.y.lo; }),
        real("mesh", "y_max", [](auto& c) -> auto& { return c.mesh.y.hi; }),
        integer("mesh", "nx", [](auto& c) -> auto& { return c.mesh.nx; }),
        integer("mesh", "ny", [](auto& c) -> auto& { return c.mesh.ny; }),
        choice("mesh", "padding",
               [](RunConfig& c, const std::string& v) {
                   if (v == "auto")
                       c.mesh.padding.reset();
                   else
                       c.mesh.padding = to_double(v, "mesh.padding");
               },
               [](const RunConfig& c) { return c.mesh.padding ? fmt(*c.mesh.padding) : std::string("auto"); }),

        integer("model", "alpha", [](auto& c) -> auto& { return c.model.alpha; }),
        integer("model", "alpha_s", [](auto& c) -> auto& { return c.model.alpha_s; }),
        real("model", "h11", [](auto& c) -> auto& { return c.model.H(0, 0); }),
        choice(
            "model", "h12",
            [](RunConfig& c, const std::string& v) {
                c.model.H(0, 1) = c.model.H(1, 0) = to_double(v, "model.h12");
            },
            [](const RunConfig& c) { return fmt(c.model.H(0, 1)); }),
        real("model", "h22", [](auto& c) -> auto& { return c.model.H(1, 1); }),
        choice(
            "model", "stabilize",
            [](RunConfig& c, const std::string& v) { c.model.stabilize = parse_stabilization(v); },
            [](const RunConfig& c) { return std::string(to_string(c.model.stabilize)); }),
        flag("model", "correct_tau", [](auto& c) -> auto& { return c.model.correct_tau; }),
        real("model", "dt", [](auto& c) -> auto& { return c.model.dt; }),
        integer("model", "num_steps", [](auto& c) -> auto& { return c.model.num_steps; }),
        choice(
            "model", "initial_cov",
            [](RunConfig& c, const std::string& v) { c.model.initial_cov = parse_initial_cov_mode(v); },
            [](const RunConfig& c) { return std::string(to_string(c.model.initial_cov)); }),
        integer("model", "dense_cap", [](auto& c) -> auto& { return c.model.dense_cap; }),
        integer("model", "direct_cap", [](auto& c) -> auto& { return c.model.direct_cap; }),
        integer("model", "burn_in", [](auto& c) -> auto& { return c.model.burn_in; }),

        real("parameters", "kappa", [](auto& c) -> auto& { return c.params.theta.kappa; }),
        real("parameters", "gamma_x", [](auto& c) -> auto& { return c.params.theta.gamma.x(); }),
        real("parameters", "gamma_y", [](auto& c) -> auto& { return c.params.theta.gamma.y(); }),
        real("parameters", "c", [](auto& c) -> auto& { return c.params.theta.c; }),
        real("parameters", "tau", [](auto& c) -> auto& { return c.params.theta.tau; }),
        real("parameters", "sigma0", [](auto& c) -> auto& { return c.params.sigma0; }),
        choice(
            "parameters", "b",
            [](RunConfig& c, const std::string& v) {
                const auto parts = trim(v).empty() ? std::vector<std::string>{} : split(v, ',');
                c.params.b.resize(static_cast<int>(parts.size()));
                for (std::size_t i = 0; i < parts.size(); ++i)
                    c.params.b[static_cast<int>(i)] = to_double(parts[i], "parameters.b");
            },
            [](const RunConfig& c) {
                std::string out;
                for (int i = 0; i < c.params.b.size(); ++i) out += (i ? "," : "") + fmt(c.params.b[i]);
                return out;
            }),
        flag("parameters", "init_from_params", [](auto& c) -> auto& { return c.init_from_params; }),

        choice(
            "solver", "method",
            [](RunConfig& c, const std::string& v) { c.estimate.likelihood.method = parse_method_or_config(v); },
            [](const RunConfig& c) { return std::string(to_string(c.estimate.likelihood.method)); }),
        integer("solver", "chebyshev_order", [](auto& c) -> auto& { return c.estimate.likelihood.chebyshev_order; }),
        integer("solver", "num_probes", [](auto& c) -> auto& { return c.estimate.likelihood.num_probes; }),
        choice(
            "solver", "probe_seed",
            [](RunConfig& c, const std::string& v) { c.estimate.likelihood.probe_seed = to_u64(v, "solver.probe_seed"); },
            [](const RunConfig& c) { return std::to_string(c.estimate.likelihood.probe_seed); }),
        real("solver", "cg_tol", [](auto& c) -> auto& { return c.estimate.likelihood.cg_tol; }),
        integer("solver", "cg_max_iters", [](auto& c) -> auto& { return c.estimate.likelihood.cg_max_iters; }),
        choice(
            "solver", "preconditioner",
            [](RunConfig& c, const std::string& v) {
                c.estimate.likelihood.preconditioner = parse_preconditioner(v);
            },
            [](const RunConfig& c) { return std::string(to_string(c.estimate.likelihood.preconditioner)); }),
        flag("solver", "precondition_logdet",
             [](auto& c) -> auto& { return c.estimate.likelihood.precondition_logdet; }),

        real("estimate", "fd_step", [](auto& c) -> auto& { return c.estimate.fd_step; }),
        real("estimate", "gradient_tol", [](auto& c) -> auto& { return c.estimate.gradient_tol; }),
        real("estimate", "relative_tol", [](auto& c) -> auto& { return c.estimate.relative_tol; }),
        real("estimate", "loglik_tol", [](auto& c) -> auto& { return c.estimate.loglik_tol; }),
        real("estimate", "forward_gradient_above", [](auto& c) -> auto& { return c.estimate.forward_gradient_above; }),
        integer("estimate", "max_iterations", [](auto& c) -> auto& { return c.estimate.max_iterations; }),
        flag("estimate", "profile_b", [](auto& c) -> auto& { return c.estimate.profile_b; }),

        choice("data", "observations", [](RunConfig& c, const std::string& v) { c.data.observations = trim(v); },
               [](const RunConfig& c) { return c.data.observations.string(); }),
        choice(
            "data", "time",
            [](RunConfig& c, const std::string& v) {
                const std::string s = trim(v);
                if (s != "index" && s != "real") fail(ErrorKind::Config, "data.time must be index or real");
                c.data.real_time = s == "real";
            },
            [](const RunConfig& c) { return std::string(c.data.real_time ? "real" : "index"); }),
        real("data", "t0", [](auto& c) -> auto& { return c.data.t0; }),
        flag("data", "intercept", [](auto& c) -> auto& { return c.data.intercept; }),

        integer("simulate", "stations", [](auto& c) -> auto& { return c.simulate.stations; }),

        integer("predict", "horizon", [](auto& c) -> auto& { return c.predict.horizon; }),
        integer("predict", "realizations", [](auto& c) -> auto& { return c.predict.realizations; }),

        integer("benchmark", "replicates", [](auto& c) -> auto& { return c.benchmark.replicates; }),
        integer("benchmark", "stations", [](auto& c) -> auto& { return c.benchmark.stations; }),
        choice(
            "benchmark", "methods",
            [](RunConfig& c, const std::string& v) {
                c.benchmark.methods.clear();
                for (const auto& part : split(v, ',')) c.benchmark.methods.push_back(parse_method_or_config(part));
            },
            [](const RunConfig& c) { return join_methods(c.benchmark.methods); }),
    };
    return table;
}

json config_json(const RunConfig& config) {
    json out = json::object();
    for (const auto& f : fields()) out[f.section][f.key] = f.get(config);
    return out;
}

json params_json(const FullParams& psi) {
    json b = json::array();
    for (int i = 0; i < psi.b.size(); ++i) b.push_back(psi.b[i]);
    return {{"kappa", psi.theta.kappa}, {"gamma_x", psi.theta.gamma.x()}, {"gamma_y", psi.theta.gamma.y()},
            {"c", psi.theta.c},         {"tau", psi.theta.tau},           {"b", b},
            {"sigma0", psi.sigma0}};
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::InvalidParameter:
        case ErrorKind::InvalidDomain:
        case ErrorKind::InvalidInterval:
        case ErrorKind::UnsupportedExponent:
        case ErrorKind::InvalidCall:
            return 2;
        case ErrorKind::Data:
        case ErrorKind::DegenerateData:
        case ErrorKind::EmptyData:
        case ErrorKind::OutOfDomain:
        case ErrorKind::DimensionMismatch:
        case ErrorKind::Init:
            return 3;
        default:
            return 4;
    }
}

json error_json(const Error& e) {
    json out = {{"kind", to_string(e.kind())}, {"message", e.what()}, {"exit_code", exit_code(e.kind())}};
    if (const auto* spd = dynamic_cast<const NotSpdError*>(&e)) out["pivot"] = spd->pivot();
    if (const auto* conv = dynamic_cast<const ConvergenceError*>(&e)) {
        out["residual"] = conv->residual();
        out["iterations"] = conv->iterations();
    }
    return out;
}

void validate_run(const RunConfig& c) {
    require(c.threads >= 1, ErrorKind::Config, "threads must be at least 1");
    require(c.mesh.nx >= 2 && c.mesh.ny >= 2, ErrorKind::Config, "mesh needs at least 2 x 2 nodes");
    require(c.simulate.stations >= 0, ErrorKind::Config, "simulate.stations must be non-negative");
    require(c.predict.horizon >= 0, ErrorKind::Config, "predict.horizon must be non-negative");
    require(c.predict.realizations >= 1, ErrorKind::Config, "predict.realizations must be at least 1");
    require(c.benchmark.replicates >= 1, ErrorKind::Config, "benchmark.replicates must be at least 1");
    require(c.benchmark.stations >= 1, ErrorKind::Config, "benchmark.stations must be at least 1");
    require(!c.benchmark.methods.empty(), ErrorKind::Config, "benchmark.methods is empty");
    require(c.params.sigma0 > 0.0, ErrorKind::Config, "parameters.sigma0 must be positive");
    validate(c.model);
}

}  // namespace

double resolve_padding(const RunConfig& c) {
    if (c.mesh.padding) return *c.mesh.padding;
    const int alpha_total = c.model.alpha_total();
    const double nu = alpha_total > 1 ? alpha_total - 1.0 : 0.5;
    const double stretch = std::sqrt(Eigen::SelfAdjointEigenSolver<Mat2>(c.model.H).eigenvalues().maxCoeff());
    return stretch * std::sqrt(8.0 * nu) / c.params.theta.kappa;
}

TriangularMesh make_mesh(const RunConfig& c) {
    return build_grid_mesh(c.mesh.x, c.mesh.y, c.mesh.nx, c.mesh.ny, resolve_padding(c));
}

namespace {

/// Stacks the rows of a field into the time-major latent vector.
Vector stack_field(const DenseMatrix& field) {
    const int ns = static_cast<int>(field.cols());
    Vector x(field.size());
    for (int k = 0; k < field.rows(); ++k) x.segment(k * ns, ns) = field.row(k).transpose();
    return x;
}

/// Station observations of `field` with nugget sigma0 and fixed effects Lambda b.
ObservationSet observe(const TriangularMesh& mesh, const ModelConfig& model, const DenseMatrix& field,
                       const std::vector<Vec2>& stations, const FullParams& psi, bool intercept,
                       std::uint64_t noise_key) {
    std::vector<SpaceTimePoint> points;
    points.reserve(stations.size() * static_cast<std::size_t>(model.num_blocks()));
    for (int k = 0; k < model.num_blocks(); ++k)
        for (const Vec2& s : stations) points.push_back({k, s.x(), s.y()});
    const int n = static_cast<int>(points.size());
    DenseMatrix covariates = intercept ? DenseMatrix::Ones(n, 1) : DenseMatrix(n, 0);
    ObservationSet obs = make_observations(mesh, points, Vector::Zero(n), covariates, model.num_blocks());
    Vector b = psi.b;
    if (b.size() == 0) b = Vector::Zero(obs.num_covariates());
    require(b.size() == obs.num_covariates(), ErrorKind::Config,
            "parameters.b has " + std::to_string(b.size()) + " entries for " +
                std::to_string(obs.num_covariates()) + " covariates");
    obs.y = obs.projection * stack_field(field) + obs.covariates * b + psi.sigma0 * standard_normal(noise_key, n);
    return obs;
}

std::vector<Vec2> sample_stations(const MeshSpec& spec, int count, std::uint64_t key) {
    const Vector u = uniform01(key, 2 * count);
    std::vector<Vec2> stations;
    stations.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        stations.emplace_back(spec.x.lo + u[2 * i] * spec.x.extent(), spec.y.lo + u[2 * i + 1] * spec.y.extent());
    return stations;
}

FullParams with_b(FullParams psi, int q) {
    if (psi.b.size() == 0) psi.b = Vector::Zero(q);
    require(psi.b.size() == q, ErrorKind::Config,
            "parameters.b has " + std::to_string(psi.b.size()) + " entries for " + std::to_string(q) + " covariates");
    return psi;
}

void ensure_output_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) fail(ErrorKind::Config, "cannot create output directory " + dir.string());
    const fs::path probe = dir / ".write_probe";
    {
        std::ofstream out(probe);
        if (!out) fail(ErrorKind::Config, "output directory is not writable: " + dir.string());
    }
    fs::remove(probe, ec);
}

void require_input(const fs::path& path) {
    if (path.empty()) fail(ErrorKind::Data, "data.observations is not set");
    if (!fs::is_regular_file(path)) fail(ErrorKind::Data, "observation file not found: " + path.string());
}

std::string iterations_csv(const EstimateReport& report) {
    std::string out = "iteration,loglik,gradient_norm,evaluations\n";
    for (const auto& r : report.iterates)
        out += std::to_string(r.iteration) + "," + fmt(r.loglik) + "," + fmt(r.gradient_norm) + "," +
               std::to_string(r.evaluations) + "\n";
    return out;
}

json estimate_report_json(const EstimateReport& r) {
    return {{"loglik", r.loglik},         {"evaluations", r.evaluations},
            {"iterations", r.iterations}, {"seconds", r.seconds},
            {"converged", r.converged},   {"line_search_failed", r.line_search_failed},
            {"stop_reason", r.stop_reason}, {"stabilized", r.stabilized}};
}

json likelihood_json(const LikelihoodTerms& t) {
    return {{"value", t.value},
            {"logdet_q", t.logdet_q},
            {"logdet_qa", t.logdet_qa},
            {"quadratic", t.quadratic},
            {"cg_iterations", t.cg_iterations},
            {"spectrum_bounds", {t.bounds.lower, t.bounds.upper}},
            {"stabilized", t.stabilized}};
}

std::string replicates_csv(const std::vector<ReplicateResult>& results) {
    std::string out =
        "method,replicate,ok,kappa,gamma_1,gamma_2,c,tau,sigma0,b,loglik,seconds,evaluations,iterations,"
        "stop_reason,error\n";
    for (const auto& r : results) {
        const auto& p = r.estimate;
        std::string b;
        for (int i = 0; i < p.b.size(); ++i) b += (i ? ";" : "") + fmt(p.b[i]);
        std::string error = r.error;
        for (char& ch : error)
            if (ch == ',' || ch == '\n') ch = ' ';
        out += std::string(to_string(r.method)) + "," + std::to_string(r.replicate) + "," + (r.ok ? "1" : "0") + ",";
        if (r.ok)
            out += fmt(p.theta.kappa) + "," + fmt(p.theta.gamma.x()) + "," + fmt(p.theta.gamma.y()) + "," +
                   fmt(p.theta.c) + "," + fmt(p.theta.tau) + "," + fmt(p.sigma0) + "," + b + "," + fmt(r.loglik);
        else
            out += ",,,,,,,";
        out += "," + fmt(r.seconds) + "," + std::to_string(r.evaluations) + "," + std::to_string(r.iterations) + "," +
               r.stop_reason + "," + error + "\n";
    }
    return out;
}

struct Outcome {
    json report;
    std::vector<std::pair<std::string, std::string>> files;
};

/// Mesh CSVs so node_id columns can be mapped back to coordinates.
void add_mesh(Outcome& o, const TriangularMesh& mesh) {
    std::string vertices = "id,x,y,boundary\n";
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v)
        vertices += std::to_string(v) + "," + fmt(mesh.vertices()[v].x()) + "," + fmt(mesh.vertices()[v].y()) + "," +
                    (mesh.boundary_mask()[v] ? "1" : "0") + "\n";
    std::string triangles = "id,v0,v1,v2\n";
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const auto& tri = mesh.triangles()[t];
        triangles += std::to_string(t) + "," + std::to_string(tri[0]) + "," + std::to_string(tri[1]) + "," +
                     std::to_string(tri[2]) + "\n";
    }
    o.files.emplace_back("vertices.csv", std::move(vertices));
    o.files.emplace_back("triangles.csv", std::move(triangles));
    o.report["mesh"] = {{"num_vertices", mesh.num_vertices()}, {"padding", mesh.padding()}, {"h", mesh.h()}};
}

Outcome run_simulate(const RunConfig& c) {
    Outcome o;
    const auto mesh = make_mesh(c);
    const FemAssembly fem(mesh, c.model.H);
    const auto t0 = Clock::now();
    const PropagationModel model = build_propagation(fem, c.params.theta, c.model);
    const DenseMatrix field = simulate(model, c.seed, c.model.burn_in);
    o.report["timings"]["simulate_seconds"] = seconds_since(t0);
    o.report["solver"] = {{"stabilized", model.stabilized()},
                          {"effective_tau", model.effective_tau()},
                          {"num_nodes", model.size()},
                          {"num_blocks", model.num_blocks()}};
    o.report["parameters"] = params_json(c.params);
    o.files.emplace_back("field.csv", field_csv(field));
    add_mesh(o, mesh);
    if (c.simulate.stations > 0) {
        const auto stations = sample_stations(c.mesh, c.simulate.stations, stream_key(c.seed, 20, 0));
        const ObservationSet obs =
            observe(mesh, c.model, field, stations, c.params, c.data.intercept, stream_key(c.seed, 21, 0));
        const fs::path tmp = c.out / "observations.csv";
        write_observations(tmp, obs, c.data.intercept);
        o.report["observations"] = {{"path", "observations.csv"}, {"count", obs.size()}};
    }
    return o;
}

Outcome run_estimate(const RunConfig& c) {
    Outcome o;
    require_input(c.data.observations);
    const auto mesh = make_mesh(c);
    const FemAssembly fem(mesh, c.model.H);
    const ObservationSet obs = read_observations(c.data.observations, mesh, c.model, c.data);
    auto t0 = Clock::now();
    const FullParams init = c.init_from_params ? with_b(c.params, obs.num_covariates())
                                               : initial_values(obs, fem, c.model);
    o.report["timings"]["initial_values_seconds"] = seconds_since(t0);
    const EstimateResult result = estimate(obs, fem, c.model, init, c.estimate);
    o.report["timings"]["estimate_seconds"] = result.report.seconds;
    o.report["initial"] = params_json(init);
    o.report["parameters"] = params_json(result.psi);
    o.report["estimate"] = estimate_report_json(result.report);
    o.report["observations"] = {{"count", obs.size()}, {"covariates", obs.num_covariates()}};
    o.files.emplace_back("iterations.csv", iterations_csv(result.report));
    return o;
}

Outcome run_predict(const RunConfig& c, bool conditional) {
    Outcome o;
    require_input(c.data.observations);
    const auto mesh = make_mesh(c);
    const FemAssembly fem(mesh, c.model.H);
    const ObservationSet obs = read_observations(c.data.observations, mesh, c.model, c.data);
    const FullParams psi = with_b(c.params, obs.num_covariates());
    o.report["parameters"] = params_json(psi);
    auto t0 = Clock::now();
    LikelihoodEvaluator evaluator(obs, fem, c.model, c.estimate.likelihood);
    o.report["likelihood"] = likelihood_json(evaluator.evaluate(psi));
    o.report["timings"]["likelihood_seconds"] = seconds_since(t0);
    t0 = Clock::now();
    if (!conditional) {
        const KrigingResult kriging = krige(obs, psi, fem, c.model, c.estimate.likelihood);
        o.files.emplace_back("kriging.csv", field_csv(kriging.mean));
        add_mesh(o, mesh);
        if (c.predict.horizon > 0) {
            const PropagationModel model = build_propagation(fem, psi.theta, estimation_config(c.model));
            const auto forecast = extrapolate(kriging, model, c.predict.horizon);
            DenseMatrix rows(static_cast<int>(forecast.size()), model.size());
            for (std::size_t m = 0; m < forecast.size(); ++m) rows.row(static_cast<int>(m)) = forecast[m].transpose();
            o.files.emplace_back("forecast.csv", field_csv(rows, c.model.num_blocks()));
        }
        o.report["timings"]["predict_seconds"] = seconds_since(t0);
        return o;
    }
    const Ensemble ensemble = conditional_simulate(obs, psi, fem, c.model, c.predict.realizations, c.predict.horizon,
                                                   c.seed, c.estimate.likelihood);
    o.report["timings"]["condsim_seconds"] = seconds_since(t0);
    o.report["ensemble"] = {{"realizations", ensemble.size()}, {"horizon", c.predict.horizon}};
    o.files.emplace_back("kriging.csv", field_csv(ensemble.kriging.mean));
    add_mesh(o, mesh);
    o.files.emplace_back("ensemble.csv", ensemble_csv(ensemble));
    o.files.emplace_back("ensemble_summary.csv", ensemble_summary_csv(ensemble));
    return o;
}

Outcome run_benchmark(const RunConfig& c) {
    Outcome o;
    std::vector<ReplicateResult> all;
    std::vector<BenchmarkSummary> rows;
    const auto t0 = Clock::now();
    for (const Method method : c.benchmark.methods) {
        const auto results = benchmark_replicates(c, method, [](const ReplicateResult& r) {
            std::cerr << to_string(r.method) << " replicate " << r.replicate << (r.ok ? " ok " : " failed ")
                      << r.seconds << " s" << (r.ok ? "" : ": " + r.error) << "\n";
        });
        rows.push_back(summarize(results, method));
        all.insert(all.end(), results.begin(), results.end());
    }
    o.report["timings"]["benchmark_seconds"] = seconds_since(t0);
    o.report["truth"] = params_json(c.params);
    json summary = json::array();
    for (const auto& row : rows) {
        json entry = {{"method", to_string(row.method)},
                      {"replicates", row.replicates},
                      {"failures", row.failures},
                      {"mean_seconds", row.mean_seconds}};
        const char* names[5] = {"kappa", "gamma_1", "gamma_2", "c", "tau"};
        for (int i = 0; i < 5; ++i) {
            entry["mean"][names[i]] = row.mean[i];
            entry["sd"][names[i]] = std::isfinite(row.sd[i]) ? json(row.sd[i]) : json(nullptr);
        }
        summary.push_back(entry);
    }
    o.report["summary"] = summary;
    o.files.emplace_back("replicates.csv", replicates_csv(all));
    o.files.emplace_back("summary.csv", summary_csv(rows));
    return o;
}

}  // namespace

Workflow parse_workflow(const std::string& name) {
    const std::string s = trim(name);
    if (s == "simulate") return Workflow::Simulate;
    if (s == "estimate") return Workflow::Estimate;
    if (s == "predict") return Workflow::Predict;
    if (s == "condsim") return Workflow::Condsim;
    if (s == "benchmark") return Workflow::Benchmark;
    fail(ErrorKind::Config, "unknown workflow '" + name + "'");
}

const char* to_string(Workflow workflow) noexcept {
    switch (workflow) {
        case Workflow::Simulate: return "simulate";
        case Workflow::Estimate: return "estimate";
        case Workflow::Predict: return "predict";
        case Workflow::Condsim: return "condsim";
        case Workflow::Benchmark: return "benchmark";
    }
    return "?";
}

RunConfig default_config() {
    RunConfig c;
    c.model.num_steps = 9;
    c.model.burn_in = 0;
    c.params.theta = ParameterVector{0.5, Vec2(2.0, 2.0), 1.0, 1.0};
    c.params.b = Vector::Zero(1);
    c.params.sigma0 = 0.1;
    c.estimate.profile_b = true;
    c.estimate.loglik_tol = 0.01;
    c.estimate.forward_gradient_above = 10.0;
    return c;
}

RunConfig load_config(const fs::path& path, RunConfig base) {
    if (!fs::is_regular_file(path)) fail(ErrorKind::Config, "config file not found: " + path.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        fail(ErrorKind::Config, std::string("cannot parse config: ") + e.what());
    }
    std::set<std::string> known;
    for (const auto& f : fields()) known.insert(f.name());
    for (const auto& [section, body] : tree) {
        if (body.empty()) fail(ErrorKind::Config, "config key '" + section + "' outside a section");
        for (const auto& [key, value] : body)
            if (!known.count(section + "." + key)) fail(ErrorKind::Config, "unknown config key " + section + "." + key);
    }
    for (const auto& f : fields()) {
        const auto value = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(f.name(), '.'));
        if (!value) continue;
        try {
            f.set(base, *value);
        } catch (const Error& e) {
            fail(ErrorKind::Config, f.name() + ": " + e.what());
        }
    }
    return base;
}

std::string to_ini(const RunConfig& config) {
    std::string out;
    std::string section;
    for (const auto& f : fields()) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get(config) + "\n";
    }
    return out;
}

ObservationSet read_observations(const fs::path& path, const TriangularMesh& mesh, const ModelConfig& model,
                                 const DataSpec& spec) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Data, "cannot open observation file " + path.string());
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::EmptyData, "observation file is empty: " + path.string());
    const auto header = split(trim(line), ',');
    if (header.size() < 4 || header[0] != "t" || header[1] != "x" || header[2] != "y" || header[3] != "value")
        fail(ErrorKind::Data, "observation header must start with t,x,y,value");
    const int ncov = static_cast<int>(header.size()) - 4;
    std::vector<SpaceTimePoint> points;
    std::vector<double> values;
    std::vector<double> covs;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split(trim(line), ',');
        const std::string where = path.filename().string() + ":" + std::to_string(line_no);
        if (cells.size() != header.size()) fail(ErrorKind::Data, where + ": expected " + std::to_string(header.size()) + " columns");
        const double t = to_double(cells[0], where + " t", ErrorKind::Data);
        const double step = spec.real_time ? (t - spec.t0) / model.dt : t;
        const double k = std::round(step);
        if (std::abs(step - k) > 1e-6) fail(ErrorKind::Data, where + ": time does not fall on a step");
        points.push_back({static_cast<int>(k), to_double(cells[1], where + " x", ErrorKind::Data),
                          to_double(cells[2], where + " y", ErrorKind::Data)});
        values.push_back(to_double(cells[3], where + " value", ErrorKind::Data));
        for (int j = 0; j < ncov; ++j) covs.push_back(to_double(cells[4 + j], where + " covariate", ErrorKind::Data));
    }
    const int n = static_cast<int>(values.size());
    if (n == 0) fail(ErrorKind::EmptyData, "observation file has no rows: " + path.string());
    const int offset = spec.intercept ? 1 : 0;
    DenseMatrix covariates(n, ncov + offset);
    if (spec.intercept) covariates.col(0).setOnes();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < ncov; ++j) covariates(i, offset + j) = covs[static_cast<std::size_t>(i * ncov + j)];
    return make_observations(mesh, std::move(points), Eigen::Map<const Vector>(values.data(), n), covariates,
                             model.num_blocks());
}

void write_observations(const fs::path& path, const ObservationSet& obs, bool intercept) {
    const int first = intercept ? 1 : 0;
    std::string out = "t,x,y,value";
    for (int j = first; j < obs.num_covariates(); ++j) out += ",cov" + std::to_string(j - first + 1);
    out += "\n";
    for (int i = 0; i < obs.size(); ++i) {
        const auto& p = obs.points[static_cast<std::size_t>(i)];
        out += std::to_string(p.t_index) + "," + fmt(p.x) + "," + fmt(p.y) + "," + fmt(obs.y[i]);
        for (int j = first; j < obs.num_covariates(); ++j) out += "," + fmt(obs.covariates(i, j));
        out += "\n";
    }
    write_atomic(path, out);
}

void write_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorKind::Config, "cannot write " + tmp.string());
        out << text;
        if (!out) fail(ErrorKind::Config, "write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string field_csv(const DenseMatrix& field, int first_t_index) {
    std::string out = "t_index,node_id,value\n";
    out.reserve(out.size() + static_cast<std::size_t>(field.size()) * 32);
    for (int k = 0; k < field.rows(); ++k)
        for (int i = 0; i < field.cols(); ++i)
            out += std::to_string(first_t_index + k) + "," + std::to_string(i) + "," + fmt(field(k, i)) + "\n";
    return out;
}

std::string ensemble_csv(const Ensemble& ensemble) {
    std::string out = "realization,t_index,node_id,value\n";
    for (int r = 0; r < ensemble.size(); ++r) {
        const auto& field = ensemble.realizations[static_cast<std::size_t>(r)];
        const std::string prefix = std::to_string(r) + ",";
        for (int k = 0; k < field.rows(); ++k)
            for (int i = 0; i < field.cols(); ++i)
                out += prefix + std::to_string(k) + "," + std::to_string(i) + "," + fmt(field(k, i)) + "\n";
    }
    return out;
}

std::string ensemble_summary_csv(const Ensemble& ensemble) {
    const DenseMatrix mean = ensemble.mean();
    const DenseMatrix variance = ensemble.variance();
    const int n = ensemble.size();
    std::vector<double> cell(static_cast<std::size_t>(n));
    // Linear interpolation between order statistics.
    auto quantile = [&](double p) {
        const double pos = p * (n - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, cell.size() - 1);
        return cell[lo] + (pos - static_cast<double>(lo)) * (cell[hi] - cell[lo]);
    };
    std::string out = "t_index,node_id,mean,variance,q05,q50,q95\n";
    for (int k = 0; k < mean.rows(); ++k)
        for (int i = 0; i < mean.cols(); ++i) {
            for (int r = 0; r < n; ++r) cell[static_cast<std::size_t>(r)] = ensemble.realizations[static_cast<std::size_t>(r)](k, i);
            std::sort(cell.begin(), cell.end());
            out += std::to_string(k) + "," + std::to_string(i) + "," + fmt(mean(k, i)) + "," + fmt(variance(k, i)) +
                   "," + fmt(quantile(0.05)) + "," + fmt(quantile(0.5)) + "," + fmt(quantile(0.95)) + "\n";
        }
    return out;
}

ObservationSet benchmark_data(const RunConfig& config, const TriangularMesh& mesh, const FemAssembly& fem,
                              int replicate) {
    const auto stations = sample_stations(config.mesh, config.benchmark.stations, stream_key(config.seed, 32, 0));
    const auto r = static_cast<std::uint64_t>(replicate);
    const PropagationModel model = build_propagation(fem, config.params.theta, estimation_config(config.model));
    const DenseMatrix field = simulate(model, stream_key(config.seed, 30, r), config.model.burn_in);
    return observe(mesh, config.model, field, stations, config.params, config.data.intercept,
                   stream_key(config.seed, 31, r));
}

std::vector<ReplicateResult> benchmark_replicates(const RunConfig& config, Method method,
                                              const std::function<void(const ReplicateResult&)>& on_done) {
    // Benchmark grids have exactly nx * ny nodes unless padding is given explicitly.
    RunConfig grid = config;
    grid.mesh.padding = config.mesh.padding.value_or(0.0);
    const auto mesh = make_mesh(grid);
    const FemAssembly fem(mesh, config.model.H);
    const int replicates = config.benchmark.replicates;
    std::vector<ReplicateResult> results(static_cast<std::size_t>(replicates));
    EstimateOptions options = config.estimate;
    options.likelihood.method = method;
    options.on_iteration = {};
    std::atomic<int> next{0};
    std::mutex lock;
    auto worker = [&] {
        for (int r = next++; r < replicates; r = next++) {
            ReplicateResult& out = results[static_cast<std::size_t>(r)];
            out.replicate = r;
            out.method = method;
            const auto t0 = Clock::now();
            try {
                const ObservationSet obs = benchmark_data(config, mesh, fem, r);
                out.initial = initial_values(obs, fem, config.model);
                const EstimateResult fit = estimate(obs, fem, config.model, out.initial, options);
                out.estimate = fit.psi;
                out.loglik = fit.report.loglik;
                out.evaluations = fit.report.evaluations;
                out.iterations = fit.report.iterations;
                out.stop_reason = fit.report.stop_reason;
                out.ok = true;
            } catch (const Error& e) {
                out.error = std::string(to_string(e.kind())) + ": " + e.what();
            }
            out.seconds = seconds_since(t0);
            if (on_done) {
                std::lock_guard<std::mutex> guard(lock);
                on_done(out);
            }
        }
    };
    const int workers = std::min(config.threads, replicates);
    std::vector<std::thread> pool;
    for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    return results;
}

BenchmarkSummary summarize(const std::vector<ReplicateResult>& results, Method method) {
    BenchmarkSummary s;
    s.method = method;
    s.replicates = static_cast<int>(results.size());
    std::vector<std::array<double, 5>> rows;
    double seconds = 0.0;
    for (const auto& r : results) {
        if (!r.ok) {
            ++s.failures;
            continue;
        }
        const auto& t = r.estimate.theta;
        rows.push_back({t.kappa, t.gamma.x(), t.gamma.y(), t.c, t.tau});
        seconds += r.seconds;
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto m = static_cast<double>(rows.size());
    for (int i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (const auto& row : rows) sum += row[i];
        s.mean[i] = rows.empty() ? nan : sum / m;
        double ss = 0.0;
        for (const auto& row : rows) ss += (row[i] - s.mean[i]) * (row[i] - s.mean[i]);
        s.sd[i] = rows.size() < 2 ? nan : std::sqrt(ss / (m - 1.0));
    }
    s.mean_seconds = rows.empty() ? nan : seconds / m;
    return s;
}

std::string summary_csv(const std::vector<BenchmarkSummary>& rows) {
    std::string out = "method,replicates,failures,kappa_mean,kappa_sd,gamma_1_mean,gamma_1_sd,gamma_2_mean,gamma_2_sd,"
                      "c_mean,c_sd,tau_mean,tau_sd,average_time_s\n";
    auto cell = [](double v) { return std::isfinite(v) ? fmt(v) : std::string(); };
    for (const auto& r : rows) {
        out += std::string(to_string(r.method)) + "," + std::to_string(r.replicates) + "," +
               std::to_string(r.failures);
        for (int i = 0; i < 5; ++i) out += "," + cell(r.mean[i]) + "," + cell(r.sd[i]);
        out += "," + cell(r.mean_seconds) + "\n";
    }
    return out;
}

int run(const RunConfig& config, const std::string& config_text) {
    json report = {{"software", {{"name", "advspde"}, {"version", ADVSPDE_VERSION}}},
                   {"workflow", to_string(config.workflow)},
                   {"config", config_json(config)},
                   {"config_ini", to_ini(config)}};
    if (!config_text.empty()) report["config_source"] = config_text;
    const auto t0 = Clock::now();
    int code = 0;
    try {
        validate_run(config);
        ensure_output_dir(config.out);
        Outcome outcome;
        switch (config.workflow) {
            case Workflow::Simulate: outcome = run_simulate(config); break;
            case Workflow::Estimate: outcome = run_estimate(config); break;
            case Workflow::Predict: outcome = run_predict(config, false); break;
            case Workflow::Condsim: outcome = run_predict(config, true); break;
            case Workflow::Benchmark: outcome = run_benchmark(config); break;
        }
        for (const auto& [name, text] : outcome.files) write_atomic(config.out / name, text);
        report.update(outcome.report, true);
        report["status"] = "ok";
    } catch (const Error& e) {
        code = exit_code(e.kind());
        report["status"] = "error";
        report["error"] = error_json(e);
        std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    } catch (const fs::filesystem_error& e) {
        code = 2;
        report["status"] = "error";
        report["error"] = {{"kind", "Filesystem"}, {"message", e.what()}, {"exit_code", code}};
        std::cerr << "error: " << e.what() << "\n";
    }
    report["timings"]["total_seconds"] = seconds_since(t0);
    report["exit_code"] = code;
    std::error_code ec;
    if (fs::is_directory(config.out, ec)) {
        try {
            write_atomic(config.out / "report.json", report.dump(2) + "\n");
        } catch (const std::exception& e) {
            std::cerr << "cannot write report.json: " << e.what() << "\n";
            if (code == 0) code = 2;
        }
    }
    return code;
}

int main(int argc, char** argv) {
    CLI::App app{"Advection-diffusion SPDE space-time models: simulation, estimation, kriging"};
    std::string config_path;
    std::string workflow;
    std::string method;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string out;
    app.add_option("--config", config_path, "INI configuration file");
    app.add_option("--workflow", workflow, "simulate | estimate | predict | condsim | benchmark");
    app.add_option("--method", method, "cholesky | matrix-free (benchmark: restricts to this method)");
    app.add_option("--seed", seed, "master RNG seed");
    app.add_option("--threads", threads, "benchmark worker threads");
    app.add_option("--out", out, "output directory");
    app.footer("Defaults (every key may appear in the config file):\n\n" + to_ini(default_config()));
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return e.get_exit_code() == 0 ? rc : 2;
    }
    RunConfig config;
    std::string config_text;
    try {
        config = config_path.empty() ? default_config() : load_config(config_path);
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            config_text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        }
        if (!workflow.empty()) config.workflow = parse_workflow(workflow);
        if (!method.empty()) {
            config.estimate.likelihood.method = parse_method_or_config(method);
            config.benchmark.methods = {config.estimate.likelihood.method};
        }
        if (seed) config.seed = *seed;
        if (threads) config.threads = *threads;
        if (!out.empty()) config.out = out;
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    return run(config, config_text);
}

}  // namespace advspde::cli
