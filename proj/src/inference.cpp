#include "advspde/inference.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numbers>

namespace advspde {

ObservationSet make_observations(const TriangularMesh& mesh, std::vector<SpaceTimePoint> points, Vector y,
                                 DenseMatrix covariates, int num_blocks) {
    const auto n = static_cast<long>(points.size());
    require(n > 0, ErrorKind::EmptyData, "no observations");
    require(y.size() == n, ErrorKind::DimensionMismatch, "observation vector and point list differ in length");
    if (covariates.size() == 0) covariates = DenseMatrix::Zero(n, 0);
    require(covariates.rows() == n, ErrorKind::DimensionMismatch, "covariate matrix has the wrong row count");
    require(y.allFinite() && covariates.allFinite(), ErrorKind::Data, "observations contain non-finite values");
    if (covariates.cols() > 0) {
        const Eigen::ColPivHouseholderQR<DenseMatrix> qr(covariates);
        require(qr.rank() == covariates.cols(), ErrorKind::Data, "covariate matrix is rank deficient");
    }
    ObservationSet obs;
    obs.projection = project_points(mesh, points, num_blocks);
    obs.counts.assign(static_cast<std::size_t>(num_blocks), 0);
    for (const auto& p : points) ++obs.counts[static_cast<std::size_t>(p.t_index)];
    obs.points = std::move(points);
    obs.y = std::move(y);
    obs.covariates = std::move(covariates);
    return obs;
}

Method parse_method(const std::string& name) {
    if (name == "cholesky") return Method::Cholesky;
    if (name == "matrix-free") return Method::MatrixFree;
    fail(ErrorKind::Config, "method must be cholesky or matrix-free (got '" + name + "')");
}

const char* to_string(Method method) noexcept {
    return method == Method::Cholesky ? "cholesky" : "matrix-free";
}

// ---------------------------------------------------------------- likelihood

struct LikelihoodEvaluator::Workspace {
    PropagationModel model;
    std::unique_ptr<BlockTridiagonal> qa;
    std::unique_ptr<BlockPreconditioner> preconditioner;
    double sigma0 = 1.0;
};

LikelihoodEvaluator::LikelihoodEvaluator(const ObservationSet& obs, const FemAssembly& fem,
                                         const ModelConfig& config, LikelihoodOptions options)
    : obs_(&obs), fem_(&fem), config_(config), options_(options) {
    validate(config_);
    const int ns = fem.size();
    const int nb = config_.num_blocks();
    require(obs.projection.cols() == static_cast<long>(ns) * nb, ErrorKind::DimensionMismatch,
            "projection matrix does not match the mesh and time window");
    require(options_.chebyshev_order >= 1 && options_.num_probes >= 1, ErrorKind::Config,
            "Chebyshev order and probe count must be positive");
    // A^T A is block diagonal because each row of A lives in one time block.
    std::vector<std::vector<Triplet>> entries(static_cast<std::size_t>(nb));
    for (int r = 0; r < obs.projection.rows(); ++r) {
        for (SparseMatrix::InnerIterator a(obs.projection, r); a; ++a)
            for (SparseMatrix::InnerIterator b(obs.projection, r); b; ++b) {
                const int block = static_cast<int>(a.col()) / ns;
                entries[block].emplace_back(static_cast<int>(a.col()) % ns, static_cast<int>(b.col()) % ns,
                                            a.value() * b.value());
            }
    }
    for (auto& e : entries) {
        SparseMatrix m(ns, ns);
        m.setFromTriplets(e.begin(), e.end());
        ata_blocks_.push_back(std::move(m));
    }
}

LikelihoodEvaluator::Workspace LikelihoodEvaluator::prepare(const ParameterVector& theta, double sigma0) {
    require(std::isfinite(sigma0) && sigma0 > 0.0, ErrorKind::InvalidParameter, "sigma0 must be > 0");
    require(theta.tau > 0.0, ErrorKind::InvalidParameter, "tau must be > 0 for the likelihood");
    Workspace ws{build_propagation(*fem_, theta, config_), nullptr, nullptr, sigma0};
    ws.qa = std::make_unique<BlockTridiagonal>(ws.model.precision_blocks());
    const double inv_var = 1.0 / (sigma0 * sigma0);
    for (int k = 0; k < ws.qa->num_blocks(); ++k) ws.qa->diagonal[k] += inv_var * ata_blocks_[k];
    if (options_.method == Method::Cholesky) {
        qa_factor_.factorize(ws.qa->assemble());
    } else {
        PreconditionerKind kind = options_.preconditioner;
        if (options_.precondition_logdet && kind == PreconditionerKind::None) kind = PreconditionerKind::BlockJacobi;
        ws.preconditioner = std::make_unique<BlockPreconditioner>(*ws.qa, kind);
    }
    return ws;
}

Vector LikelihoodEvaluator::solve_qa(Workspace& ws, const Vector& w, double* quad_correction, int* iterations) {
    if (options_.method == Method::Cholesky) {
        Vector v = qa_factor_.solve(w);
        if (quad_correction != nullptr) *quad_correction = w.dot(v);
        return v;
    }
    const BlockTridiagonal& qa = *ws.qa;
    const LinearOperator apply = [&qa](const Vector& x) { return qa.apply(x); };
    LinearOperator precond;
    if (options_.preconditioner != PreconditionerKind::None) precond = ws.preconditioner->as_operator();
    const int dim = qa.size();
    const int max_iters =
        options_.cg_max_iters > 0 ? options_.cg_max_iters : static_cast<int>(std::ceil(10.0 * std::sqrt(dim)));
    PcgResult res = pcg(apply, w, precond, options_.cg_tol, max_iters);
    if (iterations != nullptr) *iterations += res.iterations;
    // 2 w'v - v'Qv has error quadratic in the solver error.
    if (quad_correction != nullptr) *quad_correction = 2.0 * w.dot(res.x) - res.x.dot(apply(res.x));
    return res.x;
}

LikelihoodTerms LikelihoodEvaluator::evaluate(const FullParams& psi) {
    const ObservationSet& obs = *obs_;
    require(psi.b.size() == obs.num_covariates(), ErrorKind::DimensionMismatch,
            "fixed-effect vector does not match the covariates");
    ++evaluations_;
    Workspace ws = prepare(psi.theta, psi.sigma0);
    return evaluate_at(ws, psi);
}

LikelihoodTerms LikelihoodEvaluator::evaluate_profiled(const ParameterVector& theta, double sigma0, Vector& b_hat) {
    ++evaluations_;
    Workspace ws = prepare(theta, sigma0);
    b_hat = gls(ws);
    return evaluate_at(ws, {theta, b_hat, sigma0});
}

LikelihoodTerms LikelihoodEvaluator::evaluate_at(Workspace& ws, const FullParams& psi) {
    const ObservationSet& obs = *obs_;
    LikelihoodTerms t;
    t.stabilized = ws.model.stabilized();
    const int n = obs.size();
    const double var0 = psi.sigma0 * psi.sigma0;
    const Vector r = obs.y - obs.covariates * psi.b;
    const Vector w = obs.projection.transpose() * r;

    t.logdet_sigma_inv = ws.model.initial().logdet();
    t.logdet_f_inv = ws.model.num_steps() > 0 ? ws.model.f_inverse_logdet() : 0.0;
    t.logdet_q = t.logdet_sigma_inv + ws.model.num_steps() * t.logdet_f_inv;

    double wqw = 0.0;
    if (options_.method == Method::Cholesky) {
        t.logdet_qa = qa_factor_.logdet();
        solve_qa(ws, w, &wqw, nullptr);
    } else {
        const BlockTridiagonal& qa = *ws.qa;
        const int dim = qa.size();
        if (!probes_ || probes_->dim() != dim)
            probes_.emplace(options_.num_probes, dim, options_.probe_seed);
        EigenBoundOptions bopt;
        bopt.seed = options_.probe_seed;
        bopt.lower_floor = options_.spectrum_floor;
        if (options_.precondition_logdet) {
            const auto& factors = ws.preconditioner->block_factors();
            const int bs = qa.block_size;
            double block_logdet = 0.0;
            for (const auto& f : factors) block_logdet += f->logdet();
            const BlockOperator scaled_block = [&qa, &factors, bs](const DenseMatrix& x) {
                DenseMatrix u(x.rows(), x.cols());
                for (int k = 0; k < qa.num_blocks(); ++k)
                    u.middleRows(k * bs, bs) = factors[k]->sample_block(DenseMatrix(x.middleRows(k * bs, bs)));
                const DenseMatrix au = qa.apply_block(u);
                DenseMatrix y(x.rows(), x.cols());
                for (int k = 0; k < qa.num_blocks(); ++k)
                    y.middleRows(k * bs, bs) = factors[k]->solve_half_block(DenseMatrix(au.middleRows(k * bs, bs)));
                return y;
            };
            const LinearOperator scaled = [&scaled_block](const Vector& x) -> Vector { return scaled_block(x); };
            bopt.lanczos_steps = 20;
            t.bounds = eigen_bounds(scaled, dim, bopt);
            // The scaled operator is I + N with N block off-diagonal on a two-coloured block chain, so its
            // spectrum lies in (0, 2) symmetric about 1 and odd powers of N are traceless. Expanding the even
            // part (log x + log(2 - x)) / 2 keeps the trace and drops the probe noise of the odd terms.
            t.bounds.lower = std::min(t.bounds.lower, 1.0);
            t.bounds.upper = 2.0 - t.bounds.lower;
            const auto even_log = [](double x) { return 0.5 * (std::log(x) + std::log(2.0 - x)); };
            t.logdet_qa = block_logdet + chebyshev_trace_block(scaled_block, dim, options_.chebyshev_order, *probes_,
                                                               t.bounds, even_log);
        } else {
            const LinearOperator apply = [&qa](const Vector& x) { return qa.apply(x); };
            if (options_.preconditioner != PreconditionerKind::None)
                bopt.preconditioner = ws.preconditioner->as_operator();
            t.bounds = eigen_bounds(apply, dim, bopt);
            t.logdet_qa = chebyshev_logdet(apply, dim, options_.chebyshev_order, *probes_, t.bounds);
        }
        solve_qa(ws, w, &wqw, &t.cg_iterations);
    }
    t.quadratic = r.squaredNorm() / var0 - wqw / (var0 * var0);
    t.logdet_sigma_y = n * std::log(var0) - t.logdet_q + t.logdet_qa;
    t.value = -0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * t.logdet_sigma_y - 0.5 * t.quadratic;
    return t;
}

Vector LikelihoodEvaluator::gls_fixed_effects(const ParameterVector& theta, double sigma0) {
    Workspace ws = prepare(theta, sigma0);
    return gls(ws);
}

DenseMatrix LikelihoodEvaluator::posterior_means(const ParameterVector& theta, double sigma0,
                                                 const DenseMatrix& residuals) {
    require(residuals.rows() == obs_->size(), ErrorKind::DimensionMismatch, "residual rows must match the data");
    Workspace ws = prepare(theta, sigma0);
    const double var0 = sigma0 * sigma0;
    DenseMatrix out(ws.qa->size(), residuals.cols());
    for (int j = 0; j < residuals.cols(); ++j)
        out.col(j) = solve_qa(ws, obs_->projection.transpose() * residuals.col(j), nullptr, nullptr) / var0;
    return out;
}

Vector LikelihoodEvaluator::gls(Workspace& ws) {
    const ObservationSet& obs = *obs_;
    const int q = obs.num_covariates();
    if (q == 0) return Vector::Zero(0);
    const double var0 = ws.sigma0 * ws.sigma0;
    // Sigma_y^-1 v = v / s^2 - A Q_A^-1 A^T v / s^4.
    const auto apply_inverse = [&](const Vector& v) -> Vector {
        const Vector z = solve_qa(ws, obs.projection.transpose() * v, nullptr, nullptr);
        return v / var0 - (obs.projection * z) / (var0 * var0);
    };
    DenseMatrix sl(obs.size(), q);
    for (int j = 0; j < q; ++j) sl.col(j) = apply_inverse(obs.covariates.col(j));
    const DenseMatrix lsl = obs.covariates.transpose() * sl;
    const Vector rhs = sl.transpose() * obs.y;
    return lsl.ldlt().solve(rhs);
}

double log_likelihood(const FullParams& psi, const ObservationSet& obs, const FemAssembly& fem,
                      const ModelConfig& config, const LikelihoodOptions& options) {
    LikelihoodEvaluator evaluator(obs, fem, config, options);
    return evaluator.evaluate(psi).value;
}

// ---------------------------------------------------------------- initial values

namespace {

struct VariogramBin {
    double distance = 0.0;
    double gamma = 0.0;
    double count = 0.0;
};

std::vector<VariogramBin> pooled_variogram(const ObservationSet& obs, const Vector& resid, int num_blocks) {
    std::vector<std::vector<int>> by_time(static_cast<std::size_t>(num_blocks));
    for (int i = 0; i < obs.size(); ++i) by_time[obs.points[i].t_index].push_back(i);
    double max_dist = 0.0;
    for (const auto& idx : by_time)
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = 0; b < a; ++b) {
                const auto& p = obs.points[idx[a]];
                const auto& q = obs.points[idx[b]];
                max_dist = std::max(max_dist, std::hypot(p.x - q.x, p.y - q.y));
            }
    require(max_dist > 0.0, ErrorKind::DegenerateData, "all observations share one location");
    const int num_bins = 15;
    const double cutoff = 0.4 * max_dist;
    std::vector<VariogramBin> bins(num_bins);
    for (const auto& idx : by_time)
        for (std::size_t a = 0; a < idx.size(); ++a)
            for (std::size_t b = 0; b < a; ++b) {
                const auto& p = obs.points[idx[a]];
                const auto& q = obs.points[idx[b]];
                const double d = std::hypot(p.x - q.x, p.y - q.y);
                if (d <= 0.0 || d > cutoff) continue;
                auto& bin = bins[std::min(num_bins - 1, static_cast<int>(d / cutoff * num_bins))];
                const double diff = resid[idx[a]] - resid[idx[b]];
                bin.distance += d;
                bin.gamma += 0.5 * diff * diff;
                bin.count += 1.0;
            }
    std::vector<VariogramBin> out;
    for (auto& bin : bins)
        if (bin.count > 0.0) out.push_back({bin.distance / bin.count, bin.gamma / bin.count, bin.count});
    return out;
}

// Weighted least squares of gamma(h) = nugget + sill (1 - rho_kappa(h)) over a kappa grid, with
// Cressie weights N_h / gamma_h^2 taken from the empirical variogram.
double fit_kappa(const std::vector<VariogramBin>& bins, double nu) {
    require(bins.size() >= 3, ErrorKind::DegenerateData, "too few distance classes for a variogram fit");
    const double d_min = bins.front().distance;
    const double d_max = bins.back().distance;
    const double range_factor = std::sqrt(8.0 * nu);
    const double k_lo = range_factor / (4.0 * d_max);
    const double k_hi = range_factor / (0.5 * d_min);
    const int grid = 200;
    std::vector<double> weight(bins.size());
    for (std::size_t i = 0; i < bins.size(); ++i)
        weight[i] = bins[i].count / std::max(bins[i].gamma * bins[i].gamma, 1e-300);
    double best_kappa = std::sqrt(k_lo * k_hi);
    double best_sse = std::numeric_limits<double>::infinity();
    for (int g = 0; g < grid; ++g) {
        const double kappa = k_lo * std::pow(k_hi / k_lo, g / (grid - 1.0));
        // Columns: [1, 1 - rho].
        double s11 = 0, s12 = 0, s22 = 0, t1 = 0, t2 = 0;
        std::vector<double> shape(bins.size());
        for (std::size_t i = 0; i < bins.size(); ++i) {
            shape[i] = 1.0 - matern_covariance(bins[i].distance, kappa, nu, 1.0);
            const double w = weight[i];
            s11 += w;
            s12 += w * shape[i];
            s22 += w * shape[i] * shape[i];
            t1 += w * bins[i].gamma;
            t2 += w * shape[i] * bins[i].gamma;
        }
        double nugget = 0.0, sill = 0.0;
        const double det = s11 * s22 - s12 * s12;
        if (det > 0.0) {
            nugget = (s22 * t1 - s12 * t2) / det;
            sill = (s11 * t2 - s12 * t1) / det;
        }
        if (nugget < 0.0 || det <= 0.0) {
            nugget = 0.0;
            sill = t2 / s22;
        }
        if (!(sill > 0.0)) continue;
        double sse = 0.0;
        for (std::size_t i = 0; i < bins.size(); ++i) {
            const double e = bins[i].gamma - nugget - sill * shape[i];
            sse += weight[i] * e * e;
        }
        if (sse < best_sse) {
            best_sse = sse;
            best_kappa = kappa;
        }
    }
    return best_kappa;
}

}  // namespace

FullParams initial_values(const ObservationSet& obs, const FemAssembly& fem, const ModelConfig& config) {
    const int nb = config.num_blocks();
    require(obs.size() > 0, ErrorKind::EmptyData, "no observations");
    int steps_with_data = 0;
    for (int c : obs.counts) steps_with_data += c > 0 ? 1 : 0;
    require(steps_with_data >= 2, ErrorKind::Data, "initial values need data at two or more time steps");
    std::map<std::pair<double, double>, std::vector<std::pair<int, int>>> stations;
    for (int i = 0; i < obs.size(); ++i) stations[{obs.points[i].x, obs.points[i].y}].emplace_back(obs.points[i].t_index, i);
    require(stations.size() >= 10, ErrorKind::Data, "initial values need ten or more distinct locations");

    FullParams psi;
    const int q = obs.num_covariates();
    psi.b = q > 0 ? Vector(obs.covariates.colPivHouseholderQr().solve(obs.y)) : Vector::Zero(0);
    const Vector resid = obs.y - obs.covariates * psi.b;
    const double mean = resid.mean();
    const double variance = (resid.array() - mean).square().sum() / std::max(1, obs.size() - 1);
    require(variance > 1e-12 * (1.0 + obs.y.squaredNorm() / obs.size()), ErrorKind::DegenerateData,
            "observations are constant after removing the fixed effects");

    const int alpha_tot = config.alpha_total();
    // The Matern shape needs nu > 0; alpha_tot <= 1 falls back to the exponential.
    const double nu = alpha_tot > 1 ? alpha_tot - 1.0 : 0.5;
    const auto bins = pooled_variogram(obs, resid, nb);
    psi.theta.kappa = fit_kappa(bins, nu);

    // Stations are independent repetitions of an AR(1) series.
    double s01 = 0.0, s00 = 0.0, s11 = 0.0;
    for (auto& [loc, series] : stations) {
        std::sort(series.begin(), series.end());
        for (std::size_t k = 0; k + 1 < series.size(); ++k) {
            if (series[k + 1].first != series[k].first + 1) continue;
            const double a = resid[series[k].second] - mean;
            const double b = resid[series[k + 1].second] - mean;
            s01 += a * b;
            s00 += a * a;
            s11 += b * b;
        }
    }
    const double rho = s00 > 0.0 && s11 > 0.0 ? s01 / std::sqrt(s00 * s11) : 0.0;
    const double c_floor = config.dt / 10.0;
    const double c_ceiling = 100.0 * config.dt / (-std::log(0.99));
    double c0 = c_floor;
    if (rho >= 1.0) c0 = c_ceiling;
    else if (rho > 0.0) c0 = std::clamp(-config.dt / std::log(rho), c_floor, c_ceiling);
    psi.theta.c = c0;

    const int alpha_for_tau = alpha_tot > 1 ? alpha_tot : 2;
    const double unit = stationary_variance(psi.theta.kappa, 1.0, config.H, alpha_for_tau);
    psi.theta.tau = std::sqrt(variance / unit);
    psi.theta.gamma = Vec2::Zero();
    psi.sigma0 = 0.1 * std::sqrt(variance);
    (void)fem;
    return psi;
}

// ---------------------------------------------------------------- BFGS

ModelConfig estimation_config(const ModelConfig& config) {
    ModelConfig c = config;
    if (c.alpha == 1 && c.stabilize == Stabilization::Auto) c.stabilize = Stabilization::On;
    if (c.stabilize == Stabilization::On) c.stabilize_at_rest = true;
    return c;
}

Vector to_unconstrained(const FullParams& psi, bool include_b) {
    const int q = include_b ? static_cast<int>(psi.b.size()) : 0;
    Vector x(6 + q);
    x << std::log(psi.theta.kappa), psi.theta.gamma.x(), psi.theta.gamma.y(), std::log(psi.theta.c),
        std::log(psi.theta.tau), Vector::Zero(q), std::log(psi.sigma0);
    if (q > 0) x.segment(5, q) = psi.b;
    return x;
}

FullParams from_unconstrained(const Vector& x, int num_covariates, bool include_b) {
    const int q = include_b ? num_covariates : 0;
    require(x.size() == 6 + q, ErrorKind::DimensionMismatch, "parameter vector has the wrong length");
    FullParams psi;
    psi.theta.kappa = std::exp(x[0]);
    psi.theta.gamma = Vec2(x[1], x[2]);
    psi.theta.c = std::exp(x[3]);
    psi.theta.tau = std::exp(x[4]);
    psi.b = include_b ? Vector(x.segment(5, q)) : Vector::Zero(num_covariates);
    psi.sigma0 = std::exp(x[5 + q]);
    return psi;
}

EstimateResult estimate(const ObservationSet& obs, const FemAssembly& fem, const ModelConfig& config,
                        const FullParams& init, const EstimateOptions& options) {
    const auto start = std::chrono::steady_clock::now();
    const ModelConfig cfg = estimation_config(config);
    LikelihoodEvaluator evaluator(obs, fem, cfg, options.likelihood);
    const int q = obs.num_covariates();
    const bool joint_b = !options.profile_b;

    bool stabilized = false;
    Vector b_hat = init.b;
    const auto params_at = [&](const Vector& x) {
        FullParams psi = from_unconstrained(x, q, joint_b);
        if (!joint_b) psi.b = b_hat;
        return psi;
    };
    const auto objective = [&](const Vector& x) -> double {
        if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 50.0) return std::numeric_limits<double>::infinity();
        try {
            const FullParams psi = from_unconstrained(x, q, joint_b);
            const LikelihoodTerms t = joint_b ? evaluator.evaluate(psi)
                                              : evaluator.evaluate_profiled(psi.theta, psi.sigma0, b_hat);
            stabilized = t.stabilized;
            return std::isfinite(t.value) ? -t.value : std::numeric_limits<double>::infinity();
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::NotSpd || e.kind() == ErrorKind::Convergence ||
                e.kind() == ErrorKind::Factorization || e.kind() == ErrorKind::InvalidParameter)
                return std::numeric_limits<double>::infinity();
            throw;
        }
    };
    const auto gradient = [&](const Vector& x, double fx, bool forward) {
        Vector g(x.size());
        for (int i = 0; i < x.size(); ++i) {
            const double h = options.fd_step * std::max(1.0, std::abs(x[i]));
            Vector xp = x, xm = x;
            xp[i] += h;
            xm[i] -= h;
            const double fp = objective(xp);
            if (!forward)
                g[i] = (fp - objective(xm)) / (2.0 * h);
            else
                g[i] = std::isfinite(fp) ? (fp - fx) / h : (fx - objective(xm)) / h;
        }
        return g;
    };

    EstimateResult result;
    EstimateReport& report = result.report;
    Vector x = to_unconstrained(init, joint_b);
    double f = objective(x);
    require(std::isfinite(f), ErrorKind::Init, "log-likelihood is not finite at the initial values");
    Vector g = gradient(x, f, false);
    DenseMatrix hinv = DenseMatrix::Identity(x.size(), x.size());
    bool scaled = false;

    const auto record = [&](int it) {
        IterationRecord rec{it, -f, x, g.cwiseAbs().maxCoeff(), evaluator.evaluations()};
        if (options.on_iteration) options.on_iteration(rec);
        report.iterates.push_back(std::move(rec));
    };
    record(0);

    int small_gains = 0;
    int it = 0;
    for (; it < options.max_iterations; ++it) {
        if (!g.allFinite()) {
            report.stop_reason = "non-finite gradient";
            report.line_search_failed = true;
            break;
        }
        if (g.cwiseAbs().maxCoeff() < options.gradient_tol) {
            report.converged = true;
            report.stop_reason = "gradient tolerance";
            break;
        }
        Vector d = -hinv * g;
        if (g.dot(d) >= 0.0) {
            hinv.setIdentity();
            d = -g;
        }
        // Keep trial points within a moderate distance in the transformed space.
        const double max_step = 2.0;
        double step = std::min(1.0, max_step / d.cwiseAbs().maxCoeff());
        const double slope = g.dot(d);
        double f_new = std::numeric_limits<double>::infinity();
        Vector x_new;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            x_new = x + step * d;
            f_new = objective(x_new);
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            report.line_search_failed = true;
            report.stop_reason = "line search failed";
            break;
        }
        const Vector g_new = gradient(x_new, f_new, g.cwiseAbs().maxCoeff() > options.forward_gradient_above);
        const Vector s = x_new - x;
        const Vector y = g_new - g;
        const double rel_change = std::abs(f - f_new) / std::max(1.0, std::abs(f));
        small_gains = f - f_new < options.loglik_tol ? small_gains + 1 : 0;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (!scaled) {
                hinv *= sy / y.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const DenseMatrix eye = DenseMatrix::Identity(x.size(), x.size());
            hinv = (eye - rho * s * y.transpose()) * hinv * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
        }
        x = x_new;
        f = f_new;
        g = g_new;
        record(it + 1);
        if (rel_change < options.relative_tol || small_gains >= 2) {
            ++it;
            report.converged = true;
            report.stop_reason = small_gains >= 2 ? "log-likelihood gain" : "relative objective change";
            break;
        }
    }
    if (report.stop_reason.empty()) report.stop_reason = "iteration limit";
    // Evaluate once more at the final point so the reported stabilization matches it.
    f = objective(x);
    result.psi = params_at(x);
    report.loglik = -f;
    report.iterations = it;
    report.evaluations = evaluator.evaluations();
    report.stabilized = stabilized;
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace advspde
