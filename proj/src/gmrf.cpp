#include "advspde/gmrf.hpp"

#include "advspde/rng.hpp"

#include <Eigen/SparseLU>

#include <cmath>
#include <numbers>

namespace advspde {

using ColMajorSparse = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;

void validate(const ParameterVector& theta) {
    require(std::isfinite(theta.kappa) && theta.kappa > 0.0, ErrorKind::InvalidParameter, "kappa must be > 0");
    require(std::isfinite(theta.c) && theta.c > 0.0, ErrorKind::InvalidParameter, "c must be > 0");
    require(std::isfinite(theta.tau) && theta.tau >= 0.0, ErrorKind::InvalidParameter, "tau must be >= 0");
    require(theta.gamma.allFinite(), ErrorKind::InvalidParameter, "gamma must be finite");
}

Stabilization parse_stabilization(const std::string& name) {
    if (name == "off" || name == "false") return Stabilization::Off;
    if (name == "on" || name == "true") return Stabilization::On;
    if (name == "auto") return Stabilization::Auto;
    fail(ErrorKind::Config, "stabilize must be on, off or auto (got '" + name + "')");
}

InitialCovMode parse_initial_cov_mode(const std::string& name) {
    if (name == "matern-dense") return InitialCovMode::MaternDense;
    if (name == "spatial-gmrf") return InitialCovMode::SpatialGmrf;
    if (name == "scaled-identity") return InitialCovMode::ScaledIdentity;
    fail(ErrorKind::Config, "unknown initial covariance mode '" + name + "'");
}

const char* to_string(Stabilization mode) noexcept {
    switch (mode) {
        case Stabilization::Off: return "off";
        case Stabilization::On: return "on";
        case Stabilization::Auto: return "auto";
    }
    return "auto";
}

const char* to_string(InitialCovMode mode) noexcept {
    switch (mode) {
        case InitialCovMode::MaternDense: return "matern-dense";
        case InitialCovMode::SpatialGmrf: return "spatial-gmrf";
        case InitialCovMode::ScaledIdentity: return "scaled-identity";
    }
    return "spatial-gmrf";
}

void validate(const ModelConfig& config) {
    require(config.alpha == 0 || config.alpha == 1, ErrorKind::UnsupportedExponent, "alpha must be 0 or 1");
    require(config.alpha_s == 0 || config.alpha_s == 2, ErrorKind::UnsupportedExponent, "alpha_S must be 0 or 2");
    check_spd(config.H);
    require(std::isfinite(config.dt) && config.dt > 0.0, ErrorKind::Config, "dt must be > 0");
    require(config.num_steps >= 0, ErrorKind::Config, "N_T must be >= 0");
    require(config.burn_in >= 0, ErrorKind::Config, "burn-in must be >= 0");
    require(config.stabilize != Stabilization::On || config.alpha == 1, ErrorKind::Config,
            "streamline-diffusion stabilization requires alpha = 1");
}

bool resolve_stabilization(const ModelConfig& config, const ParameterVector& theta, double h) {
    const double speed = theta.gamma.norm();
    switch (config.stabilize) {
        case Stabilization::Off: return false;
        case Stabilization::On:
            require(config.alpha == 1, ErrorKind::Config, "streamline-diffusion stabilization requires alpha = 1");
            require(speed > 0.0 || config.stabilize_at_rest, ErrorKind::Config,
                    "stabilization requested with gamma = 0");
            return true;
        case Stabilization::Auto: {
            if (config.alpha != 1 || speed == 0.0) return false;
            const double lambda = theta.gamma.dot(config.H * theta.gamma) / (speed * speed);
            return peclet(h, theta.gamma, lambda) > 1.0;
        }
    }
    return false;
}

double matern_covariance(double distance, double kappa, double nu, double sigma2) {
    require(distance >= 0.0 && kappa > 0.0 && nu > 0.0 && sigma2 > 0.0, ErrorKind::InvalidParameter,
            "Matern covariance needs distance >= 0 and positive kappa, nu, sigma2");
    const double r = kappa * distance;
    if (r == 0.0) return sigma2;
    if (r > 700.0) return 0.0;
    return sigma2 * std::pow(2.0, 1.0 - nu) / std::tgamma(nu) * std::pow(r, nu) * std::cyl_bessel_k(nu, r);
}

double stationary_variance(double kappa, double tau, const Mat2& H, int alpha_total) {
    require(alpha_total > 1, ErrorKind::InvalidParameter,
            "the spatial trace is a Matern field only for alpha + alpha_S > 1");
    const double nu = alpha_total - 1.0;
    return tau * tau * std::tgamma(nu) /
           (2.0 * std::tgamma(static_cast<double>(alpha_total)) * 4.0 * std::numbers::pi *
            std::pow(kappa, 2.0 * nu) * std::sqrt(H.determinant()));
}

Vector InitialPrecision::sample(const Vector& z) const {
    if (variance_ == 0.0 && !factor_ && covariance_factor_.size() == 0) return Vector::Zero(z.size());
    switch (mode_) {
        case InitialCovMode::MaternDense: return covariance_factor_ * z;
        case InitialCovMode::ScaledIdentity: return std::sqrt(variance_) * z;
        case InitialCovMode::SpatialGmrf: return factor_->sample(z);
    }
    return z;
}

namespace {

struct NoiseGeometry {
    SparseMatrix op;  // kappa^2 M + G (+ S)
    Mat2 H_eff;
    double tau_eff;
};

NoiseGeometry noise_geometry(const FemAssembly& fem, const ParameterVector& theta, const ModelConfig& config,
                             bool stabilized) {
    NoiseGeometry g;
    g.op = operator_matrix(fem.mass(), fem.stiffness(), theta.kappa, 1);
    g.H_eff = config.H;
    g.tau_eff = theta.tau;
    if (stabilized) {
        g.op += fem.stabilization(theta.gamma);
        const double speed = theta.gamma.norm();
        if (speed > 0.0) g.H_eff += fem.h() / speed * theta.gamma * theta.gamma.transpose();
        if (config.correct_tau) g.tau_eff = tau_tilde(theta.tau, config.H, theta.gamma, fem.h());
    }
    return g;
}

}  // namespace

InitialPrecision build_initial_precision(const FemAssembly& fem, const ParameterVector& theta,
                                         const ModelConfig& config, bool stabilized) {
    validate(theta);
    const NoiseGeometry geo = noise_geometry(fem, theta, config, stabilized);
    const int n = fem.size();
    const int alpha_tot = config.alpha_total();
    InitialPrecision init;
    init.mode_ = config.initial_cov;
    if (geo.tau_eff == 0.0) return init;
    require(alpha_tot >= 1, ErrorKind::InvalidParameter, "alpha + alpha_S must be >= 1 for an initial law");
    require(alpha_tot > 1 || config.initial_cov == InitialCovMode::SpatialGmrf, ErrorKind::InvalidParameter,
            std::string(to_string(config.initial_cov)) + " initial covariance needs alpha + alpha_S > 1");
    if (alpha_tot > 1) init.variance_ = stationary_variance(theta.kappa, geo.tau_eff, geo.H_eff, alpha_tot);

    switch (config.initial_cov) {
        case InitialCovMode::ScaledIdentity: {
            init.precision_ = sparse_diagonal(Vector::Constant(n, 1.0 / init.variance_));
            init.logdet_ = -n * std::log(init.variance_);
            break;
        }
        case InitialCovMode::MaternDense: {
            require(n <= config.dense_cap, ErrorKind::Resource,
                    "matern-dense initial covariance is limited to " + std::to_string(config.dense_cap) +
                        " nodes; use spatial-gmrf");
            const Eigen::LLT<Mat2> h_llt(geo.H_eff);
            const auto& v = fem.mesh().vertices();
            const double nu = alpha_tot - 1.0;
            DenseMatrix cov(n, n);
            for (int i = 0; i < n; ++i) {
                cov(i, i) = init.variance_;
                for (int j = 0; j < i; ++j) {
                    // |H^-1/2 d| = |L^-1 d| with H = L L^T.
                    const double dist = h_llt.matrixL().solve(v[i] - v[j]).norm();
                    cov(i, j) = cov(j, i) = matern_covariance(dist, theta.kappa, nu, init.variance_);
                }
            }
            Eigen::LLT<DenseMatrix> llt(cov);
            require(llt.info() == Eigen::Success, ErrorKind::NotSpd,
                    "Matern covariance on the mesh is numerically singular");
            init.covariance_factor_ = llt.matrixL();
            init.logdet_ = -2.0 * init.covariance_factor_.diagonal().array().log().sum();
            const DenseMatrix prec = llt.solve(DenseMatrix::Identity(n, n));
            init.precision_ = DenseMatrix(0.5 * (prec + prec.transpose())).sparseView(1.0, 0.0);
            init.covariance_ = std::move(cov);
            break;
        }
        case InitialCovMode::SpatialGmrf: {
            const Vector inv_mass = fem.mass_diagonal().cwiseInverse();
            SparseMatrix p = geo.op;
            for (int i = 1; i < alpha_tot; ++i) p = SparseMatrix(geo.op * (inv_mass.asDiagonal() * p));
            p *= 2.0 / (geo.tau_eff * geo.tau_eff);
            auto factor = std::make_shared<CholeskyFactor>(p);
            if (alpha_tot > 1) {
                const auto& mesh = fem.mesh();
                const int centre = mesh.nearest_vertex(
                    Vec2(0.5 * (mesh.padded_x().lo + mesh.padded_x().hi), 0.5 * (mesh.padded_y().lo + mesh.padded_y().hi)));
                const double fem_variance = factor->solve(Vector(Vector::Unit(n, centre)))[centre];
                p *= fem_variance / init.variance_;
                factor->factorize(p);
            }
            init.logdet_ = factor->logdet();
            init.precision_ = std::move(p);
            init.factor_ = std::move(factor);
            break;
        }
    }
    return init;
}

struct PropagationModel::Solvers {
    // transpose() is non-const in Eigen although it only builds a view.
    mutable Eigen::SparseLU<ColMajorSparse, Eigen::COLAMDOrdering<int>> lu;
    CholeskyFactor noise;
};

PropagationModel build_propagation(const FemAssembly& fem, const ParameterVector& theta, const ModelConfig& config) {
    validate(theta);
    validate(config);
    PropagationModel m;
    m.theta_ = theta;
    m.num_steps_ = config.num_steps;
    m.dt_ = config.dt;
    m.stabilized_ = resolve_stabilization(config, theta, fem.h());
    m.colored_ = config.alpha_s == 2;
    m.mass_ = fem.mass_diagonal();
    m.mass_sqrt_ = m.mass_.cwiseSqrt();
    m.mass_inv_ = m.mass_.cwiseInverse();

    const NoiseGeometry geo = noise_geometry(fem, theta, config, m.stabilized_);
    m.noise_op_ = geo.op;
    m.tau_eff_ = geo.tau_eff;
    m.noise_scale_ = geo.tau_eff * std::sqrt(config.dt / theta.c);

    SparseMatrix transport = operator_matrix(fem.mass(), fem.stiffness(), theta.kappa, config.alpha);
    transport += fem.advection(theta.gamma);
    if (m.stabilized_) transport += fem.stabilization(theta.gamma);
    m.J_ = fem.mass() + (config.dt / theta.c) * transport;

    auto solvers = std::make_shared<PropagationModel::Solvers>();
    const ColMajorSparse j_col = m.J_;
    solvers->lu.compute(j_col);
    require(solvers->lu.info() == Eigen::Success, ErrorKind::Factorization,
            "implicit-Euler matrix J is singular: " + solvers->lu.lastErrorMessage());
    if (m.colored_) solvers->noise.factorize(m.noise_op_);
    m.solvers_ = std::move(solvers);

    m.initial_ = build_initial_precision(fem, theta, config, m.stabilized_);

    if (m.tau_eff_ > 0.0) {
        m.f_scale_ = theta.c / (m.tau_eff_ * m.tau_eff_ * config.dt);
        SparseMatrix w_times_j;
        SparseMatrix w_times_m;
        if (m.colored_) {
            const SparseMatrix k_minv = m.noise_op_ * m.mass_inv_.asDiagonal();
            const SparseMatrix q_s = k_minv * m.noise_op_;
            const SparseMatrix w = m.mass_inv_.asDiagonal() * q_s * m.mass_inv_.asDiagonal();
            w_times_j = w * m.J_;
            w_times_m = m.mass_inv_.asDiagonal() * q_s;
            m.gain_ = m.f_scale_ * q_s;
        } else {
            w_times_j = m.mass_inv_.asDiagonal() * m.J_;
            w_times_m = sparse_diagonal(Vector::Ones(m.size()));
            m.gain_ = m.f_scale_ * fem.mass();
        }
        const SparseMatrix jt = m.J_.transpose();
        m.f_inverse_ = m.f_scale_ * SparseMatrix(jt * w_times_j);
        m.coupling_ = m.f_scale_ * SparseMatrix(jt * w_times_m);
        m.f_inverse_logdet_ = CholeskyFactor(m.f_inverse_).logdet();
    }
    return m;
}

Vector PropagationModel::apply_D(const Vector& v) const {
    require(v.size() == size(), ErrorKind::DimensionMismatch, "D applied to a vector of wrong length");
    return solvers_->lu.solve(Vector(mass_.cwiseProduct(v)));
}

Vector PropagationModel::apply_Dt(const Vector& v) const {
    require(v.size() == size(), ErrorKind::DimensionMismatch, "D^T applied to a vector of wrong length");
    const Vector u = solvers_->lu.transpose().solve(v);
    return mass_.cwiseProduct(u);
}

Vector PropagationModel::apply_E(const Vector& z) const {
    require(z.size() == size(), ErrorKind::DimensionMismatch, "E applied to a vector of wrong length");
    Vector u = mass_sqrt_.cwiseProduct(z);
    if (colored_) u = mass_.cwiseProduct(solvers_->noise.solve(u));
    return noise_scale_ * Vector(solvers_->lu.solve(u));
}

Vector PropagationModel::step(const Vector& x, const Vector& z) const {
    Vector rhs = mass_.cwiseProduct(x);
    if (noise_scale_ > 0.0) {
        Vector u = mass_sqrt_.cwiseProduct(z);
        if (colored_) u = mass_.cwiseProduct(solvers_->noise.solve(u));
        rhs += noise_scale_ * u;
    }
    return solvers_->lu.solve(rhs);
}

void PropagationModel::require_precision() const {
    require(tau_eff_ > 0.0, ErrorKind::InvalidCall, "the precision is undefined for tau = 0");
}

Vector PropagationModel::f_inverse_apply(const Vector& v) const {
    require_precision();
    require(v.size() == size(), ErrorKind::DimensionMismatch, "F^-1 applied to a vector of wrong length");
    Vector u = J_ * v;
    u = mass_inv_.cwiseProduct(u);
    if (colored_) {
        u = mass_inv_.cwiseProduct(noise_op_ * u);
        u = mass_inv_.cwiseProduct(noise_op_ * u);
    }
    return f_scale_ * Vector(J_.transpose() * u);
}

const SparseMatrix& PropagationModel::f_inverse() const {
    require_precision();
    return f_inverse_;
}

double PropagationModel::f_inverse_logdet() const {
    require_precision();
    return f_inverse_logdet_;
}

const SparseMatrix& PropagationModel::innovation_gain() const {
    require_precision();
    return gain_;
}

const SparseMatrix& PropagationModel::coupling() const {
    require_precision();
    return coupling_;
}

BlockTridiagonal PropagationModel::precision_blocks() const {
    require_precision();
    BlockTridiagonal q;
    q.block_size = size();
    const int nt = num_steps_;
    if (nt == 0) {
        q.diagonal.push_back(initial_.precision());
        return q;
    }
    const SparseMatrix interior = f_inverse_ + gain_;
    const SparseMatrix off = -coupling_;
    q.diagonal.push_back(initial_.precision() + gain_);
    for (int k = 1; k < nt; ++k) q.diagonal.push_back(interior);
    q.diagonal.push_back(f_inverse_);
    q.lower.assign(static_cast<std::size_t>(nt), off);
    return q;
}

Vector global_precision_apply(const PropagationModel& model, const Vector& x) {
    const int n = model.size();
    const int nt = model.num_steps();
    require(x.size() == static_cast<long>(n) * (nt + 1), ErrorKind::DimensionMismatch,
            "global precision applied to a vector of wrong length");
    Vector y(x.size());
    y.head(n) = model.initial().apply(x.head(n));
    if (nt == 0) return y;
    // Q x = gradient of 1/2 [x0' S^-1 x0 + sum_k (x_k - D x_{k-1})' F^-1 (x_k - D x_{k-1})].
    std::vector<Vector> g(static_cast<std::size_t>(nt + 1));
    for (int k = 1; k <= nt; ++k) {
        const Vector innovation = x.segment(k * n, n) - model.apply_D(x.segment((k - 1) * n, n));
        g[k] = model.f_inverse_apply(innovation);
    }
    y.head(n) -= model.apply_Dt(g[1]);
    for (int k = 1; k <= nt; ++k) {
        y.segment(k * n, n) = g[k];
        if (k < nt) y.segment(k * n, n) -= model.apply_Dt(g[k + 1]);
    }
    return y;
}

SparseMatrix assemble_global_precision(const PropagationModel& model, long direct_cap) {
    const long dim = static_cast<long>(model.size()) * model.num_blocks();
    require(dim <= direct_cap, ErrorKind::Resource,
            "global precision has " + std::to_string(dim) + " unknowns, above the direct-method cap of " +
                std::to_string(direct_cap) + "; use the matrix-free method");
    return model.precision_blocks().assemble();
}

void propagate(const PropagationModel& model, std::uint64_t seed, const Vector& x0, long steps,
               const std::function<void(long, const Vector&)>& visit, long first_step) {
    Vector x = x0;
    const int n = model.size();
    for (long k = first_step; k < first_step + steps; ++k) {
        const Vector z = model.noise_scale() > 0.0 ? standard_normal(stream_key(seed, 1, static_cast<std::uint64_t>(k)), n)
                                                   : Vector::Zero(n);
        x = model.step(x, z);
        visit(k, x);
    }
}

DenseMatrix simulate(const PropagationModel& model, std::uint64_t seed, int burn_in) {
    require(burn_in >= 0, ErrorKind::InvalidParameter, "burn-in must be >= 0");
    const int n = model.size();
    Vector x = model.initial().sample(standard_normal(stream_key(seed, 0, 0), n));
    if (burn_in > 0) propagate(model, seed, x, burn_in, [&x](long, const Vector& v) { x = v; });
    DenseMatrix field(model.num_blocks(), n);
    field.row(0) = x.transpose();
    propagate(
        model, seed, x, model.num_steps(),
        [&](long k, const Vector& v) { field.row(k - burn_in) = v.transpose(); }, burn_in + 1);
    return field;
}

}  // namespace advspde
