#pragma once

#include "advspde/fem.hpp"
#include "advspde/linalg.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>

namespace advspde {

/// theta = [kappa, gamma_x, gamma_y, c, tau].
struct ParameterVector {
    double kappa = 1.0;
    Vec2 gamma = Vec2::Zero();
    double c = 1.0;
    double tau = 1.0;
};

void validate(const ParameterVector& theta);

enum class Stabilization { Off, On, Auto };
enum class InitialCovMode { MaternDense, SpatialGmrf, ScaledIdentity };

Stabilization parse_stabilization(const std::string& name);
InitialCovMode parse_initial_cov_mode(const std::string& name);
const char* to_string(Stabilization mode) noexcept;
const char* to_string(InitialCovMode mode) noexcept;

struct ModelConfig {
    int alpha = 1;
    int alpha_s = 2;
    Mat2 H = Mat2::Identity();
    Stabilization stabilize = Stabilization::Auto;
    /// With stabilization on, accept gamma = 0 (S vanishes) instead of raising a
    /// config error. Estimation uses this so the objective stays continuous in gamma.
    bool stabilize_at_rest = false;
    /// Replace tau by tau-tilde under stabilization.
    bool correct_tau = true;
    double dt = 1.0;
    int num_steps = 9;  ///< N_T; the field has N_T + 1 time blocks
    InitialCovMode initial_cov = InitialCovMode::SpatialGmrf;
    int dense_cap = 2000;
    long direct_cap = 200000;
    int burn_in = 50;

    int alpha_total() const { return alpha + alpha_s; }
    int num_blocks() const { return num_steps + 1; }
};

void validate(const ModelConfig& config);

/// Auto resolves to on when alpha = 1 and the Peclet number along gamma exceeds 1.
bool resolve_stabilization(const ModelConfig& config, const ParameterVector& theta, double h);

/// Matern covariance sigma2 2^(1-nu)/Gamma(nu) (kappa d)^nu K_nu(kappa d).
double matern_covariance(double distance, double kappa, double nu, double sigma2);

/// Marginal variance of the stationary spatial trace (d = 2, alpha_tot > 1).
double stationary_variance(double kappa, double tau, const Mat2& H, int alpha_total);

/// Precision (or covariance) of the initial state x^(0).
class InitialPrecision {
public:
    InitialCovMode mode() const { return mode_; }
    double variance() const { return variance_; }
    double logdet() const { return logdet_; }  ///< log|Sigma^-1|
    /// Sparse precision; for matern-dense this is the dense inverse stored sparsely.
    const SparseMatrix& precision() const { return precision_; }
    /// Dense covariance (matern-dense only).
    const DenseMatrix& covariance() const { return covariance_; }
    Vector apply(const Vector& x) const { return precision_ * x; }
    Vector sample(const Vector& z) const;

private:
    friend InitialPrecision build_initial_precision(const FemAssembly&, const ParameterVector&, const ModelConfig&,
                                                    bool);
    InitialCovMode mode_ = InitialCovMode::SpatialGmrf;
    double variance_ = 0.0;
    double logdet_ = 0.0;
    SparseMatrix precision_;
    DenseMatrix covariance_;
    DenseMatrix covariance_factor_;
    std::shared_ptr<CholeskyFactor> factor_;
};

/// Sigma^-1 for x^(0). The spatial operator of the noise and of the initial law is
/// kappa^2 M + G (+ S when stabilized).
InitialPrecision build_initial_precision(const FemAssembly& fem, const ParameterVector& theta,
                                         const ModelConfig& config, bool stabilized);

/// Implicit-Euler propagation x^(k+1) = D x^(k) + E z^(k+1) with
/// D = J^-1 M, J = M + dt/c (K + B [+ S]), E = s J^-1 M^(1/2) (white) or s J^-1 M L_S^T (colored),
/// s = tau~ sqrt(dt / c). D and E are only applied through sparse LU solves with J.
class PropagationModel {
public:
    int size() const { return static_cast<int>(mass_.size()); }
    int num_steps() const { return num_steps_; }
    int num_blocks() const { return num_steps_ + 1; }
    bool stabilized() const { return stabilized_; }
    bool colored() const { return colored_; }
    double noise_scale() const { return noise_scale_; }
    double effective_tau() const { return tau_eff_; }
    const ParameterVector& parameters() const { return theta_; }

    const SparseMatrix& J() const { return J_; }
    const Vector& mass_diagonal() const { return mass_; }
    /// kappa^2 M + G (+ S): the spatial operator of the colored noise and of Sigma.
    const SparseMatrix& noise_operator() const { return noise_op_; }
    const InitialPrecision& initial() const { return initial_; }

    Vector apply_D(const Vector& v) const;
    Vector apply_Dt(const Vector& v) const;
    /// E z; for colored noise L_S^T is realized as K^-1 M^(1/2) (same law).
    Vector apply_E(const Vector& z) const;
    /// One step of the recursion: D x + E z.
    Vector step(const Vector& x, const Vector& z) const;

    /// F^-1 v via sparse matvecs and diagonal scalings only.
    Vector f_inverse_apply(const Vector& v) const;
    /// Assembled F^-1 and its log-determinant.
    const SparseMatrix& f_inverse() const;
    double f_inverse_logdet() const;
    /// D^T F^-1 D = (c / tau~^2 dt) Q_S (white noise: M).
    const SparseMatrix& innovation_gain() const;
    /// F^-1 D = (c / tau~^2 dt) J^T W M with W = M^-1 Q_S M^-1 (white: M^-1).
    const SparseMatrix& coupling() const;

    /// Block-tridiagonal global precision Q with sparse blocks.
    BlockTridiagonal precision_blocks() const;

private:
    friend PropagationModel build_propagation(const FemAssembly&, const ParameterVector&, const ModelConfig&);
    void require_precision() const;

    ParameterVector theta_;
    int num_steps_ = 0;
    bool stabilized_ = false;
    bool colored_ = false;
    double dt_ = 1.0;
    double tau_eff_ = 0.0;
    double noise_scale_ = 0.0;
    double f_scale_ = 0.0;
    Vector mass_;
    Vector mass_sqrt_;
    Vector mass_inv_;
    SparseMatrix J_;
    SparseMatrix noise_op_;
    InitialPrecision initial_;
    struct Solvers;
    std::shared_ptr<const Solvers> solvers_;
    SparseMatrix f_inverse_;
    SparseMatrix gain_;
    SparseMatrix coupling_;
    double f_inverse_logdet_ = 0.0;
};

PropagationModel build_propagation(const FemAssembly& fem, const ParameterVector& theta, const ModelConfig& config);

/// Q x through D, D^T and F^-1 applications (no assembled blocks).
Vector global_precision_apply(const PropagationModel& model, const Vector& x);

/// Explicit sparse Q. Throws a resource error above the direct-method cap.
SparseMatrix assemble_global_precision(const PropagationModel& model, long direct_cap = 200000);

/// Realization with rows = time blocks 0..N_T and columns = nodes. x^(0) ~ N(0, Sigma), then
/// `burn_in` discarded steps before the first recorded block. Draws are keyed by
/// (seed, step), so the result does not depend on scheduling.
DenseMatrix simulate(const PropagationModel& model, std::uint64_t seed, int burn_in);

/// Runs the recursion for `steps` steps from `x0` and hands each new state to `visit`.
void propagate(const PropagationModel& model, std::uint64_t seed, const Vector& x0, long steps,
               const std::function<void(long, const Vector&)>& visit, long first_step = 1);

}  // namespace advspde
