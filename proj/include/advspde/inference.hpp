#pragma once

#include "advspde/gmrf.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace advspde {

/// Scattered space-time data y = Lambda b + A x + sigma0 eps.
struct ObservationSet {
    Vector y;
    DenseMatrix covariates;  ///< Lambda, n x q
    SparseMatrix projection;  ///< A, n x N_S (N_T + 1)
    std::vector<SpaceTimePoint> points;
    std::vector<int> counts;  ///< observations per time block

    int size() const { return static_cast<int>(y.size()); }
    int num_covariates() const { return static_cast<int>(covariates.cols()); }
};

ObservationSet make_observations(const TriangularMesh& mesh, std::vector<SpaceTimePoint> points, Vector y,
                                 DenseMatrix covariates, int num_blocks);

/// psi = [theta, b, sigma0].
struct FullParams {
    ParameterVector theta;
    Vector b;
    double sigma0 = 1.0;
};

enum class Method { Cholesky, MatrixFree };
Method parse_method(const std::string& name);
const char* to_string(Method method) noexcept;

struct LikelihoodOptions {
    Method method = Method::Cholesky;
    int chebyshev_order = 30;
    int num_probes = 10;
    std::uint64_t probe_seed = 12345;
    double cg_tol = 1e-8;
    int cg_max_iters = 0;  ///< 0 means 10 sqrt(dim)
    PreconditionerKind preconditioner = PreconditionerKind::BlockGaussSeidel;
    /// Run the Chebyshev expansion on L^-1 Q_A L^-T with L the block-diagonal Cholesky
    /// factor of Q_A, adding log|blockdiag(Q_A)| back.
    bool precondition_logdet = true;
    std::optional<double> spectrum_floor;
};

/// The pieces of one log-likelihood evaluation.
struct LikelihoodTerms {
    double value = 0.0;
    double logdet_sigma_y = 0.0;
    double logdet_q = 0.0;
    double logdet_qa = 0.0;
    double logdet_sigma_inv = 0.0;
    double logdet_f_inv = 0.0;
    double quadratic = 0.0;
    int cg_iterations = 0;
    SpectrumBounds bounds;
    bool stabilized = false;
};

/// Evaluates the Gaussian log-likelihood of the data under psi, reusing the Cholesky
/// symbolic analysis and the frozen Hutchinson probes across calls.
class LikelihoodEvaluator {
public:
    LikelihoodEvaluator(const ObservationSet& obs, const FemAssembly& fem, const ModelConfig& config,
                        LikelihoodOptions options = {});

    LikelihoodTerms evaluate(const FullParams& psi);
    /// Log-likelihood at the GLS fixed effects for (theta, sigma0), sharing one factorization.
    LikelihoodTerms evaluate_profiled(const ParameterVector& theta, double sigma0, Vector& b_hat);
    /// sigma0^-2 Q_A^-1 A^T r for every column r of `residuals`, sharing one factorization.
    DenseMatrix posterior_means(const ParameterVector& theta, double sigma0, const DenseMatrix& residuals);
    /// GLS estimate (Lambda^T Sigma_y^-1 Lambda)^-1 Lambda^T Sigma_y^-1 y at (theta, sigma0).
    Vector gls_fixed_effects(const ParameterVector& theta, double sigma0);

    const ModelConfig& config() const { return config_; }
    const LikelihoodOptions& options() const { return options_; }
    int evaluations() const { return evaluations_; }

private:
    struct Workspace;
    Workspace prepare(const ParameterVector& theta, double sigma0);
    Vector solve_qa(Workspace& ws, const Vector& w, double* quad_correction, int* iterations);
    Vector gls(Workspace& ws);
    LikelihoodTerms evaluate_at(Workspace& ws, const FullParams& psi);

    const ObservationSet* obs_;
    const FemAssembly* fem_;
    ModelConfig config_;
    LikelihoodOptions options_;
    std::vector<SparseMatrix> ata_blocks_;
    CholeskyFactor qa_factor_;
    std::optional<ProbeSet> probes_;
    int evaluations_ = 0;
};

double log_likelihood(const FullParams& psi, const ObservationSet& obs, const FemAssembly& fem,
                      const ModelConfig& config, const LikelihoodOptions& options = {});

/// Variogram and autocorrelation based starting point; gamma0 = 0.
FullParams initial_values(const ObservationSet& obs, const FemAssembly& fem, const ModelConfig& config);

struct IterationRecord {
    int iteration = 0;
    double loglik = 0.0;
    Vector x;
    double gradient_norm = 0.0;
    int evaluations = 0;
};

struct EstimateReport {
    std::vector<IterationRecord> iterates;
    double loglik = 0.0;
    int evaluations = 0;
    int iterations = 0;
    double seconds = 0.0;
    bool converged = false;
    bool line_search_failed = false;
    std::string stop_reason;
    bool stabilized = false;
};

struct EstimateOptions {
    LikelihoodOptions likelihood;
    double fd_step = 1e-5;
    double gradient_tol = 1e-4;
    double relative_tol = 1e-9;
    /// Stop once two consecutive iterations each raise the log-likelihood by less than this
    /// (log-likelihood units); 0 disables.
    double loglik_tol = 0.0;
    /// Forward differences while the gradient max-norm exceeds this, central differences below.
    double forward_gradient_above = std::numeric_limits<double>::infinity();
    int max_iterations = 200;
    /// Profile b out by GLS instead of optimizing it jointly.
    bool profile_b = false;
    std::function<void(const IterationRecord&)> on_iteration;
};

struct EstimateResult {
    FullParams psi;
    EstimateReport report;
};

/// The configuration used for estimation: stabilization auto resolves to on whenever
/// alpha = 1 and S(gamma) is allowed to vanish at gamma = 0.
ModelConfig estimation_config(const ModelConfig& config);

/// Unconstrained coordinates [log kappa, gamma_x, gamma_y, log c, log tau, b, log sigma0].
Vector to_unconstrained(const FullParams& psi, bool include_b);
FullParams from_unconstrained(const Vector& x, int num_covariates, bool include_b);

/// BFGS maximum likelihood with central finite-difference gradients.
EstimateResult estimate(const ObservationSet& obs, const FemAssembly& fem, const ModelConfig& config,
                        const FullParams& init, const EstimateOptions& options = {});

}  // namespace advspde
