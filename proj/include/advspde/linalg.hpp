#pragma once

#include "advspde/error.hpp"
#include "advspde/types.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace advspde {

using LinearOperator = std::function<Vector(const Vector&)>;

/// Sparse Cholesky factorization P A P^T = L L^T (CHOLMOD, AMD/METIS ordering).
/// Refactorizing a matrix with the same sparsity pattern reuses the symbolic analysis.
class CholeskyFactor {
public:
    CholeskyFactor();
    explicit CholeskyFactor(const SparseMatrix& a);
    ~CholeskyFactor();
    CholeskyFactor(CholeskyFactor&&) noexcept;
    CholeskyFactor& operator=(CholeskyFactor&&) noexcept;

    /// Throws NotSpdError carrying the failing column when A is not positive definite.
    void factorize(const SparseMatrix& a);

    bool empty() const;
    int size() const;
    double logdet() const;
    Vector solve(const Vector& b) const;
    DenseMatrix solve(const DenseMatrix& b) const;
    /// P^T L^-T z: a draw with covariance A^-1 when z is standard normal.
    Vector sample(const Vector& z) const;
    DenseMatrix sample_block(const DenseMatrix& z) const;
    /// L^-1 P b; with sample() this splits A^-1 = (P^T L^-T)(L^-1 P).
    Vector solve_half(const Vector& b) const;
    DenseMatrix solve_half_block(const DenseMatrix& b) const;

    /// Lower factor L in the permuted ordering.
    SparseMatrix lower() const;
    /// perm[k] = row of A placed at position k of P A P^T.
    std::vector<int> permutation() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& message, Vector best, double residual, int iterations)
        : Error(ErrorKind::Convergence, message), best_(std::move(best)), residual_(residual),
          iterations_(iterations) {}

    const Vector& best() const noexcept { return best_; }
    double residual() const noexcept { return residual_; }
    int iterations() const noexcept { return iterations_; }

private:
    Vector best_;
    double residual_;
    int iterations_;
};

struct PcgResult {
    Vector x;
    int iterations = 0;
    double relative_residual = 0.0;
    std::vector<double> residual_history;
};

/// Preconditioned conjugate gradients. An empty preconditioner means identity.
/// Stops when |b - A x| / |b| <= rel_tol (true residual, checked on convergence).
PcgResult pcg(const LinearOperator& apply_a, const Vector& b, const LinearOperator& preconditioner,
              double rel_tol, int max_iters, const Vector* x0 = nullptr);

/// Symmetric block-tridiagonal matrix with equal square blocks.
struct BlockTridiagonal {
    int block_size = 0;
    std::vector<SparseMatrix> diagonal;
    std::vector<SparseMatrix> lower;  ///< lower[k] = A(k+1, k)

    int num_blocks() const { return static_cast<int>(diagonal.size()); }
    int size() const { return block_size * num_blocks(); }
    Vector apply(const Vector& x) const;
    /// Applies the operator to every column of x.
    DenseMatrix apply_block(const DenseMatrix& x) const;
    SparseMatrix assemble() const;
};

enum class PreconditionerKind { None, BlockJacobi, BlockGaussSeidel };

PreconditionerKind parse_preconditioner(const std::string& name);
const char* to_string(PreconditionerKind kind) noexcept;

/// Temporal block preconditioners with a Cholesky factor per diagonal block.
/// BlockGaussSeidel applies one forward then one backward sweep, so the
/// preconditioner stays symmetric positive definite for CG.
class BlockPreconditioner {
public:
    BlockPreconditioner(const BlockTridiagonal& matrix, PreconditionerKind kind);

    Vector apply(const Vector& r) const;
    LinearOperator as_operator() const;
    PreconditionerKind kind() const { return kind_; }
    /// Cholesky factors of the diagonal blocks (empty for kind None).
    const std::vector<std::shared_ptr<CholeskyFactor>>& block_factors() const { return factors_; }

private:
    const BlockTridiagonal* matrix_;
    PreconditionerKind kind_;
    std::vector<std::shared_ptr<CholeskyFactor>> factors_;
};

struct SpectrumBounds {
    double lower = 0.0;
    double upper = 0.0;
};

struct EigenBoundOptions {
    int power_iterations = 30;
    /// When positive, both bounds come from the extreme Ritz values of this many Lanczos
    /// steps instead of power and inverse iteration. Suited to well-conditioned operators.
    int lanczos_steps = 0;
    double upper_margin = 1.05;
    std::optional<double> lower_floor;
    int inverse_iterations = 8;
    double lower_margin = 0.5;
    /// Fixed CG iterations per inverse-iteration step, so the bound is a smooth
    /// function of the operator entries.
    int inner_iterations = 40;
    std::uint64_t seed = 7;
    /// Approximate inverse used by the inverse iteration (e.g. a block preconditioner
    /// as PCG preconditioner); CG on apply_a when empty.
    LinearOperator preconditioner;
    /// Assembled matrix for the Gershgorin fallback.
    const SparseMatrix* assembled = nullptr;
};

/// Spectral interval [lower, upper] enclosing the eigenvalues of an SPD operator.
SpectrumBounds eigen_bounds(const LinearOperator& apply_a, int dim, const EigenBoundOptions& options = {});

/// Gershgorin interval of a symmetric matrix, lower clamped to a small positive value.
SpectrumBounds gershgorin_bounds(const SparseMatrix& a);

/// Frozen Rademacher probe vectors for Hutchinson trace estimation.
class ProbeSet {
public:
    ProbeSet(int count, int dim, std::uint64_t seed);

    int count() const { return static_cast<int>(probes_.size()); }
    int dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }
    const Vector& operator[](int i) const { return probes_[static_cast<std::size_t>(i)]; }
    /// All probes as the columns of a dim x count matrix.
    DenseMatrix matrix() const;

private:
    int dim_;
    std::uint64_t seed_;
    std::vector<Vector> probes_;
};

/// Extreme Ritz values {min, max} after `steps` Lanczos steps from a seeded start vector.
SpectrumBounds lanczos_extremes(const LinearOperator& apply_a, int dim, int steps, std::uint64_t seed);

/// Chebyshev interpolation coefficients of f on [lower, upper], degree `order`.
std::vector<double> chebyshev_coefficients(const std::function<double(double)>& f, double lower, double upper,
                                           int order);
std::vector<double> chebyshev_log_coefficients(double lower, double upper, int order);

/// Hutchinson estimate of tr f(A) through a Chebyshev expansion of f on the given spectrum bounds.
double chebyshev_trace(const LinearOperator& apply_a, int dim, int order, const ProbeSet& probes,
                       const SpectrumBounds& bounds, const std::function<double(double)>& f);

/// Operator applied to a block of column vectors at once.
using BlockOperator = std::function<DenseMatrix(const DenseMatrix&)>;

/// chebyshev_trace running all probes through the recurrence together.
double chebyshev_trace_block(const BlockOperator& apply_a, int dim, int order, const ProbeSet& probes,
                             const SpectrumBounds& bounds, const std::function<double(double)>& f);

/// Hutchinson estimate of log|A| = tr log A through a Chebyshev expansion of log.
double chebyshev_logdet(const LinearOperator& apply_a, int dim, int order, const ProbeSet& probes,
                        const SpectrumBounds& bounds);

}  // namespace advspde
