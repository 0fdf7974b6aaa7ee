#include "advspde/linalg.hpp"

#include "advspde/rng.hpp"

#include <cholmod.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace advspde {

// ---------------------------------------------------------------- Cholesky

struct CholeskyFactor::Impl {
    cholmod_common common{};
    cholmod_factor* factor = nullptr;
    int n = 0;
    std::vector<int> outer;
    std::vector<int> inner;
    double logdet = 0.0;

    Impl() {
        cholmod_start(&common);
        common.final_ll = 1;
        common.print = 0;
        common.error_handler = nullptr;
    }
    ~Impl() {
        if (factor != nullptr) cholmod_free_factor(&factor, &common);
        cholmod_finish(&common);
    }
    Impl(const Impl&) = delete;
    Impl& operator=(const Impl&) = delete;

    // A symmetric row-major matrix read as compressed-column: the stored
    // structure is A^T = A, and stype = 1 makes CHOLMOD use one triangle.
    cholmod_sparse view(const SparseMatrix& a) {
        cholmod_sparse s{};
        s.nrow = static_cast<size_t>(a.rows());
        s.ncol = static_cast<size_t>(a.cols());
        s.nzmax = static_cast<size_t>(a.nonZeros());
        s.p = const_cast<int*>(a.outerIndexPtr());
        s.i = const_cast<int*>(a.innerIndexPtr());
        s.x = const_cast<double*>(a.valuePtr());
        s.stype = 1;
        s.itype = CHOLMOD_INT;
        s.xtype = CHOLMOD_REAL;
        s.dtype = CHOLMOD_DOUBLE;
        s.sorted = 1;
        s.packed = 1;
        return s;
    }

    bool same_pattern(const SparseMatrix& a) const {
        if (factor == nullptr || a.rows() != n) return false;
        const auto nnz = static_cast<std::size_t>(a.nonZeros());
        return inner.size() == nnz && std::equal(outer.begin(), outer.end(), a.outerIndexPtr()) &&
               std::equal(inner.begin(), inner.end(), a.innerIndexPtr());
    }

    double compute_logdet() const {
        const auto* x = static_cast<const double*>(factor->x);
        double sum = 0.0;
        if (factor->is_super) {
            const auto* super = static_cast<const int*>(factor->super);
            const auto* pi = static_cast<const int*>(factor->pi);
            const auto* px = static_cast<const int*>(factor->px);
            for (size_t s = 0; s < factor->nsuper; ++s) {
                const int ncols = super[s + 1] - super[s];
                const int nrows = pi[s + 1] - pi[s];
                for (int j = 0; j < ncols; ++j) sum += std::log(x[px[s] + j * nrows + j]);
            }
        } else {
            const auto* p = static_cast<const int*>(factor->p);
            for (int j = 0; j < n; ++j) sum += std::log(x[p[j]]);
        }
        return 2.0 * sum;
    }
};

CholeskyFactor::CholeskyFactor() = default;
CholeskyFactor::CholeskyFactor(const SparseMatrix& a) { factorize(a); }
CholeskyFactor::~CholeskyFactor() = default;
CholeskyFactor::CholeskyFactor(CholeskyFactor&&) noexcept = default;
CholeskyFactor& CholeskyFactor::operator=(CholeskyFactor&&) noexcept = default;

void CholeskyFactor::factorize(const SparseMatrix& a) {
    require(a.rows() == a.cols(), ErrorKind::DimensionMismatch, "Cholesky needs a square matrix");
    require(a.isCompressed(), ErrorKind::InvalidCall, "Cholesky needs a compressed matrix");
    if (!impl_) impl_ = std::make_unique<Impl>();
    Impl& im = *impl_;
    cholmod_sparse s = im.view(a);
    if (!im.same_pattern(a)) {
        if (im.factor != nullptr) cholmod_free_factor(&im.factor, &im.common);
        im.n = static_cast<int>(a.rows());
        im.factor = cholmod_analyze(&s, &im.common);
        if (im.factor == nullptr) {
            im.outer.clear();
            fail(ErrorKind::Factorization, "CHOLMOD symbolic analysis failed");
        }
        im.outer.assign(a.outerIndexPtr(), a.outerIndexPtr() + a.rows() + 1);
        im.inner.assign(a.innerIndexPtr(), a.innerIndexPtr() + a.nonZeros());
    }
    cholmod_factorize(&s, im.factor, &im.common);
    if (im.common.status == CHOLMOD_NOT_POSDEF) {
        const long pivot = static_cast<long>(im.factor->minor);
        // The numeric factor is incomplete; force a fresh analysis next time.
        cholmod_free_factor(&im.factor, &im.common);
        im.outer.clear();
        throw NotSpdError("matrix is not positive definite (pivot " + std::to_string(pivot) + ")", pivot);
    }
    if (im.common.status < CHOLMOD_OK) {
        cholmod_free_factor(&im.factor, &im.common);
        im.outer.clear();
        fail(im.common.status == CHOLMOD_OUT_OF_MEMORY ? ErrorKind::Resource : ErrorKind::Factorization,
             "CHOLMOD factorization failed (status " + std::to_string(im.common.status) + ")");
    }
    im.logdet = im.compute_logdet();
}

bool CholeskyFactor::empty() const { return !impl_ || impl_->factor == nullptr; }

int CholeskyFactor::size() const { return empty() ? 0 : impl_->n; }

double CholeskyFactor::logdet() const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    return impl_->logdet;
}

namespace {

DenseMatrix cholmod_apply(cholmod_common& cc, cholmod_factor* f, const DenseMatrix& b,
                          std::initializer_list<int> systems) {
    cholmod_dense in{};
    in.nrow = static_cast<size_t>(b.rows());
    in.ncol = static_cast<size_t>(b.cols());
    in.nzmax = in.nrow * in.ncol;
    in.d = in.nrow;
    in.x = const_cast<double*>(b.data());
    in.xtype = CHOLMOD_REAL;
    in.dtype = CHOLMOD_DOUBLE;
    cholmod_dense* current = &in;
    cholmod_dense* owned = nullptr;
    for (int sys : systems) {
        cholmod_dense* next = cholmod_solve(sys, f, current, &cc);
        require(next != nullptr, ErrorKind::Factorization, "CHOLMOD solve failed");
        if (owned != nullptr) cholmod_free_dense(&owned, &cc);
        owned = next;
        current = next;
    }
    DenseMatrix out = Eigen::Map<const DenseMatrix>(static_cast<const double*>(current->x), b.rows(), b.cols());
    cholmod_free_dense(&owned, &cc);
    return out;
}

}  // namespace

Vector CholeskyFactor::solve(const Vector& b) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(b.size() == impl_->n, ErrorKind::DimensionMismatch, "right-hand side has the wrong length");
    return cholmod_apply(impl_->common, impl_->factor, b, {CHOLMOD_A});
}

DenseMatrix CholeskyFactor::solve(const DenseMatrix& b) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(b.rows() == impl_->n, ErrorKind::DimensionMismatch, "right-hand side has the wrong row count");
    if (b.cols() == 0) return b;
    return cholmod_apply(impl_->common, impl_->factor, b, {CHOLMOD_A});
}

Vector CholeskyFactor::sample(const Vector& z) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(z.size() == impl_->n, ErrorKind::DimensionMismatch, "noise vector has the wrong length");
    return cholmod_apply(impl_->common, impl_->factor, z, {CHOLMOD_Lt, CHOLMOD_Pt});
}

DenseMatrix CholeskyFactor::sample_block(const DenseMatrix& z) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(z.rows() == impl_->n, ErrorKind::DimensionMismatch, "noise block has the wrong row count");
    if (z.cols() == 0) return z;
    return cholmod_apply(impl_->common, impl_->factor, z, {CHOLMOD_Lt, CHOLMOD_Pt});
}

DenseMatrix CholeskyFactor::solve_half_block(const DenseMatrix& b) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(b.rows() == impl_->n, ErrorKind::DimensionMismatch, "block has the wrong row count");
    if (b.cols() == 0) return b;
    return cholmod_apply(impl_->common, impl_->factor, b, {CHOLMOD_P, CHOLMOD_L});
}

Vector CholeskyFactor::solve_half(const Vector& b) const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    require(b.size() == impl_->n, ErrorKind::DimensionMismatch, "vector has the wrong length");
    return cholmod_apply(impl_->common, impl_->factor, b, {CHOLMOD_P, CHOLMOD_L});
}

SparseMatrix CholeskyFactor::lower() const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    cholmod_common& cc = impl_->common;
    cholmod_factor* copy = cholmod_copy_factor(impl_->factor, &cc);
    cholmod_change_factor(CHOLMOD_REAL, 1, 0, 1, 1, copy, &cc);
    cholmod_sparse* l = cholmod_factor_to_sparse(copy, &cc);
    cholmod_free_factor(&copy, &cc);
    require(l != nullptr, ErrorKind::Factorization, "could not extract the Cholesky factor");
    const auto* p = static_cast<const int*>(l->p);
    const auto* i = static_cast<const int*>(l->i);
    const auto* x = static_cast<const double*>(l->x);
    std::vector<Triplet> entries;
    for (size_t j = 0; j < l->ncol; ++j)
        for (int k = p[j]; k < p[j + 1]; ++k) entries.emplace_back(i[k], static_cast<int>(j), x[k]);
    SparseMatrix out(static_cast<int>(l->nrow), static_cast<int>(l->ncol));
    out.setFromTriplets(entries.begin(), entries.end());
    cholmod_free_sparse(&l, &cc);
    return out;
}

std::vector<int> CholeskyFactor::permutation() const {
    require(!empty(), ErrorKind::InvalidCall, "Cholesky factor is empty");
    const auto* perm = static_cast<const int*>(impl_->factor->Perm);
    return {perm, perm + impl_->n};
}

// ---------------------------------------------------------------- PCG

PcgResult pcg(const LinearOperator& apply_a, const Vector& b, const LinearOperator& preconditioner,
              double rel_tol, int max_iters, const Vector* x0) {
    require(rel_tol > 0.0 && rel_tol < 1.0, ErrorKind::InvalidParameter, "rel_tol must lie in (0, 1)");
    PcgResult result;
    const double b_norm = b.norm();
    result.x = x0 != nullptr ? *x0 : Vector::Zero(b.size());
    if (b_norm == 0.0) {
        result.x.setZero();
        return result;
    }
    Vector r = b - (x0 != nullptr ? apply_a(result.x) : Vector::Zero(b.size()));
    double rel = r.norm() / b_norm;
    result.residual_history.push_back(rel);
    Vector best = result.x;
    double best_rel = rel;
    if (rel <= rel_tol) {
        result.relative_residual = rel;
        return result;
    }
    Vector z = preconditioner ? preconditioner(r) : r;
    Vector p = z;
    double rz = r.dot(z);
    for (int it = 1; it <= max_iters; ++it) {
        const Vector ap = apply_a(p);
        const double pap = p.dot(ap);
        if (!(pap > 0.0)) break;
        const double step = rz / pap;
        result.x += step * p;
        r -= step * ap;
        rel = r.norm() / b_norm;
        result.residual_history.push_back(rel);
        result.iterations = it;
        if (rel < best_rel) {
            best_rel = rel;
            best = result.x;
        }
        if (rel <= rel_tol) {
            // Guard against drift of the recursive residual.
            const double true_rel = (b - apply_a(result.x)).norm() / b_norm;
            if (true_rel <= rel_tol) {
                result.relative_residual = true_rel;
                return result;
            }
            r = b - apply_a(result.x);
        }
        z = preconditioner ? preconditioner(r) : r;
        const double rz_next = r.dot(z);
        p = z + (rz_next / rz) * p;
        rz = rz_next;
    }
    char message[160];
    std::snprintf(message, sizeof message, "PCG did not reach relative residual %.3g within %d iterations (best %.3g)",
                  rel_tol, max_iters, best_rel);
    throw ConvergenceError(message, best, best_rel, result.iterations);
}

// ---------------------------------------------------------------- block tridiagonal

Vector BlockTridiagonal::apply(const Vector& x) const {
    require(x.size() == size(), ErrorKind::DimensionMismatch, "block operator applied to a vector of wrong length");
    const int b = block_size;
    Vector y(x.size());
    for (int k = 0; k < num_blocks(); ++k) y.segment(k * b, b).noalias() = diagonal[k] * x.segment(k * b, b);
    for (int k = 0; k + 1 < num_blocks(); ++k) {
        y.segment((k + 1) * b, b).noalias() += lower[k] * x.segment(k * b, b);
        y.segment(k * b, b).noalias() += lower[k].transpose() * x.segment((k + 1) * b, b);
    }
    return y;
}

DenseMatrix BlockTridiagonal::apply_block(const DenseMatrix& x) const {
    require(x.rows() == size(), ErrorKind::DimensionMismatch, "block operator applied to a block of wrong height");
    const int b = block_size;
    DenseMatrix y(x.rows(), x.cols());
    for (int k = 0; k < num_blocks(); ++k) y.middleRows(k * b, b).noalias() = diagonal[k] * x.middleRows(k * b, b);
    for (int k = 0; k + 1 < num_blocks(); ++k) {
        y.middleRows((k + 1) * b, b).noalias() += lower[k] * x.middleRows(k * b, b);
        y.middleRows(k * b, b).noalias() += lower[k].transpose() * x.middleRows((k + 1) * b, b);
    }
    return y;
}

SparseMatrix BlockTridiagonal::assemble() const {
    const int b = block_size;
    std::vector<Triplet> entries;
    std::size_t total = 0;
    for (const auto& d : diagonal) total += static_cast<std::size_t>(d.nonZeros());
    for (const auto& l : lower) total += 2 * static_cast<std::size_t>(l.nonZeros());
    entries.reserve(total);
    for (int k = 0; k < num_blocks(); ++k)
        for (int i = 0; i < b; ++i)
            for (SparseMatrix::InnerIterator it(diagonal[k], i); it; ++it)
                entries.emplace_back(k * b + i, k * b + static_cast<int>(it.col()), it.value());
    for (int k = 0; k + 1 < num_blocks(); ++k)
        for (int i = 0; i < b; ++i)
            for (SparseMatrix::InnerIterator it(lower[k], i); it; ++it) {
                const int row = (k + 1) * b + i;
                const int col = k * b + static_cast<int>(it.col());
                entries.emplace_back(row, col, it.value());
                entries.emplace_back(col, row, it.value());
            }
    SparseMatrix out(size(), size());
    out.setFromTriplets(entries.begin(), entries.end());
    return out;
}

PreconditionerKind parse_preconditioner(const std::string& name) {
    if (name == "none") return PreconditionerKind::None;
    if (name == "block-jacobi") return PreconditionerKind::BlockJacobi;
    if (name == "block-gauss-seidel") return PreconditionerKind::BlockGaussSeidel;
    fail(ErrorKind::Config, "unknown preconditioner '" + name + "'");
}

const char* to_string(PreconditionerKind kind) noexcept {
    switch (kind) {
        case PreconditionerKind::None: return "none";
        case PreconditionerKind::BlockJacobi: return "block-jacobi";
        case PreconditionerKind::BlockGaussSeidel: return "block-gauss-seidel";
    }
    return "none";
}

BlockPreconditioner::BlockPreconditioner(const BlockTridiagonal& matrix, PreconditionerKind kind)
    : matrix_(&matrix), kind_(kind) {
    if (kind == PreconditionerKind::None) return;
    factors_.reserve(matrix.diagonal.size());
    const SparseMatrix* previous = nullptr;
    for (const auto& block : matrix.diagonal) {
        // Interior blocks are frequently identical; share their factor.
        if (previous != nullptr && previous->nonZeros() == block.nonZeros() &&
            std::equal(block.valuePtr(), block.valuePtr() + block.nonZeros(), previous->valuePtr()) &&
            std::equal(block.innerIndexPtr(), block.innerIndexPtr() + block.nonZeros(), previous->innerIndexPtr())) {
            factors_.push_back(factors_.back());
        } else {
            factors_.push_back(std::make_shared<CholeskyFactor>(block));
        }
        previous = &block;
    }
}

Vector BlockPreconditioner::apply(const Vector& r) const {
    if (kind_ == PreconditionerKind::None) return r;
    const int b = matrix_->block_size;
    const int nb = matrix_->num_blocks();
    Vector y(r.size());
    if (kind_ == PreconditionerKind::BlockJacobi) {
        for (int k = 0; k < nb; ++k) y.segment(k * b, b) = factors_[k]->solve(Vector(r.segment(k * b, b)));
        return y;
    }
    // (D + L) y = r, then (D + L^T) z = D y.
    for (int k = 0; k < nb; ++k) {
        Vector rhs = r.segment(k * b, b);
        if (k > 0) rhs.noalias() -= matrix_->lower[k - 1] * y.segment((k - 1) * b, b);
        y.segment(k * b, b) = factors_[k]->solve(rhs);
    }
    Vector z = y;
    for (int k = nb - 2; k >= 0; --k) {
        const Vector coupling = matrix_->lower[k].transpose() * z.segment((k + 1) * b, b);
        z.segment(k * b, b) -= factors_[k]->solve(coupling);
    }
    return z;
}

LinearOperator BlockPreconditioner::as_operator() const {
    if (kind_ == PreconditionerKind::None) return {};
    return [this](const Vector& r) { return apply(r); };
}

// ---------------------------------------------------------------- spectrum

namespace {

// Preconditioned CG with a fixed iteration budget and no convergence test.
Vector cg_fixed(const LinearOperator& apply_a, const Vector& b, const LinearOperator& preconditioner, int iterations) {
    Vector x = Vector::Zero(b.size());
    Vector r = b;
    Vector z = preconditioner ? preconditioner(r) : r;
    Vector p = z;
    double rz = r.dot(z);
    for (int it = 0; it < iterations && rz > 0.0; ++it) {
        const Vector ap = apply_a(p);
        const double pap = p.dot(ap);
        if (!(pap > 0.0)) break;
        const double step = rz / pap;
        x += step * p;
        r -= step * ap;
        if (r.norm() <= 1e-15 * b.norm()) break;
        z = preconditioner ? preconditioner(r) : r;
        const double rz_next = r.dot(z);
        p = z + (rz_next / rz) * p;
        rz = rz_next;
    }
    return x;
}

}  // namespace

SpectrumBounds gershgorin_bounds(const SparseMatrix& a) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int i = 0; i < a.outerSize(); ++i) {
        double diag = 0.0;
        double radius = 0.0;
        for (SparseMatrix::InnerIterator it(a, i); it; ++it) {
            if (it.col() == i) diag = it.value();
            else radius += std::abs(it.value());
        }
        lo = std::min(lo, diag - radius);
        hi = std::max(hi, diag + radius);
    }
    return {std::max(lo, 1e-12 * hi), hi};
}

SpectrumBounds lanczos_extremes(const LinearOperator& apply_a, int dim, int steps, std::uint64_t seed) {
    require(dim > 0 && steps >= 1, ErrorKind::InvalidParameter, "Lanczos needs positive dimension and steps");
    steps = std::min(steps, dim);
    DenseMatrix basis(dim, steps);
    Vector alpha = Vector::Zero(steps);
    Vector beta = Vector::Zero(steps);
    basis.col(0) = rademacher(stream_key(seed, 0xb2, 0), dim).normalized();
    int m = 0;
    for (int j = 0; j < steps; ++j) {
        Vector w = apply_a(basis.col(j));
        alpha[j] = basis.col(j).dot(w);
        m = j + 1;
        // Full reorthogonalization; the basis is small.
        for (int pass = 0; pass < 2; ++pass) w -= basis.leftCols(m) * (basis.leftCols(m).transpose() * w);
        const double b = w.norm();
        if (j + 1 == steps || !(b > 1e-12 * std::abs(alpha[j]))) break;
        beta[j] = b;
        basis.col(j + 1) = w / b;
    }
    DenseMatrix t = DenseMatrix::Zero(m, m);
    for (int j = 0; j < m; ++j) {
        t(j, j) = alpha[j];
        if (j + 1 < m) t(j, j + 1) = t(j + 1, j) = beta[j];
    }
    const Vector ritz = Eigen::SelfAdjointEigenSolver<DenseMatrix>(t, Eigen::EigenvaluesOnly).eigenvalues();
    return {ritz.minCoeff(), ritz.maxCoeff()};
}

SpectrumBounds eigen_bounds(const LinearOperator& apply_a, int dim, const EigenBoundOptions& options) {
    require(dim > 0, ErrorKind::InvalidParameter, "eigen_bounds needs a positive dimension");
    if (options.lanczos_steps > 0) {
        const SpectrumBounds ritz = lanczos_extremes(apply_a, dim, options.lanczos_steps, options.seed);
        const double lower = options.lower_floor ? *options.lower_floor : ritz.lower * options.lower_margin;
        const double upper = ritz.upper * options.upper_margin;
        if (lower > 0.0 && upper > lower && std::isfinite(upper)) return {lower, upper};
        require(options.assembled != nullptr, ErrorKind::Convergence,
                "could not bound the spectrum and no assembled matrix is available");
        return gershgorin_bounds(*options.assembled);
    }
    Vector v = rademacher(stream_key(options.seed, 0xb0, 0), dim).normalized();
    double upper = 0.0;
    for (int it = 0; it < options.power_iterations; ++it) {
        Vector w = apply_a(v);
        const double norm = w.norm();
        if (!std::isfinite(norm) || norm == 0.0) break;
        upper = std::max(upper, v.dot(w));
        // |A v| bounds the Rayleigh quotient from above; keep the larger estimate.
        upper = std::max(upper, norm);
        v = w / norm;
    }
    upper *= options.upper_margin;

    double lower = 0.0;
    if (options.lower_floor) {
        lower = *options.lower_floor;
    } else {
        Vector u = rademacher(stream_key(options.seed, 0xb1, 0), dim).normalized();
        double rayleigh = std::numeric_limits<double>::infinity();
        for (int it = 0; it < options.inverse_iterations; ++it) {
            Vector w = cg_fixed(apply_a, u, options.preconditioner, options.inner_iterations);
            const double norm = w.norm();
            if (!std::isfinite(norm) || norm == 0.0) break;
            w /= norm;
            rayleigh = std::min(rayleigh, w.dot(apply_a(w)));
            u = w;
        }
        lower = std::isfinite(rayleigh) ? rayleigh * options.lower_margin : 0.0;
    }
    if (!(lower > 0.0) || !(upper > lower) || !std::isfinite(upper)) {
        require(options.assembled != nullptr, ErrorKind::Convergence,
                "could not bound the spectrum and no assembled matrix is available");
        const SpectrumBounds g = gershgorin_bounds(*options.assembled);
        if (!(lower > 0.0)) lower = g.lower;
        if (!(upper > lower) || !std::isfinite(upper)) upper = g.upper;
    }
    return {lower, upper};
}

// ---------------------------------------------------------------- Chebyshev / Hutchinson

ProbeSet::ProbeSet(int count, int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    require(count >= 1 && dim >= 1, ErrorKind::InvalidParameter, "probe count and dimension must be positive");
    probes_.reserve(static_cast<std::size_t>(count));
    for (int p = 0; p < count; ++p)
        probes_.push_back(rademacher(stream_key(seed, 0x9e, static_cast<std::uint64_t>(p)), dim));
}

DenseMatrix ProbeSet::matrix() const {
    DenseMatrix out(dim_, count());
    for (int p = 0; p < count(); ++p) out.col(p) = probes_[static_cast<std::size_t>(p)];
    return out;
}

std::vector<double> chebyshev_coefficients(const std::function<double(double)>& f, double lower, double upper,
                                           int order) {
    require(upper >= lower, ErrorKind::InvalidInterval, "Chebyshev interval must satisfy lower <= upper");
    require(order >= 1, ErrorKind::InvalidParameter, "Chebyshev order must be >= 1");
    const int m = order + 1;
    const double half = 0.5 * (upper - lower);
    const double mid = 0.5 * (upper + lower);
    std::vector<double> values(static_cast<std::size_t>(m));
    for (int k = 0; k < m; ++k) values[k] = f(mid + half * std::cos(std::numbers::pi * (k + 0.5) / m));
    std::vector<double> coeffs(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
        double sum = 0.0;
        for (int k = 0; k < m; ++k) sum += values[k] * std::cos(std::numbers::pi * j * (k + 0.5) / m);
        coeffs[j] = (j == 0 ? 1.0 : 2.0) * sum / m;
    }
    return coeffs;
}

std::vector<double> chebyshev_log_coefficients(double lower, double upper, int order) {
    require(lower > 0.0 && upper >= lower, ErrorKind::InvalidInterval, "Chebyshev interval must satisfy 0 < lower <= upper");
    return chebyshev_coefficients([](double x) { return std::log(x); }, lower, upper, order);
}

double chebyshev_trace(const LinearOperator& apply_a, int dim, int order, const ProbeSet& probes,
                       const SpectrumBounds& bounds, const std::function<double(double)>& f) {
    require(bounds.upper >= bounds.lower, ErrorKind::InvalidInterval, "Chebyshev interval must satisfy lower <= upper");
    require(order >= 1, ErrorKind::InvalidParameter, "Chebyshev order must be >= 1");
    require(probes.dim() == dim, ErrorKind::DimensionMismatch, "probe dimension does not match the operator");
    const double half = 0.5 * (bounds.upper - bounds.lower);
    const double mid = 0.5 * (bounds.upper + bounds.lower);
    if (half <= 1e-14 * std::abs(mid)) return dim * f(mid);
    const std::vector<double> c = chebyshev_coefficients(f, bounds.lower, bounds.upper, order);
    // B = (A - mid I) / half maps the spectrum into [-1, 1].
    const auto apply_b = [&](const Vector& x) -> Vector { return (apply_a(x) - mid * x) / half; };
    double total = 0.0;
    for (int p = 0; p < probes.count(); ++p) {
        const Vector& z = probes[p];
        Vector w_prev = z;
        Vector w = apply_b(z);
        double acc = c[0] * z.dot(w_prev) + c[1] * z.dot(w);
        for (int j = 2; j <= order; ++j) {
            Vector w_next = 2.0 * apply_b(w) - w_prev;
            acc += c[j] * z.dot(w_next);
            w_prev = std::move(w);
            w = std::move(w_next);
        }
        total += acc;
    }
    return total / probes.count();
}

double chebyshev_trace_block(const BlockOperator& apply_a, int dim, int order, const ProbeSet& probes,
                             const SpectrumBounds& bounds, const std::function<double(double)>& f) {
    require(bounds.upper >= bounds.lower, ErrorKind::InvalidInterval, "Chebyshev interval must satisfy lower <= upper");
    require(order >= 1, ErrorKind::InvalidParameter, "Chebyshev order must be >= 1");
    require(probes.dim() == dim, ErrorKind::DimensionMismatch, "probe dimension does not match the operator");
    const double half = 0.5 * (bounds.upper - bounds.lower);
    const double mid = 0.5 * (bounds.upper + bounds.lower);
    if (half <= 1e-14 * std::abs(mid)) return dim * f(mid);
    const std::vector<double> c = chebyshev_coefficients(f, bounds.lower, bounds.upper, order);
    const auto apply_b = [&](const DenseMatrix& x) -> DenseMatrix { return (apply_a(x) - mid * x) / half; };
    const DenseMatrix z = probes.matrix();
    DenseMatrix w_prev = z;
    DenseMatrix w = apply_b(z);
    double acc = c[0] * z.squaredNorm() + c[1] * z.cwiseProduct(w).sum();
    for (int j = 2; j <= order; ++j) {
        DenseMatrix w_next = 2.0 * apply_b(w) - w_prev;
        acc += c[j] * z.cwiseProduct(w_next).sum();
        w_prev = std::move(w);
        w = std::move(w_next);
    }
    return acc / probes.count();
}

double chebyshev_logdet(const LinearOperator& apply_a, int dim, int order, const ProbeSet& probes,
                        const SpectrumBounds& bounds) {
    require(bounds.lower > 0.0 && bounds.upper >= bounds.lower, ErrorKind::InvalidInterval,
            "Chebyshev interval must satisfy 0 < lower <= upper");
    return chebyshev_trace(apply_a, dim, order, probes, bounds, [](double x) { return std::log(x); });
}

}  // namespace advspde
