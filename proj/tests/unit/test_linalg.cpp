#include "advspde/fem.hpp"
#include "advspde/linalg.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

using namespace advspde;

namespace {

SparseMatrix random_spd(int n, double density, std::uint64_t seed, double shift = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::bernoulli_distribution keep(density);
    DenseMatrix b = DenseMatrix::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i == j || keep(rng)) b(i, j) = unif(rng);
    DenseMatrix a = b * b.transpose() + shift * DenseMatrix::Identity(n, n);
    return a.sparseView();
}

LinearOperator as_op(const SparseMatrix& a) {
    return [&a](const Vector& x) -> Vector { return a * x; };
}

// Q_A-like block-tridiagonal system from a small space-time precision.
BlockTridiagonal space_time_system(int side, int blocks) {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, side, side, 0.0);
    const FemAssembly fem(mesh, Mat2::Identity());
    const SparseMatrix k = operator_matrix(fem.mass(), fem.stiffness(), 4.0, 1);
    const SparseMatrix j = SparseMatrix(fem.mass() + 0.3 * (k + fem.advection(Vec2(2.0, 1.0))));
    const Vector minv = fem.mass_diagonal().cwiseInverse();
    const double s = 50.0;
    SparseMatrix finv = s * SparseMatrix(j.transpose() * minv.asDiagonal() * j);
    SparseMatrix couple = -s * SparseMatrix(j.transpose());
    SparseMatrix mass_s = s * fem.mass();
    BlockTridiagonal bt;
    bt.block_size = fem.size();
    for (int b = 0; b < blocks; ++b) {
        SparseMatrix d = b + 1 < blocks ? SparseMatrix(finv + mass_s) : finv;
        if (b == 0) d = SparseMatrix(fem.mass() * 10.0 + mass_s);
        // A few observation contributions per block.
        SparseMatrix obs(bt.block_size, bt.block_size);
        obs.insert((7 * b) % bt.block_size, (7 * b) % bt.block_size) = 25.0;
        d = SparseMatrix(d + obs);
        bt.diagonal.push_back(d);
        if (b + 1 < blocks) bt.lower.push_back(couple);
    }
    return bt;
}

}  // namespace

TEST_CASE("Cholesky of identity and scaled identity") {
    SparseMatrix eye(6, 6);
    eye.setIdentity();
    CholeskyFactor f(eye);
    CHECK(f.logdet() == doctest::Approx(0.0));
    SparseMatrix two = 2.0 * SparseMatrix(Eigen::VectorXd::Ones(5).asDiagonal().toDenseMatrix().sparseView());
    CHECK(CholeskyFactor(two).logdet() == doctest::Approx(5.0 * std::log(2.0)));
}

TEST_CASE("Cholesky reconstruction on a random SPD matrix") {
    const SparseMatrix a = random_spd(50, 0.08, 5);
    CholeskyFactor f(a);
    const DenseMatrix l = DenseMatrix(f.lower());
    const std::vector<int> perm = f.permutation();
    DenseMatrix pap(50, 50);
    const DenseMatrix ad(a);
    for (int i = 0; i < 50; ++i)
        for (int j = 0; j < 50; ++j) pap(i, j) = ad(perm[i], perm[j]);
    CHECK((l * l.transpose() - pap).norm() / ad.norm() <= 1e-12);
    CHECK(l.diagonal().minCoeff() > 0.0);
    CHECK(f.logdet() == doctest::Approx(std::log(ad.determinant())).epsilon(1e-10));
    const Vector b = Vector::LinSpaced(50, -1.0, 2.0);
    CHECK((ad * f.solve(b) - b).norm() < 1e-10);
}

TEST_CASE("Cholesky sample has covariance A^-1") {
    const SparseMatrix a = random_spd(8, 0.3, 9);
    CholeskyFactor f(a);
    DenseMatrix s(8, 8);
    for (int i = 0; i < 8; ++i) s.col(i) = f.sample(Vector::Unit(8, i));
    // Columns of the linear map x = S z satisfy S S^T = A^-1.
    CHECK((s * s.transpose() - DenseMatrix(a).inverse()).norm() < 1e-10);
}

TEST_CASE("Cholesky refactorization reuses the pattern and reports the failing pivot") {
    SparseMatrix a = random_spd(20, 0.2, 2);
    CholeskyFactor f(a);
    const double first = f.logdet();
    SparseMatrix b = a * 3.0;
    f.factorize(b);
    CHECK(f.logdet() == doctest::Approx(first + 20.0 * std::log(3.0)));
    SparseMatrix bad = a;
    bad.coeffRef(4, 4) = -100.0;
    try {
        f.factorize(bad);
        FAIL("expected NotSpdError");
    } catch (const NotSpdError& e) {
        CHECK(e.kind() == ErrorKind::NotSpd);
        CHECK(e.pivot() >= 0);
        CHECK(e.pivot() < 20);
    }
    f.factorize(a);
    CHECK(f.logdet() == doctest::Approx(first));
}

TEST_CASE("PCG trivial cases") {
    SparseMatrix eye(10, 10);
    eye.setIdentity();
    const auto zero = pcg(as_op(eye), Vector::Zero(10), {}, 1e-8, 10);
    CHECK(zero.iterations == 0);
    CHECK(zero.x.norm() == 0.0);
    const Vector b = Vector::LinSpaced(10, 1.0, 3.0);
    const auto one = pcg(as_op(eye), b, {}, 1e-8, 10);
    CHECK(one.iterations == 1);
    CHECK((one.x - b).norm() < 1e-14);
}

TEST_CASE("PCG reports the best iterate when it runs out of iterations") {
    const SparseMatrix a = random_spd(60, 0.1, 4, 1e-3);
    const Vector b = Vector::Ones(60);
    try {
        pcg(as_op(a), b, {}, 1e-12, 3);
        FAIL("expected a convergence error");
    } catch (const ConvergenceError& e) {
        CHECK(e.best().size() == 60);
        CHECK(e.residual() > 1e-12);
        CHECK(e.residual() < 1.0);
    }
}

TEST_CASE("PCG on a space-time system: preconditioners agree with the dense solve") {
    const BlockTridiagonal bt = space_time_system(10, 6);
    const SparseMatrix assembled = bt.assemble();
    const DenseMatrix dense(assembled);
    const Vector b = Vector::LinSpaced(bt.size(), -1.0, 1.0).array().sin();
    const Vector reference = dense.ldlt().solve(b);
    const LinearOperator apply = [&bt](const Vector& x) { return bt.apply(x); };
    CHECK((apply(b) - assembled * b).norm() < 1e-10 * b.norm());

    const auto plain = pcg(apply, b, {}, 1e-10, 5000);
    BlockPreconditioner jacobi(bt, PreconditionerKind::BlockJacobi);
    BlockPreconditioner gauss_seidel(bt, PreconditionerKind::BlockGaussSeidel);
    const auto bj = pcg(apply, b, jacobi.as_operator(), 1e-10, 5000);
    const auto gs = pcg(apply, b, gauss_seidel.as_operator(), 1e-10, 5000);
    const double scale = reference.norm();
    CHECK((plain.x - reference).norm() / scale < 1e-7);
    CHECK((bj.x - reference).norm() / scale < 1e-7);
    CHECK((gs.x - reference).norm() / scale < 1e-7);
    CHECK(gs.iterations < plain.iterations);
    CHECK(bj.iterations < plain.iterations);
    CHECK(gs.residual_history.front() == doctest::Approx(1.0));
}

TEST_CASE("symmetric Gauss-Seidel preconditioner is a symmetric operator") {
    const BlockTridiagonal bt = space_time_system(5, 4);
    BlockPreconditioner gs(bt, PreconditionerKind::BlockGaussSeidel);
    const int n = bt.size();
    DenseMatrix p(n, n);
    for (int i = 0; i < n; ++i) p.col(i) = gs.apply(Vector::Unit(n, i));
    CHECK((p - p.transpose()).cwiseAbs().maxCoeff() < 1e-10 * p.cwiseAbs().maxCoeff());
}

TEST_CASE("eigen bounds enclose the spectrum") {
    SparseMatrix d(10, 10);
    for (int i = 0; i < 10; ++i) d.insert(i, i) = i + 1.0;
    const auto bd = eigen_bounds(as_op(d), 10);
    CHECK(bd.lower > 0.0);
    CHECK(bd.lower <= 1.0);
    CHECK(bd.upper >= 10.0);

    SparseMatrix eye(7, 7);
    eye.setIdentity();
    const auto bi = eigen_bounds(as_op(eye), 7);
    CHECK(bi.lower <= 1.0);
    CHECK(bi.upper >= 1.0);

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const SparseMatrix a = random_spd(30, 0.2, seed, 0.5);
        Eigen::SelfAdjointEigenSolver<DenseMatrix> eig{DenseMatrix(a)};
        const auto b = eigen_bounds(as_op(a), 30);
        CHECK(b.upper >= eig.eigenvalues().maxCoeff());
        CHECK(b.lower <= eig.eigenvalues().minCoeff());
        CHECK(b.lower > 0.0);
    }
}

TEST_CASE("Gershgorin fallback") {
    const SparseMatrix a = random_spd(12, 0.3, 8);
    const auto g = gershgorin_bounds(a);
    Eigen::SelfAdjointEigenSolver<DenseMatrix> eig{DenseMatrix(a)};
    CHECK(g.upper >= eig.eigenvalues().maxCoeff());
    CHECK(g.lower > 0.0);
}

TEST_CASE("probe sets are frozen by their seed") {
    const ProbeSet a(4, 33, 99), b(4, 33, 99), c(4, 33, 100);
    CHECK((a[2] - b[2]).norm() == 0.0);
    CHECK((a[2] - c[2]).norm() > 0.0);
    for (int p = 0; p < 4; ++p) CHECK(a[p].cwiseAbs().minCoeff() == 1.0);
    CHECK(a[0].cwiseAbs().maxCoeff() == 1.0);
}

TEST_CASE("Chebyshev log-determinant") {
    SparseMatrix c(9, 9);
    for (int i = 0; i < 9; ++i) c.insert(i, i) = 2.5;
    const ProbeSet probes9(3, 9, 1);
    CHECK(chebyshev_logdet(as_op(c), 9, 1, probes9, {2.5, 2.5}) == doctest::Approx(9.0 * std::log(2.5)));
    CHECK_THROWS_AS(chebyshev_logdet(as_op(c), 9, 5, probes9, {0.0, 3.0}), Error);

    const SparseMatrix a = random_spd(40, 0.1, 21);
    Eigen::SelfAdjointEigenSolver<DenseMatrix> eig{DenseMatrix(a)};
    const double exact = eig.eigenvalues().array().log().sum();
    const ProbeSet probes(64, 40, 5);
    const auto bounds = eigen_bounds(as_op(a), 40);
    const double est = chebyshev_logdet(as_op(a), 40, 100, probes, bounds);
    CHECK(std::abs(est - exact) <= 0.02 * std::abs(exact));
    CHECK(chebyshev_logdet(as_op(a), 40, 100, probes, bounds) == est);

    // With the exact trace (all unit vectors) the error decays with the order.
    double previous = std::numeric_limits<double>::infinity();
    for (int order : {5, 15, 45}) {
        const auto coeffs = chebyshev_log_coefficients(bounds.lower, bounds.upper, order);
        const double mid = 0.5 * (bounds.upper + bounds.lower), half = 0.5 * (bounds.upper - bounds.lower);
        double sum = 0.0;
        for (double lam : eig.eigenvalues()) {
            const double x = (lam - mid) / half;
            double t0 = 1.0, t1 = x, value = coeffs[0] + coeffs[1] * x;
            for (int j = 2; j <= order; ++j) {
                const double t2 = 2.0 * x * t1 - t0;
                value += coeffs[j] * t2;
                t0 = t1;
                t1 = t2;
            }
            sum += value;
        }
        const double err = std::abs(sum - exact);
        CHECK(err < previous);
        previous = err;
    }
}
