#include "advspde/error.hpp"
#include "advspde/fem.hpp"

#include <doctest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

using namespace advspde;

namespace {

DenseMatrix dense(const SparseMatrix& m) { return DenseMatrix(m); }

// Unit square split along the SW-NE diagonal: vertices 0=(0,0), 1=(1,0), 2=(0,1), 3=(1,1),
// triangles (0,1,3) and (0,3,2), each a unit right triangle.
TriangularMesh unit_square() { return build_grid_mesh({0, 1}, {0, 1}, 2, 2, 0.0); }

}  // namespace

TEST_CASE("consistent and lumped mass on the unit square") {
    const auto mesh = unit_square();
    const DenseMatrix m = dense(assemble_mass(mesh, false));
    // Vertices 0 and 3 belong to both triangles, 1 and 2 to one.
    CHECK(m(0, 0) == doctest::Approx(2.0 / 12.0));
    CHECK(m(1, 1) == doctest::Approx(1.0 / 12.0));
    CHECK(m(0, 1) == doctest::Approx(1.0 / 24.0));
    CHECK(m(0, 3) == doctest::Approx(2.0 / 24.0));
    CHECK(m(1, 2) == 0.0);
    const DenseMatrix ml = dense(assemble_mass(mesh, true));
    CHECK(ml(1, 1) == doctest::Approx(1.0 / 6.0));
    CHECK(ml(0, 0) == doctest::Approx(1.0 / 3.0));
    CHECK((ml.diagonal() - m.rowwise().sum()).norm() < 1e-15);
}

TEST_CASE("lumped mass trace equals the padded area") {
    const auto mesh = build_grid_mesh({0, 3}, {1, 2}, 7, 4, 0.4);
    const SparseMatrix m = assemble_mass(mesh, true);
    CHECK(m.nonZeros() == static_cast<long>(mesh.num_vertices()));
    CHECK(m.diagonal().sum() == doctest::Approx(mesh.padded_x().extent() * mesh.padded_y().extent()));
    CHECK(m.diagonal().minCoeff() > 0.0);
}

TEST_CASE("stiffness on the unit square matches the hand-integrated element") {
    const auto mesh = unit_square();
    const DenseMatrix g = dense(assemble_stiffness(mesh, Mat2::Identity()));
    // Right-triangle element: 1 at the right angle, 1/2 at the acute corners,
    // -1/2 along the legs, 0 across the hypotenuse.
    DenseMatrix expected(4, 4);
    expected << 1, -0.5, -0.5, 0, -0.5, 1, 0, -0.5, -0.5, 0, 1, -0.5, 0, -0.5, -0.5, 1;
    CHECK((g - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("stiffness rows sum to zero and scale linearly in H") {
    const auto mesh = build_grid_mesh({0, 2}, {0, 1}, 6, 4, 0.3);
    Mat2 h;
    h << 2.0, 0.3, 0.3, 0.7;
    const SparseMatrix g = assemble_stiffness(mesh, h);
    CHECK(DenseMatrix(g).rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
    CHECK(asymmetry(g) < 1e-12);
    const DenseMatrix g1 = dense(assemble_stiffness(mesh, Mat2::Identity()));
    const DenseMatrix g3 = dense(assemble_stiffness(mesh, 3.0 * Mat2::Identity()));
    CHECK((g3 - 3.0 * g1).cwiseAbs().maxCoeff() < 1e-12);
    Mat2 bad;
    bad << 1.0, 2.0, 2.0, 1.0;
    CHECK_THROWS_AS(assemble_stiffness(mesh, bad), Error);
}

TEST_CASE("entries only couple vertices that share a triangle") {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, 4, 4, 0.0);
    const int n = static_cast<int>(mesh.num_vertices());
    DenseMatrix adjacent = DenseMatrix::Zero(n, n);
    for (const auto& tri : mesh.triangles())
        for (int a : tri)
            for (int b : tri) adjacent(a, b) = 1.0;
    Mat2 h;
    h << 1.0, 0.2, 0.2, 1.5;
    for (const SparseMatrix& m : {assemble_stiffness(mesh, h), assemble_advection(mesh, Vec2(0.3, -1.0)),
                                  assemble_stabilization(mesh, Vec2(0.3, -1.0)), assemble_mass(mesh, false)}) {
        const DenseMatrix d = dense(m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (adjacent(i, j) == 0.0) CHECK(d(i, j) == 0.0);
    }
}

TEST_CASE("advection column sums are boundary fluxes") {
    const auto mesh = unit_square();
    const DenseMatrix b = dense(assemble_advection(mesh, Vec2(1.0, 0.0)));
    // sum_i B_ij = int d(psi_j)/dx = (flux through x = 1) - (flux through x = 0) = +-1/2.
    const Vector sums = b.colwise().sum();
    CHECK(sums[0] == doctest::Approx(-0.5));
    CHECK(sums[1] == doctest::Approx(0.5));
    CHECK(sums[2] == doctest::Approx(-0.5));
    CHECK(sums[3] == doctest::Approx(0.5));
    // Rows: int psi_i * d(sum_j psi_j)/dx = 0.
    CHECK(b.rowwise().sum().cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("advection is linear in gamma and zero at rest") {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, 5, 5, 0.0);
    CHECK(dense(assemble_advection(mesh, Vec2(0, 0))).cwiseAbs().maxCoeff() == 0.0);
    const DenseMatrix b1 = dense(assemble_advection(mesh, Vec2(0.4, -0.9)));
    const DenseMatrix b2 = dense(assemble_advection(mesh, Vec2(0.8, -1.8)));
    CHECK((b2 - 2.0 * b1).cwiseAbs().maxCoeff() < 1e-13);
}

TEST_CASE("advection is skew-adjoint away from the boundary") {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, 9, 9, 0.0);
    const DenseMatrix b = dense(assemble_advection(mesh, Vec2(1.3, -0.6)));
    const DenseMatrix sym = b + b.transpose();
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    Vector u = Vector::Zero(81), v = Vector::Zero(81);
    // Vertices at least two cells from the edge have supports inside the domain.
    for (int row = 2; row <= 6; ++row)
        for (int col = 2; col <= 6; ++col) {
            u[row * 9 + col] = normal(rng);
            v[row * 9 + col] = normal(rng);
        }
    CHECK(std::abs(u.dot(sym * v)) < 1e-13);
    CHECK(std::abs(u.dot(b * v)) > 1e-3);
}

TEST_CASE("stabilization is PSD, homogeneous of degree one and a rank-one stiffness") {
    const auto mesh = build_grid_mesh({0, 2}, {0, 1}, 6, 4, 0.0);
    const Vec2 gamma(1.5, -0.5);
    const DenseMatrix s = dense(assemble_stabilization(mesh, gamma));
    CHECK(asymmetry(assemble_stabilization(mesh, gamma)) < 1e-13);
    Eigen::SelfAdjointEigenSolver<DenseMatrix> eig(s);
    CHECK(eig.eigenvalues().minCoeff() > -1e-12);
    const DenseMatrix s3 = dense(assemble_stabilization(mesh, 3.0 * gamma));
    CHECK((s3 - 3.0 * s).cwiseAbs().maxCoeff() < 1e-12);
    // Limit of SPD stiffness assemblies with gamma gamma^T + eps I.
    const double eps = 1e-9;
    const DenseMatrix g_eps =
        dense(assemble_stiffness(mesh, gamma * gamma.transpose() + eps * Mat2::Identity()));
    const DenseMatrix g_id = dense(assemble_stiffness(mesh, Mat2::Identity()));
    const DenseMatrix limit = mesh.h() / gamma.norm() * (g_eps - eps * g_id);
    CHECK((s - limit).cwiseAbs().maxCoeff() < 1e-10);
    CHECK_THROWS_AS(assemble_stabilization(mesh, Vec2(0, 0)), Error);
}

TEST_CASE("operator matrix for both exponents") {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, 4, 4, 0.0);
    const SparseMatrix m = assemble_mass(mesh, true);
    const SparseMatrix g = assemble_stiffness(mesh, Mat2::Identity());
    const SparseMatrix zero(m.rows(), m.cols());
    CHECK((dense(operator_matrix(m, zero, 1.0, 1)) - dense(m)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((dense(operator_matrix(m, g, 3.0, 0)) - dense(m)).cwiseAbs().maxCoeff() == 0.0);
    const DenseMatrix k = dense(operator_matrix(m, g, 0.5, 1));
    CHECK((k - (0.25 * dense(m) + dense(g))).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(operator_matrix(m, g, 1.0, 2), Error);
}

TEST_CASE("tau tilde restores the unstabilized variance") {
    CHECK(tau_tilde(1.7, Mat2::Identity(), Vec2(0, 0), 0.5) == 1.7);
    CHECK(tau_tilde(1.0, Mat2::Identity(), Vec2(1, 0), 1.0) == doctest::Approx(std::pow(2.0, 0.25)));
    Mat2 h;
    h << 2.0, 0.4, 0.4, 1.0;
    const Vec2 gamma(0.7, -1.2);
    const double step = 0.3;
    const Mat2 eff = h + step / gamma.norm() * gamma * gamma.transpose();
    // Matrix determinant lemma.
    CHECK(eff.determinant() ==
          doctest::Approx(h.determinant() * (1.0 + step / gamma.norm() * gamma.dot(h.inverse() * gamma))));
    const double tt = tau_tilde(0.9, h, gamma, step);
    CHECK(tt * tt / std::sqrt(eff.determinant()) == doctest::Approx(0.81 / std::sqrt(h.determinant())));
}

TEST_CASE("colored noise precision") {
    const auto mesh = build_grid_mesh({0, 1}, {0, 1}, 5, 5, 0.0);
    const SparseMatrix m = assemble_mass(mesh, true);
    const SparseMatrix zero(m.rows(), m.cols());
    CHECK_FALSE(colored_noise_precision(m, m, 0).has_value());
    const auto q_white_k = colored_noise_precision(m, operator_matrix(m, zero, 1.0, 1), 2);
    REQUIRE(q_white_k.has_value());
    CHECK((dense(*q_white_k) - dense(m)).cwiseAbs().maxCoeff() < 1e-15);
    const SparseMatrix k = operator_matrix(m, assemble_stiffness(mesh, Mat2::Identity()), 0.8, 1);
    const SparseMatrix q = *colored_noise_precision(m, k, 2);
    CHECK(asymmetry(q) < 1e-12);
    Eigen::LLT<DenseMatrix> llt(dense(q));
    CHECK(llt.info() == Eigen::Success);
    CHECK_THROWS_AS(colored_noise_precision(m, k, 1), Error);
}

TEST_CASE("assembly recombination matches direct assembly") {
    const auto mesh = build_grid_mesh({0, 2}, {0, 2}, 6, 6, 0.5);
    Mat2 h;
    h << 1.2, -0.1, -0.1, 0.8;
    const FemAssembly fem(mesh, h);
    const Vec2 gamma(-0.6, 1.1);
    CHECK((dense(fem.advection(gamma)) - dense(assemble_advection(mesh, gamma))).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((dense(fem.stabilization(gamma)) - dense(assemble_stabilization(mesh, gamma))).cwiseAbs().maxCoeff() <
          1e-13);
    CHECK(fem.stabilization(Vec2(0, 0)).nonZeros() == fem.stiffness().nonZeros());
    CHECK(dense(fem.stabilization(Vec2(0, 0))).cwiseAbs().maxCoeff() == 0.0);
    const FemSystem sys = fem.system(gamma, 0.5, 1, true);
    CHECK(sys.stabilization.has_value());
    CHECK((dense(sys.op) - (0.25 * dense(fem.mass()) + dense(fem.stiffness()))).cwiseAbs().maxCoeff() < 1e-14);
    // Bit-identical reassembly.
    const FemAssembly again(mesh, h);
    CHECK((dense(again.stiffness()) - dense(fem.stiffness())).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("coordinate dump") {
    const auto mesh = unit_square();
    const std::string text = to_coordinate_text(assemble_mass(mesh, true));
    CHECK(text.find("1 1 0.16666666666666666") != std::string::npos);
}
