#include "advspde/inference.hpp"
#include "advspde/rng.hpp"
#include "dense_oracle.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace advspde;
using namespace advspde::testing;

namespace {

// Members refer to each other, so instances are built in place and never moved.
struct Problem {
    Instance in;
    ObservationSet obs;
    FullParams psi;

    Problem(ModelConfig cfg, int per_step, std::uint64_t seed)
        : in(5, 2.0, cfg, {1.1, Vec2(0.8, -0.4), 0.7, 0.9}),
          psi{in.theta, Vector(Eigen::Vector2d(0.2, 0.4)), 0.6} {
        std::mt19937_64 gen(seed);
        std::uniform_real_distribution<double> u(0.0, 2.0);
        std::normal_distribution<double> z;
        std::vector<SpaceTimePoint> pts;
        for (int k = 0; k < cfg.num_blocks(); ++k)
            for (int i = 0; i < per_step; ++i) pts.push_back({k, u(gen), u(gen)});
        const int n = static_cast<int>(pts.size());
        DenseMatrix cov(n, 2);
        Vector y(n);
        for (int i = 0; i < n; ++i) {
            cov(i, 0) = 1.0;
            cov(i, 1) = pts[i].x - 1.0;
            y[i] = 0.3 + 0.5 * cov(i, 1) + z(gen);
        }
        obs = make_observations(in.mesh, pts, y, cov, cfg.num_blocks());
    }
};

struct DenseLikelihood {
    double value;
    double logdet;
    double quadratic;
    Vector gls;
};

DenseLikelihood dense_likelihood(const Problem& p, bool stabilized) {
    const auto model = build_propagation(p.in.fem, p.in.theta, p.in.config);
    const DenseMatrix sigma = DenseMatrix(model.initial().precision()).inverse();
    const DenseMatrix cov = joint_covariance(sigma, dense_dynamics(p.in, stabilized), p.in.config.num_steps);
    const DenseMatrix a = DenseMatrix(p.obs.projection);
    const int n = p.obs.size();
    const DenseMatrix sy = a * cov * a.transpose() + p.psi.sigma0 * p.psi.sigma0 * DenseMatrix::Identity(n, n);
    const Eigen::LLT<DenseMatrix> llt(sy);
    const Vector r = p.obs.y - p.obs.covariates * p.psi.b;
    const double logdet = 2.0 * DenseMatrix(llt.matrixL()).diagonal().array().log().sum();
    const double quad = r.dot(llt.solve(r));
    const DenseMatrix& l = p.obs.covariates;
    const Vector gls = (l.transpose() * llt.solve(l)).ldlt().solve(l.transpose() * llt.solve(p.obs.y));
    return {-0.5 * n * std::log(2.0 * std::numbers::pi) - 0.5 * logdet - 0.5 * quad, logdet, quad, gls};
}

}  // namespace

TEST_CASE("Cholesky likelihood matches the dense Gaussian density") {
    for (Stabilization stab : {Stabilization::Off, Stabilization::On}) {
        ModelConfig cfg = base_config(3);
        cfg.stabilize = stab;
        const Problem p(cfg, 6, 11);
        LikelihoodEvaluator ev(p.obs, p.in.fem, cfg, {});
        const LikelihoodTerms t = ev.evaluate(p.psi);
        const DenseLikelihood d = dense_likelihood(p, t.stabilized);
        CHECK(std::abs(t.value - d.value) < 1e-6);
        CHECK(t.logdet_sigma_y == doctest::Approx(d.logdet).epsilon(1e-8));
        CHECK(t.quadratic == doctest::Approx(d.quadratic).epsilon(1e-8));
        CHECK((ev.gls_fixed_effects(p.psi.theta, p.psi.sigma0) - d.gls).norm() < 1e-8 * (1.0 + d.gls.norm()));
    }
}

TEST_CASE("matrix-free likelihood agrees with the Cholesky route") {
    ModelConfig cfg = base_config(4);
    const Problem p(cfg, 6, 12);
    LikelihoodEvaluator chol(p.obs, p.in.fem, cfg, {});
    const LikelihoodTerms tc = chol.evaluate(p.psi);
    for (bool precondition : {true, false}) {
        LikelihoodOptions opt;
        opt.method = Method::MatrixFree;
        opt.chebyshev_order = 100;
        opt.num_probes = 64;
        opt.cg_tol = 1e-10;
        opt.precondition_logdet = precondition;
        LikelihoodEvaluator mf(p.obs, p.in.fem, cfg, opt);
        const LikelihoodTerms tm = mf.evaluate(p.psi);
        CHECK(tm.quadratic == doctest::Approx(tc.quadratic).epsilon(1e-8));
        CHECK(tm.logdet_q == doctest::Approx(tc.logdet_q).epsilon(1e-12));
        if (precondition) {
            CHECK(std::abs(tm.value - tc.value) < 0.005 * std::abs(tc.value));
            CHECK(std::abs(tm.logdet_qa - tc.logdet_qa) < 0.005 * std::abs(tc.logdet_qa));
        } else {
            // The unscaled spectrum spans about six decades, too wide for order 100.
            CHECK(std::abs(tm.logdet_qa - tc.logdet_qa) < 0.05 * std::abs(tc.logdet_qa));
        }
        CHECK(tm.cg_iterations > 0);
        CHECK((mf.gls_fixed_effects(p.psi.theta, p.psi.sigma0) - chol.gls_fixed_effects(p.psi.theta, p.psi.sigma0))
                  .norm() < 1e-6);
    }
}

TEST_CASE("block-preconditioned log-determinant is exact when blocks decouple") {
    // With N_T = 0 the precision is one block and the scaled operator is the identity.
    ModelConfig cfg = base_config(0);
    const Problem p(cfg, 8, 13);
    LikelihoodOptions opt;
    opt.method = Method::MatrixFree;
    LikelihoodEvaluator mf(p.obs, p.in.fem, cfg, opt);
    LikelihoodEvaluator chol(p.obs, p.in.fem, cfg, {});
    CHECK(mf.evaluate(p.psi).logdet_qa == doctest::Approx(chol.evaluate(p.psi).logdet_qa).epsilon(1e-8));
}

TEST_CASE("large noise variance recovers the independent Gaussian likelihood") {
    ModelConfig cfg = base_config(2);
    Problem p(cfg, 5, 14);
    p.psi.sigma0 = 1e4;
    const double l = log_likelihood(p.psi, p.obs, p.in.fem, cfg, {});
    const Vector r = p.obs.y - p.obs.covariates * p.psi.b;
    const int n = p.obs.size();
    const double var = p.psi.sigma0 * p.psi.sigma0;
    const double indep = -0.5 * n * std::log(2.0 * std::numbers::pi * var) - 0.5 * r.squaredNorm() / var;
    CHECK(std::abs(l - indep) < 1e-6);
}

TEST_CASE("likelihood ignores the order of observations") {
    ModelConfig cfg = base_config(2);
    const Problem p(cfg, 7, 15);
    std::vector<int> perm(p.obs.size());
    for (int i = 0; i < p.obs.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), std::mt19937(3));
    std::vector<SpaceTimePoint> pts;
    Vector y(p.obs.size());
    DenseMatrix cov(p.obs.size(), p.obs.num_covariates());
    for (int i = 0; i < p.obs.size(); ++i) {
        pts.push_back(p.obs.points[perm[i]]);
        y[i] = p.obs.y[perm[i]];
        cov.row(i) = p.obs.covariates.row(perm[i]);
    }
    const ObservationSet shuffled = make_observations(p.in.mesh, pts, y, cov, cfg.num_blocks());
    const double a = log_likelihood(p.psi, p.obs, p.in.fem, cfg, {});
    const double b = log_likelihood(p.psi, shuffled, p.in.fem, cfg, {});
    CHECK(a == doctest::Approx(b).epsilon(1e-10));
}

TEST_CASE("likelihood is smooth in kappa: central differences converge at second order") {
    ModelConfig cfg = base_config(2);
    const Problem p(cfg, 6, 16);
    LikelihoodEvaluator ev(p.obs, p.in.fem, cfg, {});
    const auto f = [&](double log_kappa) {
        FullParams q = p.psi;
        q.theta.kappa = std::exp(log_kappa);
        return ev.evaluate(q).value;
    };
    const double x = std::log(p.psi.theta.kappa);
    const auto fd = [&](double h) { return (f(x + h) - f(x - h)) / (2.0 * h); };
    const double d1 = fd(1e-2), d2 = fd(5e-3);
    const double richardson = (4.0 * d2 - d1) / 3.0;
    CHECK(std::abs(fd(1e-4) - richardson) < 1e-5 * (1.0 + std::abs(richardson)));
}

TEST_CASE("observation validation") {
    const TriangularMesh mesh = build_grid_mesh({0, 1}, {0, 1}, 3, 3, 0.0);
    CHECK_THROWS_AS(make_observations(mesh, {}, Vector(), DenseMatrix(), 2), Error);
    DenseMatrix dup(2, 2);
    dup << 1, 1, 1, 1;
    try {
        make_observations(mesh, {{0, 0.1, 0.1}, {1, 0.2, 0.2}}, Vector::Ones(2), dup, 2);
        FAIL("rank-deficient covariates accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Data);
    }
    try {
        make_observations(mesh, {{2, 0.1, 0.1}}, Vector::Ones(1), DenseMatrix(), 2);
        FAIL("time index outside the window accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::OutOfDomain);
    }
}

namespace {

struct BenchmarkData {
    TriangularMesh mesh;
    FemAssembly fem;
    ModelConfig cfg;
    ObservationSet obs;

    BenchmarkData(std::uint64_t seed, ParameterVector theta, int stations)
        : mesh(build_grid_mesh({0, 30}, {0, 30}, 30, 30, 0.0)), fem(mesh, Mat2::Identity()) {
        cfg.num_steps = 9;
        const auto model = build_propagation(fem, theta, cfg);
        const DenseMatrix field = simulate(model, seed, 0);
        std::vector<int> nodes(mesh.num_vertices());
        for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = static_cast<int>(i);
        std::shuffle(nodes.begin(), nodes.end(), std::mt19937_64(seed + 1));
        std::vector<SpaceTimePoint> pts;
        std::vector<double> values;
        std::normal_distribution<double> z;
        std::mt19937_64 gen(seed + 2);
        for (int k = 0; k <= cfg.num_steps; ++k)
            for (int s = 0; s < stations; ++s) {
                const Vec2 v = mesh.vertices()[nodes[s]];
                pts.push_back({k, v.x(), v.y()});
                values.push_back(field(k, nodes[s]) + 0.1 * z(gen));
            }
        const Vector y = Eigen::Map<Vector>(values.data(), static_cast<long>(values.size()));
        obs = make_observations(mesh, pts, y, DenseMatrix::Ones(y.size(), 1), cfg.num_blocks());
    }
};

}  // namespace

TEST_CASE("initial values: kappa within a factor of two, zero drift, clamped c") {
    const ParameterVector truth{0.5, Vec2(2.0, 2.0), 1.0, 1.0};
    int within = 0;
    const int seeds = 20;
    for (int s = 0; s < seeds; ++s) {
        const BenchmarkData d(100 + s, truth, 100);
        const FullParams init = initial_values(d.obs, d.fem, d.cfg);
        within += (init.theta.kappa > 0.25 && init.theta.kappa < 1.0) ? 1 : 0;
        CHECK(init.theta.gamma.norm() == 0.0);
        CHECK(init.theta.c >= d.cfg.dt / 10.0);
        CHECK(init.sigma0 > 0.0);
        CHECK(init.theta.tau > 0.0);
    }
    CHECK(within >= 16);

    BenchmarkData d(7, truth, 100);
    std::mt19937_64 gen(9);
    std::normal_distribution<double> z;
    // Alternating signs along each station series give a negative lag-1 correlation.
    for (int i = 0; i < d.obs.size(); ++i)
        d.obs.y[i] = (d.obs.points[i].t_index % 2 == 0 ? 1.0 : -1.0) * std::abs(z(gen));
    CHECK(initial_values(d.obs, d.fem, d.cfg).theta.c == doctest::Approx(d.cfg.dt / 10.0));

    d.obs.y.setConstant(3.0);
    try {
        initial_values(d.obs, d.fem, d.cfg);
        FAIL("constant data accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::DegenerateData);
    }
}

TEST_CASE("unconstrained transform round trip") {
    FullParams psi{{0.7, Vec2(-1.0, 2.0), 1.5, 0.8}, Vector(Eigen::Vector2d(0.1, -0.3)), 0.05};
    for (bool with_b : {true, false}) {
        const Vector x = to_unconstrained(psi, with_b);
        CHECK(x.size() == (with_b ? 8 : 6));
        const FullParams back = from_unconstrained(x, 2, with_b);
        CHECK(back.theta.kappa == doctest::Approx(0.7));
        CHECK(back.theta.gamma.y() == doctest::Approx(2.0));
        CHECK(back.theta.c == doctest::Approx(1.5));
        CHECK(back.sigma0 == doctest::Approx(0.05));
        if (with_b) CHECK(back.b[1] == doctest::Approx(-0.3));
    }
}

TEST_CASE("BFGS never decreases the log-likelihood across accepted iterates") {
    ModelConfig cfg = base_config(3);
    const Problem p(cfg, 8, 17);
    FullParams init = p.psi;
    init.theta.gamma = Vec2::Zero();
    EstimateOptions opt;
    opt.max_iterations = 15;
    const EstimateResult res = estimate(p.obs, p.in.fem, cfg, init, opt);
    REQUIRE(res.report.iterates.size() >= 2);
    for (std::size_t i = 1; i < res.report.iterates.size(); ++i)
        CHECK(res.report.iterates[i].loglik >= res.report.iterates[i - 1].loglik - 1e-9);
    CHECK(res.report.loglik >= res.report.iterates.front().loglik);
    CHECK(res.report.evaluations > 0);
    CHECK(!res.report.stop_reason.empty());
}
