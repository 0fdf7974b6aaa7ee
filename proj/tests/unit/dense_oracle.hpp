#pragma once

#include "advspde/gmrf.hpp"

#include <cmath>

namespace advspde::testing {

struct Instance {
    TriangularMesh mesh;
    FemAssembly fem;
    ModelConfig config;
    ParameterVector theta;

    Instance(int side, double extent, ModelConfig cfg, ParameterVector th)
        : mesh(build_grid_mesh({0, extent}, {0, extent}, side, side, 0.0)), fem(mesh, cfg.H), config(cfg),
          theta(th) {}
};

inline ModelConfig base_config(int num_steps) {
    ModelConfig c;
    c.num_steps = num_steps;
    return c;
}

// Dense D and E rebuilt from the FEM matrices, independent of PropagationModel.
struct DenseDynamics {
    DenseMatrix D;
    DenseMatrix E;
};

inline DenseDynamics dense_dynamics(const Instance& in, bool stabilized) {
    const DenseMatrix m = DenseMatrix(in.fem.mass());
    const DenseMatrix g = DenseMatrix(in.fem.stiffness());
    const double k2 = in.theta.kappa * in.theta.kappa;
    DenseMatrix spatial = k2 * m + g;
    DenseMatrix transport = in.config.alpha == 1 ? spatial : m;
    transport += DenseMatrix(in.fem.advection(in.theta.gamma));
    double tau = in.theta.tau;
    if (stabilized) {
        const DenseMatrix s = DenseMatrix(in.fem.stabilization(in.theta.gamma));
        transport += s;
        spatial += s;
        tau = tau_tilde(tau, in.config.H, in.theta.gamma, in.mesh.h());
    }
    const double r = in.config.dt / in.theta.c;
    const DenseMatrix j = m + r * transport;
    const DenseMatrix m_half = m.diagonal().cwiseSqrt().asDiagonal();
    DenseMatrix e_inner = m_half;
    if (in.config.alpha_s == 2) e_inner = m * spatial.inverse() * m_half;
    const Eigen::PartialPivLU<DenseMatrix> lu(j);
    return {lu.solve(m), tau * std::sqrt(r) * lu.solve(e_inner)};
}

// Joint covariance of x_{0:N_T} from the recursion x_k = D x_{k-1} + E z_k.
inline DenseMatrix joint_covariance(const DenseMatrix& sigma, const DenseDynamics& dyn, int nt) {
    const int n = static_cast<int>(sigma.rows());
    const DenseMatrix sigma_half = Eigen::LLT<DenseMatrix>(sigma).matrixL();
    // x = R [w_0; z_1; ...; z_NT].
    DenseMatrix r = DenseMatrix::Zero(n * (nt + 1), n * (nt + 1));
    r.block(0, 0, n, n) = sigma_half;
    for (int k = 1; k <= nt; ++k) {
        r.block(k * n, 0, n, n * k) = dyn.D * r.block((k - 1) * n, 0, n, n * k);
        r.block(k * n, k * n, n, n) = dyn.E;
    }
    return r * r.transpose();
}

}  // namespace advspde::testing
