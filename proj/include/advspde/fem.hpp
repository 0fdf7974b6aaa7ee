#pragma once

#include "advspde/mesh.hpp"
#include "advspde/types.hpp"

#include <optional>

namespace advspde {

/// Consistent P1 mass matrix, or its row-sum (lumped) diagonal.
SparseMatrix assemble_mass(const TriangularMesh& mesh, bool lumped);

/// Stiffness matrix with entries int (H grad psi_i) . grad psi_j. H must be SPD.
SparseMatrix assemble_stiffness(const TriangularMesh& mesh, const Mat2& H);

/// Galerkin advection matrix; row i is tested against psi_i:
/// entry (i, j) = int (gamma . grad psi_j) psi_i.
SparseMatrix assemble_advection(const TriangularMesh& mesh, const Vec2& gamma);

/// Streamline-diffusion matrix h |gamma|^-1 int (gamma . grad psi_i)(gamma . grad psi_j).
SparseMatrix assemble_stabilization(const TriangularMesh& mesh, const Vec2& gamma);

/// K = kappa^2 M + G for alpha = 1, K = M for alpha = 0.
SparseMatrix operator_matrix(const SparseMatrix& mass_lumped, const SparseMatrix& stiffness, double kappa,
                             int alpha);

/// Noise scale corrected for the streamline-diffusion term so that the stationary
/// variance matches the unstabilized model: tau (|H + h|g|^-1 g g^T| / |H|)^(1/4).
double tau_tilde(double tau, const Mat2& H, const Vec2& gamma, double h);

/// Precision K M^-1 K of the colored spatial noise (alpha_s = 2); nullopt for white noise.
std::optional<SparseMatrix> colored_noise_precision(const SparseMatrix& mass_lumped, const SparseMatrix& op,
                                                    int alpha_s);

/// Throws unless H is symmetric positive definite.
void check_spd(const Mat2& H);

/// Matrices of the discretized operator at one advection velocity.
struct FemSystem {
    SparseMatrix mass;                            ///< lumped, diagonal
    std::optional<SparseMatrix> mass_consistent;
    SparseMatrix stiffness;                       ///< G for the anisotropy H
    SparseMatrix advection;                       ///< B(gamma)
    std::optional<SparseMatrix> stabilization;    ///< S(gamma) when stabilized
    SparseMatrix op;                              ///< K
    double h = 0.0;
};

/// Velocity-independent pieces of the FEM discretization, assembled once per mesh.
/// B and S are recombined for any gamma from per-axis components, all sharing the
/// triangle-adjacency pattern so that downstream factorizations keep one symbolic analysis.
class FemAssembly {
public:
    FemAssembly(const TriangularMesh& mesh, const Mat2& H);

    const TriangularMesh& mesh() const { return *mesh_; }
    const Mat2& anisotropy() const { return H_; }
    double h() const { return h_; }
    int size() const { return static_cast<int>(mass_diag_.size()); }

    const SparseMatrix& mass() const { return mass_; }
    const Vector& mass_diagonal() const { return mass_diag_; }
    const SparseMatrix& mass_consistent() const { return mass_consistent_; }
    const SparseMatrix& stiffness() const { return stiffness_; }

    SparseMatrix advection(const Vec2& gamma) const;
    /// S(gamma); an all-zero matrix with the full pattern when gamma = 0.
    SparseMatrix stabilization(const Vec2& gamma) const;

    FemSystem system(const Vec2& gamma, double kappa, int alpha, bool stabilize) const;

private:
    const TriangularMesh* mesh_;
    Mat2 H_;
    double h_;
    SparseMatrix mass_;
    Vector mass_diag_;
    SparseMatrix mass_consistent_;
    SparseMatrix stiffness_;
    SparseMatrix adv_x_;
    SparseMatrix adv_y_;
    SparseMatrix sd_xx_;
    SparseMatrix sd_xy_;
    SparseMatrix sd_yy_;
};

}  // namespace advspde
