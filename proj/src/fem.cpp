#include "advspde/fem.hpp"

#include "advspde/error.hpp"

#include <array>
#include <cmath>

namespace advspde {

namespace {

struct Element {
    std::array<int, 3> v;
    double area;
    std::array<Vec2, 3> grad;
};

Element element(const TriangularMesh& mesh, std::size_t t) {
    const auto& tri = mesh.triangles()[t];
    const auto& p = mesh.vertices();
    Element e{tri, mesh.triangle_area(t), {}};
    for (int i = 0; i < 3; ++i) {
        const Vec2& pj = p[tri[(i + 1) % 3]];
        const Vec2& pk = p[tri[(i + 2) % 3]];
        e.grad[i] = Vec2(pj.y() - pk.y(), pk.x() - pj.x()) / (2.0 * e.area);
    }
    return e;
}

SparseMatrix from_triplets(int n, std::vector<Triplet>& entries) {
    SparseMatrix m(n, n);
    m.setFromTriplets(entries.begin(), entries.end());
    return m;
}

// No SPD check: also used with the rank-one streamline tensor.
SparseMatrix assemble_diffusion(const TriangularMesh& mesh, const Mat2& H) {
    std::vector<Triplet> entries;
    entries.reserve(9 * mesh.num_triangles());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const Element e = element(mesh, t);
        for (int i = 0; i < 3; ++i) {
            const Vec2 hg = H * e.grad[i];
            for (int j = 0; j < 3; ++j) entries.emplace_back(e.v[i], e.v[j], e.area * hg.dot(e.grad[j]));
        }
    }
    return from_triplets(static_cast<int>(mesh.num_vertices()), entries);
}

}  // namespace

void check_spd(const Mat2& H) {
    const bool symmetric = std::abs(H(0, 1) - H(1, 0)) <= 1e-12 * (std::abs(H(0, 1)) + 1.0);
    const bool positive = H(0, 0) > 0.0 && H.determinant() > 0.0;
    require(symmetric && positive && H.allFinite(), ErrorKind::InvalidParameter,
            "anisotropy matrix H must be symmetric positive definite");
}

SparseMatrix assemble_mass(const TriangularMesh& mesh, bool lumped) {
    const auto n = static_cast<int>(mesh.num_vertices());
    std::vector<Triplet> entries;
    entries.reserve((lumped ? 3 : 9) * mesh.num_triangles());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const auto& tri = mesh.triangles()[t];
        const double area = mesh.triangle_area(t);
        for (int i = 0; i < 3; ++i) {
            if (lumped) {
                entries.emplace_back(tri[i], tri[i], area / 3.0);
                continue;
            }
            for (int j = 0; j < 3; ++j) entries.emplace_back(tri[i], tri[j], area / 12.0 * (i == j ? 2.0 : 1.0));
        }
    }
    return from_triplets(n, entries);
}

SparseMatrix assemble_stiffness(const TriangularMesh& mesh, const Mat2& H) {
    check_spd(H);
    return assemble_diffusion(mesh, H);
}

SparseMatrix assemble_advection(const TriangularMesh& mesh, const Vec2& gamma) {
    std::vector<Triplet> entries;
    entries.reserve(9 * mesh.num_triangles());
    for (std::size_t t = 0; t < mesh.num_triangles(); ++t) {
        const Element e = element(mesh, t);
        for (int j = 0; j < 3; ++j) {
            // gamma . grad psi_j is constant on the element and int psi_i = area / 3.
            const double flux = gamma.dot(e.grad[j]) * e.area / 3.0;
            for (int i = 0; i < 3; ++i) entries.emplace_back(e.v[i], e.v[j], flux);
        }
    }
    return from_triplets(static_cast<int>(mesh.num_vertices()), entries);
}

SparseMatrix assemble_stabilization(const TriangularMesh& mesh, const Vec2& gamma) {
    const double speed = gamma.norm();
    require(speed > 0.0, ErrorKind::InvalidCall, "streamline-diffusion matrix is undefined for gamma = 0");
    SparseMatrix s = assemble_diffusion(mesh, gamma * gamma.transpose());
    s *= mesh.h() / speed;
    return s;
}

SparseMatrix operator_matrix(const SparseMatrix& mass_lumped, const SparseMatrix& stiffness, double kappa,
                             int alpha) {
    require(alpha == 0 || alpha == 1, ErrorKind::UnsupportedExponent,
            "operator exponent alpha must be 0 or 1 (got " + std::to_string(alpha) + ")");
    if (alpha == 0) return mass_lumped;
    require(kappa * kappa > 0.0 && std::isfinite(kappa), ErrorKind::InvalidParameter, "kappa^2 must be positive");
    SparseMatrix k = kappa * kappa * mass_lumped + stiffness;
    return k;
}

double tau_tilde(double tau, const Mat2& H, const Vec2& gamma, double h) {
    check_spd(H);
    require(tau >= 0.0, ErrorKind::InvalidParameter, "tau must be >= 0");
    const double speed = gamma.norm();
    if (speed == 0.0) return tau;
    const Mat2 effective = H + (h / speed) * gamma * gamma.transpose();
    return tau * std::pow(effective.determinant() / H.determinant(), 0.25);
}

std::optional<SparseMatrix> colored_noise_precision(const SparseMatrix& mass_lumped, const SparseMatrix& op,
                                                    int alpha_s) {
    require(alpha_s == 0 || alpha_s == 2, ErrorKind::UnsupportedExponent,
            "noise exponent alpha_S must be 0 or 2 (got " + std::to_string(alpha_s) + ")");
    if (alpha_s == 0) return std::nullopt;
    const Vector inv_mass = mass_lumped.diagonal().cwiseInverse();
    SparseMatrix scaled = inv_mass.asDiagonal() * op;
    SparseMatrix q = op * scaled;
    return q;
}

FemAssembly::FemAssembly(const TriangularMesh& mesh, const Mat2& H)
    : mesh_(&mesh), H_(H), h_(mesh.h()) {
    check_spd(H);
    mass_ = assemble_mass(mesh, true);
    mass_diag_ = mass_.diagonal();
    mass_consistent_ = assemble_mass(mesh, false);
    stiffness_ = assemble_diffusion(mesh, H);
    adv_x_ = assemble_advection(mesh, Vec2(1.0, 0.0));
    adv_y_ = assemble_advection(mesh, Vec2(0.0, 1.0));
    Mat2 exx = Mat2::Zero();
    exx(0, 0) = 1.0;
    Mat2 eyy = Mat2::Zero();
    eyy(1, 1) = 1.0;
    Mat2 exy = Mat2::Zero();
    exy(0, 1) = exy(1, 0) = 1.0;
    sd_xx_ = assemble_diffusion(mesh, exx);
    sd_xy_ = assemble_diffusion(mesh, exy);
    sd_yy_ = assemble_diffusion(mesh, eyy);
}

SparseMatrix FemAssembly::advection(const Vec2& gamma) const {
    SparseMatrix b = gamma.x() * adv_x_ + gamma.y() * adv_y_;
    return b;
}

SparseMatrix FemAssembly::stabilization(const Vec2& gamma) const {
    const double speed = gamma.norm();
    const double scale = speed > 0.0 ? h_ / speed : 0.0;
    SparseMatrix s = (scale * gamma.x() * gamma.x()) * sd_xx_ + (scale * gamma.x() * gamma.y()) * sd_xy_ +
                     (scale * gamma.y() * gamma.y()) * sd_yy_;
    return s;
}

FemSystem FemAssembly::system(const Vec2& gamma, double kappa, int alpha, bool stabilize) const {
    FemSystem sys;
    sys.mass = mass_;
    sys.mass_consistent = mass_consistent_;
    sys.stiffness = stiffness_;
    sys.advection = advection(gamma);
    if (stabilize) sys.stabilization = stabilization(gamma);
    sys.op = operator_matrix(mass_, stiffness_, kappa, alpha);
    sys.h = h_;
    return sys;
}

}  // namespace advspde
