#include "advspde/mesh.hpp"

#include "advspde/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace advspde {

namespace {

constexpr double kWeightFloor = 1e-14;

double cross(const Vec2& a, const Vec2& b, const Vec2& c) {
    return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
}

}  // namespace

Range TriangularMesh::padded_x() const {
    return {x0_, x0_ + dx_ * (columns_ - 1)};
}

Range TriangularMesh::padded_y() const {
    return {y0_, y0_ + dy_ * (rows_ - 1)};
}

double TriangularMesh::triangle_area(std::size_t t) const {
    const auto& tri = triangles_[t];
    return 0.5 * cross(vertices_[tri[0]], vertices_[tri[1]], vertices_[tri[2]]);
}

std::array<double, 3> TriangularMesh::barycentric(std::size_t t, const Vec2& p) const {
    const auto& tri = triangles_[t];
    const Vec2& a = vertices_[tri[0]];
    const Vec2& b = vertices_[tri[1]];
    const Vec2& c = vertices_[tri[2]];
    const double det = cross(a, b, c);
    const double w1 = cross(p, b, c) / det;
    const double w2 = cross(a, p, c) / det;
    return {w1, w2, 1.0 - w1 - w2};
}

std::optional<int> TriangularMesh::locate(const Vec2& p) const {
    const double tol = 1e-12 * std::max(dx_, dy_);
    const Range px = padded_x();
    const Range py = padded_y();
    if (p.x() < px.lo - tol || p.x() > px.hi + tol || p.y() < py.lo - tol || p.y() > py.hi + tol) {
        return std::nullopt;
    }
    const int cells_x = columns_ - 1;
    const int cells_y = rows_ - 1;
    const int ci = std::clamp(static_cast<int>(std::floor((p.x() - x0_) / dx_)), 0, cells_x - 1);
    const int cj = std::clamp(static_cast<int>(std::floor((p.y() - y0_) / dy_)), 0, cells_y - 1);

    // Points on cell borders may belong to a neighbouring cell with a lower triangle index.
    int best = -1;
    for (int j = std::max(cj - 1, 0); j <= std::min(cj + 1, cells_y - 1); ++j) {
        for (int i = std::max(ci - 1, 0); i <= std::min(ci + 1, cells_x - 1); ++i) {
            for (int half = 0; half < 2; ++half) {
                const int t = 2 * (j * cells_x + i) + half;
                if (best >= 0 && t >= best) continue;
                const auto w = barycentric(t, p);
                if (w[0] >= -1e-12 && w[1] >= -1e-12 && w[2] >= -1e-12) best = t;
            }
        }
    }
    if (best < 0) return std::nullopt;
    return best;
}

int TriangularMesh::nearest_vertex(const Vec2& p) const {
    const int i = std::clamp(static_cast<int>(std::lround((p.x() - x0_) / dx_)), 0, columns_ - 1);
    const int j = std::clamp(static_cast<int>(std::lround((p.y() - y0_) / dy_)), 0, rows_ - 1);
    return j * columns_ + i;
}

void TriangularMesh::write_csv(const std::filesystem::path& directory) const {
    std::filesystem::create_directories(directory);
    std::ofstream vout(directory / "vertices.csv");
    vout.precision(17);
    vout << "id,x,y,boundary\n";
    for (std::size_t v = 0; v < vertices_.size(); ++v) {
        vout << v << ',' << vertices_[v].x() << ',' << vertices_[v].y() << ',' << (boundary_[v] ? 1 : 0)
             << '\n';
    }
    std::ofstream tout(directory / "triangles.csv");
    tout << "id,v0,v1,v2\n";
    for (std::size_t t = 0; t < triangles_.size(); ++t) {
        tout << t << ',' << triangles_[t][0] << ',' << triangles_[t][1] << ',' << triangles_[t][2] << '\n';
    }
    if (!vout || !tout) fail(ErrorKind::Data, "could not write mesh CSV files to " + directory.string());
}

TriangularMesh build_grid_mesh(Range x_range, Range y_range, int nx, int ny, double padding) {
    require(nx >= 2 && ny >= 2, ErrorKind::InvalidDomain,
            "grid needs at least 2 vertices per axis (got " + std::to_string(nx) + "x" + std::to_string(ny) + ")");
    require(x_range.extent() > 0.0 && y_range.extent() > 0.0, ErrorKind::InvalidDomain,
            "domain ranges must have positive extent");
    require(padding >= 0.0 && std::isfinite(padding), ErrorKind::InvalidDomain, "padding must be >= 0");

    TriangularMesh mesh;
    mesh.user_x_ = x_range;
    mesh.user_y_ = y_range;
    mesh.dx_ = x_range.extent() / (nx - 1);
    mesh.dy_ = y_range.extent() / (ny - 1);
    const double spacing = std::min(mesh.dx_, mesh.dy_);
    mesh.pad_cells_ = padding > 0.0 ? static_cast<int>(std::ceil(padding / spacing - 1e-9)) : 0;
    const int p = mesh.pad_cells_;
    mesh.padding_ = padding;
    mesh.columns_ = nx + 2 * p;
    mesh.rows_ = ny + 2 * p;
    mesh.x0_ = x_range.lo - p * mesh.dx_;
    mesh.y0_ = y_range.lo - p * mesh.dy_;

    const int cols = mesh.columns_;
    const int rows = mesh.rows_;
    mesh.vertices_.reserve(static_cast<std::size_t>(cols) * rows);
    mesh.boundary_.reserve(static_cast<std::size_t>(cols) * rows);
    for (int j = 0; j < rows; ++j) {
        for (int i = 0; i < cols; ++i) {
            // Exact endpoints for the user-domain corners.
            double x = mesh.x0_ + i * mesh.dx_;
            double y = mesh.y0_ + j * mesh.dy_;
            if (i == p) x = x_range.lo;
            if (i == p + nx - 1) x = x_range.hi;
            if (j == p) y = y_range.lo;
            if (j == p + ny - 1) y = y_range.hi;
            mesh.vertices_.emplace_back(x, y);
            mesh.boundary_.push_back(i == 0 || j == 0 || i == cols - 1 || j == rows - 1);
        }
    }
    mesh.triangles_.reserve(2 * static_cast<std::size_t>(cols - 1) * (rows - 1));
    for (int j = 0; j + 1 < rows; ++j) {
        for (int i = 0; i + 1 < cols; ++i) {
            const int sw = j * cols + i;
            const int se = sw + 1;
            const int nw = sw + cols;
            const int ne = nw + 1;
            mesh.triangles_.push_back({sw, se, ne});
            mesh.triangles_.push_back({sw, ne, nw});
        }
    }
    mesh.h_ = std::hypot(mesh.dx_, mesh.dy_);
    return mesh;
}

SparseMatrix project_points(const TriangularMesh& mesh, const std::vector<SpaceTimePoint>& points,
                            int num_time_blocks) {
    require(num_time_blocks >= 1, ErrorKind::InvalidParameter, "need at least one time block");
    const auto ns = static_cast<int>(mesh.num_vertices());
    std::vector<Triplet> entries;
    entries.reserve(points.size() * 3);
    for (std::size_t r = 0; r < points.size(); ++r) {
        const auto& pt = points[r];
        if (pt.t_index < 0 || pt.t_index >= num_time_blocks) {
            fail(ErrorKind::OutOfDomain, "row " + std::to_string(r) + ": time index " + std::to_string(pt.t_index) +
                                             " outside [0, " + std::to_string(num_time_blocks - 1) + "]");
        }
        const Vec2 loc(pt.x, pt.y);
        const auto tri = mesh.locate(loc);
        if (!tri) {
            std::ostringstream msg;
            msg << "row " << r << ": point (" << pt.x << ", " << pt.y << ") outside the padded domain";
            fail(ErrorKind::OutOfDomain, msg.str());
        }
        auto w = mesh.barycentric(*tri, loc);
        double total = 0.0;
        for (double& wi : w) {
            if (wi < kWeightFloor) wi = 0.0;
            total += wi;
        }
        const auto& verts = mesh.triangles()[*tri];
        for (int k = 0; k < 3; ++k) {
            if (w[k] == 0.0) continue;
            entries.emplace_back(static_cast<int>(r), pt.t_index * ns + verts[k], w[k] / total);
        }
    }
    SparseMatrix a(static_cast<int>(points.size()), ns * num_time_blocks);
    a.setFromTriplets(entries.begin(), entries.end());
    return a;
}

double peclet(double h, const Vec2& gamma, double lambda) {
    require(lambda > 0.0, ErrorKind::InvalidParameter, "diffusion coefficient must be positive");
    return gamma.norm() * h / (2.0 * lambda);
}

double peclet(const TriangularMesh& mesh, const Vec2& gamma, double lambda) {
    return peclet(mesh.h(), gamma, lambda);
}

}  // namespace advspde
