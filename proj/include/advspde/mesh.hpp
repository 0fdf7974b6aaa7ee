#pragma once

#include "advspde/types.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <vector>

namespace advspde {

struct Range {
    double lo = 0.0;
    double hi = 1.0;

    double extent() const { return hi - lo; }
};

/// Structured triangulation of a (possibly padded) rectangle.
///
/// Vertices are numbered row by row (x fastest). Each grid cell is split along
/// its SW-NE diagonal into a lower triangle (SW, SE, NE) followed by an upper
/// triangle (SW, NE, NW); both are counter-clockwise.
class TriangularMesh {
public:
    TriangularMesh() = default;

    const std::vector<Vec2>& vertices() const { return vertices_; }
    const std::vector<std::array<int, 3>>& triangles() const { return triangles_; }
    const std::vector<bool>& boundary_mask() const { return boundary_; }

    std::size_t num_vertices() const { return vertices_.size(); }
    std::size_t num_triangles() const { return triangles_.size(); }

    /// Longest triangle edge over the mesh.
    double h() const { return h_; }
    /// Width of the buffer appended outside the user domain.
    double padding() const { return padding_; }

    Range user_x() const { return user_x_; }
    Range user_y() const { return user_y_; }
    Range padded_x() const;
    Range padded_y() const;

    int columns() const { return columns_; }
    int rows() const { return rows_; }
    double dx() const { return dx_; }
    double dy() const { return dy_; }

    double triangle_area(std::size_t t) const;

    /// Index of the containing triangle, lowest index on ties; nullopt outside the padded domain.
    std::optional<int> locate(const Vec2& point) const;

    /// Barycentric coordinates of `point` with respect to triangle `t`.
    std::array<double, 3> barycentric(std::size_t t, const Vec2& point) const;

    /// Index of the vertex nearest to `point` (grid rounding, clamped).
    int nearest_vertex(const Vec2& point) const;

    /// Writes `vertices.csv` (id,x,y,boundary) and `triangles.csv` (id,v0,v1,v2).
    void write_csv(const std::filesystem::path& directory) const;

private:
    friend TriangularMesh build_grid_mesh(Range, Range, int, int, double);

    std::vector<Vec2> vertices_;
    std::vector<std::array<int, 3>> triangles_;
    std::vector<bool> boundary_;
    double h_ = 0.0;
    double padding_ = 0.0;
    Range user_x_;
    Range user_y_;
    int columns_ = 0;
    int rows_ = 0;
    int pad_cells_ = 0;
    double dx_ = 0.0;
    double dy_ = 0.0;
    double x0_ = 0.0;
    double y0_ = 0.0;
};

/// Regular grid of nx by ny user-domain vertices plus ceil(padding / spacing)
/// extra rows and columns on every side.
TriangularMesh build_grid_mesh(Range x_range, Range y_range, int nx, int ny, double padding);

/// One space-time location; `t_index` selects the temporal block.
struct SpaceTimePoint {
    int t_index = 0;
    double x = 0.0;
    double y = 0.0;
};

/// Sparse observation operator with barycentric rows placed in the time block of each point.
/// Columns are ordered time-major: column = t_index * N_S + vertex.
SparseMatrix project_points(const TriangularMesh& mesh, const std::vector<SpaceTimePoint>& points,
                            int num_time_blocks);

/// Mesh Peclet number |gamma| h / (2 lambda).
double peclet(const TriangularMesh& mesh, const Vec2& gamma, double lambda);
double peclet(double h, const Vec2& gamma, double lambda);

}  // namespace advspde
