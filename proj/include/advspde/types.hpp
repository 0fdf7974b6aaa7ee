#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <array>
#include <cstdint>
#include <string>

namespace advspde {

/// Compressed-row sparse matrix used for every FEM and precision operator.
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor, int>;
using Triplet = Eigen::Triplet<double, int>;
using Vector = Eigen::VectorXd;
using DenseMatrix = Eigen::MatrixXd;
using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;

/// Writes `i j value` lines (0-based, 17 significant digits), one per stored entry.
std::string to_coordinate_text(const SparseMatrix& matrix);

/// Diagonal matrix as a sparse operator.
SparseMatrix sparse_diagonal(const Vector& diagonal);

/// Entrywise max |A - A^T|.
double asymmetry(const SparseMatrix& matrix);

}  // namespace advspde
