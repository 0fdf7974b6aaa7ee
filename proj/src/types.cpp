#include "advspde/types.hpp"

#include "advspde/error.hpp"

#include <cmath>
#include <cstdio>

namespace advspde {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::InvalidDomain: return "InvalidDomain";
        case ErrorKind::OutOfDomain: return "OutOfDomain";
        case ErrorKind::InvalidParameter: return "InvalidParameter";
        case ErrorKind::InvalidCall: return "InvalidCall";
        case ErrorKind::UnsupportedExponent: return "UnsupportedExponent";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NotSpd: return "NotSPD";
        case ErrorKind::Factorization: return "FactorizationError";
        case ErrorKind::Convergence: return "ConvergenceError";
        case ErrorKind::InvalidInterval: return "InvalidInterval";
        case ErrorKind::Resource: return "ResourceError";
        case ErrorKind::Config: return "ConfigError";
        case ErrorKind::Data: return "DataError";
        case ErrorKind::DegenerateData: return "DegenerateData";
        case ErrorKind::EmptyData: return "EmptyData";
        case ErrorKind::Init: return "InitError";
    }
    return "Unknown";
}

std::string to_coordinate_text(const SparseMatrix& matrix) {
    std::string out;
    char line[96];
    for (int i = 0; i < matrix.outerSize(); ++i) {
        for (SparseMatrix::InnerIterator it(matrix, i); it; ++it) {
            std::snprintf(line, sizeof line, "%d %d %.17g\n", static_cast<int>(it.row()),
                          static_cast<int>(it.col()), it.value());
            out += line;
        }
    }
    return out;
}

SparseMatrix sparse_diagonal(const Vector& diagonal) {
    const auto n = static_cast<int>(diagonal.size());
    SparseMatrix d(n, n);
    d.reserve(Eigen::VectorXi::Ones(n));
    for (int i = 0; i < n; ++i) d.insert(i, i) = diagonal[i];
    d.makeCompressed();
    return d;
}

double asymmetry(const SparseMatrix& matrix) {
    const SparseMatrix transposed = matrix.transpose();
    const SparseMatrix diff = matrix - transposed;
    double worst = 0.0;
    for (int i = 0; i < diff.outerSize(); ++i)
        for (SparseMatrix::InnerIterator it(diff, i); it; ++it) worst = std::max(worst, std::abs(it.value()));
    return worst;
}

}  // namespace advspde
