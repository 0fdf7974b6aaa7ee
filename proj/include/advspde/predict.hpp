#pragma once

#include "advspde/inference.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace advspde {

struct KrigingResult {
    DenseMatrix mean;  ///< (N_T + 1) x N_S, row k is time block k
    std::optional<DenseMatrix> variance;  ///< ensemble kriging variance, same layout
    Vector b;  ///< fixed effects that were removed before kriging
};

/// x* = sigma0^-2 Q_A^-1 A^T (y - Lambda b), with b taken from psi.
KrigingResult krige(const ObservationSet& obs, const FullParams& psi, const FemAssembly& fem, const ModelConfig& config,
                    const LikelihoodOptions& options = {});

/// Kriged latent field plus Lambda b at the observation points.
Vector predicted_data(const KrigingResult& result, const ObservationSet& obs);

/// Forecasts D^m x*(N_T) for m = 1..steps.
std::vector<Vector> extrapolate(const KrigingResult& result, const PropagationModel& model, int steps);

struct Ensemble {
    /// One (N_T + 1 + horizon) x N_S matrix per realization.
    std::vector<DenseMatrix> realizations;
    KrigingResult kriging;

    int size() const { return static_cast<int>(realizations.size()); }
    DenseMatrix mean() const;
    /// Unbiased per-cell sample variance; zero for a single realization.
    DenseMatrix variance() const;
};

/// Conditional simulation by kriging residuals: each realization is x* + (E[x'|y'] - x') with x' an
/// unconditional draw and y' = A x' + sigma0 eps'. A positive horizon propagates each realization
/// forward with fresh innovations.
Ensemble conditional_simulate(const ObservationSet& obs, const FullParams& psi, const FemAssembly& fem,
                              const ModelConfig& config, int num_realizations, int horizon, std::uint64_t seed,
                              const LikelihoodOptions& options = {});

}  // namespace advspde
