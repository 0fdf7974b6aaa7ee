#include "advspde/predict.hpp"

#include "advspde/rng.hpp"

namespace advspde {

namespace {

DenseMatrix as_field(const Vector& stacked, int num_blocks, int ns) {
    DenseMatrix field(num_blocks, ns);
    for (int k = 0; k < num_blocks; ++k) field.row(k) = stacked.segment(static_cast<long>(k) * ns, ns).transpose();
    return field;
}

Vector stack(const DenseMatrix& field) {
    Vector out(field.size());
    for (int k = 0; k < field.rows(); ++k) out.segment(k * field.cols(), field.cols()) = field.row(k).transpose();
    return out;
}

}  // namespace

KrigingResult krige(const ObservationSet& obs, const FullParams& psi, const FemAssembly& fem, const ModelConfig& config,
                    const LikelihoodOptions& options) {
    require(obs.size() > 0, ErrorKind::EmptyData, "kriging needs at least one observation");
    require(psi.b.size() == obs.num_covariates(), ErrorKind::DimensionMismatch,
            "fixed-effect vector does not match the covariates");
    const ModelConfig cfg = estimation_config(config);
    LikelihoodEvaluator evaluator(obs, fem, cfg, options);
    const DenseMatrix r = obs.y - obs.covariates * psi.b;
    const Vector x = evaluator.posterior_means(psi.theta, psi.sigma0, r).col(0);
    return {as_field(x, cfg.num_blocks(), fem.size()), std::nullopt, psi.b};
}

Vector predicted_data(const KrigingResult& result, const ObservationSet& obs) {
    require(obs.num_covariates() == result.b.size(), ErrorKind::DimensionMismatch,
            "fixed-effect vector does not match the covariates");
    return obs.projection * stack(result.mean) + obs.covariates * result.b;
}

std::vector<Vector> extrapolate(const KrigingResult& result, const PropagationModel& model, int steps) {
    require(steps >= 1, ErrorKind::InvalidParameter, "extrapolation needs steps >= 1");
    require(result.mean.cols() == model.size(), ErrorKind::DimensionMismatch, "kriged field does not match the model");
    std::vector<Vector> out;
    Vector x = result.mean.row(result.mean.rows() - 1).transpose();
    for (int m = 0; m < steps; ++m) {
        x = model.apply_D(x);
        out.push_back(x);
    }
    return out;
}

DenseMatrix Ensemble::mean() const {
    require(!realizations.empty(), ErrorKind::EmptyData, "empty ensemble");
    DenseMatrix sum = DenseMatrix::Zero(realizations.front().rows(), realizations.front().cols());
    for (const auto& r : realizations) sum += r;
    return sum / size();
}

DenseMatrix Ensemble::variance() const {
    const DenseMatrix mu = mean();
    DenseMatrix ss = DenseMatrix::Zero(mu.rows(), mu.cols());
    if (size() < 2) return ss;
    for (const auto& r : realizations) ss.array() += (r - mu).array().square();
    return ss / (size() - 1);
}

Ensemble conditional_simulate(const ObservationSet& obs, const FullParams& psi, const FemAssembly& fem,
                              const ModelConfig& config, int num_realizations, int horizon, std::uint64_t seed,
                              const LikelihoodOptions& options) {
    require(num_realizations >= 1, ErrorKind::InvalidParameter, "need at least one realization");
    require(horizon >= 0, ErrorKind::InvalidParameter, "horizon must be >= 0");
    require(obs.size() > 0, ErrorKind::EmptyData, "conditional simulation needs observations");
    const ModelConfig cfg = estimation_config(config);
    const PropagationModel model = build_propagation(fem, psi.theta, cfg);
    const int ns = fem.size();
    const int nb = cfg.num_blocks();
    LikelihoodEvaluator evaluator(obs, fem, cfg, options);

    // Column 0 holds the data residuals, column 1 + j the pseudo-data of realization j.
    std::vector<DenseMatrix> unconditional;
    DenseMatrix rhs(obs.size(), num_realizations + 1);
    rhs.col(0) = obs.y - obs.covariates * psi.b;
    for (int j = 0; j < num_realizations; ++j) {
        const std::uint64_t key = stream_key(seed, 3, static_cast<std::uint64_t>(j));
        unconditional.push_back(simulate(model, key, 0));
        rhs.col(j + 1) = obs.projection * stack(unconditional.back()) +
                         psi.sigma0 * standard_normal(stream_key(key, 2, 0), obs.size());
    }
    const DenseMatrix means = evaluator.posterior_means(psi.theta, psi.sigma0, rhs);

    Ensemble ens;
    ens.kriging = {as_field(means.col(0), nb, ns), std::nullopt, psi.b};
    for (int j = 0; j < num_realizations; ++j) {
        DenseMatrix field(nb + horizon, ns);
        field.topRows(nb) = ens.kriging.mean + as_field(means.col(j + 1), nb, ns) - unconditional[j];
        if (horizon > 0) {
            const std::uint64_t key = stream_key(seed, 3, static_cast<std::uint64_t>(j));
            propagate(
                model, key, field.row(nb - 1).transpose(), horizon,
                [&](long k, const Vector& v) { field.row(k) = v.transpose(); }, nb);
        }
        ens.realizations.push_back(std::move(field));
    }
    ens.kriging.variance = ens.variance().topRows(nb);
    return ens;
}

}  // namespace advspde
