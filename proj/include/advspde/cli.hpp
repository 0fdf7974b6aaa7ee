#pragma once

#include "advspde/inference.hpp"
#include "advspde/predict.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace advspde::cli {

enum class Workflow { Simulate, Estimate, Predict, Condsim, Benchmark };
Workflow parse_workflow(const std::string& name);
const char* to_string(Workflow workflow) noexcept;

struct MeshSpec {
    Range x{0.0, 30.0};
    Range y{0.0, 30.0};
    int nx = 30;
    int ny = 30;
    /// Unset means one practical range sqrt(8 nu)/kappa of the configured parameters.
    std::optional<double> padding;
};

struct DataSpec {
    std::filesystem::path observations;
    /// Interpret the t column as real time mapped to steps by dt instead of a step index.
    bool real_time = false;
    double t0 = 0.0;
    /// Prepend a column of ones to the covariates.
    bool intercept = true;
};

struct SimulateSpec {
    /// Stations sampled uniformly in the user domain; 0 writes the field only.
    int stations = 0;
};

struct PredictSpec {
    int horizon = 0;
    int realizations = 100;
};

struct BenchmarkSpec {
    int replicates = 10;
    int stations = 100;
    std::vector<Method> methods{Method::Cholesky, Method::MatrixFree};
};

struct RunConfig {
    Workflow workflow = Workflow::Simulate;
    MeshSpec mesh;
    ModelConfig model;
    /// True parameters for simulate/benchmark, plug-in parameters for predict/condsim.
    FullParams params;
    /// Estimation starts from `params` instead of the variogram initial values.
    bool init_from_params = false;
    EstimateOptions estimate;
    std::uint64_t seed = 0;
    int threads = 1;
    std::filesystem::path out = "out";
    DataSpec data;
    SimulateSpec simulate;
    PredictSpec predict;
    BenchmarkSpec benchmark;
};

/// Benchmark defaults: [0,30]^2 with 30 x 30 nodes, N_T = 9, burn-in 0,
/// theta = (0.5, 2, 2, 1, 1), b = 0, sigma0 = 0.1, profiled GLS fixed effects, BFGS stopping
/// after two iterations gaining less than 0.01 log-likelihood units.
RunConfig default_config();

/// Mesh padding after resolving "auto" against the configured model and parameters.
double resolve_padding(const RunConfig& config);
TriangularMesh make_mesh(const RunConfig& config);

/// Reads an INI file with sections [run] [mesh] [model] [parameters] [solver] [estimate]
/// [data] [simulate] [predict] [benchmark] on top of `base`. Unknown keys raise a config error.
RunConfig load_config(const std::filesystem::path& path, RunConfig base = default_config());

/// The resolved configuration as INI text; load_config on it reproduces the run.
std::string to_ini(const RunConfig& config);

/// Observation CSV with header t,x,y,value[,cov...].
ObservationSet read_observations(const std::filesystem::path& path, const TriangularMesh& mesh,
                                 const ModelConfig& model, const DataSpec& spec);
void write_observations(const std::filesystem::path& path, const ObservationSet& obs, bool intercept);

/// Writes `text` to a temporary sibling and renames it over `path`.
void write_atomic(const std::filesystem::path& path, const std::string& text);

/// t_index,node_id,value rows for a field with one row per time block.
std::string field_csv(const DenseMatrix& field, int first_t_index = 0);
std::string ensemble_csv(const Ensemble& ensemble);
/// Per cell: mean, unbiased variance and the 5/50/95% ensemble quantiles.
std::string ensemble_summary_csv(const Ensemble& ensemble);

struct ReplicateResult {
    int replicate = 0;
    Method method = Method::Cholesky;
    bool ok = false;
    std::string error;
    FullParams initial;
    FullParams estimate;
    double loglik = 0.0;
    double seconds = 0.0;
    int evaluations = 0;
    int iterations = 0;
    std::string stop_reason;
};

struct BenchmarkSummary {
    Method method = Method::Cholesky;
    int replicates = 0;
    int failures = 0;
    std::array<double, 5> mean{};
    std::array<double, 5> sd{};  ///< NaN with fewer than two successful replicates
    double mean_seconds = 0.0;
};

/// Replicate data set: stations fixed across replicates, field and nugget keyed by replicate.
ObservationSet benchmark_data(const RunConfig& config, const TriangularMesh& mesh, const FemAssembly& fem,
                              int replicate);

/// Simulate, initialize and estimate each replicate with `method`. Replicates run on
/// config.threads workers; `on_done` is called under a lock as each one finishes.
std::vector<ReplicateResult> benchmark_replicates(const RunConfig& config, Method method,
                                              const std::function<void(const ReplicateResult&)>& on_done = {});
BenchmarkSummary summarize(const std::vector<ReplicateResult>& results, Method method);
std::string summary_csv(const std::vector<BenchmarkSummary>& rows);

/// Runs the configured workflow and writes its artifacts plus report.json into config.out.
/// Returns the process exit code.
int run(const RunConfig& config, const std::string& config_text = {});

/// Command-line entry point: --config --workflow --method --seed --threads --out.
int main(int argc, char** argv);

}  // namespace advspde::cli
