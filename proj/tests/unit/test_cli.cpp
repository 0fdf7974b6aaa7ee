#include "advspde/cli.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace advspde;
using namespace advspde::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("advspde_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

RunConfig small_config(const fs::path& out) {
    RunConfig c = default_config();
    c.mesh = MeshSpec{{0.0, 10.0}, {0.0, 10.0}, 11, 11, 0.0};
    c.model.num_steps = 3;
    c.out = out;
    return c;
}

}  // namespace

TEST_CASE("config text round-trips every key") {
    const fs::path dir = scratch("ini");
    RunConfig c = small_config(dir);
    c.workflow = Workflow::Condsim;
    c.params.theta.gamma = Vec2(0.1, -1.0 / 3.0);
    c.params.b = Vector::LinSpaced(3, 0.5, 1.5);
    c.estimate.likelihood.method = Method::MatrixFree;
    c.model.H << 1.5, 0.25, 0.25, 0.75;
    c.seed = 18446744073709551615ULL;
    c.benchmark.methods = {Method::MatrixFree};
    const std::string text = to_ini(c);
    write_atomic(dir / "c.ini", text);
    const RunConfig back = load_config(dir / "c.ini");
    CHECK(to_ini(back) == text);
    CHECK(back.params.theta.gamma.y() == c.params.theta.gamma.y());
    CHECK(back.model.H(1, 0) == 0.25);
    CHECK(back.seed == c.seed);
}

TEST_CASE("config errors map to exit code 2") {
    const fs::path dir = scratch("badcfg");
    write_atomic(dir / "bad.ini", "[model]\nalpha = 1\nfrobnicate = 3\n");
    CHECK_THROWS_AS(load_config(dir / "bad.ini"), Error);
    write_atomic(dir / "bad2.ini", "[mesh]\nnx = ten\n");
    try {
        load_config(dir / "bad2.ini");
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
    RunConfig c = small_config(dir);
    c.threads = 0;
    CHECK(run(c) == 2);
}

TEST_CASE("estimate on a missing observation file exits with 3") {
    const fs::path dir = scratch("missing");
    RunConfig c = small_config(dir);
    c.workflow = Workflow::Estimate;
    c.data.observations = dir / "nope.csv";
    CHECK(run(c) == 3);
    CHECK(slurp(dir / "report.json").find("\"status\": \"error\"") != std::string::npos);
}

TEST_CASE("simulate is byte-identical for the same seed") {
    const fs::path a = scratch("sim_a");
    const fs::path b = scratch("sim_b");
    RunConfig c = small_config(a);
    c.seed = 42;
    c.simulate.stations = 12;
    REQUIRE(run(c) == 0);
    c.out = b;
    REQUIRE(run(c) == 0);
    CHECK(slurp(a / "field.csv") == slurp(b / "field.csv"));
    CHECK(slurp(a / "observations.csv") == slurp(b / "observations.csv"));
    c.seed = 43;
    c.out = scratch("sim_c");
    REQUIRE(run(c) == 0);
    CHECK(slurp(a / "field.csv") != slurp(c.out / "field.csv"));
}

TEST_CASE("observation CSV round-trips without loss") {
    const fs::path dir = scratch("roundtrip");
    RunConfig c = small_config(dir);
    const auto mesh = make_mesh(c);
    const std::vector<SpaceTimePoint> points{{0, 1.0 / 3.0, 2.0}, {1, 9.999, 0.1}, {3, 5.0, 5.0 + 1e-13}};
    DenseMatrix cov(3, 2);
    cov << 1.0, 0.1, 1.0, -2.0 / 7.0, 1.0, 3.0;
    const Vector y = Vector(Eigen::Vector3d(M_PI, -1e-300, 12345.678901234567));
    const ObservationSet obs = make_observations(mesh, points, y, cov, c.model.num_blocks());
    write_observations(dir / "obs.csv", obs, true);
    DataSpec spec;
    const ObservationSet back = read_observations(dir / "obs.csv", mesh, c.model, spec);
    CHECK(back.y == obs.y);
    CHECK(back.covariates == obs.covariates);
    for (int i = 0; i < 3; ++i) {
        CHECK(back.points[static_cast<std::size_t>(i)].x == points[static_cast<std::size_t>(i)].x);
        CHECK(back.points[static_cast<std::size_t>(i)].y == points[static_cast<std::size_t>(i)].y);
    }

    write_atomic(dir / "real.csv", "t,x,y,value\n2.5,1,1,0.5\n3.5,2,2,0.25\n");
    spec.real_time = true;
    spec.t0 = 0.5;
    ModelConfig model = c.model;
    model.dt = 1.0;
    const ObservationSet timed = read_observations(dir / "real.csv", mesh, model, spec);
    CHECK(timed.points[0].t_index == 2);
    CHECK(timed.points[1].t_index == 3);

    write_atomic(dir / "off.csv", "t,x,y,value\n0.3,1,1,0.5\n");
    spec.real_time = false;
    CHECK_THROWS_AS(read_observations(dir / "off.csv", mesh, model, spec), Error);
    write_atomic(dir / "hdr.csv", "time,x,y,value\n0,1,1,0.5\n");
    CHECK_THROWS_AS(read_observations(dir / "hdr.csv", mesh, model, spec), Error);
}

TEST_CASE("simulate then estimate through the command-line workflows") {
    const fs::path dir = scratch("pipeline");
    RunConfig c = small_config(dir);
    c.seed = 5;
    c.simulate.stations = 30;
    REQUIRE(run(c) == 0);
    c.workflow = Workflow::Estimate;
    c.data.observations = dir / "observations.csv";
    c.estimate.max_iterations = 3;
    CHECK(run(c) == 0);
    const std::string report = slurp(dir / "report.json");
    CHECK(report.find("\"estimate\"") != std::string::npos);
    CHECK(report.find("\"config_ini\"") != std::string::npos);
    CHECK(fs::exists(dir / "iterations.csv"));

    c.workflow = Workflow::Condsim;
    c.predict.realizations = 3;
    c.predict.horizon = 2;
    REQUIRE(run(c) == 0);
    const std::string ensemble = slurp(dir / "ensemble.csv");
    CHECK(ensemble.rfind("realization,t_index,node_id,value\n", 0) == 0);
    // header + 3 realizations x (4 + 2) blocks x 121 nodes
    CHECK(std::count(ensemble.begin(), ensemble.end(), '\n') == 1 + 3 * 6 * 121);
    const std::string summary = slurp(dir / "ensemble_summary.csv");
    CHECK(summary.rfind("t_index,node_id,mean,variance,q05,q50,q95\n", 0) == 0);
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 1 + 6 * 121);
    CHECK(fs::exists(dir / "vertices.csv"));
}

TEST_CASE("automatic padding is one practical range") {
    RunConfig c = default_config();
    CHECK(to_ini(c).find("padding = auto") != std::string::npos);
    // nu = 2, kappa = 0.5
    CHECK(resolve_padding(c) == doctest::Approx(8.0));
    c.mesh.padding = 1.5;
    CHECK(resolve_padding(c) == 1.5);
}

TEST_CASE("ensemble summary quantiles interpolate order statistics") {
    Ensemble e;
    for (int r = 0; r < 5; ++r) e.realizations.push_back(DenseMatrix::Constant(1, 1, 4.0 - r));
    CHECK(ensemble_summary_csv(e) == "t_index,node_id,mean,variance,q05,q50,q95\n0,0,2,2.5,0.20000000000000001,2,3.7999999999999998\n");
}

TEST_CASE("benchmark summary of one replicate leaves the deviations empty") {
    ReplicateResult r;
    r.ok = true;
    r.estimate.theta = ParameterVector{0.5, Vec2(2.0, 2.0), 1.0, 1.0};
    r.seconds = 3.0;
    const BenchmarkSummary s = summarize({r}, Method::Cholesky);
    CHECK(s.mean[0] == 0.5);
    CHECK(std::isnan(s.sd[0]));
    const std::string csv = summary_csv({s});
    CHECK(csv.find("cholesky,1,0,0.5,,2,,2,,1,,1,,3\n") != std::string::npos);

    ReplicateResult failed;
    failed.error = "NotSpd";
    const BenchmarkSummary two = summarize({r, failed, r}, Method::MatrixFree);
    CHECK(two.failures == 1);
    CHECK(two.sd[3] == 0.0);
}

TEST_CASE("benchmark stations stay fixed while replicates change") {
    RunConfig c = default_config();
    c.mesh = MeshSpec{{0.0, 10.0}, {0.0, 10.0}, 11, 11, 0.0};
    c.benchmark.stations = 7;
    const auto mesh = make_mesh(c);
    const FemAssembly fem(mesh, c.model.H);
    const ObservationSet a = benchmark_data(c, mesh, fem, 0);
    const ObservationSet b = benchmark_data(c, mesh, fem, 1);
    REQUIRE(a.size() == 70);
    for (int i = 0; i < a.size(); ++i) {
        CHECK(a.points[static_cast<std::size_t>(i)].x == b.points[static_cast<std::size_t>(i)].x);
        CHECK(a.points[static_cast<std::size_t>(i)].x >= 0.0);
        CHECK(a.points[static_cast<std::size_t>(i)].x <= 10.0);
    }
    CHECK((a.y - b.y).norm() > 0.1);
    CHECK(a.y == benchmark_data(c, mesh, fem, 0).y);
}
