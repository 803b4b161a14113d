#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pivoflow/config.hpp"
#include "pivoflow/manifest.hpp"
#include "pivoflow/pipeline.hpp"

using namespace pivoflow;
namespace fs = std::filesystem;

namespace {

// A pipeline small enough to run end-to-end in seconds.
PipelineConfig reduced_config(const fs::path& root) {
    PipelineConfig cfg = parse_config(
        "trajectory.field: poiseuille\n"
        "trajectory.u_max: 1.0\n"
        "trajectory.half_height: 1.0\n"
        "trajectory.reflect_h: 1.0\n"
        "trajectory.diffusion_d: 0.1\n"
        "trajectory.particles: 256\n"
        "trajectory.val_particles: 24\n"
        "trajectory.steps: 48\n"
        "trajectory.dt: 0.01\n"
        "trajectory.x0_min_x: 0\n"
        "trajectory.x0_max_x: 1\n"
        "trajectory.x0_min_y: -0.8\n"
        "trajectory.x0_max_y: 0.8\n"
        "cnf.epochs: 2\n"
        "cnf.batch_size: 64\n"
        "cnf.learning_rate: 0.01\n"
        "cnf.hidden: 16\n"
        "cnf.depth: 1\n"
        "cnf.limit: 128\n"
        "cnf.int_steps: 6\n"
        "cnf.warmup_steps: 4\n"
        "cnf.context_features: x0,d\n"
        "vsde.epochs: 2\n"
        "vsde.batch_size: 16\n"
        "vsde.learning_rate: 0.02\n"
        "vsde.particles: 2\n"
        "vsde.steps: 24\n"
        "vsde.hidden: 16\n"
        "vsde.depth: 1\n"
        "vsde.gru_hidden: 8\n"
        "vsde.ctx_dim: 4\n"
        "vsde.limit: 64\n"
        "vsde.warmup_steps: 4\n"
        "vsde.encoder_input: full\n"
        "inference.particles: 6\n"
        "inference.steps: 24\n"
        "inference.integrator: euler\n"
        "inference.compare_integrators: true\n"
        "inference.subset: 8\n");
    cfg.paths.data_dir = (root / "data").string();
    cfg.paths.checkpoint_dir = (root / "checkpoints").string();
    cfg.paths.report_dir = (root / "report").string();
    return cfg;
}

fs::path fresh_root(const std::string& name) {
    const fs::path root = fs::temp_directory_path() / ("pivoflow_pipe_" + name);
    fs::remove_all(root);
    fs::create_directories(root);
    return root;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("missing prerequisites map to exit code 3") {
    const fs::path root = fresh_root("prereq");
    const PipelineConfig cfg = reduced_config(root);
    CHECK(run_pipeline("train-cnf", cfg) == 3);
    CHECK(run_pipeline("train-vsde", cfg) == 3);
    CHECK(run_pipeline("infer", cfg) == 3);
    CHECK(run_pipeline("eval", cfg) == 3);
    CHECK(run_pipeline("frobnicate", cfg) == 2);

    // train-vsde still misses its CNF after simulate
    CHECK(run_pipeline("simulate", cfg) == 0);
    CHECK(run_pipeline("train-vsde", cfg) == 3);
}

TEST_CASE("reduced end-to-end run completes and emits a report") {
    const fs::path root = fresh_root("smoke");
    const PipelineConfig cfg = reduced_config(root);
    CHECK(run_pipeline("all", cfg) == 0);

    CHECK(fs::exists(root / "data" / "train" / "manifest.txt"));
    CHECK(fs::exists(root / "data" / "validation" / "manifest.txt"));
    CHECK(fs::exists(root / "checkpoints" / "cnf" / "params.f64"));
    CHECK(fs::exists(root / "checkpoints" / "vsde" / "params.f64"));
    CHECK(fs::exists(root / "data" / "ensembles" / "vsde_euler.f64"));
    CHECK(fs::exists(root / "data" / "ensembles" / "vsde_dopri5.f64"));
    CHECK(fs::exists(root / "report" / "comparison.csv"));
    CHECK(fs::exists(root / "report" / "integrator_comparison.csv"));
    CHECK(fs::exists(root / "report" / "overlay_trajectories.svg"));

    const auto rows = parse_csv(root / "report" / "comparison.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0][0] == "flow_regime");
    CHECK(rows[1][0] == "poiseuille");

    // re-running a single stage overwrites its artifact and leaves others valid
    CHECK(run_pipeline("infer", cfg) == 0);
    CHECK(run_pipeline("eval", cfg) == 0);
}

TEST_CASE("identical config and seed reproduce bundles, checkpoints, and metric csvs") {
    const fs::path root_a = fresh_root("det_a");
    const fs::path root_b = fresh_root("det_b");
    CHECK(run_pipeline("all", reduced_config(root_a)) == 0);
    CHECK(run_pipeline("all", reduced_config(root_b)) == 0);

    for (const char* rel :
         {"data/train/positions.f64", "data/train/manifest.txt", "data/validation/positions.f64",
          "checkpoints/cnf/params.f64", "checkpoints/cnf/manifest.txt",
          "checkpoints/vsde/params.f64", "data/ensembles/vsde_euler.f64",
          "report/comparison.csv", "report/final_position_mae.csv",
          "report/integrator_comparison.csv"}) {
        INFO("comparing ", rel);
        CHECK(slurp(root_a / rel) == slurp(root_b / rel));
    }
}
