#include <doctest.h>

#include <string>

#include "pivoflow/config.hpp"
#include "pivoflow/errors.hpp"

using namespace pivoflow;

TEST_CASE("empty config yields the full vortex default table") {
    const PipelineConfig cfg = parse_config("");
    CHECK(cfg.trajectory.particles == 4096);
    CHECK(cfg.trajectory.steps == 240);
    CHECK(cfg.trajectory.dt == doctest::Approx(0.01));
    CHECK(cfg.trajectory.field == "vortex");
    CHECK(cfg.cnf.batch_size == 512);
    CHECK(cfg.cnf.epochs == 8);
    CHECK(cfg.cnf.learning_rate == doctest::Approx(0.002));
    CHECK(cfg.cnf.hidden == 64);
    CHECK(cfg.cnf.depth == 3);
    CHECK(cfg.cnf.context_dim == 3);
    CHECK(cfg.cnf.limit == 1024);
    CHECK(cfg.vsde.batch_size == 2048);
    CHECK(cfg.vsde.epochs == 50);
    CHECK(cfg.vsde.learning_rate == doctest::Approx(0.01));
    CHECK(cfg.vsde.particles == 64);
    CHECK(cfg.vsde.steps == 120);
    CHECK(cfg.vsde.control_cost == doctest::Approx(1.0));
    CHECK(cfg.vsde.learnable_diffusion == true);
    CHECK(cfg.inference.particles == 64);
    CHECK(cfg.inference.steps == 120);
}

TEST_CASE("single-key override leaves everything else at defaults") {
    const PipelineConfig cfg = parse_config("trajectory.particles: 1024\n");
    CHECK(cfg.trajectory.particles == 1024);
    CHECK(cfg.trajectory.steps == 240);
    CHECK(cfg.cnf.batch_size == 512);
}

TEST_CASE("comments, blank lines, last-wins duplicates") {
    const std::string text =
        "# a comment line\n"
        "\n"
        "cnf.epochs: 3   # trailing comment\n"
        "cnf.epochs: 5\n";
    const PipelineConfig cfg = parse_config(text);
    CHECK(cfg.cnf.epochs == 5);
}

TEST_CASE("unknown key, type mismatch, range errors name the line") {
    try {
        parse_config("cnf.banana: 3\n");
        CHECK(false);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 1") != std::string::npos);
        CHECK(msg.find("cnf.banana") != std::string::npos);
    }
    try {
        parse_config("# first\ncnf.epochs: many\n");
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    try {
        parse_config("trajectory.dt: -0.5\n");
        CHECK(false);
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 1") != std::string::npos);
        CHECK(msg.find("out of range") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("vsde.encoder_input: sideways\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("just some words\n"), ConfigError);
}

TEST_CASE("cross-field validation") {
    // context_dim must match the feature list
    CHECK_THROWS_AS(parse_config("cnf.context_features: x0,alpha,d\n"), ConfigError);
    const PipelineConfig ok = parse_config("cnf.context_features: x0,alpha,d\ncnf.context_dim: 5\n");
    CHECK(ok.cnf.context_dim == 5);
    // rollout grid must divide the bundle grid
    CHECK_THROWS_AS(parse_config("vsde.steps: 77\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("inference.steps: 77\n"), ConfigError);
    // fixed guardrail needs a radius
    CHECK_THROWS_AS(parse_config("vsde.guardrail_r_mode: fixed\n"), ConfigError);
}

TEST_CASE("parse -> serialize -> parse is a fixed point") {
    const std::string text =
        "trajectory.field: poiseuille\n"
        "trajectory.u_max: 1.25\n"
        "trajectory.half_height: 1\n"
        "trajectory.reflect_h: 1\n"
        "trajectory.diffusion_d: 0.1\n"
        "trajectory.particles: 512\n"
        "cnf.learning_rate: 0.0035\n"
        "vsde.steps: 60\n"
        "inference.steps: 60\n"
        "inference.integrator: heun\n";
    const PipelineConfig a = parse_config(text);
    const std::string s1 = serialize_config(a);
    const PipelineConfig b = parse_config(s1);
    const std::string s2 = serialize_config(b);
    CHECK(s1 == s2);
    CHECK(config_hash(a) == config_hash(b));
    CHECK(b.trajectory.u_max == doctest::Approx(1.25));
    CHECK(b.inference.integrator == "heun");
}

TEST_CASE("derived builders: field spec, sim config, training configs") {
    const PipelineConfig cfg = parse_config(
        "trajectory.field: shear\n"
        "trajectory.shear_rate: 0.9\n"
        "trajectory.base_velocity: 0.2\n"
        "trajectory.val_particles: 32\n"
        "vsde.control_cost: 2.5\n");
    const FlowFieldSpec f = cfg.field_spec();
    CHECK(f.kind == FieldKind::UniformShear);
    CHECK(f.shear_rate == doctest::Approx(0.9));

    const SimConfig tr = cfg.sim_config(SplitTag::Train);
    const SimConfig va = cfg.sim_config(SplitTag::Validation);
    CHECK(tr.n_particles == 4096);
    CHECK(va.n_particles == 32);
    CHECK(va.stream_offset == 4096);  // validation never shares particle substreams
    CHECK(tr.seed == va.seed);

    const VsdeTrainConfig vc = cfg.vsde_train_config();
    CHECK(vc.weights.lambda_u == doctest::Approx(2.5));
    CHECK(vc.arch.ctx_dim == 16);
}
