#pragma once
// Flat dotted-key pipeline configuration ("section.key: value" lines with #
// comments). Every key has a default mirroring the Euler-vortex table;
// unknown keys, type mismatches and out-of-range values are hard errors that
// name the offending line. Parse -> serialize -> parse is a fixed point.

#include <cstdint>
#include <filesystem>
#include <string>

#include "pivoflow/cnf.hpp"
#include "pivoflow/flow_sim.hpp"
#include "pivoflow/vsde.hpp"

namespace pivoflow {

struct PipelineConfig {
    struct Trajectory {
        int particles = 4096;
        int val_particles = 512;
        int steps = 240;
        double dt = 0.01;
        std::string field = "vortex";
        double u_max = 1.0;
        double half_height = 1.0;
        double circulation = 6.283185307179586;
        double core_radius = 1.0;
        double center_x = 0.0;
        double center_y = 0.0;
        double shear_rate = 0.5;
        double base_velocity = 0.5;
        double diffusion_d = 0.05;
        double reflect_h = 0.0;
        std::string x0_mode = "uniform";
        double x0_x = 0.0;
        double x0_y = 0.0;
        double x0_min_x = -1.0;
        double x0_max_x = 1.0;
        double x0_min_y = -1.0;
        double x0_max_y = 1.0;
        std::uint64_t seed = 42;
    } trajectory;

    struct Cnf {
        int batch_size = 512;
        int epochs = 8;
        double learning_rate = 0.002;
        int hidden = 64;
        int depth = 3;
        int context_dim = 3;
        int limit = 1024;
        std::string objective = "mle";
        std::string context_features = "alpha,d";
        int embed_freqs = 4;
        std::string int_method = "rk4";
        int int_steps = 24;
        int warmup_steps = 1000;
        double weight_decay = 1e-4;
        double lr_min = 1e-5;
        std::uint64_t seed = 7;
    } cnf;

    struct Vsde {
        int batch_size = 2048;
        int epochs = 50;
        double learning_rate = 0.01;
        int particles = 64;
        int steps = 120;
        double control_cost = 1.0;
        bool learnable_diffusion = true;
        double lambda_kl = 1.0;
        double lambda_phys = 0.1;
        double lambda_pde = 0.01;
        double sigma_obs = 0.05;
        std::string guardrail_r_mode = "auto";
        double guardrail_r = 0.0;
        double guardrail_alpha = 1.0;
        double u_max = 10.0;
        int hidden = 64;
        int depth = 3;
        int gru_hidden = 32;
        int ctx_dim = 16;
        int embed_freqs = 4;
        std::string encoder_input = "prefix";
        double prefix_fraction = 0.25;
        double init_log_g0 = -4.6051701859880914;
        double rho = 1.0;
        double c_p = 1.0;
        double k_thermal = 0.01;
        double phi_visc = 0.0;
        double stencil_h = 0.05;
        int warmup_steps = 1000;
        double weight_decay = 1e-4;
        double lr_min = 1e-5;
        int limit = 0;
        std::uint64_t seed = 11;
    } vsde;

    struct Inference {
        int particles = 64;
        int steps = 120;
        std::string integrator = "rk4";
        std::uint64_t seed = 123;
        bool compare_integrators = false;
        int subset = 0;  // validation trajectories used; 0 = all
    } inference;

    struct Pipeline {
        int threads = 0;  // 0 = hardware concurrency
    } pipeline;

    struct Paths {
        std::string data_dir = "data";
        std::string checkpoint_dir = "checkpoints";
        std::string report_dir = "report";
    } paths;

    // Cross-field checks beyond the per-key ranges enforced at parse time.
    void validate() const;

    FlowFieldSpec field_spec() const;
    SimConfig sim_config(SplitTag split) const;
    CnfArch cnf_arch() const;
    CnfTrainConfig cnf_train_config() const;
    VsdeTrainConfig vsde_train_config() const;
};

PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string serialize_config(const PipelineConfig& cfg);
std::string config_hash(const PipelineConfig& cfg);

}  // namespace pivoflow
