#pragma once
// Stochastic particle-trajectory generation: Euler-Maruyama marching over an
// analytical field with optional reflecting walls, plus the on-disk bundle
// format (manifest + little-endian f64 blob, bit-exact round trip).

#include <cstdint>
#include <filesystem>
#include <vector>

#include "pivoflow/flow_field.hpp"
#include "pivoflow/rng.hpp"
#include "pivoflow/vec2.hpp"

namespace pivoflow {

enum class SplitTag { Train, Validation };

struct X0Sampler {
    enum class Mode { Fixed, UniformBox };
    Mode mode = Mode::UniformBox;
    Vec2 fixed{0.0, 0.0};
    Vec2 box_lo{-1.0, -1.0};
    Vec2 box_hi{1.0, 1.0};
};

struct SimConfig {
    FlowFieldSpec field;
    double diffusion_d = 0.05;
    double dt = 0.01;
    int n_steps = 240;
    int n_particles = 4096;
    X0Sampler x0;
    double reflect_h = 0.0;  // 0 disables reflection
    std::uint64_t seed = 42;
    SplitTag split = SplitTag::Train;
    // Base offset for per-particle noise substreams; a validation bundle uses
    // the training bundle's particle count so the two never share streams.
    std::uint64_t stream_offset = 0;

    void validate() const;
};

struct TrajectoryBundle {
    std::vector<double> time_grid;  // n_steps + 1 entries, uniform dt
    std::vector<double> positions;  // [particle][step][component], flat
    int n_particles = 0;
    int n_steps = 0;
    double dt = 0.0;
    FlowFieldSpec field;
    double diffusion_d = 0.0;
    double reflect_h = 0.0;
    std::uint64_t seed = 0;
    SplitTag split = SplitTag::Train;

    Vec2 pos(int particle, int step) const {
        const std::size_t i = (static_cast<std::size_t>(particle) * (n_steps + 1) + step) * 2;
        return {positions[i], positions[i + 1]};
    }
    void set_pos(int particle, int step, Vec2 v) {
        const std::size_t i = (static_cast<std::size_t>(particle) * (n_steps + 1) + step) * 2;
        positions[i] = v.x;
        positions[i + 1] = v.y;
    }
};

// One Euler-Maruyama update: x + u dt + sqrt(2 D dt) xi.
Vec2 em_step(Vec2 x, Vec2 u, double diffusion_d, double dt, Vec2 xi);

// Mirror-fold y into [-h, h]; x untouched.
Vec2 reflect(Vec2 x, double h);

// Full trajectory for one particle; throws NumericError naming the step on
// non-finite state.
std::vector<Vec2> simulate_trajectory(const SimConfig& cfg, Vec2 x0, CounterStream& stream);

TrajectoryBundle generate_bundle(const SimConfig& cfg);

void save_bundle(const TrajectoryBundle& bundle, const std::filesystem::path& dir);
TrajectoryBundle load_bundle(const std::filesystem::path& dir);

const char* split_name(SplitTag tag);
SplitTag split_from_name(const std::string& name);

}  // namespace pivoflow
