#include "pivoflow/flow_sim.hpp"

#include <cmath>
#include <string>

#include "pivoflow/errors.hpp"
#include "pivoflow/manifest.hpp"

namespace pivoflow {

void SimConfig::validate() const {
    field.validate();
    if (!(diffusion_d >= 0.0)) throw ConfigError("sim: diffusion_d must be >= 0");
    if (!(dt > 0.0)) throw ConfigError("sim: dt must be > 0");
    if (n_steps < 0) throw ConfigError("sim: n_steps must be >= 0");
    if (n_particles < 1) throw ConfigError("sim: n_particles must be >= 1");
    if (reflect_h < 0.0) throw ConfigError("sim: reflect_h must be >= 0");
    if (x0.mode == X0Sampler::Mode::UniformBox &&
        (!(x0.box_hi.x >= x0.box_lo.x) || !(x0.box_hi.y >= x0.box_lo.y)))
        throw ConfigError("sim: x0 box bounds are inverted");
}

Vec2 em_step(Vec2 x, Vec2 u, double diffusion_d, double dt, Vec2 xi) {
    const double s = std::sqrt(2.0 * diffusion_d * dt);
    return {x.x + u.x * dt + s * xi.x, x.y + u.y * dt + s * xi.y};
}

Vec2 reflect(Vec2 x, double h) {
    double y = x.y;
    while (y > h || y < -h) {
        if (y > h)
            y = 2.0 * h - y;
        else
            y = -2.0 * h - y;
    }
    return {x.x, y};
}

std::vector<Vec2> simulate_trajectory(const SimConfig& cfg, Vec2 x0, CounterStream& stream) {
    std::vector<Vec2> traj(cfg.n_steps + 1);
    traj[0] = x0;
    Vec2 x = x0;
    for (int k = 0; k < cfg.n_steps; ++k) {
        const Vec2 u = velocity_at(cfg.field, x);
        x = em_step(x, u, cfg.diffusion_d, cfg.dt, stream.next_gaussian_pair());
        if (cfg.reflect_h > 0.0) x = reflect(x, cfg.reflect_h);
        if (!x.finite())
            throw NumericError("simulation diverged at step " + std::to_string(k + 1));
        traj[k + 1] = x;
    }
    return traj;
}

TrajectoryBundle generate_bundle(const SimConfig& cfg) {
    cfg.validate();
    TrajectoryBundle b;
    b.n_particles = cfg.n_particles;
    b.n_steps = cfg.n_steps;
    b.dt = cfg.dt;
    b.field = cfg.field;
    b.diffusion_d = cfg.diffusion_d;
    b.reflect_h = cfg.reflect_h;
    b.seed = cfg.seed;
    b.split = cfg.split;
    b.time_grid.resize(cfg.n_steps + 1);
    for (int k = 0; k <= cfg.n_steps; ++k) b.time_grid[k] = k * cfg.dt;
    b.positions.resize(static_cast<std::size_t>(cfg.n_particles) * (cfg.n_steps + 1) * 2);

    for (int p = 0; p < cfg.n_particles; ++p) {
        CounterStream stream(cfg.seed, cfg.stream_offset + static_cast<std::uint64_t>(p));
        Vec2 x0 = cfg.x0.fixed;
        if (cfg.x0.mode == X0Sampler::Mode::UniformBox) {
            x0.x = stream.next_uniform(cfg.x0.box_lo.x, cfg.x0.box_hi.x);
            x0.y = stream.next_uniform(cfg.x0.box_lo.y, cfg.x0.box_hi.y);
        }
        const std::vector<Vec2> traj = simulate_trajectory(cfg, x0, stream);
        for (int k = 0; k <= cfg.n_steps; ++k) b.set_pos(p, k, traj[k]);
    }
    return b;
}

const char* split_name(SplitTag tag) {
    return tag == SplitTag::Train ? "train" : "validation";
}

SplitTag split_from_name(const std::string& name) {
    if (name == "train") return SplitTag::Train;
    if (name == "validation") return SplitTag::Validation;
    throw IoError(IoError::Kind::Malformed, "unknown split tag: " + name);
}

namespace {
constexpr int kBundleFormatVersion = 1;

void field_to_manifest(const FlowFieldSpec& f, Manifest& m) {
    m.set("field_kind", f.kind_name());
    switch (f.kind) {
        case FieldKind::Poiseuille:
            m.set_f64("field_params.u_max", f.u_max);
            m.set_f64("field_params.half_height", f.half_height);
            break;
        case FieldKind::LambOseenVortex:
            m.set_f64("field_params.circulation", f.circulation);
            m.set_f64("field_params.core_radius", f.core_radius);
            m.set_f64("field_params.center_x", f.center.x);
            m.set_f64("field_params.center_y", f.center.y);
            break;
        case FieldKind::UniformShear:
            m.set_f64("field_params.shear_rate", f.shear_rate);
            m.set_f64("field_params.base_velocity", f.base_velocity);
            break;
    }
}

FlowFieldSpec field_from_manifest(const Manifest& m) {
    FlowFieldSpec f;
    f.kind = FlowFieldSpec::kind_from_name(m.get("field_kind"));
    switch (f.kind) {
        case FieldKind::Poiseuille:
            f.u_max = m.get_f64("field_params.u_max");
            f.half_height = m.get_f64("field_params.half_height");
            break;
        case FieldKind::LambOseenVortex:
            f.circulation = m.get_f64("field_params.circulation");
            f.core_radius = m.get_f64("field_params.core_radius");
            f.center = {m.get_f64("field_params.center_x"), m.get_f64("field_params.center_y")};
            break;
        case FieldKind::UniformShear:
            f.shear_rate = m.get_f64("field_params.shear_rate");
            f.base_velocity = m.get_f64("field_params.base_velocity");
            break;
    }
    f.validate();
    return f;
}
}  // namespace

void save_bundle(const TrajectoryBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::filesystem::path data_path = dir / "positions.f64";
    write_f64_file(data_path, bundle.positions);

    Manifest m;
    m.set_i64("format_version", kBundleFormatVersion);
    m.set_i64("n_particles", bundle.n_particles);
    m.set_i64("n_steps", bundle.n_steps);
    m.set_f64("dt", bundle.dt);
    field_to_manifest(bundle.field, m);
    m.set_f64("diffusion_D", bundle.diffusion_d);
    m.set_f64("reflect_H", bundle.reflect_h);
    m.set_i64("seed", static_cast<std::int64_t>(bundle.seed));
    m.set("split", split_name(bundle.split));
    m.set("data_sha256", sha256_file_hex(data_path));
    m.save(dir / "manifest.txt");
}

TrajectoryBundle load_bundle(const std::filesystem::path& dir) {
    const Manifest m = Manifest::load(dir / "manifest.txt");
    if (m.get_i64("format_version") != kBundleFormatVersion)
        throw IoError(IoError::Kind::VersionMismatch,
                      "bundle format_version " + m.get("format_version") + " != " +
                          std::to_string(kBundleFormatVersion));

    TrajectoryBundle b;
    b.n_particles = static_cast<int>(m.get_i64("n_particles"));
    b.n_steps = static_cast<int>(m.get_i64("n_steps"));
    b.dt = m.get_f64("dt");
    b.field = field_from_manifest(m);
    b.diffusion_d = m.get_f64("diffusion_D");
    b.reflect_h = m.get_f64("reflect_H");
    b.seed = static_cast<std::uint64_t>(m.get_i64("seed"));
    b.split = split_from_name(m.get("split"));

    const std::filesystem::path data_path = dir / "positions.f64";
    const std::string actual_sha = sha256_file_hex(data_path);
    if (actual_sha != m.get("data_sha256"))
        throw IoError(IoError::Kind::ChecksumMismatch, "bundle data checksum mismatch in " +
                                                           dir.string());
    b.positions = read_f64_file(data_path);
    const std::size_t expect =
        static_cast<std::size_t>(b.n_particles) * (b.n_steps + 1) * 2;
    if (b.positions.size() != expect)
        throw IoError(IoError::Kind::ShapeMismatch,
                      "bundle holds " + std::to_string(b.positions.size()) +
                          " values, manifest implies " + std::to_string(expect));
    b.time_grid.resize(b.n_steps + 1);
    for (int k = 0; k <= b.n_steps; ++k) b.time_grid[k] = k * b.dt;
    return b;
}

}  // namespace pivoflow
