#include "pivoflow/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "pivoflow/errors.hpp"
#include "pivoflow/manifest.hpp"

namespace pivoflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Binding {
    const char* key;
    enum Kind { Int, Real, Bool, Str, U64 } kind;
    void* p;
    double lo = -kInf;
    double hi = kInf;
    const char* allowed = nullptr;  // comma-separated values for Str
};

std::vector<Binding> bindings(PipelineConfig& c) {
    auto& t = c.trajectory;
    auto& f = c.cnf;
    auto& v = c.vsde;
    auto& i = c.inference;
    auto& p = c.pipeline;
    auto& d = c.paths;
    return {
        {"trajectory.particles", Binding::Int, &t.particles, 1, 1e9},
        {"trajectory.val_particles", Binding::Int, &t.val_particles, 1, 1e9},
        {"trajectory.steps", Binding::Int, &t.steps, 1, 1e9},
        {"trajectory.dt", Binding::Real, &t.dt, 1e-12, 1e6},
        {"trajectory.field", Binding::Str, &t.field, 0, 0,
         "poiseuille,vortex,shear,lamb_oseen_vortex,uniform_shear"},
        {"trajectory.u_max", Binding::Real, &t.u_max},
        {"trajectory.half_height", Binding::Real, &t.half_height, 1e-12, kInf},
        {"trajectory.circulation", Binding::Real, &t.circulation},
        {"trajectory.core_radius", Binding::Real, &t.core_radius, 1e-12, kInf},
        {"trajectory.center_x", Binding::Real, &t.center_x},
        {"trajectory.center_y", Binding::Real, &t.center_y},
        {"trajectory.shear_rate", Binding::Real, &t.shear_rate},
        {"trajectory.base_velocity", Binding::Real, &t.base_velocity},
        {"trajectory.diffusion_d", Binding::Real, &t.diffusion_d, 0.0, kInf},
        {"trajectory.reflect_h", Binding::Real, &t.reflect_h, 0.0, kInf},
        {"trajectory.x0_mode", Binding::Str, &t.x0_mode, 0, 0, "uniform,fixed"},
        {"trajectory.x0_x", Binding::Real, &t.x0_x},
        {"trajectory.x0_y", Binding::Real, &t.x0_y},
        {"trajectory.x0_min_x", Binding::Real, &t.x0_min_x},
        {"trajectory.x0_max_x", Binding::Real, &t.x0_max_x},
        {"trajectory.x0_min_y", Binding::Real, &t.x0_min_y},
        {"trajectory.x0_max_y", Binding::Real, &t.x0_max_y},
        {"trajectory.seed", Binding::U64, &t.seed},
        {"cnf.batch_size", Binding::Int, &f.batch_size, 1, 1e9},
        {"cnf.epochs", Binding::Int, &f.epochs, 0, 1e6},
        {"cnf.learning_rate", Binding::Real, &f.learning_rate, 0.0, 1e3},
        {"cnf.hidden", Binding::Int, &f.hidden, 1, 65536},
        {"cnf.depth", Binding::Int, &f.depth, 0, 64},
        {"cnf.context_dim", Binding::Int, &f.context_dim, 1, 64},
        {"cnf.limit", Binding::Int, &f.limit, 0, 1e9},
        {"cnf.objective", Binding::Str, &f.objective, 0, 0, "mle,endpoint_mse"},
        {"cnf.context_features", Binding::Str, &f.context_features},
        {"cnf.embed_freqs", Binding::Int, &f.embed_freqs, 1, 64},
        {"cnf.int_method", Binding::Str, &f.int_method, 0, 0, "euler,heun,rk4,dopri5"},
        {"cnf.int_steps", Binding::Int, &f.int_steps, 1, 100000},
        {"cnf.warmup_steps", Binding::Int, &f.warmup_steps, 0, 1e9},
        {"cnf.weight_decay", Binding::Real, &f.weight_decay, 0.0, 1.0},
        {"cnf.lr_min", Binding::Real, &f.lr_min, 0.0, 1e3},
        {"cnf.seed", Binding::U64, &f.seed},
        {"vsde.batch_size", Binding::Int, &v.batch_size, 1, 1e9},
        {"vsde.epochs", Binding::Int, &v.epochs, 0, 1e6},
        {"vsde.learning_rate", Binding::Real, &v.learning_rate, 0.0, 1e3},
        {"vsde.particles", Binding::Int, &v.particles, 1, 65536},
        {"vsde.steps", Binding::Int, &v.steps, 2, 1e9},
        {"vsde.control_cost", Binding::Real, &v.control_cost, 0.0, kInf},
        {"vsde.learnable_diffusion", Binding::Bool, &v.learnable_diffusion},
        {"vsde.lambda_kl", Binding::Real, &v.lambda_kl, 0.0, kInf},
        {"vsde.lambda_phys", Binding::Real, &v.lambda_phys, 0.0, kInf},
        {"vsde.lambda_pde", Binding::Real, &v.lambda_pde, 0.0, kInf},
        {"vsde.sigma_obs", Binding::Real, &v.sigma_obs, 1e-12, kInf},
        {"vsde.guardrail_r_mode", Binding::Str, &v.guardrail_r_mode, 0, 0, "auto,fixed"},
        {"vsde.guardrail_r", Binding::Real, &v.guardrail_r, 0.0, kInf},
        {"vsde.guardrail_alpha", Binding::Real, &v.guardrail_alpha, 1e-12, kInf},
        {"vsde.u_max", Binding::Real, &v.u_max, 1e-12, kInf},
        {"vsde.hidden", Binding::Int, &v.hidden, 1, 65536},
        {"vsde.depth", Binding::Int, &v.depth, 0, 64},
        {"vsde.gru_hidden", Binding::Int, &v.gru_hidden, 1, 65536},
        {"vsde.ctx_dim", Binding::Int, &v.ctx_dim, 1, 65536},
        {"vsde.embed_freqs", Binding::Int, &v.embed_freqs, 1, 64},
        {"vsde.encoder_input", Binding::Str, &v.encoder_input, 0, 0, "prefix,full"},
        {"vsde.prefix_fraction", Binding::Real, &v.prefix_fraction, 1e-6, 1.0},
        {"vsde.init_log_g0", Binding::Real, &v.init_log_g0, -50.0, 50.0},
        {"vsde.rho", Binding::Real, &v.rho, 0.0, kInf},
        {"vsde.c_p", Binding::Real, &v.c_p, 0.0, kInf},
        {"vsde.k_thermal", Binding::Real, &v.k_thermal, 0.0, kInf},
        {"vsde.phi_visc", Binding::Real, &v.phi_visc, 0.0, kInf},
        {"vsde.stencil_h", Binding::Real, &v.stencil_h, 1e-9, kInf},
        {"vsde.warmup_steps", Binding::Int, &v.warmup_steps, 0, 1e9},
        {"vsde.weight_decay", Binding::Real, &v.weight_decay, 0.0, 1.0},
        {"vsde.lr_min", Binding::Real, &v.lr_min, 0.0, 1e3},
        {"vsde.limit", Binding::Int, &v.limit, 0, 1e9},
        {"vsde.seed", Binding::U64, &v.seed},
        {"inference.particles", Binding::Int, &i.particles, 1, 65536},
        {"inference.steps", Binding::Int, &i.steps, 2, 1e9},
        {"inference.integrator", Binding::Str, &i.integrator, 0, 0, "euler,heun,rk4,dopri5"},
        {"inference.seed", Binding::U64, &i.seed},
        {"inference.compare_integrators", Binding::Bool, &i.compare_integrators},
        {"inference.subset", Binding::Int, &i.subset, 0, 1e9},
        {"pipeline.threads", Binding::Int, &p.threads, 0, 4096},
        {"paths.data_dir", Binding::Str, &d.data_dir},
        {"paths.checkpoint_dir", Binding::Str, &d.checkpoint_dir},
        {"paths.report_dir", Binding::Str, &d.report_dir},
    };
}

bool str_allowed(const std::string& value, const char* allowed) {
    if (!allowed) return true;
    std::stringstream ss(allowed);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (tok == value) return true;
    return false;
}

[[noreturn]] void fail(int line, const std::string& what) {
    throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

void apply(const Binding& b, const std::string& value, int line) {
    char* end = nullptr;
    switch (b.kind) {
        case Binding::Int: {
            const long v = std::strtol(value.c_str(), &end, 10);
            if (end == value.c_str() || *end != '\0')
                fail(line, "expected integer for " + std::string(b.key) + ", got '" + value + "'");
            if (v < b.lo || v > b.hi)
                fail(line, std::string(b.key) + " = " + value + " is out of range");
            *static_cast<int*>(b.p) = static_cast<int>(v);
            break;
        }
        case Binding::Real: {
            const double v = std::strtod(value.c_str(), &end);
            if (end == value.c_str() || *end != '\0')
                fail(line, "expected number for " + std::string(b.key) + ", got '" + value + "'");
            if (!(v >= b.lo) || !(v <= b.hi))
                fail(line, std::string(b.key) + " = " + value + " is out of range");
            *static_cast<double*>(b.p) = v;
            break;
        }
        case Binding::Bool: {
            if (value == "true" || value == "yes")
                *static_cast<bool*>(b.p) = true;
            else if (value == "false" || value == "no")
                *static_cast<bool*>(b.p) = false;
            else
                fail(line, "expected true/false for " + std::string(b.key) + ", got '" + value +
                               "'");
            break;
        }
        case Binding::Str: {
            if (!str_allowed(value, b.allowed))
                fail(line, std::string(b.key) + " must be one of {" + b.allowed + "}, got '" +
                               value + "'");
            *static_cast<std::string*>(b.p) = value;
            break;
        }
        case Binding::U64: {
            const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
            if (end == value.c_str() || *end != '\0')
                fail(line, "expected integer for " + std::string(b.key) + ", got '" + value + "'");
            *static_cast<std::uint64_t*>(b.p) = v;
            break;
        }
    }
}

std::string render(const Binding& b) {
    switch (b.kind) {
        case Binding::Int: return std::to_string(*static_cast<const int*>(b.p));
        case Binding::Real: return format_f64(*static_cast<const double*>(b.p));
        case Binding::Bool: return *static_cast<const bool*>(b.p) ? "true" : "false";
        case Binding::Str: return *static_cast<const std::string*>(b.p);
        case Binding::U64: return std::to_string(*static_cast<const std::uint64_t*>(b.p));
    }
    return "";
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
    PipelineConfig cfg;
    auto binds = bindings(cfg);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string s = line;
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
            s.pop_back();
        std::size_t start = 0;
        while (start < s.size() && (s[start] == ' ' || s[start] == '\t')) ++start;
        s.erase(0, start);
        if (s.empty()) continue;
        const auto colon = s.find(':');
        if (colon == std::string::npos) fail(lineno, "expected 'section.key: value'");
        std::string key = s.substr(0, colon);
        while (!key.empty() && key.back() == ' ') key.pop_back();
        std::string value = s.substr(colon + 1);
        while (!value.empty() && value.front() == ' ') value.erase(value.begin());
        const Binding* found = nullptr;
        for (const auto& b : binds)
            if (key == b.key) {
                found = &b;
                break;
            }
        if (!found) fail(lineno, "unknown key '" + key + "'");
        apply(*found, value, lineno);
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const PipelineConfig& cfg) {
    auto binds = bindings(const_cast<PipelineConfig&>(cfg));
    std::string out;
    std::string section;
    for (const auto& b : binds) {
        const std::string key(b.key);
        const std::string sec = key.substr(0, key.find('.'));
        if (sec != section) {
            if (!out.empty()) out += "\n";
            section = sec;
        }
        out += key + ": " + render(b) + "\n";
    }
    return out;
}

std::string config_hash(const PipelineConfig& cfg) {
    const std::string text = serialize_config(cfg);
    return sha256_hex(text.data(), text.size());
}

void PipelineConfig::validate() const {
    field_spec().validate();
    if (cnf.context_dim != context_dim_for(parse_context_features(cnf.context_features)))
        throw ConfigError("cnf.context_dim does not match cnf.context_features (" +
                          cnf.context_features + ")");
    if (trajectory.steps % vsde.steps != 0)
        throw ConfigError("vsde.steps must divide trajectory.steps");
    if (trajectory.steps % inference.steps != 0)
        throw ConfigError("inference.steps must divide trajectory.steps");
    if (vsde.guardrail_r_mode == "fixed" && !(vsde.guardrail_r > 0.0))
        throw ConfigError("vsde.guardrail_r must be > 0 when guardrail_r_mode is fixed");
    if (trajectory.x0_mode == "uniform" &&
        (!(trajectory.x0_max_x >= trajectory.x0_min_x) ||
         !(trajectory.x0_max_y >= trajectory.x0_min_y)))
        throw ConfigError("trajectory x0 box bounds are inverted");
}

FlowFieldSpec PipelineConfig::field_spec() const {
    const auto& t = trajectory;
    switch (FlowFieldSpec::kind_from_name(t.field)) {
        case FieldKind::Poiseuille:
            return FlowFieldSpec::poiseuille(t.u_max, t.half_height);
        case FieldKind::LambOseenVortex:
            return FlowFieldSpec::lamb_oseen(t.circulation, t.core_radius,
                                             {t.center_x, t.center_y});
        case FieldKind::UniformShear:
            return FlowFieldSpec::uniform_shear(t.shear_rate, t.base_velocity);
    }
    throw ConfigError("unreachable field kind");
}

SimConfig PipelineConfig::sim_config(SplitTag split) const {
    SimConfig s;
    s.field = field_spec();
    s.diffusion_d = trajectory.diffusion_d;
    s.dt = trajectory.dt;
    s.n_steps = trajectory.steps;
    s.n_particles = split == SplitTag::Train ? trajectory.particles : trajectory.val_particles;
    s.reflect_h = trajectory.reflect_h;
    s.seed = trajectory.seed;
    s.split = split;
    s.stream_offset = split == SplitTag::Train ? 0 : static_cast<std::uint64_t>(trajectory.particles);
    if (trajectory.x0_mode == "fixed") {
        s.x0.mode = X0Sampler::Mode::Fixed;
        s.x0.fixed = {trajectory.x0_x, trajectory.x0_y};
    } else {
        s.x0.mode = X0Sampler::Mode::UniformBox;
        s.x0.box_lo = {trajectory.x0_min_x, trajectory.x0_min_y};
        s.x0.box_hi = {trajectory.x0_max_x, trajectory.x0_max_y};
    }
    return s;
}

CnfArch PipelineConfig::cnf_arch() const {
    CnfArch a;
    a.hidden = cnf.hidden;
    a.depth = cnf.depth;
    a.embed_freqs = cnf.embed_freqs;
    a.features = parse_context_features(cnf.context_features);
    return a;
}

CnfTrainConfig PipelineConfig::cnf_train_config() const {
    CnfTrainConfig c;
    c.batch_size = cnf.batch_size;
    c.epochs = cnf.epochs;
    c.lr = cnf.learning_rate;
    c.lr_min = cnf.lr_min;
    c.weight_decay = cnf.weight_decay;
    c.warmup_steps = cnf.warmup_steps;
    c.limit = cnf.limit;
    c.objective = cnf.objective;
    c.int_method = method_from_name(cnf.int_method);
    c.int_steps = cnf.int_steps;
    c.seed = cnf.seed;
    return c;
}

VsdeTrainConfig PipelineConfig::vsde_train_config() const {
    VsdeTrainConfig c;
    c.arch.gru_hidden = vsde.gru_hidden;
    c.arch.ctx_dim = vsde.ctx_dim;
    c.arch.hidden = vsde.hidden;
    c.arch.depth = vsde.depth;
    c.arch.embed_freqs = vsde.embed_freqs;
    c.batch_size = vsde.batch_size;
    c.epochs = vsde.epochs;
    c.lr = vsde.learning_rate;
    c.lr_min = vsde.lr_min;
    c.weight_decay = vsde.weight_decay;
    c.warmup_steps = vsde.warmup_steps;
    c.particles = vsde.particles;
    c.steps = vsde.steps;
    c.limit = vsde.limit;
    c.learnable_diffusion = vsde.learnable_diffusion;
    c.init_log_g0 = vsde.init_log_g0;
    c.encoder_input = vsde.encoder_input;
    c.prefix_fraction = vsde.prefix_fraction;
    c.seed = vsde.seed;
    c.weights.lambda_kl = vsde.lambda_kl;
    c.weights.lambda_u = vsde.control_cost;
    c.weights.lambda_phys = vsde.lambda_phys;
    c.weights.lambda_pde = vsde.lambda_pde;
    c.weights.sigma_obs = vsde.sigma_obs;
    c.weights.rho = vsde.rho;
    c.weights.c_p = vsde.c_p;
    c.weights.k_thermal = vsde.k_thermal;
    c.weights.phi_visc = vsde.phi_visc;
    c.weights.stencil_h = vsde.stencil_h;
    c.guardrail_radius = vsde.guardrail_r_mode == "fixed" ? vsde.guardrail_r : 0.0;
    c.guardrail_alpha = vsde.guardrail_alpha;
    c.u_max = vsde.u_max;
    return c;
}

}  // namespace pivoflow
