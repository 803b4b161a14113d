#include "pivoflow/cnf.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pivoflow/errors.hpp"
#include "pivoflow/kernels.hpp"
#include "pivoflow/parallel.hpp"

namespace pivoflow {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

// Butcher solution weights for the tape-recorded joint integration. The
// dopri5 row is the 5th-order solution of the Dormand-Prince tableau.
struct Butcher {
    int stages;
    double c[7];
    double a[7][7];
    double b[7];
};

const Butcher& butcher_for(StepMethod m) {
    static const Butcher euler{1, {0}, {{0}}, {1.0}};
    static const Butcher heun{2, {0, 1}, {{0}, {1.0}}, {0.5, 0.5}};
    static const Butcher rk4{4,
                             {0, 0.5, 0.5, 1.0},
                             {{0}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}},
                             {1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6}};
    static const Butcher dopri5{
        7,
        {0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0},
        {{0},
         {1.0 / 5},
         {3.0 / 40, 9.0 / 40},
         {44.0 / 45, -56.0 / 15, 32.0 / 9},
         {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
         {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
         {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}},
        {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0}};
    switch (m) {
        case StepMethod::Euler: return euler;
        case StepMethod::Heun: return heun;
        case StepMethod::RK4: return rk4;
        case StepMethod::Dopri5: return dopri5;
    }
    return rk4;
}

}  // namespace

std::vector<ContextFeature> parse_context_features(const std::string& tokens) {
    std::vector<ContextFeature> out;
    std::stringstream ss(tokens);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        while (!tok.empty() && tok.front() == ' ') tok.erase(tok.begin());
        while (!tok.empty() && tok.back() == ' ') tok.pop_back();
        if (tok.empty()) continue;
        if (tok == "x0")
            out.push_back(ContextFeature::X0);
        else if (tok == "alpha")
            out.push_back(ContextFeature::Alpha);
        else if (tok == "d")
            out.push_back(ContextFeature::D);
        else
            throw ConfigError("unknown context feature token: " + tok);
    }
    if (out.empty()) throw ConfigError("context feature list is empty");
    return out;
}

std::string context_features_to_string(std::span<const ContextFeature> features) {
    std::string out;
    for (const auto f : features) {
        if (!out.empty()) out += ",";
        out += f == ContextFeature::X0 ? "x0" : (f == ContextFeature::Alpha ? "alpha" : "d");
    }
    return out;
}

int context_dim_for(std::span<const ContextFeature> features) {
    int dim = 0;
    for (const auto f : features) dim += (f == ContextFeature::D) ? 1 : 2;
    return dim;
}

CnfModel CnfModel::create(const CnfArch& arch, std::uint64_t init_seed) {
    CnfModel m;
    m.arch_ = arch;
    m.net_ = nn::MlpNet(m.store_, "cnf",
                        nn::MlpSpec{arch.input_dim(), arch.hidden, arch.depth, 2});
    CounterStream stream(init_seed, 0);
    m.net_.init(m.store_, stream);
    m.ctx_mean_.assign(arch.context_dim(), 0.0);
    m.ctx_std_.assign(arch.context_dim(), 1.0);
    return m;
}

std::vector<double> CnfModel::raw_context(const TrajectoryBundle& bundle, int traj) const {
    std::vector<double> ctx;
    ctx.reserve(context_dim());
    for (const auto f : arch_.features) {
        switch (f) {
            case ContextFeature::X0: {
                const Vec2 x0 = bundle.pos(traj, 0);
                ctx.push_back(x0.x);
                ctx.push_back(x0.y);
                break;
            }
            case ContextFeature::Alpha: {
                const Vec2 a = bundle.field.context_alpha();
                ctx.push_back(a.x);
                ctx.push_back(a.y);
                break;
            }
            case ContextFeature::D:
                ctx.push_back(bundle.diffusion_d);
                break;
        }
    }
    return ctx;
}

std::vector<double> CnfModel::context_for(const TrajectoryBundle& bundle, int traj) const {
    std::vector<double> ctx = raw_context(bundle, traj);
    for (std::size_t i = 0; i < ctx.size(); ++i) ctx[i] = (ctx[i] - ctx_mean_[i]) / ctx_std_[i];
    return ctx;
}

void CnfModel::fit_context_stats(const TrajectoryBundle& bundle) {
    const int dim = context_dim();
    ctx_mean_.assign(dim, 0.0);
    ctx_std_.assign(dim, 0.0);
    const int n = bundle.n_particles;
    for (int i = 0; i < n; ++i) {
        const auto ctx = raw_context(bundle, i);
        for (int j = 0; j < dim; ++j) ctx_mean_[j] += ctx[j];
    }
    for (int j = 0; j < dim; ++j) ctx_mean_[j] /= n;
    for (int i = 0; i < n; ++i) {
        const auto ctx = raw_context(bundle, i);
        for (int j = 0; j < dim; ++j) {
            const double d = ctx[j] - ctx_mean_[j];
            ctx_std_[j] += d * d;
        }
    }
    for (int j = 0; j < dim; ++j) {
        ctx_std_[j] = std::sqrt(ctx_std_[j] / n);
        if (ctx_std_[j] < 1e-9) ctx_std_[j] = 1.0;  // constant feature
    }
}

namespace {
thread_local std::vector<double> tl_in;
thread_local std::vector<double> tl_t1, tl_t2, tl_to1, tl_to2;
}  // namespace

void CnfModel::build_input(Vec2 z, double t, std::span<const double> ctx,
                           std::vector<double>& buf) const {
    if (static_cast<int>(ctx.size()) != context_dim())
        throw std::invalid_argument("cnf: context length mismatch");
    buf.resize(arch_.input_dim());
    buf[0] = z.x;
    buf[1] = z.y;
    nn::fourier_embed(t, arch_.embed_freqs, buf.data() + 2);
    std::copy(ctx.begin(), ctx.end(), buf.begin() + 2 + 2 * arch_.embed_freqs);
}

Vec2 CnfModel::drift(Vec2 z, double t, std::span<const double> ctx) const {
    build_input(z, t, ctx, tl_in);
    double out[2];
    net_.forward(store_, tl_in, out);
    return {out[0], out[1]};
}

Mat2 CnfModel::drift_jacobian(Vec2 z, double t, std::span<const double> ctx) const {
    build_input(z, t, ctx, tl_in);
    const int d = arch_.input_dim();
    tl_t1.assign(d, 0.0);
    tl_t2.assign(d, 0.0);
    tl_t1[0] = 1.0;
    tl_t2[1] = 1.0;
    double out[2], c1[2], c2[2];
    const double* tin[2] = {tl_t1.data(), tl_t2.data()};
    double* tout[2] = {c1, c2};
    net_.forward_jvp(store_, tl_in, std::span<const double* const>(tin, 2), out,
                     std::span<double* const>(tout, 2));
    // JVP with seed e_k yields column k of d(drift)/dz.
    return {c1[0], c2[0], c1[1], c2[1]};
}

CnfModel::DriftDiv CnfModel::drift_div(Vec2 z, double t, std::span<const double> ctx) const {
    build_input(z, t, ctx, tl_in);
    const int d = arch_.input_dim();
    tl_t1.assign(d, 0.0);
    tl_t2.assign(d, 0.0);
    tl_t1[0] = 1.0;
    tl_t2[1] = 1.0;
    double out[2], c1[2], c2[2];
    const double* tin[2] = {tl_t1.data(), tl_t2.data()};
    double* tout[2] = {c1, c2};
    net_.forward_jvp(store_, tl_in, std::span<const double* const>(tin, 2), out,
                     std::span<double* const>(tout, 2));
    return {{out[0], out[1]}, c1[0] + c2[1]};
}

double CnfModel::divergence(Vec2 z, double t, std::span<const double> ctx) const {
    const Mat2 j = drift_jacobian(z, t, ctx);
    return j.trace();
}

namespace {

// Joint (z, logp) drift evaluated with one value pass plus two tangent passes.
struct JointDrift {
    const CnfModel* model;
    std::span<const double> ctx;

    State<3> operator()(const State<3>& s, double t) const {
        const auto dd = model->drift_div({s[0], s[1]}, t, ctx);
        return {dd.u.x, dd.u.y, -dd.div};
    }
};

}  // namespace

CnfModel::MapResult CnfModel::forward_map(Vec2 z0, std::span<const double> ctx, StepMethod method,
                                          int n_steps) const {
    const JointDrift drift{this, ctx};
    State<3> s{z0.x, z0.y, 0.0};
    const double h = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) s = step_deterministic(method, drift, s, k * h, h);
    return {{s[0], s[1]}, s[2]};
}

CnfModel::MapResult CnfModel::inverse_map(Vec2 x, std::span<const double> ctx, StepMethod method,
                                          int n_steps) const {
    const JointDrift drift{this, ctx};
    State<3> s{x.x, x.y, 0.0};
    const double h = -1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) s = step_deterministic(method, drift, s, 1.0 + k * h, h);
    return {{s[0], s[1]}, s[2]};
}

std::vector<State<3>> CnfModel::forward_path(Vec2 z0, std::span<const double> ctx,
                                             StepMethod method, int n_steps) const {
    const JointDrift drift{this, ctx};
    std::vector<State<3>> path;
    path.reserve(n_steps + 1);
    State<3> s{z0.x, z0.y, 0.0};
    path.push_back(s);
    const double h = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        s = step_deterministic(method, drift, s, k * h, h);
        path.push_back(s);
    }
    return path;
}

double CnfModel::log_prob(Vec2 x, std::span<const double> ctx, StepMethod method,
                          int n_steps) const {
    const MapResult inv = inverse_map(x, ctx, method, n_steps);
    const double log_base = -kLog2Pi - 0.5 * inv.point.norm2();
    // inv.dlogp accumulates +int(div) over the reverse pass, so the density
    // change enters with a minus (matches the closed-form change of variables).
    return log_base - inv.dlogp;
}

Vec2 CnfModel::sample_one(std::span<const double> ctx, CounterStream& stream, StepMethod method,
                          int n_steps) const {
    const Vec2 z0 = stream.next_gaussian_pair();
    auto drift2 = [&](const State<2>& s, double t) -> State<2> {
        const Vec2 u = drift({s[0], s[1]}, t, ctx);
        return {u.x, u.y};
    };
    State<2> s{z0.x, z0.y};
    const double h = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) s = step_deterministic(method, drift2, s, k * h, h);
    return {s[0], s[1]};
}

nn::NodeId CnfModel::drift_tape(nn::Tape& tape, nn::NodeId z, double t, nn::NodeId ctx,
                                nn::LeafMap& leaves) const {
    const auto embed = nn::fourier_embed(t, arch_.embed_freqs);
    const nn::NodeId input = tape.concat3(z, tape.constant(embed), ctx);
    return net_.forward_tape(tape, input, leaves);
}

// ---------------------------------------------------------------------------
// Stage-1 training

namespace {

struct TapeFlowStep {
    const CnfModel& model;
    nn::Tape& tape;
    nn::LeafMap& leaves;
    nn::NodeId ctx;
    nn::NodeId seed1, seed2;  // constant tangent seeds, built once per tape

    // Drift value and divergence at (z, t), everything recorded on the tape.
    std::pair<nn::NodeId, nn::NodeId> drift_div(nn::NodeId z, double t) const {
        const auto embed = nn::fourier_embed(t, model.arch().embed_freqs);
        const nn::NodeId input = tape.concat3(z, tape.constant(embed), ctx);
        const nn::NodeId tangents[2] = {seed1, seed2};
        const auto jvp = model.net().forward_jvp_tape(tape, input, tangents, leaves);
        const nn::NodeId div =
            tape.add(tape.index(jvp.tangents[0], 0), tape.index(jvp.tangents[1], 1));
        return {jvp.value, div};
    }

    // One Runge-Kutta step of the joint (z, logp) system.
    void step(nn::NodeId& z, nn::NodeId& logp, double t, double h, const Butcher& bt,
              bool track_logp) const {
        nn::NodeId kz[7];
        nn::NodeId kdiv[7];
        for (int i = 0; i < bt.stages; ++i) {
            nn::NodeId zi = z;
            for (int j = 0; j < i; ++j)
                if (bt.a[i][j] != 0.0)
                    zi = tape.add(zi, tape.scalar_affine(kz[j], h * bt.a[i][j], 0.0));
            auto [v, d] = drift_div(zi, t + bt.c[i] * h);
            kz[i] = v;
            kdiv[i] = d;
        }
        for (int i = 0; i < bt.stages; ++i) {
            if (bt.b[i] == 0.0) continue;
            z = tape.add(z, tape.scalar_affine(kz[i], h * bt.b[i], 0.0));
            if (track_logp) logp = tape.add(logp, tape.scalar_affine(kdiv[i], -h * bt.b[i], 0.0));
        }
    }
};

}  // namespace

nn::NodeId cnf_nll_tape(nn::Tape& tape, const CnfModel& model, nn::LeafMap& leaves, Vec2 x,
                        std::span<const double> ctx, StepMethod method, int n_steps) {
    const int in_dim = model.arch().input_dim();
    std::vector<double> seed(in_dim, 0.0);
    seed[0] = 1.0;
    const nn::NodeId seed1 = tape.constant(seed);
    seed[0] = 0.0;
    seed[1] = 1.0;
    const nn::NodeId seed2 = tape.constant(seed);
    const nn::NodeId ctx_node = tape.constant(ctx);

    TapeFlowStep stepper{model, tape, leaves, ctx_node, seed1, seed2};
    const Butcher& bt = butcher_for(method);

    nn::NodeId z = tape.constant2(x);
    nn::NodeId acc = tape.constant1(0.0);  // reverse-time accumulation of -div
    const double h = -1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) stepper.step(z, acc, 1.0 + k * h, h, bt, true);

    // log p(x) = logN(z0) - acc; nll = -logN(z0) + acc
    const nn::NodeId log_base = tape.scalar_affine(tape.dot(z, z), -0.5, -kLog2Pi);
    return tape.add(tape.scalar_affine(log_base, -1.0, 0.0), acc);
}

nn::NodeId cnf_endpoint_mse_tape(nn::Tape& tape, const CnfModel& model, nn::LeafMap& leaves,
                                 Vec2 z0, Vec2 x_target, std::span<const double> ctx,
                                 StepMethod method, int n_steps) {
    const nn::NodeId ctx_node = tape.constant(ctx);
    const Butcher& bt = butcher_for(method);
    nn::NodeId z = tape.constant2(z0);
    const double h = 1.0 / n_steps;
    for (int k = 0; k < n_steps; ++k) {
        nn::NodeId kz[7];
        for (int i = 0; i < bt.stages; ++i) {
            nn::NodeId zi = z;
            for (int j = 0; j < i; ++j)
                if (bt.a[i][j] != 0.0)
                    zi = tape.add(zi, tape.scalar_affine(kz[j], h * bt.a[i][j], 0.0));
            kz[i] = model.drift_tape(tape, zi, k * h + bt.c[i] * h, ctx_node, leaves);
        }
        for (int i = 0; i < bt.stages; ++i)
            if (bt.b[i] != 0.0) z = tape.add(z, tape.scalar_affine(kz[i], h * bt.b[i], 0.0));
    }
    const nn::NodeId diff = tape.sub(z, tape.constant2(x_target));
    return tape.dot(diff, diff);
}

CnfModel train_cnf(const TrajectoryBundle& bundle, const CnfArch& arch,
                   const CnfTrainConfig& cfg, CnfTrainLog* log, int n_threads) {
    if (bundle.n_particles < 1) throw ConfigError("train_cnf: empty bundle");
    CnfModel model = CnfModel::create(arch, cfg.seed);
    model.fit_context_stats(bundle);

    const int n = bundle.n_particles;
    const int n_used = (cfg.limit > 0 && cfg.limit < n) ? cfg.limit : n;
    const int batches = (n_used + cfg.batch_size - 1) / cfg.batch_size;

    std::vector<Vec2> endpoints(n);
    std::vector<std::vector<double>> contexts(n);
    for (int i = 0; i < n; ++i) {
        endpoints[i] = bundle.pos(i, bundle.n_steps);
        contexts[i] = model.context_for(bundle, i);
    }

    nn::OptimConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.lr_min = cfg.lr_min;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    ocfg.total_steps = std::max(1, cfg.epochs * batches);
    nn::AdamW opt(model.store(), ocfg);

    const bool mle = cfg.objective == "mle";
    if (!mle && cfg.objective != "endpoint_mse")
        throw ConfigError("cnf objective must be mle or endpoint_mse: " + cfg.objective);

    const int chunks = std::max(1, n_threads);
    std::vector<nn::Tape> tapes(chunks);
    std::vector<std::vector<double>> shadows(chunks);
    const std::size_t flat = model.store().total_size();

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::vector<double> sample_loss;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        CounterStream shuffle_stream(cfg.seed + 1, static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_stream.next_u64() % (i + 1));
            std::swap(order[i], order[j]);
        }
        double epoch_loss = 0.0;
        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(n_used, lo + cfg.batch_size);
            const int bn = hi - lo;
            if (bn <= 0) break;
            model.store().zero_grad();
            sample_loss.assign(bn, 0.0);
            for (int c = 0; c < chunks; ++c) shadows[c].assign(flat, 0.0);

            parallel_chunks(bn, chunks, [&](int cb, int ce, int ci) {
                nn::Tape& tape = tapes[ci];
                for (int s = cb; s < ce; ++s) {
                    const int idx = order[lo + s];
                    tape.clear();
                    nn::LeafMap leaves(tape, model.store(), shadows[ci]);
                    nn::NodeId loss_node;
                    if (mle) {
                        loss_node = cnf_nll_tape(tape, model, leaves, endpoints[idx],
                                                 contexts[idx], cfg.int_method, cfg.int_steps);
                    } else {
                        CounterStream zs(cfg.seed + 2,
                                         (static_cast<std::uint64_t>(epoch) << 32) |
                                             static_cast<std::uint64_t>(lo + s));
                        loss_node = cnf_endpoint_mse_tape(tape, model, leaves,
                                                          zs.next_gaussian_pair(), endpoints[idx],
                                                          contexts[idx], cfg.int_method,
                                                          cfg.int_steps);
                    }
                    sample_loss[s] = tape.scalar(loss_node);
                    const nn::NodeId scaled = tape.scalar_affine(loss_node, 1.0 / bn, 0.0);
                    tape.backward(scaled);
                }
            });

            double batch_loss = 0.0;
            for (int s = 0; s < bn; ++s) batch_loss += sample_loss[s];
            batch_loss /= bn;
            if (!std::isfinite(batch_loss))
                throw NumericError("cnf training: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " + std::to_string(b));
            epoch_loss += batch_loss * bn;

            auto& K = kernels::active();
            for (int c = 0; c < chunks; ++c)
                for (int ti = 0; ti < model.store().count(); ++ti) {
                    nn::Tensor& t = model.store().at(ti);
                    K.axpy(1.0, shadows[c].data() + model.store().flat_offset(ti),
                           t.grad.data(), t.size());
                }
            opt.step();
        }
        if (log) log->epoch_loss.push_back(epoch_loss / n_used);
    }
    model.freeze();
    return model;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

void CnfModel::save(const std::filesystem::path& dir, const std::string& objective) const {
    Manifest extra;
    extra.set("model", "cnf");
    extra.set_i64("latent_dim", 2);
    extra.set_i64("context_dim", context_dim());
    extra.set_i64("embed_freqs", arch_.embed_freqs);
    extra.set_i64("hidden", arch_.hidden);
    extra.set_i64("depth", arch_.depth);
    extra.set("context_features", context_features_to_string(arch_.features));
    extra.set("objective", objective);
    for (int i = 0; i < context_dim(); ++i) {
        extra.set_f64("ctx_mean." + std::to_string(i), ctx_mean_[i]);
        extra.set_f64("ctx_std." + std::to_string(i), ctx_std_[i]);
    }
    store_.save(dir, extra, 0);
}

CnfModel CnfModel::load(const std::filesystem::path& dir) {
    const Manifest probe = Manifest::load(dir / "manifest.txt");
    CnfArch arch;
    arch.hidden = static_cast<int>(probe.get_i64("hidden"));
    arch.depth = static_cast<int>(probe.get_i64("depth"));
    arch.embed_freqs = static_cast<int>(probe.get_i64("embed_freqs"));
    arch.features = parse_context_features(probe.get("context_features"));
    CnfModel m = create(arch, 0);
    m.store_.load(dir);
    for (int i = 0; i < m.context_dim(); ++i) {
        m.ctx_mean_[i] = probe.get_f64("ctx_mean." + std::to_string(i));
        m.ctx_std_[i] = probe.get_f64("ctx_std." + std::to_string(i));
    }
    m.frozen_ = true;
    return m;
}

}  // namespace pivoflow
