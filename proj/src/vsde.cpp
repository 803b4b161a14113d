#include "pivoflow/vsde.hpp"

#include <algorithm>
#include <cmath>

#include "pivoflow/errors.hpp"
#include "pivoflow/kernels.hpp"
#include "pivoflow/parallel.hpp"

namespace pivoflow {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kSigmaLo = 1e-4;
constexpr double kSigmaHi = 10.0;
}  // namespace

void GuardrailConfig::validate() const {
    if (!(radius > 0.0) || !(alpha > 0.0) || !(u_max > 0.0))
        throw ConfigError("guardrail: need radius > 0, alpha > 0, u_max > 0");
}

double guardrail_weight(Vec2 z, const GuardrailConfig& cfg) {
    const double excess = std::max(z.norm() - cfg.radius, 0.0);
    return std::exp(-cfg.alpha * excess * excess);
}

Vec2 clamp_control(Vec2 u, double u_max) {
    auto c = [u_max](double v) { return v > u_max ? u_max : (v < -u_max ? -u_max : v); };
    return {c(u.x), c(u.y)};
}

double kl_gaussian(Vec2 mu, Vec2 sigma) {
    auto term = [](double m, double s) { return m * m + s * s - 1.0 - 2.0 * std::log(s); };
    return 0.5 * (term(mu.x, sigma.x) + term(mu.y, sigma.y));
}

// ---------------------------------------------------------------------------
// Scalar loss pieces

double control_cost(std::span<const std::vector<Vec2>> controls, double dt) {
    if (controls.empty()) return 0.0;
    double total = 0.0;
    for (const auto& per_particle : controls) {
        double s = 0.0;
        for (const Vec2 u : per_particle) s += u.norm2();
        total += s * dt;
    }
    return total / controls.size();
}

double energy_loss(std::span<const std::vector<Vec2>> paths, double rho) {
    if (paths.empty()) return 0.0;
    double total = 0.0;
    for (const auto& path : paths) {
        if (path.size() < 3) throw ConfigError("energy_loss: path needs at least 3 states");
        const int n_e = static_cast<int>(path.size()) - 1;
        double s = 0.0;
        double prev_e = 0.5 * rho * (path[1] - path[0]).norm2();
        for (int k = 1; k < n_e; ++k) {
            const double e = 0.5 * rho * (path[k + 1] - path[k]).norm2();
            const double d = e - prev_e;
            s += d * d;
            prev_e = e;
        }
        total += s / (n_e - 1);
    }
    return total / paths.size();
}

double pde_residual_loss(std::span<const std::vector<Vec2>> paths, const FlowFieldSpec& field,
                         const ElboWeights& w, double dt_phys, double h) {
    if (paths.empty()) return 0.0;
    double total = 0.0;
    for (const auto& path : paths) {
        if (path.size() < 2) throw ConfigError("pde_residual_loss: path needs at least 2 states");
        double s = 0.0;
        for (std::size_t k = 1; k < path.size(); ++k) {
            const Vec2 z = path[k];
            const double t0 = field_temperature(field, z);
            const double t_prev = field_temperature(field, path[k - 1]);
            const double txp = field_temperature(field, {z.x + h, z.y});
            const double txm = field_temperature(field, {z.x - h, z.y});
            const double typ = field_temperature(field, {z.x, z.y + h});
            const double tym = field_temperature(field, {z.x, z.y - h});
            if (!std::isfinite(txp + txm + typ + tym))
                throw NumericError("pde_residual_loss: non-finite stencil evaluation");
            const Vec2 u = velocity_at(field, z);
            const double dtdt = (t0 - t_prev) / dt_phys;
            const double adv = u.x * (txp - txm) / (2.0 * h) + u.y * (typ - tym) / (2.0 * h);
            const double lap = (txp + txm + typ + tym - 4.0 * t0) / (h * h);
            const double r = w.rho * w.c_p * (dtdt + adv) - w.k_thermal * lap - w.phi_visc;
            s += r * r;
        }
        total += s / (path.size() - 1);
    }
    return total / paths.size();
}

double reconstruction_loglik(std::span<const std::vector<Vec2>> decoded,
                             std::span<const Vec2> observed, double sigma_obs,
                             std::span<const double> gamma_bar) {
    if (decoded.empty()) throw ConfigError("reconstruction_loglik: no particles");
    const double inv2s2 = 1.0 / (2.0 * sigma_obs * sigma_obs);
    const double step_const = -2.0 * std::log(sigma_obs * std::sqrt(2.0 * 3.14159265358979323846));
    double wsum = 0.0;
    for (double g : gamma_bar) wsum += g;
    double out = 0.0;
    for (std::size_t j = 0; j < decoded.size(); ++j) {
        const auto& path = decoded[j];
        if (path.size() != observed.size())
            throw ConfigError("reconstruction_loglik: grid mismatch");
        double ll = 0.0;
        for (std::size_t k = 0; k < path.size(); ++k)
            ll += -(path[k] - observed[k]).norm2() * inv2s2 + step_const;
        out += (gamma_bar[j] / wsum) * ll;
    }
    return out;
}

double elbo_loss(const ElboComponents& c, const ElboWeights& w) {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw NumericError(std::string("elbo: non-finite component ") + name);
    };
    check(c.recon_loglik, "reconstruction");
    check(c.kl, "kl");
    check(c.control, "control");
    check(c.energy, "energy");
    check(c.pde, "pde");
    return -c.recon_loglik + w.lambda_kl * c.kl + w.lambda_u * c.control +
           w.lambda_phys * c.energy + w.lambda_pde * c.pde;
}

// ---------------------------------------------------------------------------
// Model

double RolloutRecord::gamma_bar() const {
    double s = 0.0;
    for (double g : gammas) s += g;
    return gammas.empty() ? 1.0 : s / gammas.size();
}

VsdeModel VsdeModel::create(const VsdeArch& arch, const GuardrailConfig& guard,
                            double init_log_g0, std::uint64_t init_seed) {
    VsdeModel m;
    m.arch_ = arch;
    m.guard_ = guard;
    m.encoder_ = nn::GruEncoder(m.store_, "enc", 3, arch.gru_hidden);
    m.w_mu_ = m.store_.add("head.w_mu", 2, arch.gru_hidden);
    m.b_mu_ = m.store_.add("head.b_mu", 2, 1);
    m.w_sig_ = m.store_.add("head.w_logsig", 2, arch.gru_hidden);
    m.b_sig_ = m.store_.add("head.b_logsig", 2, 1);
    m.w_ctx_ = m.store_.add("head.w_ctx", arch.ctx_dim, arch.gru_hidden);
    m.b_ctx_ = m.store_.add("head.b_ctx", arch.ctx_dim, 1);
    m.post_net_ = nn::MlpNet(m.store_, "post",
                             nn::MlpSpec{arch.posterior_in_dim(), arch.hidden, arch.depth, 3});
    m.log_g0_ = m.store_.add("log_g0", 1, 1);
    m.store_.at(m.log_g0_).value[0] = init_log_g0;

    CounterStream stream(init_seed, 1);
    m.encoder_.init(m.store_, stream);
    nn::init_glorot(m.store_.at(m.w_mu_), arch.gru_hidden, 2, stream);
    nn::init_glorot(m.store_.at(m.w_sig_), arch.gru_hidden, 2, stream);
    nn::init_glorot(m.store_.at(m.w_ctx_), arch.gru_hidden, arch.ctx_dim, stream);
    m.post_net_.init(m.store_, stream);
    return m;
}

double VsdeModel::log_g0() const { return store_.at(log_g0_).value[0]; }

double VsdeModel::diffusion_scale(double t, double span) const {
    return std::exp(log_g0()) * (1.0 - t / span);
}

double VsdeModel::noise_scale(double t, double g_corr, double span) const {
    return std::sqrt(2.0 * diffusion_scale(t, span)) * (1.0 + 0.5 * std::tanh(g_corr));
}

PosteriorOutput VsdeModel::encode_posterior(std::span<const Vec2> observed,
                                            std::span<const double> times) const {
    if (observed.empty()) throw ConfigError("encode_posterior: empty trajectory");
    std::vector<std::vector<double>> feats(observed.size());
    for (std::size_t k = 0; k < observed.size(); ++k)
        feats[k] = {observed[k].x, observed[k].y, times[k]};
    const std::vector<double> h = encoder_.encode(store_, feats);

    const auto& K = kernels::active();
    PosteriorOutput out;
    double mu[2], logsig[2];
    K.matvec_bias(store_.at(w_mu_).value.data(), h.data(), store_.at(b_mu_).value.data(), mu, 2,
                  arch_.gru_hidden);
    K.matvec_bias(store_.at(w_sig_).value.data(), h.data(), store_.at(b_sig_).value.data(),
                  logsig, 2, arch_.gru_hidden);
    out.mu = {mu[0], mu[1]};
    out.sigma = {std::clamp(std::exp(logsig[0]), kSigmaLo, kSigmaHi),
                 std::clamp(std::exp(logsig[1]), kSigmaLo, kSigmaHi)};
    out.ctx.resize(arch_.ctx_dim);
    K.matvec_bias(store_.at(w_ctx_).value.data(), h.data(), store_.at(b_ctx_).value.data(),
                  out.ctx.data(), arch_.ctx_dim, arch_.gru_hidden);
    return out;
}

namespace {
thread_local std::vector<double> tl_post_in;
thread_local std::vector<double> tl_pt1, tl_pt2;
}  // namespace

VsdeModel::DriftOut VsdeModel::posterior_drift(Vec2 z, double t,
                                               std::span<const double> ctx) const {
    if (static_cast<int>(ctx.size()) != arch_.ctx_dim)
        throw std::invalid_argument("posterior_drift: ctx length mismatch");
    tl_post_in.resize(arch_.posterior_in_dim());
    tl_post_in[0] = z.x;
    tl_post_in[1] = z.y;
    nn::fourier_embed(t, arch_.embed_freqs, tl_post_in.data() + 2);
    std::copy(ctx.begin(), ctx.end(), tl_post_in.begin() + 2 + 2 * arch_.embed_freqs);
    double out[3];
    post_net_.forward(store_, tl_post_in, out);
    return {{out[0], out[1]}, nn::softplus_value(out[2])};
}

Vec2 VsdeModel::combined_drift(Vec2 z, double t, std::span<const double> flow_ctx,
                               std::span<const double> post_ctx) const {
    const Vec2 f = backbone_->drift(z, t, flow_ctx);
    const Vec2 u = clamp_control(posterior_drift(z, t, post_ctx).u_raw, guard_.u_max);
    return f + u;
}

Mat2 VsdeModel::combined_jacobian(Vec2 z, double t, std::span<const double> flow_ctx,
                                  std::span<const double> post_ctx) const {
    Mat2 j = backbone_->drift_jacobian(z, t, flow_ctx);

    tl_post_in.resize(arch_.posterior_in_dim());
    tl_post_in[0] = z.x;
    tl_post_in[1] = z.y;
    nn::fourier_embed(t, arch_.embed_freqs, tl_post_in.data() + 2);
    std::copy(post_ctx.begin(), post_ctx.end(), tl_post_in.begin() + 2 + 2 * arch_.embed_freqs);
    const int d = arch_.posterior_in_dim();
    tl_pt1.assign(d, 0.0);
    tl_pt2.assign(d, 0.0);
    tl_pt1[0] = 1.0;
    tl_pt2[1] = 1.0;
    double out[3], c1[3], c2[3];
    const double* tin[2] = {tl_pt1.data(), tl_pt2.data()};
    double* tout[2] = {c1, c2};
    post_net_.forward_jvp(store_, tl_post_in, std::span<const double* const>(tin, 2), out,
                          std::span<double* const>(tout, 2));
    // Clamped control components contribute no sensitivity.
    const bool live_x = std::abs(out[0]) <= guard_.u_max;
    const bool live_y = std::abs(out[1]) <= guard_.u_max;
    if (live_x) {
        j.a += c1[0];
        j.b += c2[0];
    }
    if (live_y) {
        j.c += c1[1];
        j.d += c2[1];
    }
    return j;
}

PathResult VsdeModel::rollout(Vec2 z0, std::span<const double> post_ctx,
                              std::span<const double> flow_ctx, const TimeGrid& grid,
                              StepMethod method, CounterStream* stream, bool diffusion_on,
                              RolloutRecord* record) const {
    grid.validate();
    const double dt = grid.dt();
    const double sqrt_dt = std::sqrt(dt);
    const double span = grid.t1 - grid.t0;

    auto drift = [&](const State<2>& s, double t) -> State<2> {
        const Vec2 zz{s[0], s[1]};
        const Vec2 f = backbone_->drift(zz, t, flow_ctx);
        const Vec2 u = clamp_control(posterior_drift(zz, t, post_ctx).u_raw, guard_.u_max);
        return {f.x + u.x, f.y + u.y};
    };

    PathResult result;
    result.states.reserve(grid.n_steps + 1);
    State<2> z{z0.x, z0.y};
    result.states.push_back(z);
    if (record) {
        record->controls.clear();
        record->gammas.clear();
        record->g_corrs.clear();
        record->gammas.push_back(guardrail_weight(z0, guard_));
    }
    for (int k = 0; k < grid.n_steps; ++k) {
        const double t = grid.t0 + k * dt;
        const DriftOut p = posterior_drift({z[0], z[1]}, t, post_ctx);
        double err = 0.0;
        try {
            z = step_deterministic(method, drift, z, t, dt,
                                   method == StepMethod::Dopri5 ? &err : nullptr);
        } catch (const NumericError&) {
            throw NumericError("vsde rollout diverged at step " + std::to_string(k + 1));
        }
        result.max_dopri_err = std::max(result.max_dopri_err, err);
        if (diffusion_on) {
            const Vec2 xi = stream->next_gaussian_pair();
            const double scale = noise_scale(t, p.g_corr, span);
            z = attach_diffusion(z, scale, {sqrt_dt * xi.x, sqrt_dt * xi.y});
        }
        if (!std::isfinite(z[0]) || !std::isfinite(z[1]))
            throw NumericError("vsde rollout diverged at step " + std::to_string(k + 1));
        result.states.push_back(z);
        if (record) {
            record->controls.push_back(clamp_control(p.u_raw, guard_.u_max));
            record->g_corrs.push_back(p.g_corr);
            record->gammas.push_back(guardrail_weight({z[0], z[1]}, guard_));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Tape-side encoder and ELBO

VsdeModel::EncodeNodes VsdeModel::encode_tape(nn::Tape& tape, std::span<const Vec2> observed,
                                              std::span<const double> times,
                                              nn::LeafMap& leaves) const {
    if (observed.empty()) throw ConfigError("encode_posterior: empty trajectory");
    std::vector<nn::NodeId> seq(observed.size());
    for (std::size_t k = 0; k < observed.size(); ++k) {
        const double f[3] = {observed[k].x, observed[k].y, times[k]};
        seq[k] = tape.constant(std::span<const double>(f, 3));
    }
    const nn::NodeId h = encoder_.encode_tape(tape, seq, leaves);
    EncodeNodes out;
    out.mu = tape.affine(leaves.get(w_mu_), h, leaves.get(b_mu_), 2, arch_.gru_hidden);
    const nn::NodeId logsig =
        tape.affine(leaves.get(w_sig_), h, leaves.get(b_sig_), 2, arch_.gru_hidden);
    out.sigma = tape.clamp_box(tape.exp_op(logsig), kSigmaLo, kSigmaHi);
    out.ctx = tape.affine(leaves.get(w_ctx_), h, leaves.get(b_ctx_), arch_.ctx_dim,
                          arch_.gru_hidden);
    return out;
}

namespace {

struct TapeGamma {
    nn::Tape& tape;
    const GuardrailConfig& guard;

    nn::NodeId operator()(nn::NodeId z) const {
        const nn::NodeId excess = tape.relu(tape.scalar_affine(tape.norm(z), 1.0, -guard.radius));
        return tape.exp_op(tape.scalar_affine(tape.mul(excess, excess), -guard.alpha, 0.0));
    }
};

}  // namespace

nn::NodeId vsde_elbo_tape(nn::Tape& tape, const VsdeModel& model, const CnfModel& cnf,
                          nn::LeafMap& vsde_leaves, nn::LeafMap& cnf_leaves,
                          const ElboTapeSpec& spec, ElboComponents* components) {
    const TrajectoryBundle& bundle = *spec.bundle;
    const int T = spec.steps;
    const int n_p = spec.particles;
    if (bundle.n_steps % T != 0)
        throw ConfigError("vsde: rollout steps must divide the bundle step count");
    const int stride = bundle.n_steps / T;
    const double dt = 1.0 / T;
    const double dt_phys = bundle.dt * stride;
    const ElboWeights& w = spec.weights;
    const VsdeArch& arch = model.arch();
    const GuardrailConfig& guard = model.guardrail();
    TapeGamma gamma{tape, guard};

    const nn::NodeId g0 = tape.exp_op(vsde_leaves.get(model.store().find("log_g0")));
    const double inv2s2 = 1.0 / (2.0 * w.sigma_obs * w.sigma_obs);
    const double step_const =
        -2.0 * std::log(w.sigma_obs * std::sqrt(2.0 * 3.14159265358979323846));

    ElboComponents acc;
    nn::NodeId total = tape.constant1(0.0);

    for (const int traj : spec.traj_indices) {
        // Observed path on the rollout grid plus encoder features.
        std::vector<Vec2> obs(T + 1);
        std::vector<double> times(T + 1);
        for (int k = 0; k <= T; ++k) {
            obs[k] = bundle.pos(traj, k * stride);
            times[k] = static_cast<double>(k) / T;
        }
        const std::vector<double> flow_ctx = cnf.context_for(bundle, traj);

        const auto enc = model.encode_tape(
            tape, std::span<const Vec2>(obs.data(), spec.enc_points),
            std::span<const double>(times.data(), spec.enc_points), vsde_leaves);

        // KL(q || N(0, I))
        const nn::NodeId mu2 = tape.dot(enc.mu, enc.mu);
        const nn::NodeId sig2 = tape.dot(enc.sigma, enc.sigma);
        const double ones[2] = {1.0, 1.0};
        const nn::NodeId sumlog =
            tape.dot(tape.log_op(enc.sigma), tape.constant(std::span<const double>(ones, 2)));
        const nn::NodeId kl = tape.scalar_affine(
            tape.add(tape.add(mu2, sig2), tape.scalar_affine(sumlog, -2.0, 0.0)), 0.5, -1.0);

        const nn::NodeId flow_ctx_node = tape.constant(flow_ctx);

        std::vector<nn::NodeId> loglik(n_p);
        std::vector<nn::NodeId> gamma_bar(n_p);
        nn::NodeId ctrl_sum = tape.constant1(0.0);
        nn::NodeId energy_sum = tape.constant1(0.0);
        nn::NodeId pde_sum = tape.constant1(0.0);

        for (int j = 0; j < n_p; ++j) {
            const std::uint64_t pid =
                (static_cast<std::uint64_t>(traj) << 24) | (static_cast<std::uint64_t>(j) << 1);
            CounterStream eps_stream(spec.noise_seed, pid);
            CounterStream dw_stream(spec.noise_seed ^ 0x5851F42D4C957F2DULL, pid | 1);

            const nn::NodeId eps = tape.constant2(eps_stream.next_gaussian_pair());
            nn::NodeId z = tape.add(enc.mu, tape.mul(enc.sigma, eps));

            std::vector<nn::NodeId> zs;
            zs.reserve(T + 1);
            zs.push_back(z);
            nn::NodeId gsum = gamma(z);
            const nn::NodeId d0 = tape.sub(z, tape.constant2(obs[0]));
            nn::NodeId sumsq = tape.dot(d0, d0);

            for (int k = 0; k < T; ++k) {
                const double t_k = static_cast<double>(k) / T;
                // CNF drift (frozen leaves) + clamped control, Euler step.
                const nn::NodeId f = cnf.drift_tape(tape, z, t_k, flow_ctx_node, cnf_leaves);
                const auto embed = nn::fourier_embed(t_k, arch.embed_freqs);
                const nn::NodeId post_in =
                    tape.concat3(z, tape.constant(embed), enc.ctx);
                const nn::NodeId post_out =
                    model.posterior_net().forward_tape(tape, post_in, vsde_leaves);
                const nn::NodeId u = tape.clamp(tape.slice(post_out, 0, 2), guard.u_max);
                const nn::NodeId g_corr = tape.softplus(tape.index(post_out, 2));

                nn::NodeId z_next =
                    tape.add(z, tape.scalar_affine(tape.add(f, u), dt, 0.0));
                if (spec.diffusion_on) {
                    const Vec2 xi = dw_stream.next_gaussian_pair();
                    const nn::NodeId dw =
                        tape.constant2({std::sqrt(dt) * xi.x, std::sqrt(dt) * xi.y});
                    const nn::NodeId g_t = tape.scalar_affine(g0, 1.0 - t_k, 0.0);
                    const nn::NodeId base = tape.sqrt_op(tape.scalar_affine(g_t, 2.0, 0.0));
                    const nn::NodeId fac =
                        tape.scalar_affine(tape.tanh_op(g_corr), 0.5, 1.0);
                    z_next = tape.add(z_next, tape.mul_scalar_vec(tape.mul(base, fac), dw));
                }
                z = z_next;
                zs.push_back(z);
                gsum = tape.add(gsum, gamma(z));
                ctrl_sum = tape.add(ctrl_sum, tape.dot(u, u));
                const nn::NodeId diff = tape.sub(z, tape.constant2(obs[k + 1]));
                sumsq = tape.add(sumsq, tape.dot(diff, diff));
            }

            loglik[j] = tape.scalar_affine(sumsq, -inv2s2, (T + 1) * step_const);
            gamma_bar[j] = tape.scalar_affine(gsum, 1.0 / (T + 1), 0.0);

            // Energy fluctuation penalty along the latent path.
            std::vector<nn::NodeId> energies(T);
            for (int k = 0; k < T; ++k) {
                const nn::NodeId d = tape.sub(zs[k + 1], zs[k]);
                energies[k] = tape.scalar_affine(tape.dot(d, d), 0.5 * w.rho, 0.0);
            }
            nn::NodeId efluct = tape.constant1(0.0);
            for (int k = 0; k + 1 < T; ++k) {
                const nn::NodeId d = tape.sub(energies[k + 1], energies[k]);
                efluct = tape.add(efluct, tape.mul(d, d));
            }
            energy_sum = tape.add(energy_sum, tape.scalar_affine(efluct, 1.0 / (T - 1), 0.0));

            // Thermal-balance residual along the latent path.
            if (spec.lambda_pde_eff != 0.0) {
                const double h = w.stencil_h;
                nn::NodeId rsum = tape.constant1(0.0);
                nn::NodeId t_prev = tape.field_temp(zs[0], {0.0, 0.0}, &bundle.field);
                for (int k = 1; k <= T; ++k) {
                    const nn::NodeId t0 = tape.field_temp(zs[k], {0.0, 0.0}, &bundle.field);
                    const nn::NodeId txp = tape.field_temp(zs[k], {h, 0.0}, &bundle.field);
                    const nn::NodeId txm = tape.field_temp(zs[k], {-h, 0.0}, &bundle.field);
                    const nn::NodeId typ = tape.field_temp(zs[k], {0.0, h}, &bundle.field);
                    const nn::NodeId tym = tape.field_temp(zs[k], {0.0, -h}, &bundle.field);
                    const nn::NodeId uvel = tape.field_vel(zs[k], &bundle.field);
                    const nn::NodeId dtdt =
                        tape.scalar_affine(tape.sub(t0, t_prev), 1.0 / dt_phys, 0.0);
                    const nn::NodeId gx =
                        tape.scalar_affine(tape.sub(txp, txm), 1.0 / (2.0 * h), 0.0);
                    const nn::NodeId gy =
                        tape.scalar_affine(tape.sub(typ, tym), 1.0 / (2.0 * h), 0.0);
                    const nn::NodeId adv = tape.add(tape.mul(tape.index(uvel, 0), gx),
                                                    tape.mul(tape.index(uvel, 1), gy));
                    const nn::NodeId lap = tape.scalar_affine(
                        tape.sub(tape.add(tape.add(txp, txm), tape.add(typ, tym)),
                                 tape.scalar_affine(t0, 4.0, 0.0)),
                        1.0 / (h * h), 0.0);
                    const nn::NodeId r = tape.scalar_affine(
                        tape.sub(tape.scalar_affine(tape.add(dtdt, adv), w.rho * w.c_p, 0.0),
                                 tape.scalar_affine(lap, w.k_thermal, 0.0)),
                        1.0, -w.phi_visc);
                    rsum = tape.add(rsum, tape.mul(r, r));
                    t_prev = t0;
                }
                pde_sum = tape.add(pde_sum, tape.scalar_affine(rsum, 1.0 / T, 0.0));
            }
        }

        // gamma-weighted reconstruction.
        nn::NodeId gtot = gamma_bar[0];
        for (int j = 1; j < n_p; ++j) gtot = tape.add(gtot, gamma_bar[j]);
        nn::NodeId recon = tape.constant1(0.0);
        for (int j = 0; j < n_p; ++j)
            recon = tape.add(recon, tape.mul(tape.div(gamma_bar[j], gtot), loglik[j]));

        const nn::NodeId ctrl = tape.scalar_affine(ctrl_sum, dt / n_p, 0.0);
        const nn::NodeId energy = tape.scalar_affine(energy_sum, 1.0 / n_p, 0.0);
        const nn::NodeId pde = tape.scalar_affine(pde_sum, 1.0 / n_p, 0.0);

        nn::NodeId elbo = tape.scalar_affine(recon, -1.0, 0.0);
        elbo = tape.add(elbo, tape.scalar_affine(kl, w.lambda_kl, 0.0));
        elbo = tape.add(elbo, tape.scalar_affine(ctrl, w.lambda_u, 0.0));
        elbo = tape.add(elbo, tape.scalar_affine(energy, spec.lambda_phys_eff, 0.0));
        elbo = tape.add(elbo, tape.scalar_affine(pde, spec.lambda_pde_eff, 0.0));
        total = tape.add(total, elbo);

        acc.recon_loglik += tape.scalar(recon);
        acc.kl += tape.scalar(kl);
        acc.control += tape.scalar(ctrl);
        acc.energy += tape.scalar(energy);
        acc.pde += tape.scalar(pde);
    }

    const double inv_n = 1.0 / static_cast<double>(spec.traj_indices.size());
    if (components) {
        components->recon_loglik = acc.recon_loglik * inv_n;
        components->kl = acc.kl * inv_n;
        components->control = acc.control * inv_n;
        components->energy = acc.energy * inv_n;
        components->pde = acc.pde * inv_n;
    }
    return tape.scalar_affine(total, inv_n, 0.0);
}

// ---------------------------------------------------------------------------
// Stage-2 training

VsdeModel train_vsde(const TrajectoryBundle& bundle, const CnfModel& cnf,
                     const VsdeTrainConfig& cfg, VsdeTrainLog* log, int n_threads) {
    if (!cnf.frozen()) throw ConfigError("train_vsde: backbone CNF must be frozen");
    if (bundle.n_particles < 1) throw ConfigError("train_vsde: empty bundle");
    if (cfg.steps < 2) throw ConfigError("train_vsde: need at least 2 rollout steps");
    if (bundle.n_steps % cfg.steps != 0)
        throw ConfigError("train_vsde: rollout steps must divide bundle steps");

    GuardrailConfig guard;
    guard.alpha = cfg.guardrail_alpha;
    guard.u_max = cfg.u_max;
    if (cfg.guardrail_radius > 0.0) {
        guard.radius = cfg.guardrail_radius;
    } else {
        double max_norm = 0.0;
        for (int p = 0; p < bundle.n_particles; ++p)
            for (int k = 0; k <= bundle.n_steps; ++k)
                max_norm = std::max(max_norm, bundle.pos(p, k).norm());
        guard.radius = 1.1 * std::max(max_norm, 1e-6);
    }
    guard.validate();

    VsdeModel model = VsdeModel::create(cfg.arch, guard, cfg.init_log_g0, cfg.seed);
    model.set_backbone(&cnf);

    const int n = bundle.n_particles;
    const int n_used = (cfg.limit > 0 && cfg.limit < n) ? cfg.limit : n;
    const int batches = (n_used + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = std::max(1, cfg.epochs * batches);
    const int ramp_steps = std::max(1, total_steps / 4);
    const int enc_points = cfg.encoder_input == "full"
                               ? cfg.steps + 1
                               : std::max(2, static_cast<int>(cfg.prefix_fraction * cfg.steps) + 1);

    nn::OptimConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.lr_min = cfg.lr_min;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_steps = cfg.warmup_steps;
    ocfg.total_steps = total_steps;
    nn::AdamW opt(model.store(), ocfg);
    const int log_g0_idx = model.store().find("log_g0");
    if (!cfg.learnable_diffusion) opt.freeze_tensor(log_g0_idx);

    const int chunks = std::max(1, n_threads);
    std::vector<nn::Tape> tapes(chunks);
    std::vector<std::vector<double>> shadows(chunks);
    const std::size_t flat = model.store().total_size();

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        CounterStream shuffle_stream(cfg.seed + 1, static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle_stream.next_u64() % (i + 1));
            std::swap(order[i], order[j]);
        }
        double epoch_loss = 0.0;
        ElboComponents epoch_comp;
        int epoch_count = 0;

        for (int b = 0; b < batches; ++b) {
            const int lo = b * cfg.batch_size;
            const int hi = std::min(n_used, lo + cfg.batch_size);
            const int bn = hi - lo;
            if (bn <= 0) break;
            const double ramp = std::min(1.0, static_cast<double>(step) / ramp_steps);

            model.store().zero_grad();
            for (int c = 0; c < chunks; ++c) shadows[c].assign(flat, 0.0);
            std::vector<double> traj_loss(bn, 0.0);
            std::vector<ElboComponents> traj_comp(bn);

            parallel_chunks(bn, chunks, [&](int cb, int ce, int ci) {
                nn::Tape& tape = tapes[ci];
                for (int s = cb; s < ce; ++s) {
                    const int idx = order[lo + s];
                    tape.clear();
                    nn::LeafMap vleaves(tape, model.store(), shadows[ci]);
                    nn::LeafMap cleaves(tape, cnf.store(), nullptr);
                    ElboTapeSpec espec;
                    espec.bundle = &bundle;
                    const int one[1] = {idx};
                    espec.traj_indices = std::span<const int>(one, 1);
                    espec.steps = cfg.steps;
                    espec.particles = cfg.particles;
                    espec.enc_points = enc_points;
                    espec.diffusion_on = true;
                    espec.noise_seed = cfg.seed + 7919 * static_cast<std::uint64_t>(epoch + 1);
                    espec.weights = cfg.weights;
                    espec.lambda_phys_eff = cfg.weights.lambda_phys * ramp;
                    espec.lambda_pde_eff = cfg.weights.lambda_pde * ramp;
                    const nn::NodeId loss =
                        vsde_elbo_tape(tape, model, cnf, vleaves, cleaves, espec, &traj_comp[s]);
                    traj_loss[s] = tape.scalar(loss);
                    tape.backward(tape.scalar_affine(loss, 1.0 / bn, 0.0));
                }
            });

            double batch_loss = 0.0;
            for (int s = 0; s < bn; ++s) batch_loss += traj_loss[s];
            batch_loss /= bn;
            if (!std::isfinite(batch_loss)) {
                ElboComponents c0 = traj_comp[0];
                throw NumericError(
                    "vsde training: non-finite loss at epoch " + std::to_string(epoch) +
                    " batch " + std::to_string(b) + " (recon " + std::to_string(c0.recon_loglik) +
                    ", kl " + std::to_string(c0.kl) + ", control " + std::to_string(c0.control) +
                    ", energy " + std::to_string(c0.energy) + ", pde " + std::to_string(c0.pde) +
                    ")");
            }
            for (int s = 0; s < bn; ++s) {
                epoch_loss += traj_loss[s];
                epoch_comp.recon_loglik += traj_comp[s].recon_loglik;
                epoch_comp.kl += traj_comp[s].kl;
                epoch_comp.control += traj_comp[s].control;
                epoch_comp.energy += traj_comp[s].energy;
                epoch_comp.pde += traj_comp[s].pde;
                ++epoch_count;
            }

            auto& K = kernels::active();
            for (int c = 0; c < chunks; ++c)
                for (int ti = 0; ti < model.store().count(); ++ti) {
                    nn::Tensor& t = model.store().at(ti);
                    K.axpy(1.0, shadows[c].data() + model.store().flat_offset(ti), t.grad.data(),
                           t.size());
                }
            opt.step();
            ++step;
        }

        if (log && epoch_count > 0) {
            log->epoch_loss.push_back(epoch_loss / epoch_count);
            ElboComponents mean = epoch_comp;
            const double inv = 1.0 / epoch_count;
            mean.recon_loglik *= inv;
            mean.kl *= inv;
            mean.control *= inv;
            mean.energy *= inv;
            mean.pde *= inv;
            log->epoch_components.push_back(mean);

            // Stability diagnostic: spectral radius of the combined-drift
            // Jacobian along one encoded rollout.
            const int probe = order[0];
            std::vector<Vec2> obs(cfg.steps + 1);
            std::vector<double> times(cfg.steps + 1);
            const int stride = bundle.n_steps / cfg.steps;
            for (int k = 0; k <= cfg.steps; ++k) {
                obs[k] = bundle.pos(probe, k * stride);
                times[k] = static_cast<double>(k) / cfg.steps;
            }
            const auto enc = model.encode_posterior(
                std::span<const Vec2>(obs.data(), enc_points),
                std::span<const double>(times.data(), enc_points));
            const auto flow_ctx = cnf.context_for(bundle, probe);
            double max_eig = 0.0;
            for (int k = 0; k < cfg.steps; k += 8) {
                const Mat2 j = model.combined_jacobian(obs[k], times[k], flow_ctx, enc.ctx);
                const double tr = j.trace();
                const double det = j.a * j.d - j.b * j.c;
                const double disc = tr * tr - 4.0 * det;
                const double mag = disc >= 0.0
                                       ? std::max(std::abs(tr + std::sqrt(disc)),
                                                  std::abs(tr - std::sqrt(disc))) / 2.0
                                       : std::sqrt(det);
                max_eig = std::max(max_eig, mag);
            }
            log->epoch_max_jacobian_eig.push_back(max_eig);
        }
    }
    return model;
}

// ---------------------------------------------------------------------------
// Inference

EnsembleResult infer_ensemble(const VsdeModel& model, std::span<const Vec2> observed,
                              std::span<const double> times, std::span<const double> flow_ctx,
                              int n_particles, const TimeGrid& grid, StepMethod method,
                              std::uint64_t stream_seed, std::uint64_t stream_base,
                              bool diffusion_on) {
    const PosteriorOutput enc = model.encode_posterior(observed, times);
    EnsembleResult out;
    out.paths.reserve(n_particles);
    for (int j = 0; j < n_particles; ++j) {
        CounterStream eps_stream(stream_seed, stream_base + 2 * static_cast<std::uint64_t>(j));
        CounterStream dw_stream(stream_seed, stream_base + 2 * static_cast<std::uint64_t>(j) + 1);
        const Vec2 z0 = reparameterize(enc.mu, enc.sigma, eps_stream.next_gaussian_pair());
        RolloutRecord rec;
        try {
            const PathResult path =
                model.rollout(z0, enc.ctx, flow_ctx, grid, method, &dw_stream, diffusion_on, &rec);
            std::vector<Vec2> p(path.states.size());
            for (std::size_t k = 0; k < path.states.size(); ++k)
                p[k] = {path.states[k][0], path.states[k][1]};
            out.paths.push_back(std::move(p));
            out.gamma_bar.push_back(rec.gamma_bar());
            out.particle_ids.push_back(j);
        } catch (const NumericError&) {
            ++out.diverged;
        }
    }
    if (!out.paths.empty()) {
        const std::size_t len = out.paths[0].size();
        out.mean_path.assign(len, {0.0, 0.0});
        for (const auto& p : out.paths)
            for (std::size_t k = 0; k < len; ++k) out.mean_path[k] += p[k];
        const double inv = 1.0 / out.paths.size();
        for (auto& v : out.mean_path) v = v * inv;
        out.spread.assign(len, 0.0);
        for (const auto& p : out.paths)
            for (std::size_t k = 0; k < len; ++k)
                out.spread[k] += (p[k] - out.mean_path[k]).norm2();
        for (auto& s : out.spread) s = std::sqrt(s * inv);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

void VsdeModel::save(const std::filesystem::path& dir) const {
    Manifest extra;
    extra.set("model", "vsde");
    extra.set_i64("gru_hidden", arch_.gru_hidden);
    extra.set_i64("ctx_dim", arch_.ctx_dim);
    extra.set_i64("hidden", arch_.hidden);
    extra.set_i64("depth", arch_.depth);
    extra.set_i64("embed_freqs", arch_.embed_freqs);
    extra.set_f64("guardrail_radius", guard_.radius);
    extra.set_f64("guardrail_alpha", guard_.alpha);
    extra.set_f64("u_max", guard_.u_max);
    extra.set("cnf_checksum", backbone_ ? backbone_->checksum() : "none");
    store_.save(dir, extra, 0);
}

VsdeModel VsdeModel::load(const std::filesystem::path& dir, const CnfModel* cnf) {
    const Manifest probe = Manifest::load(dir / "manifest.txt");
    VsdeArch arch;
    arch.gru_hidden = static_cast<int>(probe.get_i64("gru_hidden"));
    arch.ctx_dim = static_cast<int>(probe.get_i64("ctx_dim"));
    arch.hidden = static_cast<int>(probe.get_i64("hidden"));
    arch.depth = static_cast<int>(probe.get_i64("depth"));
    arch.embed_freqs = static_cast<int>(probe.get_i64("embed_freqs"));
    GuardrailConfig guard;
    guard.radius = probe.get_f64("guardrail_radius");
    guard.alpha = probe.get_f64("guardrail_alpha");
    guard.u_max = probe.get_f64("u_max");
    VsdeModel m = create(arch, guard, 0.0, 0);
    m.store_.load(dir);
    if (cnf) {
        if (probe.get("cnf_checksum") != cnf->checksum())
            throw IoError(IoError::Kind::ChecksumMismatch,
                          "vsde checkpoint references a different CNF backbone");
        m.backbone_ = cnf;
    }
    return m;
}

}  // namespace pivoflow
