#include "pivoflow/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>

#include "pivoflow/errors.hpp"
#include "pivoflow/parallel.hpp"

namespace pivoflow {

namespace fs = std::filesystem;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void write_run_log(const fs::path& path, const PipelineConfig& cfg, double wall_s,
                   const std::vector<std::pair<std::string, std::string>>& extras) {
    Manifest log;
    log.set("config_sha256", config_hash(cfg));
    log.set_i64("trajectory_seed", static_cast<std::int64_t>(cfg.trajectory.seed));
    log.set_f64("wall_time_s", wall_s);
    for (const auto& e : extras) log.set(e.first, e.second);
    log.save(path);
}

void require(bool ok, const std::string& what) {
    if (!ok) throw PrereqError("missing prerequisite: " + what);
}

fs::path train_dir(const PipelineConfig& c) { return fs::path(c.paths.data_dir) / "train"; }
fs::path val_dir(const PipelineConfig& c) { return fs::path(c.paths.data_dir) / "validation"; }
fs::path cnf_dir(const PipelineConfig& c) { return fs::path(c.paths.checkpoint_dir) / "cnf"; }
fs::path vsde_dir(const PipelineConfig& c) { return fs::path(c.paths.checkpoint_dir) / "vsde"; }
fs::path ens_dir(const PipelineConfig& c) { return fs::path(c.paths.data_dir) / "ensembles"; }

bool bundle_exists(const fs::path& dir) { return fs::exists(dir / "manifest.txt"); }

std::vector<StepMethod> comparison_methods(const PipelineConfig& cfg) {
    if (!cfg.inference.compare_integrators)
        return {method_from_name(cfg.inference.integrator)};
    return {StepMethod::Euler, StepMethod::Heun, StepMethod::RK4, StepMethod::Dopri5};
}

struct EnsembleSet {
    // [traj][particle][step]
    std::vector<std::vector<std::vector<Vec2>>> paths;

    Vec2 mean_final(int traj) const {
        Vec2 m{0.0, 0.0};
        for (const auto& p : paths[traj]) m += p.back();
        return m * (1.0 / paths[traj].size());
    }
};

void write_ensemble_paths(const fs::path& file, const EnsembleSet& set) {
    std::vector<double> flat;
    for (const auto& traj : set.paths)
        for (const auto& p : traj)
            for (const Vec2 v : p) {
                flat.push_back(v.x);
                flat.push_back(v.y);
            }
    write_f64_file(file, flat);
}

EnsembleSet read_ensemble_paths(const fs::path& file, int n_traj, int particles, int steps) {
    const std::vector<double> flat = read_f64_file(file);
    const std::size_t expect = static_cast<std::size_t>(n_traj) * particles * (steps + 1) * 2;
    if (flat.size() != expect)
        throw IoError(IoError::Kind::ShapeMismatch, "ensemble file has unexpected size");
    EnsembleSet set;
    set.paths.resize(n_traj);
    std::size_t i = 0;
    for (int t = 0; t < n_traj; ++t) {
        set.paths[t].resize(particles);
        for (int p = 0; p < particles; ++p) {
            auto& path = set.paths[t][p];
            path.resize(steps + 1);
            for (int k = 0; k <= steps; ++k) {
                path[k] = {flat[i], flat[i + 1]};
                i += 2;
            }
        }
    }
    return set;
}

}  // namespace

void stage_simulate(const PipelineConfig& cfg) {
    const double t0 = now_seconds();
    const TrajectoryBundle train = generate_bundle(cfg.sim_config(SplitTag::Train));
    const TrajectoryBundle val = generate_bundle(cfg.sim_config(SplitTag::Validation));
    save_bundle(train, train_dir(cfg));
    save_bundle(val, val_dir(cfg));
    write_run_log(fs::path(cfg.paths.data_dir) / "simulate.log", cfg, now_seconds() - t0,
                  {{"train_particles", std::to_string(train.n_particles)},
                   {"val_particles", std::to_string(val.n_particles)}});
}

void stage_train_cnf(const PipelineConfig& cfg) {
    require(bundle_exists(train_dir(cfg)), "training bundle (run simulate first)");
    const double t0 = now_seconds();
    const TrajectoryBundle train = load_bundle(train_dir(cfg));
    CnfTrainLog log;
    const CnfModel model = train_cnf(train, cfg.cnf_arch(), cfg.cnf_train_config(), &log,
                                     resolve_threads(cfg.pipeline.threads));
    model.save(cnf_dir(cfg), cfg.cnf.objective);
    std::vector<std::pair<std::string, std::string>> extras;
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
        extras.emplace_back("epoch_loss." + std::to_string(e), format_f64(log.epoch_loss[e]));
    extras.emplace_back("checksum", model.checksum());
    write_run_log(fs::path(cfg.paths.checkpoint_dir) / "train_cnf.log", cfg, now_seconds() - t0,
                  extras);
}

void stage_train_vsde(const PipelineConfig& cfg) {
    require(bundle_exists(train_dir(cfg)), "training bundle (run simulate first)");
    require(bundle_exists(cnf_dir(cfg)), "CNF checkpoint (run train-cnf first)");
    const double t0 = now_seconds();
    const TrajectoryBundle train = load_bundle(train_dir(cfg));
    const CnfModel cnf = CnfModel::load(cnf_dir(cfg));
    VsdeTrainLog log;
    const VsdeModel model = train_vsde(train, cnf, cfg.vsde_train_config(), &log,
                                       resolve_threads(cfg.pipeline.threads));
    model.save(vsde_dir(cfg));
    std::vector<std::pair<std::string, std::string>> extras;
    for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
        extras.emplace_back("epoch_loss." + std::to_string(e), format_f64(log.epoch_loss[e]));
        extras.emplace_back("epoch_max_eig." + std::to_string(e),
                            format_f64(log.epoch_max_jacobian_eig[e]));
    }
    extras.emplace_back("cnf_checksum", cnf.checksum());
    write_run_log(fs::path(cfg.paths.checkpoint_dir) / "train_vsde.log", cfg, now_seconds() - t0,
                  extras);
}

void stage_infer(const PipelineConfig& cfg) {
    require(bundle_exists(val_dir(cfg)), "validation bundle (run simulate first)");
    require(bundle_exists(cnf_dir(cfg)), "CNF checkpoint (run train-cnf first)");
    require(bundle_exists(vsde_dir(cfg)), "VSDE checkpoint (run train-vsde first)");
    const double t0 = now_seconds();

    const TrajectoryBundle val = load_bundle(val_dir(cfg));
    const CnfModel cnf = CnfModel::load(cnf_dir(cfg));
    const VsdeModel vsde = VsdeModel::load(vsde_dir(cfg), &cnf);

    const int steps = cfg.inference.steps;
    if (val.n_steps % steps != 0)
        throw ConfigError("inference.steps must divide the bundle step count");
    const int stride = val.n_steps / steps;
    const int n_traj = cfg.inference.subset > 0
                           ? std::min(cfg.inference.subset, val.n_particles)
                           : val.n_particles;
    const int particles = cfg.inference.particles;
    const TimeGrid grid{0.0, 1.0, steps};
    const int enc_points = cfg.vsde.encoder_input == "full"
                               ? steps + 1
                               : std::max(2, static_cast<int>(cfg.vsde.prefix_fraction * steps) + 1);

    std::vector<double> times(steps + 1);
    for (int k = 0; k <= steps; ++k) times[k] = static_cast<double>(k) / steps;

    const auto methods = comparison_methods(cfg);
    fs::create_directories(ens_dir(cfg));
    Manifest manifest;
    manifest.set_i64("format_version", 1);
    manifest.set_i64("n_traj", n_traj);
    manifest.set_i64("particles", particles);
    manifest.set_i64("steps", steps);
    manifest.set("main_method", cfg.inference.integrator);
    {
        std::string mlist;
        for (const auto m : methods) {
            if (!mlist.empty()) mlist += ",";
            mlist += method_name(m);
        }
        manifest.set("methods", mlist);
    }
    manifest.set_i64("seed", static_cast<std::int64_t>(cfg.inference.seed));

    int diverged_total = 0;
    const int threads = resolve_threads(cfg.pipeline.threads);

    for (const auto method : methods) {
        EnsembleSet cnf_set, vsde_set;
        cnf_set.paths.resize(n_traj);
        vsde_set.paths.resize(n_traj);
        std::vector<int> diverged_by_chunk(threads, 0);

        parallel_chunks(n_traj, threads, [&](int lo, int hi, int chunk) {
            for (int t = lo; t < hi; ++t) {
                const auto flow_ctx = cnf.context_for(val, t);
                // CNF-only ensemble: drift f_theta from Gaussian starts, no noise.
                auto drift = [&](const State<2>& s, double tt) -> State<2> {
                    const Vec2 u = cnf.drift({s[0], s[1]}, tt, flow_ctx);
                    return {u.x, u.y};
                };
                cnf_set.paths[t].resize(particles);
                for (int j = 0; j < particles; ++j) {
                    CounterStream zs(cfg.inference.seed ^ 0xC13FA9A902A6328FULL,
                                     (static_cast<std::uint64_t>(t) << 32) |
                                         static_cast<std::uint64_t>(j));
                    const Vec2 z0 = zs.next_gaussian_pair();
                    const PathResult path =
                        integrate_path(method, drift, kNoDiffusion, {z0.x, z0.y}, grid, nullptr);
                    auto& out = cnf_set.paths[t][j];
                    out.resize(path.states.size());
                    for (std::size_t k = 0; k < path.states.size(); ++k)
                        out[k] = {path.states[k][0], path.states[k][1]};
                }

                // VSDE ensemble from the encoded posterior of the observed prefix.
                std::vector<Vec2> obs(steps + 1);
                for (int k = 0; k <= steps; ++k) obs[k] = val.pos(t, k * stride);
                const EnsembleResult ens = infer_ensemble(
                    vsde, std::span<const Vec2>(obs.data(), enc_points),
                    std::span<const double>(times.data(), enc_points), flow_ctx, particles, grid,
                    method, cfg.inference.seed, static_cast<std::uint64_t>(t) << 32, true);
                diverged_by_chunk[chunk] += ens.diverged;
                auto& dst = vsde_set.paths[t];
                dst.resize(particles);
                int src = 0;
                for (int j = 0; j < particles; ++j) {
                    if (src < static_cast<int>(ens.particle_ids.size()) &&
                        ens.particle_ids[src] == j) {
                        dst[j] = ens.paths[src];
                        ++src;
                    } else {
                        dst[j] = ens.mean_path;  // diverged slot, noted in the manifest
                    }
                }
            }
        });

        for (int c : diverged_by_chunk) diverged_total += c;
        const std::string mname = method_name(method);
        write_ensemble_paths(ens_dir(cfg) / ("cnf_" + mname + ".f64"), cnf_set);
        write_ensemble_paths(ens_dir(cfg) / ("vsde_" + mname + ".f64"), vsde_set);
        manifest.set("sha256.cnf_" + mname,
                     sha256_file_hex(ens_dir(cfg) / ("cnf_" + mname + ".f64")));
        manifest.set("sha256.vsde_" + mname,
                     sha256_file_hex(ens_dir(cfg) / ("vsde_" + mname + ".f64")));
    }
    manifest.set_i64("diverged_total", diverged_total);
    manifest.save(ens_dir(cfg) / "manifest.txt");
    write_run_log(fs::path(cfg.paths.data_dir) / "infer.log", cfg, now_seconds() - t0,
                  {{"n_traj", std::to_string(n_traj)},
                   {"diverged_total", std::to_string(diverged_total)}});
}

EvalSummary stage_eval(const PipelineConfig& cfg) {
    require(bundle_exists(val_dir(cfg)), "validation bundle (run simulate first)");
    require(fs::exists(ens_dir(cfg) / "manifest.txt"), "ensembles (run infer first)");
    const double t0 = now_seconds();

    const TrajectoryBundle val = load_bundle(val_dir(cfg));
    const Manifest em = Manifest::load(ens_dir(cfg) / "manifest.txt");
    const int n_traj = static_cast<int>(em.get_i64("n_traj"));
    const int particles = static_cast<int>(em.get_i64("particles"));
    const int steps = static_cast<int>(em.get_i64("steps"));
    const std::string main_method = em.get("main_method");
    const int stride = val.n_steps / steps;
    const double dt_phys = val.dt * stride;

    std::vector<std::vector<Vec2>> truth(n_traj);
    std::vector<Vec2> truth_finals(n_traj);
    for (int t = 0; t < n_traj; ++t) {
        truth[t].resize(steps + 1);
        for (int k = 0; k <= steps; ++k) truth[t][k] = val.pos(t, k * stride);
        truth_finals[t] = truth[t].back();
    }

    EvalReport report;
    EvalSummary summary;

    // Main-method ensembles drive the headline comparison.
    const EnsembleSet cnf_set =
        read_ensemble_paths(ens_dir(cfg) / ("cnf_" + main_method + ".f64"), n_traj, particles,
                            steps);
    const EnsembleSet vsde_set =
        read_ensemble_paths(ens_dir(cfg) / ("vsde_" + main_method + ".f64"), n_traj, particles,
                            steps);

    std::vector<Vec2> cnf_finals(n_traj), vsde_finals(n_traj);
    for (int t = 0; t < n_traj; ++t) {
        cnf_finals[t] = cnf_set.mean_final(t);
        vsde_finals[t] = vsde_set.mean_final(t);
    }
    report.cnf_final = final_position_mae(cnf_finals, truth_finals);
    report.vsde_final = final_position_mae(vsde_finals, truth_finals);
    report.paired_diff.resize(n_traj);
    for (int t = 0; t < n_traj; ++t)
        report.paired_diff[t] =
            report.cnf_final.per_trajectory[t] - report.vsde_final.per_trajectory[t];
    report.comparison = compare_models(report.cnf_final, report.vsde_final,
                                       val.field.kind_name());
    report.has_comparison = true;
    summary.comparison = report.comparison;

    // Regional grids over the bounding box of the true final positions.
    {
        GridSpec spec;
        spec.nx = 8;
        spec.ny = 8;
        Vec2 lo = truth_finals[0], hi = truth_finals[0];
        for (const Vec2 v : truth_finals) {
            lo.x = std::min(lo.x, v.x);
            lo.y = std::min(lo.y, v.y);
            hi.x = std::max(hi.x, v.x);
            hi.y = std::max(hi.y, v.y);
        }
        spec.lo = {lo.x - 1e-9, lo.y - 1e-9};
        spec.hi = {hi.x + 1e-9, hi.y + 1e-9};
        report.regional_cnf = regional_mae(cnf_finals, truth_finals, spec);
        report.regional_vsde = regional_mae(vsde_finals, truth_finals, spec);
        report.has_regional = true;
    }

    // Velocity phase-space statistics over all particle paths.
    {
        std::vector<std::vector<Vec2>> cnf_paths, vsde_paths;
        for (int t = 0; t < n_traj; ++t) {
            for (const auto& p : cnf_set.paths[t]) cnf_paths.push_back(p);
            for (const auto& p : vsde_set.paths[t]) vsde_paths.push_back(p);
        }
        report.vel_truth = velocity_stats(truth, dt_phys);
        report.vel_cnf = velocity_stats(cnf_paths, dt_phys);
        report.vel_vsde = velocity_stats(vsde_paths, dt_phys);
        report.has_velocity = true;
    }

    // Integrator table over every method present in the manifest.
    {
        std::stringstream ss(em.get("methods"));
        std::string mname;
        double vmin = 0.0, vmax = 0.0, vsum = 0.0;
        int count = 0;
        while (std::getline(ss, mname, ',')) {
            const EnsembleSet cs = read_ensemble_paths(
                ens_dir(cfg) / ("cnf_" + mname + ".f64"), n_traj, particles, steps);
            const EnsembleSet vs = read_ensemble_paths(
                ens_dir(cfg) / ("vsde_" + mname + ".f64"), n_traj, particles, steps);
            std::vector<Vec2> cf(n_traj), vf(n_traj);
            for (int t = 0; t < n_traj; ++t) {
                cf[t] = cs.mean_final(t);
                vf[t] = vs.mean_final(t);
            }
            IntegratorRow row;
            row.method = mname;
            row.cnf_mae = final_position_mae(cf, truth_finals).mean;
            row.vsde_mae = final_position_mae(vf, truth_finals).mean;
            report.integrator_rows.push_back(row);
            vmin = count == 0 ? row.vsde_mae : std::min(vmin, row.vsde_mae);
            vmax = count == 0 ? row.vsde_mae : std::max(vmax, row.vsde_mae);
            vsum += row.vsde_mae;
            ++count;
        }
        if (count >= 2) summary.integrator_spread_vsde = (vmax - vmin) / (vsum / count);
        summary.integrator_rows = report.integrator_rows;
    }

    // Overlay figure: a few held-out trajectories with both model ensembles.
    const int n_overlay = std::min(4, n_traj);
    for (int t = 0; t < n_overlay; ++t) {
        report.overlay_truth.push_back(truth[t]);
        for (int j = 0; j < std::min(6, particles); ++j) {
            report.overlay_cnf.push_back(cnf_set.paths[t][j]);
            report.overlay_vsde.push_back(vsde_set.paths[t][j]);
        }
    }

    emit_report(report, cfg.paths.report_dir);
    write_run_log(fs::path(cfg.paths.report_dir) / "eval.log", cfg, now_seconds() - t0,
                  {{"cnf_mae", format_f64(report.comparison.cnf_mae)},
                   {"vsde_mae", format_f64(report.comparison.vsde_mae)},
                   {"reduction_pct", format_f64(report.comparison.reduction_pct)},
                   {"integrator_spread_vsde", format_f64(summary.integrator_spread_vsde)}});
    return summary;
}

int run_pipeline(const std::string& command, const PipelineConfig& cfg) {
    try {
        if (command == "simulate") {
            stage_simulate(cfg);
        } else if (command == "train-cnf") {
            stage_train_cnf(cfg);
        } else if (command == "train-vsde") {
            stage_train_vsde(cfg);
        } else if (command == "infer") {
            stage_infer(cfg);
        } else if (command == "eval") {
            stage_eval(cfg);
        } else if (command == "all") {
            stage_simulate(cfg);
            stage_train_cnf(cfg);
            stage_train_vsde(cfg);
            stage_infer(cfg);
            const EvalSummary s = stage_eval(cfg);
            std::cout << "cnf_mae=" << s.comparison.cnf_mae
                      << " vsde_mae=" << s.comparison.vsde_mae
                      << " reduction_pct=" << s.comparison.reduction_pct << "\n";
        } else {
            std::cerr << "unknown command: " << command << "\n";
            return 2;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error [" << command << "]: " << e.what() << "\n";
        return 2;
    } catch (const PrereqError& e) {
        std::cerr << "prerequisite error [" << command << "]: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure [" << command << "]: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "io error [" << command << "]: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace pivoflow
