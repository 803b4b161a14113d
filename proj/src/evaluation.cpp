#include "pivoflow/evaluation.hpp"

#include <algorithm>
#include <cmath>

#include "pivoflow/errors.hpp"

namespace pivoflow {

double mae(std::span<const Vec2> pred, std::span<const Vec2> truth) {
    if (pred.size() != truth.size()) throw ConfigError("mae: length mismatch");
    if (pred.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k)
        s += std::abs(pred[k].x - truth[k].x) + std::abs(pred[k].y - truth[k].y);
    return s / (2.0 * pred.size());
}

FinalMaeResult final_position_mae(std::span<const Vec2> ensemble_mean_finals,
                                  std::span<const Vec2> truth_finals, int hist_bins) {
    if (ensemble_mean_finals.empty()) throw ConfigError("final_position_mae: empty ensemble set");
    if (ensemble_mean_finals.size() != truth_finals.size())
        throw ConfigError("final_position_mae: prediction/truth count mismatch");
    FinalMaeResult r;
    r.per_trajectory.resize(ensemble_mean_finals.size());
    for (std::size_t i = 0; i < ensemble_mean_finals.size(); ++i)
        r.per_trajectory[i] = point_mae(ensemble_mean_finals[i], truth_finals[i]);

    double s = 0.0;
    for (double v : r.per_trajectory) s += v;
    r.mean = s / r.per_trajectory.size();
    std::vector<double> sorted = r.per_trajectory;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    r.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);

    const double lo = 0.0;
    const double hi = std::max(sorted.back(), 1e-12);
    r.hist_edges.resize(hist_bins + 1);
    for (int b = 0; b <= hist_bins; ++b) r.hist_edges[b] = lo + (hi - lo) * b / hist_bins;
    r.hist_counts.assign(hist_bins, 0);
    for (double v : r.per_trajectory) {
        int b = static_cast<int>((v - lo) / (hi - lo) * hist_bins);
        b = std::clamp(b, 0, hist_bins - 1);
        ++r.hist_counts[b];
    }
    return r;
}

RegionalGrid regional_mae(std::span<const Vec2> preds, std::span<const Vec2> truths,
                          const GridSpec& spec) {
    if (preds.size() != truths.size()) throw ConfigError("regional_mae: count mismatch");
    if (!(spec.hi.x > spec.lo.x) || !(spec.hi.y > spec.lo.y) || spec.nx < 1 || spec.ny < 1)
        throw ConfigError("regional_mae: degenerate grid bounds");
    RegionalGrid g;
    g.spec = spec;
    g.value.assign(static_cast<std::size_t>(spec.nx) * spec.ny, 0.0);
    g.count.assign(g.value.size(), 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const Vec2 t = truths[i];
        int ix = static_cast<int>((t.x - spec.lo.x) / (spec.hi.x - spec.lo.x) * spec.nx);
        int iy = static_cast<int>((t.y - spec.lo.y) / (spec.hi.y - spec.lo.y) * spec.ny);
        ix = std::clamp(ix, 0, spec.nx - 1);
        iy = std::clamp(iy, 0, spec.ny - 1);
        const std::size_t cell = static_cast<std::size_t>(iy) * spec.nx + ix;
        g.value[cell] += point_mae(preds[i], t);
        ++g.count[cell];
    }
    for (std::size_t c = 0; c < g.value.size(); ++c)
        if (g.count[c] > 0) g.value[c] /= g.count[c];
    return g;
}

VelocityStats velocity_stats(std::span<const std::vector<Vec2>> paths, double dt, int bins2d,
                             int bins1d) {
    if (!(dt > 0.0)) throw ConfigError("velocity_stats: dt must be > 0");
    std::vector<Vec2> vels;
    for (const auto& path : paths) {
        if (path.size() < 2) throw ConfigError("velocity_stats: path needs at least 2 points");
        for (std::size_t k = 0; k + 1 < path.size(); ++k)
            vels.push_back({(path[k + 1].x - path[k].x) / dt, (path[k + 1].y - path[k].y) / dt});
    }
    VelocityStats s;
    s.n_samples = vels.size();
    if (vels.empty()) return s;

    double xlo = vels[0].x, xhi = vels[0].x, ylo = vels[0].y, yhi = vels[0].y;
    double smax = 0.0, ssum = 0.0;
    for (const Vec2 v : vels) {
        xlo = std::min(xlo, v.x);
        xhi = std::max(xhi, v.x);
        ylo = std::min(ylo, v.y);
        yhi = std::max(yhi, v.y);
        const double sp = v.norm();
        smax = std::max(smax, sp);
        ssum += sp;
    }
    s.mean_speed = ssum / vels.size();
    const double pad = 1e-9;
    xhi += pad;
    yhi += pad;
    smax += pad;

    s.vxy.nx = bins2d;
    s.vxy.ny = bins2d;
    s.vxy.xlo = xlo;
    s.vxy.xhi = xhi;
    s.vxy.ylo = ylo;
    s.vxy.yhi = yhi;
    s.vxy.counts.assign(static_cast<std::size_t>(bins2d) * bins2d, 0);
    s.speed.lo = 0.0;
    s.speed.hi = smax;
    s.speed.counts.assign(bins1d, 0);
    for (const Vec2 v : vels) {
        int ix = static_cast<int>((v.x - xlo) / (xhi - xlo) * bins2d);
        int iy = static_cast<int>((v.y - ylo) / (yhi - ylo) * bins2d);
        ix = std::clamp(ix, 0, bins2d - 1);
        iy = std::clamp(iy, 0, bins2d - 1);
        ++s.vxy.counts[static_cast<std::size_t>(iy) * bins2d + ix];
        int ib = static_cast<int>(v.norm() / smax * bins1d);
        ib = std::clamp(ib, 0, bins1d - 1);
        ++s.speed.counts[ib];
    }
    return s;
}

ComparisonRow compare_models(const FinalMaeResult& cnf, const FinalMaeResult& vsde,
                             const std::string& regime) {
    if (cnf.per_trajectory.size() != vsde.per_trajectory.size())
        throw ConfigError("compare_models: mismatched truth sets");
    ComparisonRow row;
    row.regime = regime;
    row.cnf_mae = cnf.mean;
    row.vsde_mae = vsde.mean;
    row.reduction_pct =
        cnf.mean > 0.0 ? 100.0 * (cnf.mean - vsde.mean) / cnf.mean : 0.0;
    return row;
}

}  // namespace pivoflow
