#pragma once
// Metrics over predicted vs observed trajectories: whole-path and
// final-position MAE, regional error grids, velocity phase-space statistics,
// model comparison tables, and report emission (CSV + SVG + manifest).

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pivoflow/vec2.hpp"

namespace pivoflow {

// |a - b| averaged over the two components.
inline double point_mae(Vec2 a, Vec2 b) {
    return 0.5 * (std::abs(a.x - b.x) + std::abs(a.y - b.y));
}

// Mean over steps and components of |pred - truth|; lengths must match.
double mae(std::span<const Vec2> pred, std::span<const Vec2> truth);

struct FinalMaeResult {
    std::vector<double> per_trajectory;
    double mean = 0.0;
    double median = 0.0;
    std::vector<double> hist_edges;  // bins + 1
    std::vector<int> hist_counts;
};

// Per trajectory: MAE between the ensemble-mean final position and the true
// final position.
FinalMaeResult final_position_mae(std::span<const Vec2> ensemble_mean_finals,
                                  std::span<const Vec2> truth_finals, int hist_bins = 24);

struct GridSpec {
    int nx = 8;
    int ny = 8;
    Vec2 lo{0.0, 0.0};
    Vec2 hi{1.0, 1.0};
};

struct RegionalGrid {
    GridSpec spec;
    std::vector<double> value;  // mean abs error per cell; meaningless when count == 0
    std::vector<int> count;

    bool absent(int ix, int iy) const { return count[iy * spec.nx + ix] == 0; }
    double at(int ix, int iy) const { return value[iy * spec.nx + ix]; }
};

// Cell assignment follows the truth point; empty cells stay absent.
RegionalGrid regional_mae(std::span<const Vec2> preds, std::span<const Vec2> truths,
                          const GridSpec& spec);

struct Histogram1D {
    double lo = 0.0, hi = 1.0;
    std::vector<int> counts;
};

struct Histogram2D {
    int nx = 0, ny = 0;
    double xlo = 0.0, xhi = 1.0, ylo = 0.0, yhi = 1.0;
    std::vector<int> counts;  // [iy * nx + ix]
};

struct VelocityStats {
    Histogram2D vxy;
    Histogram1D speed;
    std::size_t n_samples = 0;
    double mean_speed = 0.0;
};

// Finite-difference velocities v_k = (x_{k+1} - x_k) / dt over all paths.
VelocityStats velocity_stats(std::span<const std::vector<Vec2>> paths, double dt,
                             int bins2d = 40, int bins1d = 50);

struct ComparisonRow {
    std::string regime;
    double cnf_mae = 0.0;
    double vsde_mae = 0.0;
    double reduction_pct = 0.0;
};

ComparisonRow compare_models(const FinalMaeResult& cnf, const FinalMaeResult& vsde,
                             const std::string& regime);

struct IntegratorRow {
    std::string method;
    double cnf_mae = 0.0;
    double vsde_mae = 0.0;
};

struct EvalReport {
    bool has_comparison = false;
    ComparisonRow comparison;
    FinalMaeResult cnf_final;
    FinalMaeResult vsde_final;
    std::vector<double> paired_diff;  // cnf - vsde per trajectory
    bool has_regional = false;
    RegionalGrid regional_cnf;
    RegionalGrid regional_vsde;
    bool has_velocity = false;
    VelocityStats vel_truth, vel_cnf, vel_vsde;
    std::vector<IntegratorRow> integrator_rows;
    // A few sample paths for the overlay figure.
    std::vector<std::vector<Vec2>> overlay_truth, overlay_cnf, overlay_vsde;
};

// Writes CSV tables, SVG figures and a manifest (name + sha256 per file);
// returns the manifest entries in emission order.
std::vector<std::pair<std::string, std::string>> emit_report(
    const EvalReport& report, const std::filesystem::path& out_dir);

// CSV helpers shared with tests: header row, 17-significant-digit floats,
// comma separators, LF line endings.
std::string csv_cell(double v);
std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& path);

}  // namespace pivoflow
