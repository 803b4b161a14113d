#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pivoflow/errors.hpp"
#include "pivoflow/evaluation.hpp"
#include "pivoflow/manifest.hpp"

namespace pivoflow {

std::string csv_cell(double v) { return format_f64(v); }

std::vector<std::vector<std::string>> parse_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoError::Kind::MissingFile, "missing file: " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::string cell;
        std::stringstream ss(line);
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        rows.push_back(std::move(cells));
    }
    return rows;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

// Minimal SVG canvas with data-space -> viewport mapping.
class Svg {
public:
    Svg(double xlo, double xhi, double ylo, double yhi, int w = 640, int h = 480)
        : xlo_(xlo), xhi_(xhi), ylo_(ylo), yhi_(yhi), w_(w), h_(h) {
        body_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
              << "\" viewBox=\"0 0 " << w << " " << h << "\">\n";
        body_ << "<rect x=\"0\" y=\"0\" width=\"" << w << "\" height=\"" << h
              << "\" fill=\"white\"/>\n";
    }

    double px(double x) const { return margin_ + (x - xlo_) / (xhi_ - xlo_) * (w_ - 2 * margin_); }
    double py(double y) const {
        return h_ - margin_ - (y - ylo_) / (yhi_ - ylo_) * (h_ - 2 * margin_);
    }

    void polyline(std::span<const Vec2> pts, const std::string& color, double width,
                  double opacity = 1.0) {
        if (pts.empty()) return;
        body_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"" << width
              << "\" opacity=\"" << fmt(opacity) << "\" points=\"";
        for (const Vec2 p : pts) body_ << fmt(px(p.x)) << "," << fmt(py(p.y)) << " ";
        body_ << "\"/>\n";
    }

    void circle(Vec2 p, double r, const std::string& color, double opacity = 1.0) {
        body_ << "<circle cx=\"" << fmt(px(p.x)) << "\" cy=\"" << fmt(py(p.y)) << "\" r=\"" << r
              << "\" fill=\"" << color << "\" opacity=\"" << fmt(opacity) << "\"/>\n";
    }

    void rect_data(double x0, double x1, double y0, double y1, const std::string& color,
                   double opacity) {
        body_ << "<rect x=\"" << fmt(px(x0)) << "\" y=\"" << fmt(py(y1)) << "\" width=\""
              << fmt(px(x1) - px(x0)) << "\" height=\"" << fmt(py(y0) - py(y1)) << "\" fill=\""
              << color << "\" opacity=\"" << fmt(opacity) << "\"/>\n";
    }

    void rect_raw(double x, double y, double w, double h, const std::string& color) {
        body_ << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(w)
              << "\" height=\"" << fmt(h) << "\" fill=\"" << color << "\"/>\n";
    }

    void text(double x_raw, double y_raw, const std::string& s, int size = 12,
              const std::string& color = "black") {
        body_ << "<text x=\"" << fmt(x_raw) << "\" y=\"" << fmt(y_raw) << "\" font-size=\"" << size
              << "\" font-family=\"sans-serif\" fill=\"" << color << "\">" << s << "</text>\n";
    }

    std::string finish() {
        body_ << "</svg>\n";
        return body_.str();
    }

private:
    double xlo_, xhi_, ylo_, yhi_;
    int w_, h_;
    double margin_ = 36.0;
    std::ostringstream body_;
};

struct Emitter {
    std::filesystem::path dir;
    std::vector<std::pair<std::string, std::string>> entries;

    void file(const std::string& name, const std::string& content) {
        atomic_write_text(dir / name, content);
        entries.emplace_back(name, sha256_hex(content.data(), content.size()));
    }
};

std::string heat_color(double frac) {
    // white -> red
    const int g = static_cast<int>(255.0 * (1.0 - frac));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "#ff%02x%02x", g, g);
    return buf;
}

void bbox_of(std::span<const std::vector<Vec2>> sets, double& xlo, double& xhi, double& ylo,
             double& yhi) {
    for (const auto& p : sets)
        for (const Vec2 v : p) {
            xlo = std::min(xlo, v.x);
            xhi = std::max(xhi, v.x);
            ylo = std::min(ylo, v.y);
            yhi = std::max(yhi, v.y);
        }
}

std::string regional_csv(const RegionalGrid& g) {
    std::string out = "x_lo,x_hi,y_lo,y_hi,count,mae\n";
    const double dx = (g.spec.hi.x - g.spec.lo.x) / g.spec.nx;
    const double dy = (g.spec.hi.y - g.spec.lo.y) / g.spec.ny;
    for (int iy = 0; iy < g.spec.ny; ++iy)
        for (int ix = 0; ix < g.spec.nx; ++ix) {
            out += csv_cell(g.spec.lo.x + ix * dx) + "," + csv_cell(g.spec.lo.x + (ix + 1) * dx) +
                   "," + csv_cell(g.spec.lo.y + iy * dy) + "," +
                   csv_cell(g.spec.lo.y + (iy + 1) * dy) + "," +
                   std::to_string(g.count[iy * g.spec.nx + ix]) + ",";
            if (!g.absent(ix, iy)) out += csv_cell(g.at(ix, iy));
            out += "\n";
        }
    return out;
}

std::string speed_csv(const Histogram1D& h) {
    std::string out = "speed_lo,speed_hi,count\n";
    const int n = static_cast<int>(h.counts.size());
    for (int b = 0; b < n; ++b) {
        const double w = (h.hi - h.lo) / n;
        out += csv_cell(h.lo + b * w) + "," + csv_cell(h.lo + (b + 1) * w) + "," +
               std::to_string(h.counts[b]) + "\n";
    }
    return out;
}

std::string vxy_csv(const Histogram2D& h) {
    std::string out = "vx_lo,vx_hi,vy_lo,vy_hi,count\n";
    const double wx = (h.xhi - h.xlo) / h.nx;
    const double wy = (h.yhi - h.ylo) / h.ny;
    for (int iy = 0; iy < h.ny; ++iy)
        for (int ix = 0; ix < h.nx; ++ix)
            out += csv_cell(h.xlo + ix * wx) + "," + csv_cell(h.xlo + (ix + 1) * wx) + "," +
                   csv_cell(h.ylo + iy * wy) + "," + csv_cell(h.ylo + (iy + 1) * wy) + "," +
                   std::to_string(h.counts[iy * h.nx + ix]) + "\n";
    return out;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> emit_report(
    const EvalReport& report, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    Emitter em{out_dir, {}};

    if (report.has_comparison) {
        std::string csv = "flow_regime,cnf_mae,vsde_mae,reduction_pct\n";
        csv += report.comparison.regime + "," + csv_cell(report.comparison.cnf_mae) + "," +
               csv_cell(report.comparison.vsde_mae) + "," +
               csv_cell(report.comparison.reduction_pct) + "\n";
        em.file("comparison.csv", csv);

        std::string per = "trajectory,cnf_mae,vsde_mae,difference\n";
        for (std::size_t i = 0; i < report.cnf_final.per_trajectory.size(); ++i)
            per += std::to_string(i) + "," + csv_cell(report.cnf_final.per_trajectory[i]) + "," +
                   csv_cell(report.vsde_final.per_trajectory[i]) + "," +
                   csv_cell(report.paired_diff[i]) + "\n";
        em.file("final_position_mae.csv", per);
    }

    if (report.has_regional) {
        em.file("regional_mae_cnf.csv", regional_csv(report.regional_cnf));
        em.file("regional_mae_vsde.csv", regional_csv(report.regional_vsde));
    }

    if (report.has_velocity) {
        em.file("speed_hist_truth.csv", speed_csv(report.vel_truth.speed));
        em.file("speed_hist_cnf.csv", speed_csv(report.vel_cnf.speed));
        em.file("speed_hist_vsde.csv", speed_csv(report.vel_vsde.speed));
        em.file("velocity_2d_truth.csv", vxy_csv(report.vel_truth.vxy));
        em.file("velocity_2d_cnf.csv", vxy_csv(report.vel_cnf.vxy));
        em.file("velocity_2d_vsde.csv", vxy_csv(report.vel_vsde.vxy));
    }

    if (!report.integrator_rows.empty()) {
        std::string csv = "integrator,cnf_mae,vsde_mae\n";
        for (const auto& row : report.integrator_rows)
            csv += row.method + "," + csv_cell(row.cnf_mae) + "," + csv_cell(row.vsde_mae) + "\n";
        em.file("integrator_comparison.csv", csv);
    }

    // --- figures ---

    if (!report.overlay_truth.empty()) {
        double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
        bbox_of(report.overlay_truth, xlo, xhi, ylo, yhi);
        bbox_of(report.overlay_cnf, xlo, xhi, ylo, yhi);
        bbox_of(report.overlay_vsde, xlo, xhi, ylo, yhi);
        Svg svg(xlo, xhi, ylo, yhi);
        for (const auto& p : report.overlay_cnf) svg.polyline(p, "#e6b400", 1.0, 0.55);
        for (const auto& p : report.overlay_vsde) svg.polyline(p, "#7a3fbf", 1.0, 0.55);
        for (const auto& p : report.overlay_truth) {
            svg.polyline(p, "#777777", 1.4, 0.9);
            if (!p.empty()) svg.circle(p.front(), 2.5, "#222222");
        }
        svg.text(40, 20, "trajectory overlays: truth (gray), cnf (yellow), vsde (purple)");
        em.file("overlay_trajectories.svg", svg.finish());
    }

    if (report.has_regional) {
        const RegionalGrid& a = report.regional_cnf;
        const RegionalGrid& b = report.regional_vsde;
        double vmax = 1e-12;
        for (std::size_t c = 0; c < a.value.size(); ++c)
            if (a.count[c] > 0) vmax = std::max(vmax, a.value[c]);
        for (std::size_t c = 0; c < b.value.size(); ++c)
            if (b.count[c] > 0) vmax = std::max(vmax, b.value[c]);
        Svg svg(0, 2.15, 0, 1.0, 720, 400);
        auto draw = [&](const RegionalGrid& g, double x_off, const std::string& label) {
            const int nx = g.spec.nx, ny = g.spec.ny;
            for (int iy = 0; iy < ny; ++iy)
                for (int ix = 0; ix < nx; ++ix) {
                    const double x0 = x_off + static_cast<double>(ix) / nx;
                    const double y0 = static_cast<double>(iy) / ny;
                    if (g.absent(ix, iy))
                        svg.rect_data(x0, x0 + 1.0 / nx, y0, y0 + 1.0 / ny, "#dddddd", 1.0);
                    else
                        svg.rect_data(x0, x0 + 1.0 / nx, y0, y0 + 1.0 / ny,
                                      heat_color(g.at(ix, iy) / vmax), 1.0);
                }
            svg.text(svg.px(x_off) + 4, 20, label);
        };
        draw(report.regional_cnf, 0.0, "cnf regional mae");
        draw(report.regional_vsde, 1.15, "vsde regional mae");
        em.file("regional_heatmap.svg", svg.finish());
    }

    if (report.has_comparison && !report.cnf_final.hist_counts.empty()) {
        int cmax = 1;
        for (int c : report.cnf_final.hist_counts) cmax = std::max(cmax, c);
        for (int c : report.vsde_final.hist_counts) cmax = std::max(cmax, c);
        const double xmax =
            std::max(report.cnf_final.hist_edges.back(), report.vsde_final.hist_edges.back());
        Svg svg(0, xmax, 0, cmax * 1.05 + 1e-9);
        auto bars = [&](const FinalMaeResult& r, const std::string& color) {
            for (std::size_t b = 0; b < r.hist_counts.size(); ++b)
                svg.rect_data(r.hist_edges[b], r.hist_edges[b + 1], 0.0,
                              static_cast<double>(r.hist_counts[b]), color, 0.45);
        };
        bars(report.cnf_final, "#e6b400");
        bars(report.vsde_final, "#7a3fbf");
        svg.text(40, 20, "final-position mae distribution: cnf (yellow), vsde (purple)");
        em.file("mae_histogram.svg", svg.finish());
    }

    if (report.has_velocity && report.vel_truth.n_samples > 0) {
        const Histogram2D& h = report.vel_truth.vxy;
        Svg svg(h.xlo, h.xhi, h.ylo, h.yhi);
        int cmax = 1;
        for (int c : h.counts) cmax = std::max(cmax, c);
        const double wx = (h.xhi - h.xlo) / h.nx;
        const double wy = (h.yhi - h.ylo) / h.ny;
        for (int iy = 0; iy < h.ny; ++iy)
            for (int ix = 0; ix < h.nx; ++ix) {
                const int c = h.counts[iy * h.nx + ix];
                if (c == 0) continue;
                svg.rect_data(h.xlo + ix * wx, h.xlo + (ix + 1) * wx, h.ylo + iy * wy,
                              h.ylo + (iy + 1) * wy,
                              heat_color(static_cast<double>(c) / cmax), 1.0);
            }
        svg.text(40, 20, "truth velocity phase space (vx, vy)");
        em.file("phase_space.svg", svg.finish());
    }

    Manifest manifest;
    manifest.set_i64("format_version", 1);
    manifest.set_i64("n_files", static_cast<std::int64_t>(em.entries.size()));
    for (const auto& e : em.entries) manifest.set("sha256." + e.first, e.second);
    manifest.save(out_dir / "manifest.txt");
    return em.entries;
}

}  // namespace pivoflow
