#pragma once
// Analytical 2D velocity fields used to drive the particle simulator and the
// thermal-proxy physics loss. Each field has closed-form derivatives.

#include <string>

#include "pivoflow/vec2.hpp"

namespace pivoflow {

enum class FieldKind { Poiseuille, LambOseenVortex, UniformShear };

struct Mat2 {
    // row-major [[a, b], [c, d]] = [[du_x/dx, du_x/dy], [du_y/dx, du_y/dy]]
    double a = 0.0, b = 0.0, c = 0.0, d = 0.0;
    double trace() const { return a + d; }
};

struct FlowFieldSpec {
    FieldKind kind = FieldKind::Poiseuille;

    // Poiseuille: u = (u_max * (1 - (y/h)^2), 0)
    double u_max = 1.0;
    double half_height = 1.0;

    // Lamb-Oseen vortex: tangential speed (circ / 2 pi r)(1 - exp(-r^2/rc^2))
    double circulation = 6.283185307179586;
    double core_radius = 1.0;
    Vec2 center{0.0, 0.0};

    // Uniform shear: u = (base_velocity + shear_rate * y, 0)
    double shear_rate = 0.5;
    double base_velocity = 0.5;

    static FlowFieldSpec poiseuille(double u_max, double h);
    static FlowFieldSpec lamb_oseen(double circulation, double core_radius, Vec2 center);
    static FlowFieldSpec uniform_shear(double shear_rate, double base_velocity);

    void validate() const;  // throws ConfigError on violated invariants

    // Field scalars exposed to model conditioning: (magnitude-like, shape-like).
    // Poiseuille (u_max, h), vortex (circulation, core_radius),
    // shear (base_velocity, shear_rate).
    Vec2 context_alpha() const;

    std::string kind_name() const;
    static FieldKind kind_from_name(const std::string& name);
};

Vec2 velocity_at(const FlowFieldSpec& spec, Vec2 x);
Mat2 velocity_jacobian(const FlowFieldSpec& spec, Vec2 x);

// Thermal proxy for the energy-balance residual: T(x) = 0.5 * |u(x)|^2.
double field_temperature(const FlowFieldSpec& spec, Vec2 x);
Vec2 field_temperature_grad(const FlowFieldSpec& spec, Vec2 x);

}  // namespace pivoflow
