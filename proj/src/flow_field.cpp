#include "pivoflow/flow_field.hpp"

#include <cmath>

#include "pivoflow/errors.hpp"

namespace pivoflow {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

FlowFieldSpec FlowFieldSpec::poiseuille(double u_max, double h) {
    FlowFieldSpec s;
    s.kind = FieldKind::Poiseuille;
    s.u_max = u_max;
    s.half_height = h;
    s.validate();
    return s;
}

FlowFieldSpec FlowFieldSpec::lamb_oseen(double circulation, double core_radius, Vec2 center) {
    FlowFieldSpec s;
    s.kind = FieldKind::LambOseenVortex;
    s.circulation = circulation;
    s.core_radius = core_radius;
    s.center = center;
    s.validate();
    return s;
}

FlowFieldSpec FlowFieldSpec::uniform_shear(double shear_rate, double base_velocity) {
    FlowFieldSpec s;
    s.kind = FieldKind::UniformShear;
    s.shear_rate = shear_rate;
    s.base_velocity = base_velocity;
    s.validate();
    return s;
}

void FlowFieldSpec::validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    switch (kind) {
        case FieldKind::Poiseuille:
            if (!(half_height > 0.0) || !finite(u_max) || !finite(half_height))
                throw ConfigError("poiseuille field: need finite u_max and half_height > 0");
            break;
        case FieldKind::LambOseenVortex:
            if (!(core_radius > 0.0) || !finite(circulation) || !finite(core_radius) ||
                !center.finite())
                throw ConfigError("lamb-oseen field: need finite circulation and core_radius > 0");
            break;
        case FieldKind::UniformShear:
            if (!finite(shear_rate) || !finite(base_velocity))
                throw ConfigError("uniform-shear field: parameters must be finite");
            break;
    }
}

Vec2 FlowFieldSpec::context_alpha() const {
    switch (kind) {
        case FieldKind::Poiseuille:
            return {u_max, half_height};
        case FieldKind::LambOseenVortex:
            return {circulation, core_radius};
        case FieldKind::UniformShear:
            return {base_velocity, shear_rate};
    }
    return {};
}

std::string FlowFieldSpec::kind_name() const {
    switch (kind) {
        case FieldKind::Poiseuille:
            return "poiseuille";
        case FieldKind::LambOseenVortex:
            return "lamb_oseen_vortex";
        case FieldKind::UniformShear:
            return "uniform_shear";
    }
    return "?";
}

FieldKind FlowFieldSpec::kind_from_name(const std::string& name) {
    if (name == "poiseuille") return FieldKind::Poiseuille;
    if (name == "lamb_oseen_vortex" || name == "vortex") return FieldKind::LambOseenVortex;
    if (name == "uniform_shear" || name == "shear") return FieldKind::UniformShear;
    throw ConfigError("unknown field kind: " + name);
}

namespace {

// (circ / 2 pi) * (1 - exp(-s/a)) / s with the small-s limit, s = r^2, a = rc^2.
double vortex_q(double circ, double a, double s) {
    const double c = circ / kTwoPi;
    if (s < 1e-12 * a) return c * (1.0 / a - s / (2.0 * a * a));
    return c * (1.0 - std::exp(-s / a)) / s;
}

double vortex_q_prime(double circ, double a, double s) {
    const double c = circ / kTwoPi;
    if (s < 1e-8 * a) return c * (-1.0 / (2.0 * a * a) + s / (3.0 * a * a * a));
    const double e = std::exp(-s / a);
    return c * ((s / a) * e - (1.0 - e)) / (s * s);
}

}  // namespace

Vec2 velocity_at(const FlowFieldSpec& spec, Vec2 x) {
    if (!x.finite()) throw NumericError("velocity_at: non-finite position");
    switch (spec.kind) {
        case FieldKind::Poiseuille: {
            const double yr = x.y / spec.half_height;
            return {spec.u_max * (1.0 - yr * yr), 0.0};
        }
        case FieldKind::LambOseenVortex: {
            const Vec2 d = x - spec.center;
            const double s = d.norm2();
            const double q = vortex_q(spec.circulation, spec.core_radius * spec.core_radius, s);
            return {-q * d.y, q * d.x};
        }
        case FieldKind::UniformShear:
            return {spec.base_velocity + spec.shear_rate * x.y, 0.0};
    }
    return {};
}

Mat2 velocity_jacobian(const FlowFieldSpec& spec, Vec2 x) {
    if (!x.finite()) throw NumericError("velocity_jacobian: non-finite position");
    Mat2 j;
    switch (spec.kind) {
        case FieldKind::Poiseuille:
            j.b = -2.0 * spec.u_max * x.y / (spec.half_height * spec.half_height);
            break;
        case FieldKind::LambOseenVortex: {
            const Vec2 d = x - spec.center;
            const double s = d.norm2();
            const double a = spec.core_radius * spec.core_radius;
            const double q = vortex_q(spec.circulation, a, s);
            const double qp = vortex_q_prime(spec.circulation, a, s);
            j.a = -qp * 2.0 * d.x * d.y;
            j.b = -qp * 2.0 * d.y * d.y - q;
            j.c = qp * 2.0 * d.x * d.x + q;
            j.d = qp * 2.0 * d.y * d.x;
            break;
        }
        case FieldKind::UniformShear:
            j.b = spec.shear_rate;
            break;
    }
    return j;
}

double field_temperature(const FlowFieldSpec& spec, Vec2 x) {
    const Vec2 u = velocity_at(spec, x);
    return 0.5 * u.norm2();
}

Vec2 field_temperature_grad(const FlowFieldSpec& spec, Vec2 x) {
    const Vec2 u = velocity_at(spec, x);
    const Mat2 j = velocity_jacobian(spec, x);
    // grad T = J^T u for T = 0.5 |u|^2
    return {j.a * u.x + j.c * u.y, j.b * u.x + j.d * u.y};
}

}  // namespace pivoflow
