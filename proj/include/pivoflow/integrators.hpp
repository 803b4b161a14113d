#pragma once
// Fixed-grid deterministic steppers (Euler, Heun, classical RK4, fixed-step
// Dormand-Prince) plus the Euler-Maruyama diffusion attachment. Dopri5 runs
// one 7-stage evaluation per grid interval; its embedded 4th-order error
// estimate is surfaced as a diagnostic only, never used to adapt the step.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pivoflow/errors.hpp"
#include "pivoflow/rng.hpp"

namespace pivoflow {

enum class StepMethod { Euler, Heun, RK4, Dopri5 };

inline const char* method_name(StepMethod m) {
    switch (m) {
        case StepMethod::Euler: return "euler";
        case StepMethod::Heun: return "heun";
        case StepMethod::RK4: return "rk4";
        case StepMethod::Dopri5: return "dopri5";
    }
    return "?";
}

inline StepMethod method_from_name(const std::string& name) {
    if (name == "euler") return StepMethod::Euler;
    if (name == "heun") return StepMethod::Heun;
    if (name == "rk4") return StepMethod::RK4;
    if (name == "dopri5") return StepMethod::Dopri5;
    throw ConfigError("unknown integrator: " + name);
}

struct TimeGrid {
    double t0 = 0.0;
    double t1 = 1.0;
    int n_steps = 1;

    double dt() const { return (t1 - t0) / n_steps; }
    void validate() const {
        if (!(t1 > t0) || n_steps < 1) throw ConfigError("time grid: need t1 > t0, n_steps >= 1");
    }
};

template <std::size_t N>
using State = std::array<double, N>;

namespace detail {

template <std::size_t N>
bool finite(const State<N>& z) {
    for (double v : z)
        if (!std::isfinite(v)) return false;
    return true;
}

template <std::size_t N>
State<N> axpy(const State<N>& z, double a, const State<N>& k) {
    State<N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = z[i] + a * k[i];
    return out;
}

}  // namespace detail

// One deterministic step of the chosen tableau. `drift(z, t)` returns dz/dt.
// If dopri_err is non-null and the method is Dopri5, the embedded 4th-order
// error estimate of this step is stored there.
template <std::size_t N, typename Drift>
State<N> step_deterministic(StepMethod method, Drift&& drift, const State<N>& z, double t,
                            double dt, double* dopri_err = nullptr) {
    using detail::axpy;
    State<N> out;
    switch (method) {
        case StepMethod::Euler: {
            out = axpy(z, dt, drift(z, t));
            break;
        }
        case StepMethod::Heun: {
            const State<N> k1 = drift(z, t);
            const State<N> k2 = drift(axpy(z, dt, k1), t + dt);
            for (std::size_t i = 0; i < N; ++i) out[i] = z[i] + 0.5 * dt * (k1[i] + k2[i]);
            break;
        }
        case StepMethod::RK4: {
            const State<N> k1 = drift(z, t);
            const State<N> k2 = drift(axpy(z, 0.5 * dt, k1), t + 0.5 * dt);
            const State<N> k3 = drift(axpy(z, 0.5 * dt, k2), t + 0.5 * dt);
            const State<N> k4 = drift(axpy(z, dt, k3), t + dt);
            for (std::size_t i = 0; i < N; ++i)
                out[i] = z[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            break;
        }
        case StepMethod::Dopri5: {
            const State<N> k1 = drift(z, t);
            State<N> s;
            for (std::size_t i = 0; i < N; ++i) s[i] = z[i] + dt * (1.0 / 5.0) * k1[i];
            const State<N> k2 = drift(s, t + dt / 5.0);
            for (std::size_t i = 0; i < N; ++i)
                s[i] = z[i] + dt * (3.0 / 40.0 * k1[i] + 9.0 / 40.0 * k2[i]);
            const State<N> k3 = drift(s, t + 3.0 / 10.0 * dt);
            for (std::size_t i = 0; i < N; ++i)
                s[i] = z[i] + dt * (44.0 / 45.0 * k1[i] - 56.0 / 15.0 * k2[i] + 32.0 / 9.0 * k3[i]);
            const State<N> k4 = drift(s, t + 4.0 / 5.0 * dt);
            for (std::size_t i = 0; i < N; ++i)
                s[i] = z[i] + dt * (19372.0 / 6561.0 * k1[i] - 25360.0 / 2187.0 * k2[i] +
                                    64448.0 / 6561.0 * k3[i] - 212.0 / 729.0 * k4[i]);
            const State<N> k5 = drift(s, t + 8.0 / 9.0 * dt);
            for (std::size_t i = 0; i < N; ++i)
                s[i] = z[i] + dt * (9017.0 / 3168.0 * k1[i] - 355.0 / 33.0 * k2[i] +
                                    46732.0 / 5247.0 * k3[i] + 49.0 / 176.0 * k4[i] -
                                    5103.0 / 18656.0 * k5[i]);
            const State<N> k6 = drift(s, t + dt);
            for (std::size_t i = 0; i < N; ++i)
                out[i] = z[i] + dt * (35.0 / 384.0 * k1[i] + 500.0 / 1113.0 * k3[i] +
                                      125.0 / 192.0 * k4[i] - 2187.0 / 6784.0 * k5[i] +
                                      11.0 / 84.0 * k6[i]);
            if (dopri_err) {
                const State<N> k7 = drift(out, t + dt);
                double err2 = 0.0;
                for (std::size_t i = 0; i < N; ++i) {
                    const double e =
                        dt * ((35.0 / 384.0 - 5179.0 / 57600.0) * k1[i] +
                              (500.0 / 1113.0 - 7571.0 / 16695.0) * k3[i] +
                              (125.0 / 192.0 - 393.0 / 640.0) * k4[i] +
                              (-2187.0 / 6784.0 + 92097.0 / 339200.0) * k5[i] +
                              (11.0 / 84.0 - 187.0 / 2100.0) * k6[i] - (1.0 / 40.0) * k7[i]);
                    err2 += e * e;
                }
                *dopri_err = std::sqrt(err2);
            }
            break;
        }
    }
    if (!detail::finite(out)) throw NumericError("integrator step diverged");
    return out;
}

// z + g * dW. dW must already carry the sqrt(dt) scaling, i.e. dW ~ N(0, dt I).
inline State<2> attach_diffusion(State<2> z, double g, Vec2 dw) {
    return {z[0] + g * dw.x, z[1] + g * dw.y};
}

struct PathResult {
    std::vector<State<2>> states;     // n_steps + 1
    double max_dopri_err = 0.0;       // only populated for Dopri5
};

// Tag for fully deterministic paths (no diffusion callable at all).
struct NoDiffusion {
    double operator()(double) const { return 0.0; }
};
inline constexpr const NoDiffusion* kNoDiffusion = nullptr;

// Deterministic step then Euler-Maruyama noise on each interval. `diffusion`
// maps interval-start time to the noise scale multiplying dW; pass nullptr to
// run fully deterministic. One Gaussian pair is drawn per interval regardless
// of method so integrator comparisons share identical noise.
template <typename Drift, typename DiffusionFn>
PathResult integrate_path(StepMethod method, Drift&& drift, const DiffusionFn* diffusion,
                          State<2> z0, const TimeGrid& grid, CounterStream* stream) {
    grid.validate();
    PathResult result;
    result.states.reserve(grid.n_steps + 1);
    result.states.push_back(z0);
    const double dt = grid.dt();
    const double sqrt_dt = std::sqrt(dt);
    State<2> z = z0;
    for (int k = 0; k < grid.n_steps; ++k) {
        const double t = grid.t0 + k * dt;
        double err = 0.0;
        try {
            z = step_deterministic(method, drift, z, t, dt,
                                   method == StepMethod::Dopri5 ? &err : nullptr);
        } catch (const NumericError&) {
            throw NumericError("path diverged at step " + std::to_string(k + 1) +
                               ", |z| = " + std::to_string(std::hypot(z[0], z[1])));
        }
        result.max_dopri_err = std::max(result.max_dopri_err, err);
        if (diffusion) {
            const Vec2 xi = stream->next_gaussian_pair();
            z = attach_diffusion(z, (*diffusion)(t), {sqrt_dt * xi.x, sqrt_dt * xi.y});
        }
        if (!detail::finite(z))
            throw NumericError("path diverged at step " + std::to_string(k + 1) +
                               ", |z| = " + std::to_string(std::hypot(z[0], z[1])));
        result.states.push_back(z);
    }
    return result;
}

}  // namespace pivoflow
