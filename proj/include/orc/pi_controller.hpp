#pragma once

// Positional PI on the superheat error e = SH - SH_set. Positive output raises
// pump speed, which lowers superheat, so no sign flip is needed.

#include <algorithm>

#include "orc/errors.hpp"

namespace orc {

struct PiState {
    double kp = 0.15;
    double ki = 0.03;
    double integral = 0.0;  // K s
    double u_min = -1.0;
    double u_max = 1.0;
    double u_prev = 0.0;
};

struct PiStepResult {
    double u;
    PiState state;
};

// Conditional integration: the integral only accumulates when doing so does not
// push an already saturated output further into saturation.
inline PiStepResult pi_step(PiState pi, double error, double dt) {
    if (!(dt > 0.0)) throw DomainError("pi_step: dt must be positive");
    const double trial = pi.integral + error * dt;
    const double u_trial = pi.kp * error + pi.ki * trial;
    const bool high = u_trial > pi.u_max && error > 0.0;
    const bool low = u_trial < pi.u_min && error < 0.0;
    if (!high && !low) pi.integral = trial;
    const double u = std::clamp(pi.kp * error + pi.ki * pi.integral, pi.u_min, pi.u_max);
    pi.u_prev = u;
    return {u, pi};
}

}  // namespace orc
