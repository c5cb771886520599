#pragma once

// Working-fluid and waste-heat property model.
//
// Saturation curve (anchored at the reference point):
//   ln(P / p_ref) = b * (1/(t_ref + c) - 1/(T + c)) + a * ln((T + c) / (t_ref + c))
// Saturated enthalpies and liquid density are linear in T_sat; single-phase
// heat capacities are constant; vapor density follows a power law in P with
// an ideal-gas temperature correction in the superheated branch.

#include <array>
#include <cmath>
#include <sstream>
#include <string>

#include "orc/errors.hpp"

namespace orc {

struct FluidCoefficients {
    double p_ref = 1.0e6;    // Pa
    double t_ref = 380.0;    // K, saturation temperature at p_ref
    double antoine_a = 1.5;  // -
    double antoine_b = 3200.0;  // K
    double antoine_c = 0.0;     // K
    double hl_c0 = -240.0e3;  // J/kg
    double hl_c1 = 1500.0;    // J/(kg K)
    double hg_c0 = 290.0e3;
    double hg_c1 = 500.0;
    double cp_liq = 1400.0;  // J/(kg K)
    double cp_vap = 1100.0;
    double rho_l_c0 = 2670.0;  // kg/m3
    double rho_l_c1 = -4.0;    // kg/(m3 K)
    double rho_g_ref = 55.0;   // kg/m3 at p_ref
    double rho_g_exp = 1.1;
    double cp_a = 2500.0;  // waste-heat fluid, J/(kg K)
    double mean_void_fraction = 0.8;
    double p_min = 1.5e5;
    double p_max = 2.5e6;
};

struct RegionMeans {
    std::array<double, 3> rho_bar{};  // kg/m3, subcooled / two-phase / superheated
    std::array<double, 3> t_bar{};    // K
    double h_m = 0.0;                 // J/kg, mean two-phase enthalpy
};

struct SatEnthalpies {
    double h_l;
    double h_g;
};

class Fluid {
public:
    Fluid() = default;
    explicit Fluid(const FluidCoefficients& c) : c_(c) {}

    const FluidCoefficients& coefficients() const noexcept { return c_; }

    void check_window(double p) const {
        if (!(p >= c_.p_min && p <= c_.p_max)) {
            std::ostringstream os;
            os << "pressure " << p << " Pa outside validity window [" << c_.p_min << ", "
               << c_.p_max << "] Pa";
            throw DomainError(os.str());
        }
    }

    // ln(P/p_ref) as a function of T; strictly increasing where its slope is positive.
    double log_pressure_ratio(double t) const {
        const double tc = t + c_.antoine_c;
        const double rc = c_.t_ref + c_.antoine_c;
        return c_.antoine_b * (1.0 / rc - 1.0 / tc) + c_.antoine_a * std::log(tc / rc);
    }

    double log_pressure_slope(double t) const {
        const double tc = t + c_.antoine_c;
        return c_.antoine_b / (tc * tc) + c_.antoine_a / tc;
    }

    double t_sat(double p) const {
        check_window(p);
        const double y = std::log(p / c_.p_ref);
        const double rc = c_.t_ref + c_.antoine_c;
        // a = 0 closed form as the starting point
        double t = 1.0 / (1.0 / rc - y / c_.antoine_b) - c_.antoine_c;
        for (int it = 0; it < 50; ++it) {
            const double step = (log_pressure_ratio(t) - y) / log_pressure_slope(t);
            t -= step;
            if (std::abs(step) <= 1e-13 * t) break;
        }
        return t;
    }

    SatEnthalpies sat_enthalpies(double p) const {
        const double ts = t_sat(p);
        return {c_.hl_c0 + c_.hl_c1 * ts, c_.hg_c0 + c_.hg_c1 * ts};
    }

    double rho_l_sat(double p) const { return liquid_density(t_sat(p)); }

    double rho_g_sat(double p) const {
        check_window(p);
        return c_.rho_g_ref * std::pow(p / c_.p_ref, c_.rho_g_exp);
    }

    double liquid_density(double t) const { return c_.rho_l_c0 + c_.rho_l_c1 * t; }

    double temperature_from_ph(double p, double h) const {
        const double ts = t_sat(p);
        const double hl = c_.hl_c0 + c_.hl_c1 * ts;
        const double hg = c_.hg_c0 + c_.hg_c1 * ts;
        if (h < hl) return ts - (hl - h) / c_.cp_liq;
        if (h > hg) return ts + (h - hg) / c_.cp_vap;
        return ts;
    }

    double density_from_ph(double p, double h) const {
        const double ts = t_sat(p);
        const double hl = c_.hl_c0 + c_.hl_c1 * ts;
        const double hg = c_.hg_c0 + c_.hg_c1 * ts;
        if (h < hl) return liquid_density(ts - (hl - h) / c_.cp_liq);
        const double rg = rho_g_sat(p);
        if (h > hg) return rg * ts / (ts + (h - hg) / c_.cp_vap);
        // homogeneous two-phase mixture
        const double x = (h - hl) / (hg - hl);
        const double rl = liquid_density(ts);
        return 1.0 / (x / rg + (1.0 - x) / rl);
    }

    // Requires a subcooled inlet and a superheated outlet; anything else means the
    // evaporator is no longer in the three-zone regime.
    RegionMeans region_means(double p, double h_in, double h_o) const {
        const double ts = t_sat(p);
        const double hl = c_.hl_c0 + c_.hl_c1 * ts;
        const double hg = c_.hg_c0 + c_.hg_c1 * ts;
        if (!(h_in < hl) || !(h_o > hg)) {
            std::ostringstream os;
            os << "region collapse: need h_in < h_l and h_o > h_g (h_in=" << h_in
               << ", h_l=" << hl << ", h_o=" << h_o << ", h_g=" << hg << ")";
            throw RegionCollapse(os.str());
        }
        const double rl = liquid_density(ts);
        const double rg = c_.rho_g_ref * std::pow(p / c_.p_ref, c_.rho_g_exp);
        const double t_in = ts - (hl - h_in) / c_.cp_liq;
        const double t_o = ts + (h_o - hg) / c_.cp_vap;
        const double void_frac = c_.mean_void_fraction;

        RegionMeans m;
        m.rho_bar[0] = 0.5 * (liquid_density(t_in) + rl);
        m.rho_bar[1] = void_frac * rg + (1.0 - void_frac) * rl;
        m.rho_bar[2] = 0.5 * (rg + rg * ts / t_o);
        m.t_bar[0] = 0.5 * (t_in + ts);
        m.t_bar[1] = ts;
        m.t_bar[2] = 0.5 * (ts + t_o);
        m.h_m = 0.5 * (hl + hg);
        return m;
    }

    // Waste heat is incompressible with constant heat capacity.
    double waste_heat_enthalpy(double t) const { return c_.cp_a * t; }

    // Checks the coefficient invariants on a grid spanning the window.
    void validate(int samples = 257) const {
        if (!(c_.p_min > 0.0 && c_.p_max > c_.p_min))
            throw ConfigError("fluid: pressure window must satisfy 0 < p_min < p_max");
        if (!(c_.cp_liq > 0.0 && c_.cp_vap > 0.0 && c_.cp_a > 0.0))
            throw ConfigError("fluid: heat capacities must be positive");
        if (!(c_.mean_void_fraction >= 0.0 && c_.mean_void_fraction <= 1.0))
            throw ConfigError("fluid: mean_void_fraction must lie in [0, 1]");
        if (!(c_.rho_g_ref > 0.0)) throw ConfigError("fluid: rho_g_ref must be positive");
        double prev_t = -1.0;
        for (int i = 0; i < samples; ++i) {
            const double p = c_.p_min + (c_.p_max - c_.p_min) * i / (samples - 1);
            const double t = t_sat(p);
            if (!(log_pressure_slope(t) > 0.0) || !(t > prev_t))
                throw ConfigError("fluid: saturation curve not strictly increasing in window");
            const auto [hl, hg] = sat_enthalpies(p);
            if (!(hg > hl)) throw ConfigError("fluid: h_g <= h_l inside window");
            if (!(rho_l_sat(p) > rho_g_sat(p)))
                throw ConfigError("fluid: rho_l <= rho_g inside window");
            prev_t = t;
        }
    }

private:
    FluidCoefficients c_{};
};

}  // namespace orc
