#pragma once

// Mechanistic ORC plant: reduced-order moving-boundary evaporator (4 differential
// states, 3 algebraic states) plus quasi-static expander and feed pump.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>

#include "orc/errors.hpp"
#include "orc/thermo.hpp"

namespace orc {

struct EvaporatorState {
    double t_w1 = 0.0, t_w2 = 0.0, t_w3 = 0.0;  // wall temperatures, K
    double l1 = 0.0;                              // preheating length, m
    double l2 = 0.0;                              // two-phase length, m
    double p_e = 0.0;                             // evaporation pressure, Pa
    double h_o = 0.0;                             // outlet enthalpy, J/kg

    std::array<double, 7> to_array() const { return {t_w1, t_w2, t_w3, l1, l2, p_e, h_o}; }
    static EvaporatorState from_array(const std::array<double, 7>& a) {
        return {a[0], a[1], a[2], a[3], a[4], a[5], a[6]};
    }
    friend bool operator==(const EvaporatorState&, const EvaporatorState&) = default;
};

struct EvaporatorInputs {
    double m_in = 0.0;  // kg/s
    double h_in = 0.0;  // J/kg
    double m_o = 0.0;   // kg/s
    double m_a = 0.0;   // kg/s
    double t_a = 0.0;   // K
};

// Which enthalpy closes the preheating-length equation's denominator
// 0.5*A*rho1*(h_ref - h_l). `inlet` matches the algebraic rows; `two_phase_mean`
// is the literal (h_l + h_g)/2 reading and is dynamically unstable.
enum class L1Reference { inlet, two_phase_mean };

struct PlantParams {
    double d_i = 0.016;  // m
    double d_o = 0.020;  // m
    double area = 7.0e-5;  // flow cross-section, m2
    double l_total = 30.0;  // m
    double wall_capacity = 600.0;  // (Cp rho A)_w, J/(m K)
    std::array<double, 3> alpha_i{6000.0, 4000.0, 900.0};  // W/(m2 K)
    std::array<double, 3> alpha_o{400.0, 400.0, 400.0};
    double exp_eta_is = 0.7;
    double exp_eta_vol = 0.9;
    double exp_swept_vol = 3.4e-5;  // m3/rev
    double exp_kappa = 0.2;         // isentropic-drop exponent
    double pump_eta_is = 0.6;
    double pump_eta_vol = 0.9;
    double pump_disp = 2.0e-6;  // m3/rev
    double omega_p_min = 36.0, omega_p_max = 42.0;  // rev/s
    double omega_x_min = 20.0, omega_x_max = 80.0;
    double p_cond = 1.8e5;    // Pa
    double subcooling = 5.0;  // K below condenser saturation at the pump inlet
    double t_a_min = 380.0, t_a_max = 500.0;  // physical band of the waste-heat inlet
    std::array<double, 3> residual_scale{1.0e-5, 1.0e-4, 1.0};
    L1Reference l1_reference = L1Reference::inlet;

    void validate() const {
        auto pos = [](double v, const char* name) {
            if (!(v > 0.0)) throw ConfigError(std::string("plant: ") + name + " must be positive");
        };
        pos(d_i, "d_i");
        pos(d_o, "d_o");
        pos(area, "area");
        pos(l_total, "l_total");
        pos(wall_capacity, "wall_capacity");
        for (int j = 0; j < 3; ++j) {
            pos(alpha_i[j], "alpha_i");
            pos(alpha_o[j], "alpha_o");
            pos(residual_scale[j], "residual_scale");
        }
        pos(exp_swept_vol, "exp_swept_vol");
        pos(pump_disp, "pump_disp");
        pos(p_cond, "p_cond");
        pos(exp_kappa, "exp_kappa");
        for (double eta : {exp_eta_is, exp_eta_vol, pump_eta_is, pump_eta_vol})
            if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("plant: efficiencies must lie in (0, 1]");
        if (!(omega_p_min >= 0.0 && omega_p_max > omega_p_min))
            throw ConfigError("plant: omega_p range must satisfy 0 <= min < max");
        if (!(omega_x_min >= 0.0 && omega_x_max > omega_x_min))
            throw ConfigError("plant: omega_x range must satisfy 0 <= min < max");
        if (!(subcooling >= 0.0)) throw ConfigError("plant: subcooling must be non-negative");
        if (!(t_a_max > t_a_min)) throw ConfigError("plant: t_a band must satisfy min < max");
        if (!(d_o > d_i)) throw ConfigError("plant: d_o must exceed d_i");
    }
};

class PlantFault : public Error {
public:
    PlantFault(const std::string& what, const EvaporatorState& s) : Error(what), state_(s) {}
    const EvaporatorState& state() const noexcept { return state_; }

private:
    EvaporatorState state_;
};

namespace detail {
constexpr double pi = std::numbers::pi;

inline std::array<double, 3> region_lengths(const EvaporatorState& s, const PlantParams& p) {
    return {s.l1, s.l2, p.l_total - s.l1 - s.l2};
}
}  // namespace detail

// Returns a description of the first violated state invariant, if any.
inline std::optional<std::string> state_violation(const EvaporatorState& s, const PlantParams& p,
                                                  const Fluid& fluid) {
    for (double v : s.to_array())
        if (!std::isfinite(v)) return "non-finite state";
    if (!(s.l1 > 0.0)) return "l1 <= 0";
    if (!(s.l2 > 0.0)) return "l2 <= 0";
    if (!(s.l1 + s.l2 < p.l_total)) return "l1 + l2 >= l_total";
    const auto& c = fluid.coefficients();
    if (!(s.p_e >= c.p_min && s.p_e <= c.p_max)) return "p_e outside fluid window";
    if (!(s.h_o > fluid.sat_enthalpies(s.p_e).h_g)) return "outlet not superheated";
    return std::nullopt;
}

// Counter-current static balance: waste heat enters at the superheating region
// (j = 3) and is marched towards the preheating region. Each region is one
// linear solve for its outlet temperature.
inline std::array<double, 3> waste_heat_means(const EvaporatorState& s, const EvaporatorInputs& u,
                                              const PlantParams& p, const Fluid& fluid) {
    if (!(u.m_a > 0.0)) throw DomainError("waste_heat_means: degenerate disturbance, m_a must be > 0");
    const auto len = detail::region_lengths(s, p);
    const std::array<double, 3> t_w{s.t_w1, s.t_w2, s.t_w3};
    const double mc = u.m_a * fluid.coefficients().cp_a;
    std::array<double, 3> mean{};
    double t_in = u.t_a;
    for (int j = 2; j >= 0; --j) {
        const double k = len[j] * detail::pi * p.d_o * p.alpha_o[j];
        // 0 = k (T_w - (T_in + T_out)/2) + mc (T_in - T_out)
        const double t_out = (k * t_w[j] + (mc - 0.5 * k) * t_in) / (mc + 0.5 * k);
        mean[j] = 0.5 * (t_in + t_out);
        t_in = t_out;
    }
    return mean;
}

inline std::array<double, 4> evap_rhs(const EvaporatorState& s, const EvaporatorInputs& u,
                                      const PlantParams& p, const Fluid& fluid) {
    const RegionMeans rm = fluid.region_means(s.p_e, u.h_in, s.h_o);
    const double h_l = fluid.sat_enthalpies(s.p_e).h_l;
    const auto t_a = waste_heat_means(s, u, p, fluid);
    const auto len = detail::region_lengths(s, p);
    const std::array<double, 3> t_w{s.t_w1, s.t_w2, s.t_w3};
    const double pi = detail::pi;

    std::array<double, 4> d{};
    for (int j = 0; j < 3; ++j) {
        const double num = pi * p.d_i * len[j] * p.alpha_i[j] * (rm.t_bar[j] - t_w[j]) +
                           pi * p.d_o * len[j] * p.alpha_o[j] * (t_a[j] - t_w[j]);
        d[j] = num / (p.wall_capacity * len[j]);
    }
    const double q1 = (u.h_in - h_l) * u.m_in + pi * p.d_i * s.l1 * p.alpha_i[0] * (s.t_w1 - rm.t_bar[0]);
    const double h_ref = p.l1_reference == L1Reference::inlet ? u.h_in : rm.h_m;
    d[3] = q1 / (0.5 * p.area * rm.rho_bar[0] * (h_ref - h_l));
    return d;
}

inline std::array<double, 3> evap_residual(const EvaporatorState& s, const EvaporatorInputs& u,
                                           const PlantParams& p, const Fluid& fluid) {
    const RegionMeans rm = fluid.region_means(s.p_e, u.h_in, s.h_o);
    const auto [h_l, h_g] = fluid.sat_enthalpies(s.p_e);
    const auto len = detail::region_lengths(s, p);
    const double pi = detail::pi;
    const double a = p.area;
    const double r1 = rm.rho_bar[0], r3 = rm.rho_bar[2];

    const double q1 = (u.h_in - h_l) * u.m_in + pi * p.d_i * len[0] * p.alpha_i[0] * (s.t_w1 - rm.t_bar[0]);
    const double q2 = pi * p.d_i * len[1] * p.alpha_i[1] * (s.t_w2 - rm.t_bar[1]);
    const double q3 = pi * p.d_i * len[2] * p.alpha_i[2] * (s.t_w3 - rm.t_bar[2]);
    const double lead = 0.5 * a * r1 * (u.h_in - h_l);

    const double g1 = a * (r1 * h_l - r3 * h_g) * q1 - lead * (h_l * u.m_in - h_g * u.m_o + q2);
    const double g2 = 0.5 * a * r3 * (h_g - s.h_o) * q1 - lead * ((h_g - s.h_o) * u.m_o + q3);
    const double g3 = a * (r1 - r3) * q1 - lead * (u.m_in - u.m_o);
    return {g1 * p.residual_scale[0], g2 * p.residual_scale[1], g3 * p.residual_scale[2]};
}

// Outlet mass flow as a function of the algebraic pressure/enthalpy; lets the
// expander close the mass balance inside the Newton iteration.
using OutletFlow = std::function<double(double p_e, double h_o)>;

struct AlgebraicSolveResult {
    EvaporatorState state;
    int iterations = 0;
    double residual = 0.0;  // inf-norm of the scaled residual
};

// Damped Newton on (l2, p_e, h_o) with a forward-difference Jacobian. Differential
// fields are never modified. `outlet` (optional) recomputes m_o at each trial point.
inline AlgebraicSolveResult solve_algebraic(const EvaporatorState& guess, const EvaporatorInputs& inputs,
                                            const PlantParams& p, const Fluid& fluid, double tol,
                                            int max_iter, const OutletFlow& outlet = {}) {
    constexpr std::array<double, 3> unit{1.0, 1.0e5, 1.0e4};
    auto with = [&](EvaporatorState s, const Eigen::Vector3d& z) {
        s.l2 = z[0] * unit[0];
        s.p_e = z[1] * unit[1];
        s.h_o = z[2] * unit[2];
        return s;
    };
    // nullopt when the trial point leaves the admissible region
    auto residual = [&](const EvaporatorState& s) -> std::optional<Eigen::Vector3d> {
        if (state_violation(s, p, fluid)) return std::nullopt;
        EvaporatorInputs u = inputs;
        if (outlet) u.m_o = outlet(s.p_e, s.h_o);
        try {
            const auto g = evap_residual(s, u, p, fluid);
            Eigen::Vector3d r(g[0], g[1], g[2]);
            if (!r.allFinite()) return std::nullopt;
            return r;
        } catch (const RegionCollapse&) {
            return std::nullopt;
        } catch (const DomainError&) {
            return std::nullopt;
        }
    };

    EvaporatorState x = guess;
    Eigen::Vector3d z(x.l2 / unit[0], x.p_e / unit[1], x.h_o / unit[2]);
    auto r0 = residual(x);
    if (!r0) throw SolverError("solve_algebraic: initial guess outside admissible region",
                               std::numeric_limits<double>::infinity());
    Eigen::Vector3d r = *r0;
    double norm = r.lpNorm<Eigen::Infinity>();

    for (int it = 0; it <= max_iter; ++it) {
        if (norm < tol) return {x, it, norm};
        if (it == max_iter) break;

        Eigen::Matrix3d jac;
        for (int k = 0; k < 3; ++k) {
            Eigen::Vector3d zp = z;
            double h = 1e-7 * std::max(std::abs(z[k]), 1.0);
            zp[k] += h;
            auto rp = residual(with(x, zp));
            if (!rp) {  // at the admissible boundary: take a backward difference
                zp[k] = z[k] - h;
                rp = residual(with(x, zp));
                h = -h;
                if (!rp) throw SolverError("solve_algebraic: Jacobian probe left admissible region", norm);
            }
            jac.col(k) = (*rp - r) / h;
        }
        const Eigen::Vector3d dz = jac.partialPivLu().solve(-r);
        if (!dz.allFinite()) throw SolverError("solve_algebraic: singular Jacobian", norm);

        double lambda = 1.0;
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt, lambda *= 0.5) {
            const Eigen::Vector3d zt = z + lambda * dz;
            const EvaporatorState xt = with(x, zt);
            const auto rt = residual(xt);
            if (!rt) continue;
            const double nt = rt->lpNorm<Eigen::Infinity>();
            if (nt < (1.0 - 1e-4 * lambda) * norm || nt < tol) {
                z = zt;
                x = xt;
                r = *rt;
                norm = nt;
                accepted = true;
                break;
            }
        }
        if (!accepted) throw SolverError("solve_algebraic: backtracking exhausted", norm);
    }
    std::ostringstream os;
    os << "solve_algebraic: no convergence after " << max_iter << " iterations (|g|=" << norm << ")";
    throw SolverError(os.str(), norm);
}

struct SpeedClamp {
    double value;
    bool clamped;
};

inline SpeedClamp clamp_speed(double omega, double lo, double hi) {
    if (omega < lo) return {lo, true};
    if (omega > hi) return {hi, true};
    return {omega, false};
}

inline double pump_flow(double omega_p, double rho_in, const PlantParams& p) {
    return p.pump_eta_vol * p.pump_disp * rho_in * omega_p;
}

inline double pump_power(double m_p, double p_out, double p_in, double rho_in, const PlantParams& p) {
    return m_p * (p_out - p_in) / (rho_in * p.pump_eta_is);
}

struct ExpanderOutput {
    double m_x;      // kg/s
    double h_x_out;  // J/kg
    double w_x;      // W
};

inline double expander_inlet_density(double p_e, double h_x_in, const Fluid& fluid) {
    return fluid.density_from_ph(p_e, h_x_in);
}

inline ExpanderOutput expander_model(double omega_x, double p_e, double h_x_in, const PlantParams& p,
                                     const Fluid& fluid) {
    if (!(h_x_in > fluid.sat_enthalpies(p_e).h_g))
        throw RegionCollapse("expander_model: inlet is not superheated");
    const double rho = expander_inlet_density(p_e, h_x_in, fluid);
    const double m_x = p.exp_eta_vol * p.exp_swept_vol * rho * omega_x;
    const double t_in = fluid.temperature_from_ph(p_e, h_x_in);
    const double h_is =
        h_x_in - fluid.coefficients().cp_vap * t_in * (1.0 - std::pow(p.p_cond / p_e, p.exp_kappa));
    const double h_out = h_x_in + p.exp_eta_is * (h_is - h_x_in);
    return {m_x, h_out, (h_x_in - h_out) * m_x};
}

struct PumpInlet {
    double h;    // J/kg
    double rho;  // kg/m3
};

// Perfect condensation: saturated liquid at p_cond, subcooled by a fixed margin.
inline PumpInlet pump_inlet(const PlantParams& p, const Fluid& fluid) {
    const double t = fluid.t_sat(p.p_cond) - p.subcooling;
    const double h = fluid.sat_enthalpies(p.p_cond).h_l - fluid.coefficients().cp_liq * p.subcooling;
    return {h, fluid.liquid_density(t)};
}

inline double pump_outlet_enthalpy(const PumpInlet& in, double p_e, const PlantParams& p) {
    return in.h + (p_e - p.p_cond) / (in.rho * p.pump_eta_is);
}

struct PlantOutputs {
    double m_in = 0.0, h_in = 0.0, m_o = 0.0;
    double w_p = 0.0, w_x = 0.0;
    double omega_p = 0.0, omega_x = 0.0;
    bool pump_clamped = false, expander_clamped = false;
    int newton_iterations = 0;
    double residual = 0.0;
};

struct PlantStepResult {
    EvaporatorState state;
    double sh = 0.0;
    PlantOutputs outputs;
};

inline double superheat(const EvaporatorState& s, const Fluid& fluid) {
    return fluid.temperature_from_ph(s.p_e, s.h_o) - fluid.t_sat(s.p_e);
}

struct SolverSettings {
    double tol = 1e-10;
    int max_iter = 50;
};

class Plant {
public:
    Plant(const Fluid& fluid, const PlantParams& params, SolverSettings solver = {})
        : fluid_(fluid), params_(params), solver_(solver) {}

    const Fluid& fluid() const noexcept { return fluid_; }
    const PlantParams& params() const noexcept { return params_; }
    const SolverSettings& solver() const noexcept { return solver_; }

    // Inputs seen by the evaporator for a given state and actuator speeds.
    EvaporatorInputs inputs_for(const EvaporatorState& s, double omega_p, double omega_x, double m_a,
                                double t_a) const {
        const PumpInlet in = pump_inlet(params_, fluid_);
        EvaporatorInputs u;
        u.m_in = pump_flow(omega_p, in.rho, params_);
        u.h_in = pump_outlet_enthalpy(in, s.p_e, params_);
        u.m_o = expander_model(omega_x, s.p_e, s.h_o, params_, fluid_).m_x;
        u.m_a = m_a;
        u.t_a = t_a;
        return u;
    }

    OutletFlow expander_outlet(double omega_x) const {
        return [this, omega_x](double p_e, double h_o) {
            return expander_model(omega_x, p_e, h_o, params_, fluid_).m_x;
        };
    }

    PlantStepResult step(const EvaporatorState& state, double omega_p_cmd, double omega_x_cmd, double m_a,
                         double t_a, double dt) const {
        if (!(dt >= 0.0)) throw DomainError("plant_step: dt must be non-negative");
        const SpeedClamp wp = clamp_speed(omega_p_cmd, params_.omega_p_min, params_.omega_p_max);
        const SpeedClamp wx = clamp_speed(omega_x_cmd, params_.omega_x_min, params_.omega_x_max);
        PlantStepResult out;
        out.outputs.omega_p = wp.value;
        out.outputs.omega_x = wx.value;
        out.outputs.pump_clamped = wp.clamped;
        out.outputs.expander_clamped = wx.clamped;

        try {
            if (auto bad = state_violation(state, params_, fluid_)) throw PlantFault("plant_step: invalid state: " + *bad, state);
            EvaporatorInputs u = inputs_for(state, wp.value, wx.value, m_a, t_a);
            EvaporatorState next = state;
            int iters = 0;
            double res = 0.0;
            if (dt > 0.0) {
                const auto d = evap_rhs(state, u, params_, fluid_);
                next.t_w1 += dt * d[0];
                next.t_w2 += dt * d[1];
                next.t_w3 += dt * d[2];
                next.l1 += dt * d[3];
                if (auto bad = state_violation(next, params_, fluid_))
                    throw PlantFault("plant_step: differential step left regime: " + *bad, next);
                const auto sol = solve_algebraic(next, u, params_, fluid_, solver_.tol, solver_.max_iter,
                                                 expander_outlet(wx.value));
                next = sol.state;
                iters = sol.iterations;
                res = sol.residual;
            }
            const PumpInlet in = pump_inlet(params_, fluid_);
            const ExpanderOutput ex = expander_model(wx.value, next.p_e, next.h_o, params_, fluid_);
            out.state = next;
            out.sh = superheat(next, fluid_);
            out.outputs.m_in = u.m_in;
            out.outputs.h_in = u.h_in;
            out.outputs.m_o = ex.m_x;
            out.outputs.w_x = ex.w_x;
            out.outputs.w_p = pump_power(u.m_in, next.p_e, params_.p_cond, in.rho, params_);
            out.outputs.newton_iterations = iters;
            out.outputs.residual = res;
            return out;
        } catch (const PlantFault&) {
            throw;
        } catch (const Error& e) {
            throw PlantFault(std::string("plant_step: ") + e.what(), state);
        }
    }

    // Steady operating point for constant speeds and disturbance. A direct
    // construction from the steady energy balances (one bisection in outlet
    // superheat, one in pressure) followed by an algebraic polish.
    EvaporatorState find_equilibrium(double omega_p, double omega_x, double m_a, double t_a) const {
        const PumpInlet in = pump_inlet(params_, fluid_);
        const double m = pump_flow(omega_p, in.rho, params_);
        const double mc = m_a * fluid_.coefficients().cp_a;
        const auto& c = fluid_.coefficients();
        const double pi = detail::pi;

        auto pressure_for = [&](double dt_sh) {
            // m_o(P) increasing in P for fixed outlet superheat
            auto f = [&](double pe) {
                const double h_o = fluid_.sat_enthalpies(pe).h_g + c.cp_vap * dt_sh;
                return params_.exp_eta_vol * params_.exp_swept_vol * fluid_.density_from_ph(pe, h_o) * omega_x - m;
            };
            double lo = c.p_min * (1.0 + 1e-9), hi = c.p_max * (1.0 - 1e-9);
            if (f(lo) > 0.0 || f(hi) < 0.0) return std::optional<double>{};
            for (int i = 0; i < 200 && hi - lo > 1e-10 * hi; ++i) {
                const double mid = 0.5 * (lo + hi);
                (f(mid) > 0.0 ? hi : lo) = mid;
            }
            return std::optional<double>{0.5 * (lo + hi)};
        };

        struct Design {
            EvaporatorState s;
            double excess;  // sum of lengths minus l_total
        };
        auto design = [&](double dt_sh) -> std::optional<Design> {
            const auto pe = pressure_for(dt_sh);
            if (!pe) return std::nullopt;
            const auto [h_l, h_g] = fluid_.sat_enthalpies(*pe);
            const double h_o = h_g + c.cp_vap * dt_sh;
            const double h_in = pump_outlet_enthalpy(in, *pe, params_);
            if (!(h_in < h_l)) return std::nullopt;
            const RegionMeans rm = fluid_.region_means(*pe, h_in, h_o);
            const std::array<double, 3> q{m * (h_l - h_in), m * (h_g - h_l), m * (h_o - h_g)};
            std::array<double, 3> len{}, tw{};
            double t_in = t_a;
            for (int j = 2; j >= 0; --j) {
                const double ui = pi * params_.d_i * params_.alpha_i[j];
                const double uo = pi * params_.d_o * params_.alpha_o[j];
                const double u_series = 1.0 / (1.0 / ui + 1.0 / uo);
                const double t_am = t_in - q[j] / (2.0 * mc);
                if (!(t_am > rm.t_bar[j])) return Design{{}, std::numeric_limits<double>::infinity()};
                len[j] = q[j] / (u_series * (t_am - rm.t_bar[j]));
                tw[j] = (ui * rm.t_bar[j] + uo * t_am) / (ui + uo);
                t_in -= q[j] / mc;
            }
            EvaporatorState s{tw[0], tw[1], tw[2], len[0], len[1], *pe, h_o};
            return Design{s, len[0] + len[1] + len[2] - params_.l_total};
        };

        // scan outlet superheat for a sign change, then bisect
        double prev_t = 0.0;
        std::optional<Design> prev;
        const int scan = 300;
        for (int i = 1; i <= scan; ++i) {
            const double dt_sh = 0.05 + 250.0 * i / scan;
            const auto d = design(dt_sh);
            if (d && prev && prev->excess < 0.0 && d->excess >= 0.0) {
                double lo = prev_t, hi = dt_sh;
                Design best = *prev;
                for (int k = 0; k < 200 && hi - lo > 1e-12; ++k) {
                    const double mid = 0.5 * (lo + hi);
                    const auto dm = design(mid);
                    if (!dm) break;
                    if (dm->excess < 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    best = *dm;
                }
                EvaporatorState s = best.s;
                const EvaporatorInputs u = inputs_for(s, omega_p, omega_x, m_a, t_a);
                return solve_algebraic(s, u, params_, fluid_, solver_.tol, solver_.max_iter,
                                       expander_outlet(omega_x))
                    .state;
            }
            prev = d;
            prev_t = dt_sh;
        }
        throw SolverError("find_equilibrium: no three-zone steady state for these conditions", 0.0);
    }

private:
    Fluid fluid_;
    PlantParams params_;
    SolverSettings solver_;
};

}  // namespace orc
