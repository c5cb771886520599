#pragma once

// Independent transcription of the evaporator equations, shared by the unit
// tests and the acceptance runner.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <random>

#include "orc/plant.hpp"

namespace orc::oracle {

constexpr double kPi = 3.14159265358979323846;


// Counter-current waste-heat balance as one joint 3x3 linear system in the
// outlet temperatures (j = 3 sees t_a, j = 2 sees the j = 3 outlet, ...).
inline std::array<double, 3> oracle_waste_heat(const EvaporatorState& s, const EvaporatorInputs& u, const PlantParams& p,
                                        double cp_a) {
    const double L[3] = {s.l1, s.l2, p.l_total - s.l1 - s.l2};
    const double tw[3] = {s.t_w1, s.t_w2, s.t_w3};
    const double mc = u.m_a * cp_a;
    // unknown x = (out1, out2, out3); inlet of j is out_{j+1}, inlet of 3 is t_a
    Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
    Eigen::Vector3d rhs;
    for (int j = 0; j < 3; ++j) {
        const double k = L[j] * kPi * p.d_o * p.alpha_o[j];
        // k*(tw - (in + out)/2) + mc*(in - out) = 0
        A(j, j) = -0.5 * k - mc;
        if (j < 2) {
            A(j, j + 1) = -0.5 * k + mc;
            rhs[j] = -k * tw[j];
        } else {
            rhs[j] = -k * tw[j] - (-0.5 * k + mc) * u.t_a;
        }
    }
    const Eigen::Vector3d out = A.lu().solve(rhs);
    return {0.5 * (out[1] + out[0]), 0.5 * (out[2] + out[1]), 0.5 * (u.t_a + out[2])};
}

struct Scratch {
    std::array<double, 4> f;
    std::array<double, 3> g;
};

// Second transcription of the evaporator rows written from the printed equations.
inline Scratch scratch_transcription(const EvaporatorState& s, const EvaporatorInputs& u, const PlantParams& P,
                              const Fluid& fl) {
    const auto& c = fl.coefficients();
    const double Ts = fl.t_sat(s.p_e);
    const double hl = c.hl_c0 + c.hl_c1 * Ts, hg = c.hg_c0 + c.hg_c1 * Ts;
    const double rho_l = c.rho_l_c0 + c.rho_l_c1 * Ts;
    const double rho_g = c.rho_g_ref * std::pow(s.p_e / c.p_ref, c.rho_g_exp);
    const double T_in = Ts - (hl - u.h_in) / c.cp_liq;
    const double T_o = Ts + (s.h_o - hg) / c.cp_vap;
    const double rho1 = 0.5 * ((c.rho_l_c0 + c.rho_l_c1 * T_in) + rho_l);
    const double rho3 = 0.5 * (rho_g + rho_g * Ts / T_o);
    const double Tb1 = 0.5 * (T_in + Ts), Tb2 = Ts, Tb3 = 0.5 * (Ts + T_o);
    const double hm = 0.5 * (hl + hg);
    const double L1 = s.l1, L2 = s.l2, L3 = P.l_total - s.l1 - s.l2;
    const double Di = P.d_i, Do = P.d_o, A = P.area;
    const auto& ai = P.alpha_i;
    const auto& ao = P.alpha_o;
    const auto Ta = oracle_waste_heat(s, u, P, c.cp_a);
    const double Cw = P.wall_capacity;

    Scratch r;
    r.f[0] = (kPi * Di * L1 * ai[0] * (Tb1 - s.t_w1) + kPi * Do * L1 * ao[0] * (Ta[0] - s.t_w1)) / (Cw * L1);
    r.f[1] = (kPi * Di * L2 * ai[1] * (Tb2 - s.t_w2) + kPi * Do * L2 * ao[1] * (Ta[1] - s.t_w2)) / (Cw * L2);
    r.f[2] = (kPi * Di * L3 * ai[2] * (Tb3 - s.t_w3) + kPi * Do * L3 * ao[2] * (Ta[2] - s.t_w3)) / (Cw * L3);
    const double href = P.l1_reference == L1Reference::inlet ? u.h_in : hm;
    r.f[3] = ((u.h_in - hl) * u.m_in + kPi * Di * L1 * ai[0] * (s.t_w1 - Tb1)) / (0.5 * A * rho1 * (href - hl));

    const double B1 = (u.h_in - hl) * u.m_in + kPi * Di * L1 * ai[0] * (s.t_w1 - Tb1);
    r.g[0] = A * (rho1 * hl - rho3 * hg) * B1 -
             0.5 * A * rho1 * (u.h_in - hl) * (hl * u.m_in - hg * u.m_o + kPi * Di * L2 * ai[1] * (s.t_w2 - Tb2));
    r.g[1] = 0.5 * A * rho3 * (hg - s.h_o) * B1 -
             0.5 * A * rho1 * (u.h_in - hl) * ((hg - s.h_o) * u.m_o + kPi * Di * L3 * ai[2] * (s.t_w3 - Tb3));
    r.g[2] = A * (rho1 - rho3) * B1 - 0.5 * A * rho1 * (u.h_in - hl) * (u.m_in - u.m_o);
    for (int k = 0; k < 3; ++k) r.g[k] *= P.residual_scale[k];
    return r;
}

struct Sample {
    EvaporatorState s;
    EvaporatorInputs u;
};

inline Sample random_valid(std::mt19937_64& gen, const Fluid& fl) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const auto& c = fl.coefficients();
    Sample x;
    x.s.p_e = 6e5 + 1.2e6 * U(gen);
    const double ts = fl.t_sat(x.s.p_e);
    const auto [hl, hg] = fl.sat_enthalpies(x.s.p_e);
    x.s.l1 = 2.0 + 8.0 * U(gen);
    x.s.l2 = 8.0 + 12.0 * U(gen);
    x.s.h_o = hg + c.cp_vap * (2.0 + 40.0 * U(gen));
    x.s.t_w1 = ts + 5.0 + 20.0 * U(gen);
    x.s.t_w2 = ts + 5.0 + 20.0 * U(gen);
    x.s.t_w3 = ts + 20.0 + 30.0 * U(gen);
    x.u.h_in = hl - c.cp_liq * (10.0 + 60.0 * U(gen));
    x.u.m_in = 0.05 + 0.05 * U(gen);
    x.u.m_o = 0.05 + 0.05 * U(gen);
    x.u.m_a = 0.35 + 0.2 * U(gen);
    x.u.t_a = 400.0 + 60.0 * U(gen);
    return x;
}


}  // namespace orc::oracle
