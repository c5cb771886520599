#pragma once

// Superheat-tracking MDP over either the mechanistic plant or the surrogate.
// Timing: observation k carries m_a[k] and setpoint[k]; action a_k drives the
// transition to k+1 under disturbance sample k+1.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "orc/csv.hpp"
#include "orc/errors.hpp"
#include "orc/plant.hpp"
#include "orc/rng.hpp"
#include "orc/surrogate.hpp"

namespace orc {

struct RewardConfig {
    double c_err = 0.8;
    double c_du = 0.8;
    std::array<double, 7> thresholds{0.05, 0.1, 0.5, 1.0, 2.0, 3.5, 5.0};
    std::array<double, 8> values{300.0, 100.0, 50.0, 0.0, -5.0, -20.0, -50.0, -100.0};
    double fault_penalty = -100.0;

    void validate() const {
        for (std::size_t k = 1; k < thresholds.size(); ++k)
            if (!(thresholds[k] > thresholds[k - 1])) throw ConfigError("reward: thresholds must be strictly increasing");
        if (!(thresholds[0] > 0.0)) throw ConfigError("reward: thresholds must be positive");
    }
};

inline double discrete_reward(double abs_e, const RewardConfig& cfg) {
    for (std::size_t k = 0; k < cfg.thresholds.size(); ++k)
        if (abs_e < cfg.thresholds[k]) return cfg.values[k];
    return cfg.values.back();
}

inline double reward(double e, double u, double u_prev, const RewardConfig& cfg) {
    return -cfg.c_err * e * e - cfg.c_du * std::abs(u - u_prev) + discrete_reward(std::abs(e), cfg);
}

struct ActionMap {
    double omega_min = 36.0;
    double omega_max = 42.0;

    SpeedClamp speed(double a) const {
        const bool clamped = a < -1.0 || a > 1.0;
        const double ac = std::clamp(a, -1.0, 1.0);
        return {0.5 * (omega_min + omega_max) + 0.5 * ac * (omega_max - omega_min), clamped};
    }
    double action(double omega) const {
        return (omega - 0.5 * (omega_min + omega_max)) / (0.5 * (omega_max - omega_min));
    }
};

struct DisturbanceConfig {
    double m_a_min = 0.35, m_a_max = 0.55;
    double m_a_nominal = 0.45;
    double walk_sigma = 0.004;   // kg/s per step
    double reversion = 0.01;     // pull towards nominal per step
    double white_sigma = 0.0;    // added on top of the walk, then clipped
    double t_a = 430.0;          // K
    double t_a_step_prob = 0.0;  // per-step chance of a t_a step
    double t_a_step = 10.0;      // K, sign random
    double t_a_min = 400.0, t_a_max = 460.0;

    void validate() const {
        if (!(m_a_min > 0.0 && m_a_max > m_a_min)) throw ConfigError("disturbance: need 0 < m_a_min < m_a_max");
        if (!(m_a_nominal >= m_a_min && m_a_nominal <= m_a_max)) throw ConfigError("disturbance: m_a_nominal outside band");
        if (walk_sigma < 0.0 || white_sigma < 0.0 || reversion < 0.0 || reversion > 1.0)
            throw ConfigError("disturbance: sigma/reversion out of range");
        if (!(t_a >= t_a_min && t_a <= t_a_max)) throw ConfigError("disturbance: t_a outside its band");
    }
};

// Clipped mean-reverting Gaussian walk on m_a, optional white noise and t_a steps.
// Returns n samples; the first is drawn uniformly inside the band.
inline std::vector<std::pair<double, double>> disturbance_trajectory(const DisturbanceConfig& d, std::size_t n, Rng& rng,
                                                                     bool random_start = true) {
    std::vector<std::pair<double, double>> out;
    out.reserve(n);
    double m = random_start ? rng.uniform(d.m_a_min, d.m_a_max) : d.m_a_nominal;
    double ta = d.t_a;
    for (std::size_t k = 0; k < n; ++k) {
        if (k > 0) {
            m = std::clamp(m + d.reversion * (d.m_a_nominal - m) + d.walk_sigma * rng.normal(), d.m_a_min, d.m_a_max);
            if (d.t_a_step_prob > 0.0 && rng.uniform() < d.t_a_step_prob)
                ta = std::clamp(ta + (rng.uniform() < 0.5 ? -d.t_a_step : d.t_a_step), d.t_a_min, d.t_a_max);
        }
        double applied = m;
        if (d.white_sigma > 0.0) applied = std::clamp(m + d.white_sigma * rng.normal(), d.m_a_min, d.m_a_max);
        out.emplace_back(applied, ta);
    }
    return out;
}

enum class EpisodeMode { fixed_setpoint_200, multi_setpoint_500 };

inline std::string to_string(EpisodeMode m) {
    return m == EpisodeMode::fixed_setpoint_200 ? "fixed" : "multi";
}

inline EpisodeMode episode_mode_from_string(const std::string& s) {
    if (s == "fixed" || s == "fixed-setpoint-200") return EpisodeMode::fixed_setpoint_200;
    if (s == "multi" || s == "multi-setpoint-500") return EpisodeMode::multi_setpoint_500;
    throw ConfigError("unknown episode mode '" + s + "' (expected fixed or multi)");
}

struct EpisodeConfig {
    double setpoint_min = 10.0, setpoint_max = 30.0;  // K
    int setpoint_interval = 100;                      // steps
    double init_action_band = 0.2;                    // initial speed drawn from a0 in [-band, band]
    DisturbanceConfig disturbance;
    double omega_x = 50.0;  // rev/s, held constant
    double dt = 1.0;        // s

    void validate() const {
        if (!(setpoint_max >= setpoint_min && setpoint_min > 0.0)) throw ConfigError("episode: bad setpoint band");
        if (setpoint_interval < 1) throw ConfigError("episode: setpoint_interval must be >= 1");
        if (init_action_band < 0.0 || init_action_band > 1.0) throw ConfigError("episode: init_action_band in [0, 1]");
        if (!(dt > 0.0)) throw ConfigError("episode: dt must be positive");
        disturbance.validate();
    }
};

struct EpisodeSpec {
    EpisodeMode mode = EpisodeMode::fixed_setpoint_200;
    int max_steps = 200;
    std::vector<std::pair<int, double>> setpoint_schedule;  // (first step, value)
    std::vector<std::pair<double, double>> disturbance;    // (m_a, t_a), max_steps + 1 samples
    double initial_action = 0.0;

    double setpoint_at(int k) const {
        double sp = setpoint_schedule.front().second;
        for (const auto& [step, v] : setpoint_schedule)
            if (step <= k) sp = v;
        return sp;
    }
};

inline EpisodeSpec make_episode(EpisodeMode mode, const EpisodeConfig& cfg, std::uint64_t seed) {
    EpisodeSpec s;
    s.mode = mode;
    s.max_steps = mode == EpisodeMode::fixed_setpoint_200 ? 200 : 500;
    Rng sp_rng(derive_seed(seed, "setpoints"));
    if (mode == EpisodeMode::fixed_setpoint_200) {
        s.setpoint_schedule.emplace_back(0, sp_rng.uniform(cfg.setpoint_min, cfg.setpoint_max));
    } else {
        for (int k = 0; k < s.max_steps; k += cfg.setpoint_interval)
            s.setpoint_schedule.emplace_back(k, sp_rng.uniform(cfg.setpoint_min, cfg.setpoint_max));
    }
    Rng d_rng(derive_seed(seed, "disturbance"));
    s.disturbance = disturbance_trajectory(cfg.disturbance, std::size_t(s.max_steps) + 1, d_rng);
    Rng i_rng(derive_seed(seed, "initial"));
    s.initial_action = cfg.init_action_band > 0.0 ? i_rng.uniform(-cfg.init_action_band, cfg.init_action_band) : 0.0;
    return s;
}

inline ObsVec plant_observation(const EvaporatorState& s, const Fluid& fluid, double m_a, double omega_p, double setpoint) {
    const double sh = superheat(s, fluid);
    return {s.p_e, fluid.temperature_from_ph(s.p_e, s.h_o), m_a, omega_p, sh, sh - setpoint};
}

class BackendFault : public Error {
public:
    using Error::Error;
};

class Backend {
public:
    virtual ~Backend() = default;
    // Initial observation for speed omega_p held at steady state under (m_a, t_a).
    virtual ObsVec reset(double omega_p, double action, double m_a, double t_a, double setpoint) = 0;
    // Advance one interval; throws BackendFault when the model leaves its valid regime.
    virtual ObsVec step(double omega_p, double action, double m_a, double t_a, double setpoint) = 0;
    virtual std::string name() const = 0;
};

class PlantBackend : public Backend {
public:
    PlantBackend(const Plant& plant, double omega_x, double dt) : plant_(plant), omega_x_(omega_x), dt_(dt) {}

    ObsVec reset(double omega_p, double, double m_a, double t_a, double setpoint) override {
        try {
            state_ = plant_.find_equilibrium(omega_p, omega_x_, m_a, t_a);
        } catch (const Error& e) {
            throw BackendFault(std::string("plant reset: ") + e.what());
        }
        return plant_observation(state_, plant_.fluid(), m_a, omega_p, setpoint);
    }

    ObsVec step(double omega_p, double, double m_a, double t_a, double setpoint) override {
        try {
            const PlantStepResult r = plant_.step(state_, omega_p, omega_x_, m_a, t_a, dt_);
            state_ = r.state;
            last_ = r.outputs;
            return plant_observation(state_, plant_.fluid(), m_a, r.outputs.omega_p, setpoint);
        } catch (const PlantFault& f) {
            throw BackendFault(f.what());
        }
    }

    std::string name() const override { return "plant"; }
    const EvaporatorState& state() const noexcept { return state_; }
    const PlantOutputs& last_outputs() const noexcept { return last_; }

private:
    const Plant& plant_;
    double omega_x_, dt_;
    EvaporatorState state_{};
    PlantOutputs last_{};
};

// Dynamics come from the surrogate; the starting window is the plant's steady
// observation repeated W times. m_ai, omega_p and err are overwritten with their
// known values after each prediction.
class SurrogateBackend : public Backend {
public:
    SurrogateBackend(const SurrogateNet& net, const Plant& plant, double omega_x, double band_factor = 1.0)
        : net_(net), plant_(plant), omega_x_(omega_x), band_(band_factor) {}

    ObsVec reset(double omega_p, double action, double m_a, double t_a, double setpoint) override {
        EvaporatorState s;
        try {
            s = plant_.find_equilibrium(omega_p, omega_x_, m_a, t_a);
        } catch (const Error& e) {
            throw BackendFault(std::string("surrogate reset: ") + e.what());
        }
        const ObsVec o = plant_observation(s, plant_.fluid(), m_a, omega_p, setpoint);
        obs_.assign(std::size_t(net_.window()), o);
        act_.assign(std::size_t(net_.window()), action);
        return o;
    }

    ObsVec step(double omega_p, double action, double m_a, double, double setpoint) override {
        act_.back() = action;
        ObsVec next = net_.predict_next(obs_, act_);
        next[kMai] = m_a;
        next[kOmegaP] = omega_p;
        next[kErr] = next[kSh] - setpoint;
        const Normalizer& n = net_.normalizer();
        for (int c = 0; c < kObsDim; ++c) {
            const double lo = n.lo[c] - band_ * n.span(c), hi = n.hi[c] + band_ * n.span(c);
            if (!std::isfinite(next[c]) || next[c] < lo || next[c] > hi)
                throw BackendFault(std::string("surrogate prediction left trained range on channel ") + kObsNames[c]);
        }
        obs_.erase(obs_.begin());
        obs_.push_back(next);
        act_.erase(act_.begin());
        act_.push_back(action);
        return next;
    }

    std::string name() const override { return "surrogate"; }

private:
    const SurrogateNet& net_;
    const Plant& plant_;
    double omega_x_, band_;
    std::vector<ObsVec> obs_;
    std::vector<double> act_;
};

struct StepInfo {
    bool action_clamped = false;
    bool fault = false;
    std::string fault_message;
};

struct StepOutcome {
    ObsVec obs{};
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

class Env {
public:
    Env(Backend& backend, ActionMap map, RewardConfig reward) : backend_(backend), map_(map), reward_(reward) {}

    ObsVec reset(const EpisodeSpec& spec) {
        if (spec.setpoint_schedule.empty() || spec.disturbance.size() < std::size_t(spec.max_steps) + 1)
            throw EpisodeError("episode spec incomplete");
        spec_ = spec;
        k_ = 0;
        done_ = false;
        clamp_count_ = 0;
        const SpeedClamp w = map_.speed(spec.initial_action);
        u_prev_ = std::clamp(spec.initial_action, -1.0, 1.0);
        obs_ = backend_.reset(w.value, u_prev_, spec.disturbance[0].first, spec.disturbance[0].second, spec.setpoint_at(0));
        active_ = true;
        return obs_;
    }

    StepOutcome step(double a) {
        if (!active_) throw EpisodeError("env step called before reset");
        if (done_) throw EpisodeError("env step called after episode end");
        StepOutcome out;
        const SpeedClamp w = map_.speed(a);
        const double u = std::clamp(a, -1.0, 1.0);
        out.info.action_clamped = w.clamped;
        clamp_count_ += w.clamped ? 1 : 0;
        const int next = k_ + 1;
        const double sp = spec_.setpoint_at(next);
        try {
            obs_ = backend_.step(w.value, u, spec_.disturbance[std::size_t(next)].first,
                                 spec_.disturbance[std::size_t(next)].second, sp);
            out.reward = reward(obs_[kErr], u, u_prev_, reward_);
        } catch (const BackendFault& f) {
            out.info.fault = true;
            out.info.fault_message = f.what();
            out.reward = reward(obs_[kErr], u, u_prev_, reward_) + reward_.fault_penalty;
            done_ = true;
        }
        k_ = next;
        u_prev_ = u;
        if (k_ >= spec_.max_steps) done_ = true;
        out.obs = obs_;
        out.done = done_;
        return out;
    }

    int step_index() const noexcept { return k_; }
    double setpoint() const { return spec_.setpoint_at(k_); }
    const EpisodeSpec& spec() const noexcept { return spec_; }
    const ActionMap& action_map() const noexcept { return map_; }
    const RewardConfig& reward_config() const noexcept { return reward_; }
    int clamp_count() const noexcept { return clamp_count_; }
    bool done() const noexcept { return done_; }
    double previous_action() const noexcept { return u_prev_; }

private:
    Backend& backend_;
    ActionMap map_;
    RewardConfig reward_;
    EpisodeSpec spec_;
    ObsVec obs_{};
    int k_ = 0;
    bool done_ = false;
    bool active_ = false;
    int clamp_count_ = 0;
    double u_prev_ = 0.0;
};

struct EpisodeLogRow {
    int step;
    ObsVec obs;
    double action;
    double reward;
    double setpoint;
    bool clamped;
    bool fault;
};

inline CsvTable episode_table(const std::vector<EpisodeLogRow>& rows, std::vector<std::string> comments = {}) {
    CsvTable t;
    t.comments = std::move(comments);
    t.columns = {"step"};
    for (const char* n : kObsNames) t.columns.emplace_back(n);
    t.columns.insert(t.columns.end(), {"action", "reward", "setpoint", "clamped", "fault"});
    for (const auto& r : rows) {
        std::vector<double> v{double(r.step)};
        v.insert(v.end(), r.obs.begin(), r.obs.end());
        v.insert(v.end(), {r.action, r.reward, r.setpoint, r.clamped ? 1.0 : 0.0, r.fault ? 1.0 : 0.0});
        t.rows.push_back(std::move(v));
    }
    return t;
}

}  // namespace orc
