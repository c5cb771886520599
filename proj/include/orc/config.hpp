#pragma once

// Experiment configuration: one JSON document with sections. Missing keys keep
// their defaults; unknown keys and wrong types are rejected.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "orc/env.hpp"
#include "orc/errors.hpp"
#include "orc/pi_controller.hpp"
#include "orc/plant.hpp"
#include "orc/ppo.hpp"
#include "orc/rng.hpp"
#include "orc/thermo.hpp"

namespace orc {

using json = nlohmann::json;

struct DataConfig {
    int n_points = 10000;
    int setpoint_interval = 100;
    double white_sigma = 0.01;  // kg/s on the applied m_a
    double init_action = 0.0;
};

struct SurrogateConfig {
    int hidden1 = 80;
    int hidden2 = 100;
    double dropout = 0.2;
    int window = 10;
    int n_train = 8000;
    int max_epochs = 100;
    int batch = 64;
    double lr = 1e-3;
    int patience = 8;
    double time_budget_s = 570.0;
    double mse_threshold = 0.05;  // pre-training refuses surrogates above this
    int free_run_steps = 200;
    double fault_band = 1.0;  // allowed excursion beyond the training range, in spans
};

struct AgentConfig {
    std::vector<int> hidden{300, 200};
    ObsVec obs_offset{1.2e6, 410.0, 0.45, 39.0, 20.0, 0.0};
    ObsVec obs_scale{2.0e5, 20.0, 0.1, 3.0, 10.0, 10.0};
};

struct PhaseConfig {
    int episodes = 0;
    double sigma = 0.1;
    std::string mode = "fixed";
};

struct EvaluationConfig {
    int scenarios = 5;
    std::uint64_t seed = 7919000001ull;
    std::string mode = "multi";
    double settle_band = 1.0;  // K
};

struct SweepConfig {
    std::vector<double> sigmas{0.05, 0.1, 0.2, 0.35};
    int episodes = 200;
    int eval_scenarios = 5;
};

struct ExperimentConfig {
    FluidCoefficients fluid;
    PlantParams plant;
    SolverSettings solver;
    PiState pi;
    EpisodeConfig episode;
    RewardConfig reward;
    DataConfig data;
    SurrogateConfig surrogate;
    PpoHyper ppo;
    AgentConfig agent;
    PhaseConfig pretrain{1000, 0.2, "fixed"};
    PhaseConfig finetune{200, 0.1, "fixed"};
    PhaseConfig scratch{2000, 0.1, "fixed"};
    EvaluationConfig evaluation;
    SweepConfig sweep;
    std::uint64_t seed = 1;
    int n_seeds = 3;
    std::string output_dir = "runs/default";

    std::vector<std::uint64_t> run_seeds() const {
        std::vector<std::uint64_t> s;
        for (int i = 0; i < n_seeds; ++i) s.push_back(seed + std::uint64_t(i));
        return s;
    }
};

namespace detail {

// Reads keys of one JSON object, remembering which were consumed.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string where = path_ + "." + key;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(where + ": expected boolean");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError(where + ": expected integer");
                if constexpr (std::is_unsigned_v<T>)
                    if (!it->is_number_unsigned()) throw ConfigError(where + ": expected non-negative integer");
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError(where + ": expected number");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError(where + ": expected string");
            }
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }

    template <class T, std::size_t N>
    void get_array(const char* key, std::array<T, N>& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string where = path_ + "." + key;
        if (!it->is_array() || it->size() != N)
            throw ConfigError(where + ": expected array of " + std::to_string(N) + " numbers");
        for (std::size_t k = 0; k < N; ++k) {
            if (!(*it)[k].is_number()) throw ConfigError(where + ": expected numbers");
            out[k] = (*it)[k].template get<T>();
        }
    }

    template <class T>
    void get_vector(const char* key, std::vector<T>& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        const std::string where = path_ + "." + key;
        if (!it->is_array() || it->empty()) throw ConfigError(where + ": expected non-empty array");
        out.clear();
        for (const auto& v : *it) {
            if (std::is_integral_v<T> ? !v.is_number_integer() : !v.is_number())
                throw ConfigError(where + ": wrong element type");
            out.push_back(v.template get<T>());
        }
    }

    const json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    std::string path(const char* key) const { return path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_phase(const json* j, const std::string& path, PhaseConfig& p) {
    if (!j) return;
    Section s(*j, path);
    s.get("episodes", p.episodes);
    s.get("sigma", p.sigma);
    s.get("mode", p.mode);
    s.finish();
}

inline json phase_json(const PhaseConfig& p) { return {{"episodes", p.episodes}, {"sigma", p.sigma}, {"mode", p.mode}}; }

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
    Fluid(c.fluid).validate();
    c.plant.validate();
    if (!(c.plant.p_cond >= c.fluid.p_min && c.plant.p_cond <= c.fluid.p_max))
        throw ConfigError("plant.p_cond must lie inside the fluid pressure window");
    if (!(c.solver.tol > 0.0) || c.solver.max_iter < 1) throw ConfigError("solver: tol > 0 and max_iter >= 1 required");
    if (!(c.pi.u_max > c.pi.u_min)) throw ConfigError("pi: u_max must exceed u_min");
    c.episode.validate();
    c.reward.validate();
    c.ppo.validate();
    if (c.data.n_points < 2 || c.data.setpoint_interval < 1) throw ConfigError("data: n_points >= 2, interval >= 1");
    if (c.surrogate.window < 1 || c.surrogate.n_train < c.surrogate.window + 1 || c.surrogate.n_train >= c.data.n_points)
        throw ConfigError("surrogate: need window >= 1 and window < n_train < data.n_points");
    if (c.surrogate.dropout < 0.0 || c.surrogate.dropout >= 1.0) throw ConfigError("surrogate: dropout in [0, 1)");
    if (c.surrogate.hidden1 < 1 || c.surrogate.hidden2 < 1 || c.surrogate.batch < 1 || c.surrogate.max_epochs < 0)
        throw ConfigError("surrogate: sizes must be positive");
    for (double s : c.agent.obs_scale)
        if (!(s > 0.0)) throw ConfigError("agent.obs_scale entries must be positive");
    for (int h : c.agent.hidden)
        if (h < 1) throw ConfigError("agent.hidden sizes must be positive");
    for (const PhaseConfig* p : {&c.pretrain, &c.finetune, &c.scratch}) {
        if (p->episodes < 0) throw ConfigError("phase episodes must be >= 0");
        if (!(p->sigma > 0.0)) throw ConfigError("phase sigma must be positive");
        episode_mode_from_string(p->mode);
    }
    // scratch episodes replay the fine-tune scenario stream
    if (c.scratch.mode != c.finetune.mode) throw ConfigError("scratch.mode must equal finetune.mode");
    episode_mode_from_string(c.evaluation.mode);
    if (c.evaluation.scenarios < 1) throw ConfigError("evaluation.scenarios must be >= 1");
    for (double s : c.sweep.sigmas)
        if (!(s > 0.0)) throw ConfigError("sweep.sigmas must be positive");
    if (c.n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
    for (auto s : c.run_seeds())
        if (s == c.evaluation.seed) throw ConfigError("evaluation.seed collides with a training seed");
}

inline ExperimentConfig config_from_json(const json& root) {
    using detail::Section;
    ExperimentConfig c;
    Section top(root, "config");
    if (const json* j = top.child("fluid")) {
        Section s(*j, "fluid");
        auto& f = c.fluid;
        s.get("p_ref", f.p_ref);
        s.get("t_ref", f.t_ref);
        s.get("antoine_a", f.antoine_a);
        s.get("antoine_b", f.antoine_b);
        s.get("antoine_c", f.antoine_c);
        s.get("hl_c0", f.hl_c0);
        s.get("hl_c1", f.hl_c1);
        s.get("hg_c0", f.hg_c0);
        s.get("hg_c1", f.hg_c1);
        s.get("cp_liq", f.cp_liq);
        s.get("cp_vap", f.cp_vap);
        s.get("rho_l_c0", f.rho_l_c0);
        s.get("rho_l_c1", f.rho_l_c1);
        s.get("rho_g_ref", f.rho_g_ref);
        s.get("rho_g_exp", f.rho_g_exp);
        s.get("cp_a", f.cp_a);
        s.get("mean_void_fraction", f.mean_void_fraction);
        s.get("p_min", f.p_min);
        s.get("p_max", f.p_max);
        s.finish();
    }
    if (const json* j = top.child("plant")) {
        Section s(*j, "plant");
        auto& p = c.plant;
        s.get("d_i", p.d_i);
        s.get("d_o", p.d_o);
        s.get("area", p.area);
        s.get("l_total", p.l_total);
        s.get("wall_capacity", p.wall_capacity);
        s.get_array("alpha_i", p.alpha_i);
        s.get_array("alpha_o", p.alpha_o);
        s.get("exp_eta_is", p.exp_eta_is);
        s.get("exp_eta_vol", p.exp_eta_vol);
        s.get("exp_swept_vol", p.exp_swept_vol);
        s.get("exp_kappa", p.exp_kappa);
        s.get("pump_eta_is", p.pump_eta_is);
        s.get("pump_eta_vol", p.pump_eta_vol);
        s.get("pump_disp", p.pump_disp);
        std::array<double, 2> wp{p.omega_p_min, p.omega_p_max}, wx{p.omega_x_min, p.omega_x_max},
            ta{p.t_a_min, p.t_a_max};
        s.get_array("omega_p_range", wp);
        s.get_array("omega_x_range", wx);
        s.get_array("t_a_band", ta);
        p.omega_p_min = wp[0];
        p.omega_p_max = wp[1];
        p.omega_x_min = wx[0];
        p.omega_x_max = wx[1];
        p.t_a_min = ta[0];
        p.t_a_max = ta[1];
        s.get("p_cond", p.p_cond);
        s.get("subcooling", p.subcooling);
        s.get_array("residual_scale", p.residual_scale);
        std::string l1 = p.l1_reference == L1Reference::inlet ? "inlet" : "two_phase_mean";
        s.get("l1_enthalpy_reference", l1);
        if (l1 == "inlet")
            p.l1_reference = L1Reference::inlet;
        else if (l1 == "two_phase_mean")
            p.l1_reference = L1Reference::two_phase_mean;
        else
            throw ConfigError("plant.l1_enthalpy_reference: expected 'inlet' or 'two_phase_mean'");
        s.get("newton_tol", c.solver.tol);
        s.get("newton_max_iter", c.solver.max_iter);
        s.finish();
    }
    if (const json* j = top.child("pi")) {
        Section s(*j, "pi");
        s.get("kp", c.pi.kp);
        s.get("ki", c.pi.ki);
        s.get("u_min", c.pi.u_min);
        s.get("u_max", c.pi.u_max);
        s.finish();
    }
    if (const json* j = top.child("episode")) {
        Section s(*j, "episode");
        auto& e = c.episode;
        s.get("setpoint_min", e.setpoint_min);
        s.get("setpoint_max", e.setpoint_max);
        s.get("setpoint_interval", e.setpoint_interval);
        s.get("init_action_band", e.init_action_band);
        s.get("omega_x", e.omega_x);
        s.get("dt", e.dt);
        if (const json* d = s.child("disturbance")) {
            Section ds(*d, "episode.disturbance");
            auto& x = e.disturbance;
            ds.get("m_a_min", x.m_a_min);
            ds.get("m_a_max", x.m_a_max);
            ds.get("m_a_nominal", x.m_a_nominal);
            ds.get("walk_sigma", x.walk_sigma);
            ds.get("reversion", x.reversion);
            ds.get("white_sigma", x.white_sigma);
            ds.get("t_a", x.t_a);
            ds.get("t_a_step_prob", x.t_a_step_prob);
            ds.get("t_a_step", x.t_a_step);
            ds.get("t_a_min", x.t_a_min);
            ds.get("t_a_max", x.t_a_max);
            ds.finish();
        }
        s.finish();
    }
    if (const json* j = top.child("reward")) {
        Section s(*j, "reward");
        s.get("c_err", c.reward.c_err);
        s.get("c_du", c.reward.c_du);
        s.get_array("thresholds", c.reward.thresholds);
        s.get_array("values", c.reward.values);
        s.get("fault_penalty", c.reward.fault_penalty);
        s.finish();
    }
    if (const json* j = top.child("data")) {
        Section s(*j, "data");
        s.get("n_points", c.data.n_points);
        s.get("setpoint_interval", c.data.setpoint_interval);
        s.get("white_sigma", c.data.white_sigma);
        s.get("init_action", c.data.init_action);
        s.finish();
    }
    if (const json* j = top.child("surrogate")) {
        Section s(*j, "surrogate");
        auto& x = c.surrogate;
        s.get("hidden1", x.hidden1);
        s.get("hidden2", x.hidden2);
        s.get("dropout", x.dropout);
        s.get("window", x.window);
        s.get("n_train", x.n_train);
        s.get("max_epochs", x.max_epochs);
        s.get("batch", x.batch);
        s.get("lr", x.lr);
        s.get("patience", x.patience);
        s.get("time_budget_s", x.time_budget_s);
        s.get("mse_threshold", x.mse_threshold);
        s.get("free_run_steps", x.free_run_steps);
        s.get("fault_band", x.fault_band);
        s.finish();
    }
    if (const json* j = top.child("ppo")) {
        Section s(*j, "ppo");
        auto& h = c.ppo;
        s.get("lr_actor", h.lr_actor);
        s.get("lr_critic", h.lr_critic);
        s.get("n_epoch", h.n_epoch);
        s.get("gamma", h.gamma);
        s.get("lam", h.lam);
        s.get("entropy_coef", h.entropy_coef);
        s.get("minibatch", h.minibatch);
        s.get("clip_eps", h.clip_eps);
        s.get("buffer_capacity", h.buffer_capacity);
        s.get("rollout_episodes", h.rollout_episodes);
        s.get("reward_scale", h.reward_scale);
        s.finish();
    }
    if (const json* j = top.child("agent")) {
        Section s(*j, "agent");
        s.get_vector("hidden", c.agent.hidden);
        s.get_array("obs_offset", c.agent.obs_offset);
        s.get_array("obs_scale", c.agent.obs_scale);
        s.finish();
    }
    detail::read_phase(top.child("pretrain"), "pretrain", c.pretrain);
    detail::read_phase(top.child("finetune"), "finetune", c.finetune);
    detail::read_phase(top.child("scratch"), "scratch", c.scratch);
    if (const json* j = top.child("evaluation")) {
        Section s(*j, "evaluation");
        s.get("scenarios", c.evaluation.scenarios);
        s.get("seed", c.evaluation.seed);
        s.get("mode", c.evaluation.mode);
        s.get("settle_band", c.evaluation.settle_band);
        s.finish();
    }
    if (const json* j = top.child("sweep")) {
        Section s(*j, "sweep");
        s.get_vector("sigmas", c.sweep.sigmas);
        s.get("episodes", c.sweep.episodes);
        s.get("eval_scenarios", c.sweep.eval_scenarios);
        s.finish();
    }
    top.get("seed", c.seed);
    top.get("n_seeds", c.n_seeds);
    top.get("output_dir", c.output_dir);
    top.finish();
    validate(c);
    return c;
}

inline json config_to_json(const ExperimentConfig& c) {
    const auto& f = c.fluid;
    const auto& p = c.plant;
    const auto& e = c.episode;
    const auto& d = e.disturbance;
    json j;
    j["fluid"] = {{"p_ref", f.p_ref},       {"t_ref", f.t_ref},         {"antoine_a", f.antoine_a},
                  {"antoine_b", f.antoine_b}, {"antoine_c", f.antoine_c}, {"hl_c0", f.hl_c0},
                  {"hl_c1", f.hl_c1},       {"hg_c0", f.hg_c0},         {"hg_c1", f.hg_c1},
                  {"cp_liq", f.cp_liq},     {"cp_vap", f.cp_vap},       {"rho_l_c0", f.rho_l_c0},
                  {"rho_l_c1", f.rho_l_c1}, {"rho_g_ref", f.rho_g_ref}, {"rho_g_exp", f.rho_g_exp},
                  {"cp_a", f.cp_a},         {"mean_void_fraction", f.mean_void_fraction},
                  {"p_min", f.p_min},       {"p_max", f.p_max}};
    j["plant"] = {{"d_i", p.d_i},
                  {"d_o", p.d_o},
                  {"area", p.area},
                  {"l_total", p.l_total},
                  {"wall_capacity", p.wall_capacity},
                  {"alpha_i", p.alpha_i},
                  {"alpha_o", p.alpha_o},
                  {"exp_eta_is", p.exp_eta_is},
                  {"exp_eta_vol", p.exp_eta_vol},
                  {"exp_swept_vol", p.exp_swept_vol},
                  {"exp_kappa", p.exp_kappa},
                  {"pump_eta_is", p.pump_eta_is},
                  {"pump_eta_vol", p.pump_eta_vol},
                  {"pump_disp", p.pump_disp},
                  {"omega_p_range", {p.omega_p_min, p.omega_p_max}},
                  {"omega_x_range", {p.omega_x_min, p.omega_x_max}},
                  {"t_a_band", {p.t_a_min, p.t_a_max}},
                  {"p_cond", p.p_cond},
                  {"subcooling", p.subcooling},
                  {"residual_scale", p.residual_scale},
                  {"l1_enthalpy_reference", p.l1_reference == L1Reference::inlet ? "inlet" : "two_phase_mean"},
                  {"newton_tol", c.solver.tol},
                  {"newton_max_iter", c.solver.max_iter}};
    j["pi"] = {{"kp", c.pi.kp}, {"ki", c.pi.ki}, {"u_min", c.pi.u_min}, {"u_max", c.pi.u_max}};
    j["episode"] = {{"setpoint_min", e.setpoint_min},
                    {"setpoint_max", e.setpoint_max},
                    {"setpoint_interval", e.setpoint_interval},
                    {"init_action_band", e.init_action_band},
                    {"omega_x", e.omega_x},
                    {"dt", e.dt},
                    {"disturbance",
                     {{"m_a_min", d.m_a_min},
                      {"m_a_max", d.m_a_max},
                      {"m_a_nominal", d.m_a_nominal},
                      {"walk_sigma", d.walk_sigma},
                      {"reversion", d.reversion},
                      {"white_sigma", d.white_sigma},
                      {"t_a", d.t_a},
                      {"t_a_step_prob", d.t_a_step_prob},
                      {"t_a_step", d.t_a_step},
                      {"t_a_min", d.t_a_min},
                      {"t_a_max", d.t_a_max}}}};
    j["reward"] = {{"c_err", c.reward.c_err},
                   {"c_du", c.reward.c_du},
                   {"thresholds", c.reward.thresholds},
                   {"values", c.reward.values},
                   {"fault_penalty", c.reward.fault_penalty}};
    j["data"] = {{"n_points", c.data.n_points},
                 {"setpoint_interval", c.data.setpoint_interval},
                 {"white_sigma", c.data.white_sigma},
                 {"init_action", c.data.init_action}};
    const auto& s = c.surrogate;
    j["surrogate"] = {{"hidden1", s.hidden1},       {"hidden2", s.hidden2},
                      {"dropout", s.dropout},       {"window", s.window},
                      {"n_train", s.n_train},       {"max_epochs", s.max_epochs},
                      {"batch", s.batch},           {"lr", s.lr},
                      {"patience", s.patience},     {"time_budget_s", s.time_budget_s},
                      {"mse_threshold", s.mse_threshold}, {"free_run_steps", s.free_run_steps},
                      {"fault_band", s.fault_band}};
    const auto& h = c.ppo;
    j["ppo"] = {{"lr_actor", h.lr_actor},
                {"lr_critic", h.lr_critic},
                {"n_epoch", h.n_epoch},
                {"gamma", h.gamma},
                {"lam", h.lam},
                {"entropy_coef", h.entropy_coef},
                {"minibatch", h.minibatch},
                {"clip_eps", h.clip_eps},
                {"buffer_capacity", h.buffer_capacity},
                {"rollout_episodes", h.rollout_episodes},
                {"reward_scale", h.reward_scale}};
    j["agent"] = {{"hidden", c.agent.hidden}, {"obs_offset", c.agent.obs_offset}, {"obs_scale", c.agent.obs_scale}};
    j["pretrain"] = detail::phase_json(c.pretrain);
    j["finetune"] = detail::phase_json(c.finetune);
    j["scratch"] = detail::phase_json(c.scratch);
    j["evaluation"] = {{"scenarios", c.evaluation.scenarios},
                       {"seed", c.evaluation.seed},
                       {"mode", c.evaluation.mode},
                       {"settle_band", c.evaluation.settle_band}};
    j["sweep"] = {{"sigmas", c.sweep.sigmas}, {"episodes", c.sweep.episodes}, {"eval_scenarios", c.sweep.eval_scenarios}};
    j["seed"] = c.seed;
    j["n_seeds"] = c.n_seeds;
    j["output_dir"] = c.output_dir;
    return j;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(f, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

// Hash of the resolved configuration, excluding where outputs go.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = config_to_json(c);
    j.erase("output_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

}  // namespace orc
