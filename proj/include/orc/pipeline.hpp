#pragma once

// Stages: closed-loop data collection, surrogate training, PPO pre-training on
// the surrogate, fine-tuning or scratch training on the plant, controller
// evaluation and the exploration sweep. Every file written carries the config
// hash and seed in its leading comment rows.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "orc/config.hpp"
#include "orc/csv.hpp"
#include "orc/env.hpp"
#include "orc/errors.hpp"
#include "orc/nn.hpp"
#include "orc/pi_controller.hpp"
#include "orc/plant.hpp"
#include "orc/ppo.hpp"
#include "orc/rng.hpp"
#include "orc/surrogate.hpp"

namespace orc {

namespace fs = std::filesystem;

inline std::vector<std::string> provenance(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& stage) {
    return {"config_hash=" + config_hash(cfg), "seed=" + std::to_string(seed), "stage=" + stage};
}

inline std::vector<std::pair<std::string, std::string>> provenance_meta(const ExperimentConfig& cfg, std::uint64_t seed,
                                                                        const std::string& stage) {
    return {{"config_hash", config_hash(cfg)}, {"seed", std::to_string(seed)}, {"stage", stage}};
}

inline void write_text(const fs::path& path, const std::vector<std::string>& header, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write '" + path.string() + "'");
    for (const auto& h : header) f << "# " << h << '\n';
    f << body;
}

inline Plant make_plant(const ExperimentConfig& cfg) { return Plant(Fluid(cfg.fluid), cfg.plant, cfg.solver); }

inline ActionMap make_action_map(const ExperimentConfig& cfg) { return {cfg.plant.omega_p_min, cfg.plant.omega_p_max}; }

// ---------------------------------------------------------------- data

struct CollectionReport {
    Trajectory trajectory;
    int restarts = 0;
};

inline CollectionReport collect_closed_loop_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    const Plant plant = make_plant(cfg);
    const ActionMap map = make_action_map(cfg);
    DisturbanceConfig dist = cfg.episode.disturbance;
    dist.white_sigma = cfg.data.white_sigma;
    Rng d_rng(derive_seed(seed, "data-disturbance"));
    const auto disturbance = disturbance_trajectory(dist, std::size_t(cfg.data.n_points) + 1, d_rng, false);
    Rng sp_rng(derive_seed(seed, "data-setpoints"));
    std::vector<double> sp;
    for (int k = 0; k < cfg.data.n_points; ++k) {
        if (k % cfg.data.setpoint_interval == 0) sp.push_back(sp_rng.uniform(cfg.episode.setpoint_min, cfg.episode.setpoint_max));
        else sp.push_back(sp.back());
    }

    CollectionReport rep;
    PlantBackend backend(plant, cfg.episode.omega_x, cfg.episode.dt);
    PiState pi = cfg.pi;
    pi.integral = 0.0;
    int segment = 0;
    double omega = map.speed(cfg.data.init_action).value;
    ObsVec obs = backend.reset(omega, cfg.data.init_action, disturbance[0].first, disturbance[0].second, sp[0]);
    for (int k = 0; k < cfg.data.n_points; ++k) {
        obs[kErr] = obs[kSh] - sp[std::size_t(k)];
        const PiStepResult u = pi_step(pi, obs[kErr], cfg.episode.dt);
        pi = u.state;
        rep.trajectory.push(obs, u.u, segment, sp[std::size_t(k)], disturbance[std::size_t(k)].second);
        if (k + 1 == cfg.data.n_points) break;
        const auto [m_a, t_a] = disturbance[std::size_t(k) + 1];
        omega = map.speed(u.u).value;
        try {
            obs = backend.step(omega, u.u, m_a, t_a, sp[std::size_t(k) + 1]);
        } catch (const BackendFault&) {
            // restart from the steady state at the nominal speed; windows never cross the gap
            ++segment;
            ++rep.restarts;
            pi = cfg.pi;
            pi.integral = 0.0;
            omega = map.speed(0.0).value;
            obs = backend.reset(omega, 0.0, m_a, t_a, sp[std::size_t(k) + 1]);
        }
    }
    return rep;
}

// ---------------------------------------------------------------- surrogate

struct FreeRunReport {
    std::size_t start = 0;
    std::vector<ObsVec> predicted, actual;
    double nrmse = 0.0;                 // over p_e, t_oe, sh in normalized units
    std::vector<double> horizon_error;  // per-step normalized RMS over the same channels
};

inline FreeRunReport free_run_validation(const SurrogateNet& net, const Trajectory& tr, std::size_t first_row,
                                         int steps) {
    const int w = net.window();
    // first start at or after first_row whose history and horizon share one segment
    std::size_t s0 = std::max<std::size_t>(first_row + std::size_t(w), std::size_t(w));
    for (; s0 + std::size_t(steps) < tr.size(); ++s0)
        if (tr.segment[s0 + 1 - std::size_t(w)] == tr.segment[s0 + std::size_t(steps)]) break;
    if (s0 + std::size_t(steps) >= tr.size()) throw DatasetError("free_run_validation: no segment long enough");
    FreeRunReport rep;
    rep.start = s0;
    std::vector<ObsVec> oh(tr.obs.begin() + long(s0 + 1 - std::size_t(w)), tr.obs.begin() + long(s0 + 1));
    std::vector<double> ah(tr.action.begin() + long(s0 + 1 - std::size_t(w)), tr.action.begin() + long(s0));
    std::vector<double> acts(tr.action.begin() + long(s0), tr.action.begin() + long(s0 + std::size_t(steps)));
    ExogenousChannels ex;
    for (int k = 1; k <= steps; ++k) {
        ex.m_ai.push_back(tr.obs[s0 + std::size_t(k)][kMai]);
        ex.omega_p.push_back(tr.obs[s0 + std::size_t(k)][kOmegaP]);
        ex.setpoint.push_back(tr.setpoint[s0 + std::size_t(k)]);
    }
    rep.predicted = free_run(net, oh, ah, acts, ex);
    rep.actual.assign(tr.obs.begin() + long(s0 + 1), tr.obs.begin() + long(s0 + 1 + std::size_t(steps)));
    const Normalizer& n = net.normalizer();
    double acc = 0.0;
    for (int k = 0; k < steps; ++k) {
        double e2 = 0.0;
        for (int c : {kPe, kToe, kSh}) {
            const double d = n.forward(c, rep.predicted[std::size_t(k)][c]) - n.forward(c, rep.actual[std::size_t(k)][c]);
            e2 += d * d;
        }
        acc += e2;
        rep.horizon_error.push_back(std::sqrt(e2 / 3.0));
    }
    rep.nrmse = std::sqrt(acc / (3.0 * steps));
    return rep;
}

struct SurrogateStageResult {
    SurrogateTrainReport train;
    FreeRunReport free_run;
    std::size_t train_windows = 0, test_windows = 0;
};

inline SurrogateStageResult train_surrogate_stage(const ExperimentConfig& cfg, const Trajectory& tr, std::uint64_t seed,
                                                  SurrogateNet& net) {
    const SequenceDataset ds = build_dataset(tr, cfg.surrogate.window, std::size_t(cfg.surrogate.n_train));
    Rng init_rng(derive_seed(seed, "surrogate-init"));
    net.init(init_rng);
    SurrogateTrainConfig tc;
    tc.max_epochs = cfg.surrogate.max_epochs;
    tc.batch = cfg.surrogate.batch;
    tc.lr = cfg.surrogate.lr;
    tc.patience = cfg.surrogate.patience;
    tc.seed = seed;
    tc.time_budget_s = cfg.surrogate.time_budget_s;
    SurrogateStageResult r;
    r.train = train_surrogate(net, ds, tc);
    r.train_windows = ds.train_targets.size();
    r.test_windows = ds.test_targets.size();
    r.free_run = free_run_validation(net, tr, std::size_t(cfg.surrogate.n_train), cfg.surrogate.free_run_steps);
    return r;
}

inline std::string surrogate_report_text(const SurrogateStageResult& r) {
    std::ostringstream os;
    os.precision(6);
    os << "train_windows " << r.train_windows << "\n"
       << "test_windows " << r.test_windows << "\n"
       << "epochs_run " << r.train.epochs_run << "\n"
       << "best_epoch " << r.train.best_epoch << "\n"
       << "diverged " << (r.train.diverged ? 1 : 0) << "\n"
       << "time_limited " << (r.train.time_limited ? 1 : 0) << "\n"
       << "initial_test_mse " << r.train.initial_test_mse << "\n"
       << "train_mse " << r.train.train_mse << "\n"
       << "test_mse " << r.train.test_mse << "\n"
       << "free_run_start " << r.free_run.start << "\n"
       << "free_run_steps " << r.free_run.predicted.size() << "\n"
       << "free_run_nrmse " << r.free_run.nrmse << "\n";
    return os.str();
}

inline CsvTable free_run_table(const FreeRunReport& fr, std::vector<std::string> comments) {
    CsvTable t;
    t.comments = std::move(comments);
    t.columns = {"k"};
    for (const char* n : kObsNames) t.columns.push_back(std::string("pred_") + n);
    for (const char* n : kObsNames) t.columns.push_back(std::string("true_") + n);
    t.columns.push_back("norm_rms_error");
    for (std::size_t k = 0; k < fr.predicted.size(); ++k) {
        std::vector<double> r{double(k + 1)};
        r.insert(r.end(), fr.predicted[k].begin(), fr.predicted[k].end());
        r.insert(r.end(), fr.actual[k].begin(), fr.actual[k].end());
        r.push_back(fr.horizon_error[k]);
        t.rows.push_back(std::move(r));
    }
    return t;
}

inline Eigen::VectorXd flatten(const std::vector<ObsVec>& v) {
    Eigen::VectorXd out(Eigen::Index(v.size() * kObsDim));
    for (std::size_t k = 0; k < v.size(); ++k)
        for (int c = 0; c < kObsDim; ++c) out[Eigen::Index(k * kObsDim + std::size_t(c))] = v[k][c];
    return out;
}

inline std::vector<ObsVec> unflatten(const Eigen::VectorXd& v) {
    std::vector<ObsVec> out(std::size_t(v.size()) / kObsDim);
    for (std::size_t k = 0; k < out.size(); ++k)
        for (int c = 0; c < kObsDim; ++c) out[k][c] = v[Eigen::Index(k * kObsDim + std::size_t(c))];
    return out;
}

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// The window ending at `row` and its prediction travel with the checkpoint so a
// reload can be checked bit for bit.
inline void save_surrogate_stage(const fs::path& path, const SurrogateNet& net, const SurrogateStageResult& r,
                                 const Trajectory& tr, const ExperimentConfig& cfg, std::uint64_t seed) {
    const std::size_t w = std::size_t(net.window());
    const std::size_t row = r.free_run.start;
    std::vector<ObsVec> oh(tr.obs.begin() + long(row + 1 - w), tr.obs.begin() + long(row + 1));
    std::vector<double> ah(tr.action.begin() + long(row + 1 - w), tr.action.begin() + long(row + 1));
    const ObsVec out = net.predict_next(oh, ah);
    auto meta = provenance_meta(cfg, seed, "train-surrogate");
    meta.emplace_back("test_mse", format_g17(r.train.test_mse));
    meta.emplace_back("train_mse", format_g17(r.train.train_mse));
    meta.emplace_back("free_run_nrmse", format_g17(r.free_run.nrmse));
    meta.emplace_back("ref_obs", vector_hex(flatten(oh)));
    meta.emplace_back("ref_act", vector_hex(Eigen::Map<const Eigen::VectorXd>(ah.data(), Eigen::Index(ah.size()))));
    meta.emplace_back("ref_out", vector_hex(Eigen::Map<const Eigen::VectorXd>(out.data(), kObsDim)));
    save_surrogate(path.string(), net, meta);
}

inline void verify_surrogate_reference(const SurrogateNet& net, const nn::LoadedCheckpoint& ck) {
    const auto oh = unflatten(vector_from_hex(ck.meta_value("ref_obs")));
    const Eigen::VectorXd a = vector_from_hex(ck.meta_value("ref_act"));
    const Eigen::VectorXd want = vector_from_hex(ck.meta_value("ref_out"));
    const ObsVec got = net.predict_next(oh, std::vector<double>(a.data(), a.data() + a.size()));
    for (int c = 0; c < kObsDim; ++c)
        if (got[c] != want[c]) throw CheckpointError("surrogate reload does not reproduce its reference prediction");
}

// ---------------------------------------------------------------- episodes

struct ObsScaler {
    ObsVec offset, scale;
    Eigen::VectorXd operator()(const ObsVec& o) const {
        Eigen::VectorXd v(kObsDim);
        for (int c = 0; c < kObsDim; ++c) v[c] = (o[c] - offset[c]) / scale[c];
        return v;
    }
};

inline ObsScaler make_scaler(const ExperimentConfig& cfg) { return {cfg.agent.obs_offset, cfg.agent.obs_scale}; }

struct EpisodeResult {
    double ret = 0.0;
    int length = 0;
    bool fault = false;
    std::vector<EpisodeLogRow> log;
};

using Policy = std::function<double(const ObsVec&)>;

// Runs one episode. With a buffer, the agent's stochastic policy is sampled and
// transitions recorded; otherwise `policy` supplies actions.
inline EpisodeResult run_episode(Env& env, const EpisodeSpec& spec, const Policy& policy, bool keep_log) {
    EpisodeResult r;
    ObsVec obs = env.reset(spec);
    if (keep_log) r.log.push_back({0, obs, env.previous_action(), 0.0, env.setpoint(), false, false});
    while (!env.done()) {
        const double a = policy(obs);
        const StepOutcome s = env.step(a);
        r.ret += s.reward;
        ++r.length;
        r.fault = r.fault || s.info.fault;
        obs = s.obs;
        if (keep_log) r.log.push_back({env.step_index(), obs, a, s.reward, env.setpoint(), s.info.action_clamped, s.info.fault});
    }
    return r;
}

inline EpisodeResult run_training_episode(Env& env, const EpisodeSpec& spec, PpoAgent& agent, const ObsScaler& scaler,
                                          RolloutBuffer& buf, Rng& rng) {
    EpisodeResult r;
    ObsVec obs = env.reset(spec);
    Eigen::VectorXd x = scaler(obs);
    double v = agent.value(x);
    while (!env.done()) {
        const ActionSample a = sample_action(agent.actor(), x, agent.sigma(), rng);
        const StepOutcome s = env.step(a.action);
        r.ret += s.reward;
        ++r.length;
        r.fault = r.fault || s.info.fault;
        RolloutStep st;
        st.obs = x;
        st.action = a.raw;
        st.log_prob = a.log_prob;
        st.reward = s.reward;
        st.value = v;
        st.terminal = s.info.fault;
        st.episode_end = s.done;
        x = scaler(s.obs);
        v = s.info.fault ? 0.0 : agent.value(x);
        st.next_value = v;  // time-limit ends bootstrap from V(s_T)
        buf.push(std::move(st));
    }
    return r;
}

struct LearningCurve {
    std::vector<std::uint64_t> seeds;
    std::vector<std::vector<double>> returns;  // per seed, per episode

    std::vector<double> mean() const {
        std::vector<double> m;
        if (returns.empty()) return m;
        for (std::size_t e = 0; e < returns.front().size(); ++e) {
            double s = 0.0;
            for (const auto& r : returns) s += r[e];
            m.push_back(s / double(returns.size()));
        }
        return m;
    }
    // population variance across seeds
    std::vector<double> variance() const {
        std::vector<double> v;
        const auto m = mean();
        for (std::size_t e = 0; e < m.size(); ++e) {
            double s = 0.0;
            for (const auto& r : returns) s += (r[e] - m[e]) * (r[e] - m[e]);
            v.push_back(s / double(returns.size()));
        }
        return v;
    }
};

inline CsvTable curve_table(const LearningCurve& c, std::vector<std::string> comments) {
    CsvTable t;
    t.comments = std::move(comments);
    t.columns = {"episode"};
    for (auto s : c.seeds) t.columns.push_back("seed_" + std::to_string(s));
    t.columns.insert(t.columns.end(), {"mean", "variance"});
    const auto m = c.mean();
    const auto v = c.variance();
    for (std::size_t e = 0; e < m.size(); ++e) {
        std::vector<double> r{double(e + 1)};
        for (const auto& x : c.returns) r.push_back(x[e]);
        r.push_back(m[e]);
        r.push_back(v[e]);
        t.rows.push_back(std::move(r));
    }
    return t;
}

struct TrainingRun {
    std::vector<double> returns;
    CsvTable stats;
};

// The PPO loop shared by pre-training, fine-tuning and scratch training.
// Episode k of the run uses the scenario derived from (run_seed, scenario_tag, k).
inline TrainingRun train_ppo(const ExperimentConfig& cfg, Backend& backend, PpoAgent& agent, EpisodeMode mode,
                             int episodes, std::uint64_t run_seed, const std::string& scenario_tag) {
    Env env(backend, make_action_map(cfg), cfg.reward);
    const ObsScaler scaler = make_scaler(cfg);
    RolloutBuffer buf(cfg.ppo.buffer_capacity);
    Rng act_rng(derive_seed(run_seed, scenario_tag + "/actions"));
    Rng upd_rng(derive_seed(run_seed, scenario_tag + "/minibatch"));
    TrainingRun run;
    run.stats.columns = {"episode", "return", "length", "fault", "mean_ratio", "clip_fraction", "actor_loss", "critic_loss", "aborted"};
    for (int ep = 0; ep < episodes; ++ep) {
        const EpisodeSpec spec = make_episode(mode, cfg.episode, derive_seed(run_seed, scenario_tag, std::uint64_t(ep)));
        const EpisodeResult r = run_training_episode(env, spec, agent, scaler, buf, act_rng);
        run.returns.push_back(r.ret);
        PpoStats st;
        const bool update = (ep + 1) % cfg.ppo.rollout_episodes == 0 || ep + 1 == episodes;
        if (update) st = agent.update(buf, upd_rng);
        run.stats.rows.push_back({double(ep + 1), r.ret, double(r.length), r.fault ? 1.0 : 0.0, st.mean_ratio,
                                  st.clip_fraction, st.actor_loss, st.critic_loss, st.aborted ? 1.0 : 0.0});
    }
    return run;
}

inline PpoAgent fresh_agent(const ExperimentConfig& cfg, std::uint64_t seed, double sigma) {
    Rng a(derive_seed(seed, "actor-init")), c(derive_seed(seed, "critic-init"));
    return PpoAgent(make_actor(kObsDim, a, cfg.agent.hidden), make_critic(kObsDim, c, cfg.agent.hidden), cfg.ppo, sigma);
}

inline void save_agent(const fs::path& dir, const PpoAgent& agent, const ExperimentConfig& cfg, std::uint64_t seed,
                       const std::string& stage) {
    fs::create_directories(dir);
    auto meta = provenance_meta(cfg, seed, stage);
    nn::save_checkpoint((dir / "actor.ckpt").string(), agent.actor().params(), meta);
    nn::save_checkpoint((dir / "critic.ckpt").string(), agent.critic().params(), meta);
}

// Loads actor and critic parameters into freshly shaped networks.
inline PpoAgent load_agent(const fs::path& dir, const ExperimentConfig& cfg, double sigma) {
    PpoAgent agent = fresh_agent(cfg, 0, sigma);
    nn::load_checkpoint((dir / "actor.ckpt").string(), agent.actor().params());
    nn::load_checkpoint((dir / "critic.ckpt").string(), agent.critic().params());
    return agent;
}

inline std::string file_hash(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw CheckpointError("cannot read '" + p.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
    return buf;
}

// ---------------------------------------------------------------- pre-training

struct PretrainResult {
    LearningCurve curve;
    std::vector<fs::path> agent_dirs;
};

inline void require_valid_surrogate(const ExperimentConfig& cfg, const nn::LoadedCheckpoint& ck) {
    double mse = 0.0;
    try {
        mse = std::stod(ck.meta_value("test_mse"));
    } catch (const CheckpointError&) {
        throw CheckpointError("surrogate checkpoint carries no validation result");
    }
    if (!(mse <= cfg.surrogate.mse_threshold)) {
        std::ostringstream os;
        os << "surrogate test MSE " << mse << " exceeds threshold " << cfg.surrogate.mse_threshold
           << "; pre-training refused";
        throw CheckpointError(os.str());
    }
}

inline PretrainResult pretrain(const ExperimentConfig& cfg, const SurrogateNet& net, EpisodeMode mode, const fs::path& out) {
    const Plant plant = make_plant(cfg);
    fs::create_directories(out);
    PretrainResult res;
    const std::string stage = "pretrain-" + to_string(mode);
    for (auto seed : cfg.run_seeds()) {
        SurrogateBackend backend(net, plant, cfg.episode.omega_x, cfg.surrogate.fault_band);
        PpoAgent agent = fresh_agent(cfg, seed, cfg.pretrain.sigma);
        TrainingRun run = train_ppo(cfg, backend, agent, mode, cfg.pretrain.episodes, seed, stage);
        const fs::path dir = out / (stage + "_seed" + std::to_string(seed));
        save_agent(dir, agent, cfg, seed, stage);
        run.stats.comments = provenance(cfg, seed, stage);
        write_csv((dir / "stats.csv").string(), run.stats);
        res.curve.seeds.push_back(seed);
        res.curve.returns.push_back(run.returns);
        res.agent_dirs.push_back(dir);
    }
    write_csv((out / (stage + "_curve.csv")).string(), curve_table(res.curve, provenance(cfg, cfg.seed, stage)));
    return res;
}

// ---------------------------------------------------------------- plant-side training

enum class InitSource { pretrained, scratch };

// Fine-tuning and scratch training differ only in where the networks come from.
inline LearningCurve train_on_plant(const ExperimentConfig& cfg, InitSource init, const fs::path& pretrained_dir,
                                    double sigma, int episodes, const fs::path& out, const std::string& stage,
                                    std::vector<std::uint64_t> seeds = {}, bool write_curve = true) {
    const Plant plant = make_plant(cfg);
    fs::create_directories(out);
    if (seeds.empty()) seeds = cfg.run_seeds();
    const EpisodeMode mode = episode_mode_from_string(cfg.finetune.mode);
    LearningCurve curve;
    for (auto seed : seeds) {
        PlantBackend backend(plant, cfg.episode.omega_x, cfg.episode.dt);
        PpoAgent agent = init == InitSource::pretrained ? load_agent(pretrained_dir, cfg, sigma) : fresh_agent(cfg, seed, sigma);
        TrainingRun run = train_ppo(cfg, backend, agent, mode, episodes, seed, "sim2real");
        const fs::path dir = out / (stage + "_seed" + std::to_string(seed));
        save_agent(dir, agent, cfg, seed, stage);
        run.stats.comments = provenance(cfg, seed, stage);
        if (init == InitSource::pretrained)
            run.stats.comments.push_back("pretrained_actor=" + file_hash(pretrained_dir / "actor.ckpt"));
        write_csv((dir / "stats.csv").string(), run.stats);
        curve.seeds.push_back(seed);
        curve.returns.push_back(run.returns);
    }
    if (write_curve) write_csv((out / (stage + "_curve.csv")).string(), curve_table(curve, provenance(cfg, cfg.seed, stage)));
    return curve;
}

inline LearningCurve finetune_sim2real(const ExperimentConfig& cfg, const fs::path& pretrained_dir, double sigma,
                                       const fs::path& out) {
    return train_on_plant(cfg, InitSource::pretrained, pretrained_dir, sigma, cfg.finetune.episodes, out, "finetune");
}

inline LearningCurve train_from_scratch(const ExperimentConfig& cfg, const fs::path& out) {
    return train_on_plant(cfg, InitSource::scratch, {}, cfg.scratch.sigma, cfg.scratch.episodes, out, "scratch");
}

// Threshold is 90% of the fine-tuned asymptote (mean of the last 10% of episodes);
// for a negative asymptote the threshold sits 10% of its magnitude below it.
inline double transfer_threshold(const std::vector<double>& finetune_returns) {
    if (finetune_returns.empty()) throw EpisodeError("transfer_threshold: empty curve");
    const std::size_t n = std::max<std::size_t>(1, finetune_returns.size() / 10);
    const double asym =
        std::accumulate(finetune_returns.end() - long(n), finetune_returns.end(), 0.0) / double(n);
    return asym >= 0.0 ? 0.9 * asym : asym - 0.1 * std::abs(asym);
}

// 1-based index of the first episode reaching the threshold; budget + 1 if never.
inline int episodes_to_threshold(const std::vector<double>& returns, double threshold) {
    for (std::size_t k = 0; k < returns.size(); ++k)
        if (returns[k] >= threshold) return int(k) + 1;
    return int(returns.size()) + 1;
}

// Mean of episodes max(0, k - w + 1)..k for every k; the head uses a partial window.
inline std::vector<double> trailing_mean(const std::vector<double>& v, std::size_t w) {
    std::vector<double> out;
    out.reserve(v.size());
    double acc = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
        acc += v[k];
        if (k >= w) acc -= v[k - w];
        out.push_back(acc / double(std::min(k + 1, w)));
    }
    return out;
}

struct TransferSeed {
    std::string column;
    double threshold = 0.0;
    int finetune_episodes = 0, scratch_episodes = 0;  // on the smoothed curves
    int finetune_raw = 0, scratch_raw = 0;            // first single episode at threshold
    bool scratch_censored = false;
    double ratio = 0.0;
};

// Per-seed threshold from the fine-tune curve; both curves are smoothed with a
// trailing window before the crossing is located.
inline std::vector<TransferSeed> transfer_analysis(const CsvTable& finetune, const CsvTable& scratch, std::size_t window) {
    std::vector<TransferSeed> out;
    for (const auto& col : finetune.columns) {
        if (col.rfind("seed_", 0) != 0) continue;
        TransferSeed t;
        t.column = col;
        const auto fr = finetune.column_values(col), sr = scratch.column_values(col);
        t.threshold = transfer_threshold(fr);
        t.finetune_episodes = episodes_to_threshold(trailing_mean(fr, window), t.threshold);
        t.scratch_episodes = episodes_to_threshold(trailing_mean(sr, window), t.threshold);
        t.finetune_raw = episodes_to_threshold(fr, t.threshold);
        t.scratch_raw = episodes_to_threshold(sr, t.threshold);
        t.scratch_censored = t.scratch_episodes > int(sr.size());
        t.ratio = double(t.scratch_episodes) / double(t.finetune_episodes);
        out.push_back(t);
    }
    if (out.empty()) throw DatasetError("transfer_analysis: fine-tune curve has no seed columns");
    return out;
}

// ---------------------------------------------------------------- evaluation

struct TrackingMetrics {
    double iae = 0.0;
    double max_overshoot = 0.0;
    double mean_settling = 0.0;
    double ret = 0.0;
    bool fault = false;
    int steps = 0;
};

inline TrackingMetrics tracking_metrics(const std::vector<EpisodeLogRow>& log, double dt, double band) {
    TrackingMetrics m;
    if (log.size() < 2) return m;
    for (std::size_t k = 1; k < log.size(); ++k) {
        m.iae += std::abs(log[k].obs[kErr]) * dt;
        m.ret += log[k].reward;
        m.fault = m.fault || log[k].fault;
    }
    m.steps = int(log.size()) - 1;
    // segments of constant setpoint, starting at step 0 and at each change
    std::vector<std::size_t> starts{0};
    for (std::size_t k = 1; k < log.size(); ++k)
        if (log[k].setpoint != log[k - 1].setpoint) starts.push_back(k);
    double settle_sum = 0.0;
    for (std::size_t s = 0; s < starts.size(); ++s) {
        const std::size_t a = starts[s];
        const std::size_t b = s + 1 < starts.size() ? starts[s + 1] : log.size();
        const double sp = log[a].setpoint;
        const double sh0 = a > 0 ? log[a - 1].obs[kSh] : log[a].obs[kSh];
        const double dir = sp >= sh0 ? 1.0 : -1.0;
        std::size_t settled = b;
        for (std::size_t k = b; k-- > a;) {
            if (std::abs(log[k].obs[kErr]) > band) break;
            settled = k;
        }
        if (a > 0)
            for (std::size_t k = a; k < b; ++k) m.max_overshoot = std::max(m.max_overshoot, dir * (log[k].obs[kSh] - sp));
        settle_sum += double(settled - a) * dt;
    }
    m.mean_settling = settle_sum / double(starts.size());
    return m;
}

inline Policy deterministic_policy(const nn::Mlp& actor, const ObsScaler& scaler) {
    return [&actor, scaler](const ObsVec& o) { return std::clamp(actor.forward(scaler(o))(0, 0), -1.0, 1.0); };
}

inline Policy pi_policy(const PiState& init, double dt) {
    auto state = std::make_shared<PiState>(init);
    state->integral = 0.0;
    return [state, dt](const ObsVec& o) {
        const PiStepResult r = pi_step(*state, o[kErr], dt);
        *state = r.state;
        return r.u;
    };
}

inline std::vector<std::uint64_t> evaluation_scenario_seeds(const ExperimentConfig& cfg, int n, const std::string& tag) {
    std::vector<std::uint64_t> s;
    for (int i = 0; i < n; ++i) s.push_back(derive_seed(cfg.evaluation.seed, tag, std::uint64_t(i)));
    return s;
}

// Every scenario seed a training stage can draw under this config.
inline std::set<std::uint64_t> training_scenario_seeds(const ExperimentConfig& cfg) {
    std::set<std::uint64_t> out;
    const int plant_eps = std::max({cfg.finetune.episodes, cfg.scratch.episodes, cfg.sweep.episodes});
    for (auto seed : cfg.run_seeds()) {
        for (const char* tag : {"pretrain-fixed", "pretrain-multi"})
            for (int e = 0; e < cfg.pretrain.episodes; ++e) out.insert(derive_seed(seed, tag, std::uint64_t(e)));
        for (int e = 0; e < plant_eps; ++e) out.insert(derive_seed(seed, "sim2real", std::uint64_t(e)));
    }
    return out;
}

inline void check_seed_disjointness(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& eval_seeds) {
    const auto train = training_scenario_seeds(cfg);
    const auto runs = cfg.run_seeds();
    for (auto s : eval_seeds) {
        if (train.count(s) || std::find(runs.begin(), runs.end(), s) != runs.end())
            throw ConfigError("evaluation scenario seed " + std::to_string(s) + " is also used for training");
    }
}

struct ScenarioComparison {
    std::uint64_t scenario_seed = 0;
    TrackingMetrics drl, pi;
};

inline std::vector<ScenarioComparison> evaluate_controllers(const ExperimentConfig& cfg, const nn::Mlp& actor,
                                                            const fs::path& out) {
    const auto seeds = evaluation_scenario_seeds(cfg, cfg.evaluation.scenarios, "eval-scenario");
    check_seed_disjointness(cfg, seeds);
    const Plant plant = make_plant(cfg);
    PlantBackend backend(plant, cfg.episode.omega_x, cfg.episode.dt);
    Env env(backend, make_action_map(cfg), cfg.reward);
    const EpisodeMode mode = episode_mode_from_string(cfg.evaluation.mode);
    const ObsScaler scaler = make_scaler(cfg);
    std::vector<ScenarioComparison> res;
    CsvTable metrics;
    metrics.comments = provenance(cfg, cfg.evaluation.seed, "evaluate");
    metrics.columns = {"scenario", "scenario_seed_lo", "drl_iae", "pi_iae", "drl_overshoot", "pi_overshoot",
                       "drl_settling", "pi_settling", "drl_return", "pi_return", "drl_fault", "pi_fault"};
    fs::create_directories(out);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const EpisodeSpec spec = make_episode(mode, cfg.episode, seeds[i]);
        ScenarioComparison c;
        c.scenario_seed = seeds[i];
        const EpisodeResult d = run_episode(env, spec, deterministic_policy(actor, scaler), true);
        const EpisodeResult p = run_episode(env, spec, pi_policy(cfg.pi, cfg.episode.dt), true);
        c.drl = tracking_metrics(d.log, cfg.episode.dt, cfg.evaluation.settle_band);
        c.pi = tracking_metrics(p.log, cfg.episode.dt, cfg.evaluation.settle_band);
        auto hdr = provenance(cfg, seeds[i], "evaluate");
        write_csv((out / ("eval_scenario" + std::to_string(i) + "_drl.csv")).string(), episode_table(d.log, hdr));
        write_csv((out / ("eval_scenario" + std::to_string(i) + "_pi.csv")).string(), episode_table(p.log, hdr));
        metrics.rows.push_back({double(i), double(seeds[i] & 0xffffffffu), c.drl.iae, c.pi.iae, c.drl.max_overshoot,
                                c.pi.max_overshoot, c.drl.mean_settling, c.pi.mean_settling, c.drl.ret, c.pi.ret,
                                c.drl.fault ? 1.0 : 0.0, c.pi.fault ? 1.0 : 0.0});
        res.push_back(c);
    }
    write_csv((out / "eval_metrics.csv").string(), metrics);
    return res;
}

// Mean deterministic-policy return over held-out scenarios.
inline double evaluation_return(const ExperimentConfig& cfg, const nn::Mlp& actor, int scenarios, const std::string& tag) {
    const auto seeds = evaluation_scenario_seeds(cfg, scenarios, tag);
    check_seed_disjointness(cfg, seeds);
    const Plant plant = make_plant(cfg);
    PlantBackend backend(plant, cfg.episode.omega_x, cfg.episode.dt);
    Env env(backend, make_action_map(cfg), cfg.reward);
    const EpisodeMode mode = episode_mode_from_string(cfg.finetune.mode);
    const ObsScaler scaler = make_scaler(cfg);
    double acc = 0.0;
    for (auto s : seeds) acc += run_episode(env, make_episode(mode, cfg.episode, s), deterministic_policy(actor, scaler), false).ret;
    return acc / double(seeds.size());
}

// ---------------------------------------------------------------- sweep

struct SweepArm {
    double sigma = 0.0;
    LearningCurve curve;
    std::vector<double> final_returns;  // per seed
    double median_final = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string sigma_tag(double s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", s);
    return buf;
}

// One (sigma, seed) run; writes its curve row file and final return.
inline void sweep_run(const ExperimentConfig& cfg, const fs::path& pretrained_dir, double sigma, std::uint64_t seed,
                      const fs::path& out) {
    const std::string stage = "sweep_sigma" + sigma_tag(sigma);
    train_on_plant(cfg, InitSource::pretrained, pretrained_dir, sigma, cfg.sweep.episodes, out, stage, {seed}, false);
    const PpoAgent agent = load_agent(out / (stage + "_seed" + std::to_string(seed)), cfg, sigma);
    const double fin = evaluation_return(cfg, agent.actor(), cfg.sweep.eval_scenarios, "sweep-eval");
    CsvTable t;
    t.comments = provenance(cfg, seed, stage);
    t.comments.push_back("pretrained_actor=" + file_hash(pretrained_dir / "actor.ckpt"));
    t.columns = {"sigma", "seed", "final_return"};
    t.rows.push_back({sigma, double(seed), fin});
    write_csv((out / (stage + "_seed" + std::to_string(seed) + "_final.csv")).string(), t);
}

inline std::vector<SweepArm> sweep_exploration(const ExperimentConfig& cfg, const fs::path& pretrained_dir,
                                               const fs::path& out, int workers = 1) {
    fs::create_directories(out);
    std::vector<std::pair<double, std::uint64_t>> jobs;
    for (double s : cfg.sweep.sigmas)
        for (auto seed : cfg.run_seeds()) jobs.emplace_back(s, seed);

    if (workers <= 1) {
        for (const auto& [s, seed] : jobs) sweep_run(cfg, pretrained_dir, s, seed, out);
    } else {
        std::size_t next = 0;
        int running = 0, failed = 0;
        auto reap = [&] {
            int status = 0;
            if (::wait(&status) > 0) {
                --running;
                if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failed;
            }
        };
        while (next < jobs.size()) {
            while (running >= workers) reap();
            const auto [s, seed] = jobs[next++];
            const pid_t pid = ::fork();
            if (pid < 0) throw Error("sweep: fork failed");
            if (pid == 0) {
                int code = 0;
                try {
                    sweep_run(cfg, pretrained_dir, s, seed, out);
                } catch (const std::exception& e) {
                    std::fprintf(stderr, "sweep worker sigma=%g seed=%llu: %s\n", s, (unsigned long long)seed, e.what());
                    code = 1;
                }
                std::fflush(nullptr);
                ::_exit(code);
            }
            ++running;
        }
        while (running > 0) reap();
        if (failed) throw Error("sweep: " + std::to_string(failed) + " worker(s) failed");
    }

    // aggregation reads only the per-run files
    std::vector<SweepArm> arms;
    CsvTable summary;
    summary.comments = provenance(cfg, cfg.seed, "sweep");
    summary.comments.push_back("pretrained_actor=" + file_hash(pretrained_dir / "actor.ckpt"));
    summary.columns = {"sigma", "median_final_return", "mean_final_return", "min_final_return", "max_final_return"};
    for (double s : cfg.sweep.sigmas) {
        SweepArm arm;
        arm.sigma = s;
        const std::string stage = "sweep_sigma" + sigma_tag(s);
        for (auto seed : cfg.run_seeds()) {
            const CsvTable st = read_csv((out / (stage + "_seed" + std::to_string(seed)) / "stats.csv").string());
            arm.curve.seeds.push_back(seed);
            arm.curve.returns.push_back(st.column_values("return"));
            const CsvTable f = read_csv((out / (stage + "_seed" + std::to_string(seed) + "_final.csv")).string());
            arm.final_returns.push_back(f.rows.at(0).at(2));
        }
        arm.median_final = median(arm.final_returns);
        write_csv((out / (stage + "_curve.csv")).string(), curve_table(arm.curve, provenance(cfg, cfg.seed, stage)));
        const auto [mn, mx] = std::minmax_element(arm.final_returns.begin(), arm.final_returns.end());
        summary.rows.push_back({s, arm.median_final,
                                std::accumulate(arm.final_returns.begin(), arm.final_returns.end(), 0.0) /
                                    double(arm.final_returns.size()),
                                *mn, *mx});
        arms.push_back(std::move(arm));
    }
    write_csv((out / "sweep_summary.csv").string(), summary);
    return arms;
}

}  // namespace orc
