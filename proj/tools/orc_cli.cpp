// Command-line front end: one subcommand per pipeline stage.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "orc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace orc;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kCheckpoint = 4, kDataset = 5, kNumeric = 6 };

int log_level() {
    const char* v = std::getenv("ORC_LOG");
    if (!v) return 1;
    const std::string s(v);
    if (s == "quiet") return 0;
    if (s == "debug") return 2;
    return 1;
}

template <class... Args>
void info(const char* fmt, Args... args) {
    if (log_level() < 1) return;
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

struct Common {
    std::string config;
    std::string out;
    long long seed = -1;
};

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed >= 0) cfg.seed = std::uint64_t(c.seed);
    if (!c.out.empty()) cfg.output_dir = c.out;
    validate(cfg);
    fs::create_directories(cfg.output_dir);
    return cfg;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "JSON config file (defaults when omitted)");
    sub->add_option("--out", c.out, "output directory (overrides config output_dir)");
    sub->add_option("--seed", c.seed, "base seed (overrides config seed)");
}

double median_of(std::vector<double> v) { return median(std::move(v)); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ORC superheat control lab"};
    app.require_subcommand(1);

    Common c;
    std::string data_path, surrogate_path, pretrained_dir, policy_dir, mode = "fixed";
    double sigma = -1.0, action = 0.0, setpoint = 20.0, m_a = -1.0;
    int steps = 300, workers = 1, smooth = 10;
    bool use_pi = false, dump = false;

    auto* sim = app.add_subcommand("simulate", "run the plant under a constant action or the PI loop");
    add_common(sim, c);
    sim->add_option("--steps", steps)->check(CLI::PositiveNumber);
    sim->add_option("--action", action, "constant normalized action");
    sim->add_flag("--pi", use_pi, "close the loop with the PI controller");
    sim->add_option("--setpoint", setpoint, "superheat setpoint (K)");
    sim->add_option("--m-a", m_a, "waste-heat flow (kg/s), nominal when omitted");

    auto* collect = app.add_subcommand("collect-data", "closed-loop PI data set");
    add_common(collect, c);

    auto* tsur = app.add_subcommand("train-surrogate", "fit the LSTM surrogate and validate it");
    add_common(tsur, c);
    tsur->add_option("--data", data_path, "data CSV (default <out>/data.csv)");

    auto* pre = app.add_subcommand("pretrain", "PPO against the surrogate");
    add_common(pre, c);
    pre->add_option("--surrogate", surrogate_path, "surrogate checkpoint (default <out>/surrogate.ckpt)");
    pre->add_option("--mode", mode, "episode mode")->check(CLI::IsMember({"fixed", "multi"}));

    auto* fine = app.add_subcommand("finetune", "PPO on the plant starting from pre-trained networks");
    add_common(fine, c);
    fine->add_option("--pretrained", pretrained_dir, "directory with actor.ckpt and critic.ckpt")->required();
    fine->add_option("--sigma", sigma, "exploration std-dev (config finetune.sigma when omitted)");

    auto* scratch = app.add_subcommand("scratch", "PPO on the plant from freshly initialized networks");
    add_common(scratch, c);

    auto* eval = app.add_subcommand("evaluate", "deterministic policy vs PI on held-out scenarios");
    add_common(eval, c);
    eval->add_option("--policy", policy_dir, "directory with actor.ckpt")->required();

    auto* sweep = app.add_subcommand("sweep", "exploration-level sweep from one pre-trained checkpoint");
    add_common(sweep, c);
    sweep->add_option("--pretrained", pretrained_dir, "directory with actor.ckpt and critic.ckpt")->required();
    sweep->add_option("--workers", workers, "parallel worker processes")->check(CLI::PositiveNumber);

    auto* transfer = app.add_subcommand("transfer", "episodes-to-threshold from fine-tune and scratch curves");
    add_common(transfer, c);
    std::string finetune_csv, scratch_csv;
    transfer->add_option("--finetune-curve", finetune_csv)->required();
    transfer->add_option("--scratch-curve", scratch_csv)->required();
    transfer->add_option("--smooth", smooth, "trailing window applied to both curves")->check(CLI::PositiveNumber);

    auto* vcfg = app.add_subcommand("validate-config", "check a config and print its hash");
    add_common(vcfg, c);
    vcfg->add_flag("--dump", dump, "print the fully resolved config");

    auto* gcheck = app.add_subcommand("grad-check", "finite-difference gradient checks on small networks");
    add_common(gcheck, c);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    try {
        const ExperimentConfig cfg = resolve(c);
        const fs::path out = cfg.output_dir;

        if (*vcfg) {
            if (dump) std::cout << config_to_json(cfg).dump(2) << '\n';
            std::cout << "config_hash " << config_hash(cfg) << '\n';
        } else if (*sim) {
            const Plant plant = make_plant(cfg);
            PlantBackend backend(plant, cfg.episode.omega_x, cfg.episode.dt);
            Env env(backend, make_action_map(cfg), cfg.reward);
            EpisodeSpec spec;
            spec.max_steps = steps;
            spec.setpoint_schedule = {{0, setpoint}};
            const double ma = m_a > 0.0 ? m_a : cfg.episode.disturbance.m_a_nominal;
            spec.disturbance.assign(std::size_t(steps) + 1, {ma, cfg.episode.disturbance.t_a});
            spec.initial_action = use_pi ? 0.0 : action;
            const Policy pol = use_pi ? pi_policy(cfg.pi, cfg.episode.dt) : Policy([action](const ObsVec&) { return action; });
            const EpisodeResult r = run_episode(env, spec, pol, true);
            write_csv((out / "simulate.csv").string(), episode_table(r.log, provenance(cfg, cfg.seed, "simulate")));
            std::cout << "steps " << r.length << " return " << r.ret << " fault " << r.fault << " final_sh "
                      << r.log.back().obs[kSh] << '\n';
        } else if (*collect) {
            const CollectionReport rep = collect_closed_loop_data(cfg, cfg.seed);
            write_csv((out / "data.csv").string(), trajectory_table(rep.trajectory, provenance(cfg, cfg.seed, "collect-data")));
            std::cout << "rows " << rep.trajectory.size() << " restarts " << rep.restarts << '\n';
        } else if (*tsur) {
            const Trajectory tr = trajectory_from_table(read_csv(data_path.empty() ? (out / "data.csv").string() : data_path));
            SurrogateNet net(cfg.surrogate.hidden1, cfg.surrogate.hidden2, cfg.surrogate.dropout, cfg.surrogate.window);
            const SurrogateStageResult r = train_surrogate_stage(cfg, tr, cfg.seed, net);
            save_surrogate_stage(out / "surrogate.ckpt", net, r, tr, cfg, cfg.seed);
            write_text(out / "surrogate_report.txt", provenance(cfg, cfg.seed, "train-surrogate"), surrogate_report_text(r));
            write_csv((out / "free_run.csv").string(), free_run_table(r.free_run, provenance(cfg, cfg.seed, "train-surrogate")));
            std::cout << surrogate_report_text(r);
            if (r.train.test_mse > cfg.surrogate.mse_threshold)
                info("warning: test MSE %g above threshold %g", r.train.test_mse, cfg.surrogate.mse_threshold);
        } else if (*pre) {
            nn::LoadedCheckpoint ck;
            const SurrogateNet net =
                load_surrogate(surrogate_path.empty() ? (out / "surrogate.ckpt").string() : surrogate_path, &ck);
            verify_surrogate_reference(net, ck);
            require_valid_surrogate(cfg, ck);
            const PretrainResult r = pretrain(cfg, net, episode_mode_from_string(mode), out);
            for (std::size_t i = 0; i < r.curve.seeds.size(); ++i)
                std::cout << "seed " << r.curve.seeds[i] << " first " << r.curve.returns[i].front() << " last "
                          << r.curve.returns[i].back() << " dir " << r.agent_dirs[i].string() << '\n';
        } else if (*fine) {
            const LearningCurve curve =
                finetune_sim2real(cfg, pretrained_dir, sigma > 0.0 ? sigma : cfg.finetune.sigma, out);
            for (std::size_t i = 0; i < curve.seeds.size(); ++i)
                std::cout << "seed " << curve.seeds[i] << " threshold " << transfer_threshold(curve.returns[i]) << '\n';
        } else if (*scratch) {
            const LearningCurve curve = train_from_scratch(cfg, out);
            for (std::size_t i = 0; i < curve.seeds.size(); ++i)
                std::cout << "seed " << curve.seeds[i] << " last " << curve.returns[i].back() << '\n';
        } else if (*eval) {
            const PpoAgent agent = load_agent(policy_dir, cfg, cfg.finetune.sigma);
            const auto res = evaluate_controllers(cfg, agent.actor(), out);
            int wins = 0;
            for (std::size_t i = 0; i < res.size(); ++i) {
                wins += res[i].drl.iae < res[i].pi.iae;
                std::cout << "scenario " << i << " drl_iae " << res[i].drl.iae << " pi_iae " << res[i].pi.iae << '\n';
            }
            std::cout << "drl_wins " << wins << " of " << res.size() << '\n';
        } else if (*sweep) {
            const auto arms = sweep_exploration(cfg, pretrained_dir, out, workers);
            for (const auto& a : arms) std::cout << "sigma " << a.sigma << " median_final " << a.median_final << '\n';
        } else if (*transfer) {
            const CsvTable f = read_csv(finetune_csv), s = read_csv(scratch_csv);
            std::vector<double> ratios;
            for (const TransferSeed& t : transfer_analysis(f, s, std::size_t(smooth))) {
                ratios.push_back(t.ratio);
                std::cout << t.column << " threshold " << t.threshold << " finetune " << t.finetune_episodes << " scratch "
                          << t.scratch_episodes << (t.scratch_censored ? " (censored)" : "") << " raw " << t.finetune_raw
                          << "/" << t.scratch_raw << '\n';
            }
            std::cout << "median_ratio " << median_of(ratios) << '\n';
        } else if (*gcheck) {
            Rng rng(derive_seed(cfg.seed, "grad-check"));
            nn::Mlp m(3, {5, 4}, nn::Activation::tanh, 2, nn::Activation::identity);
            m.init(rng);
            Eigen::MatrixXd x(3, 4);
            for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
            auto loss = [&](const Eigen::VectorXd& p) { return 0.5 * m.forward_with(p, x, nullptr).squaredNorm(); };
            std::vector<nn::DenseCache> caches;
            const Eigen::MatrixXd y = m.forward_with(m.params().values, x, &caches);
            Eigen::VectorXd g = Eigen::VectorXd::Zero(m.params().size());
            m.backward_with(m.params().values, caches, y, g);
            const auto r = nn::grad_check(m.params().values, loss, g);
            std::cout << "mlp max_rel_error " << r.max_rel_error << '\n';
            return r.max_rel_error < 1e-4 ? kOk : kNumeric;
        }
        return kOk;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error kind=config message=\"%s\"\n", e.what());
        return kConfig;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "error kind=checkpoint message=\"%s\"\n", e.what());
        return kCheckpoint;
    } catch (const DatasetError& e) {
        std::fprintf(stderr, "error kind=dataset message=\"%s\"\n", e.what());
        return kDataset;
    } catch (const SolverError& e) {
        std::fprintf(stderr, "error kind=numeric message=\"%s\"\n", e.what());
        return kNumeric;
    } catch (const NonFiniteError& e) {
        std::fprintf(stderr, "error kind=numeric message=\"%s\"\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error kind=failure message=\"%s\"\n", e.what());
        return kFailure;
    }
}
