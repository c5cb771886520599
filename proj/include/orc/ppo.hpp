#pragma once

// PPO-Clip with a fixed-sigma Gaussian policy and a state-value critic.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "orc/csv.hpp"
#include "orc/errors.hpp"
#include "orc/nn.hpp"
#include "orc/rng.hpp"

namespace orc {

struct PpoHyper {
    double lr_actor = 2e-4;
    double lr_critic = 3e-4;
    int n_epoch = 10;
    double gamma = 0.9;
    double lam = 0.95;
    double entropy_coef = 0.0;
    int minibatch = 64;
    double clip_eps = 0.2;
    std::size_t buffer_capacity = 2000000;
    int rollout_episodes = 1;
    double reward_scale = 0.01;  // critic regresses scaled returns

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0) || !(lam > 0.0 && lam <= 1.0))
            throw ConfigError("ppo: gamma and lam must lie in (0, 1]");
        if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("ppo: clip_eps must lie in (0, 1)");
        if (lr_actor < 0.0 || lr_critic < 0.0) throw ConfigError("ppo: learning rates must be non-negative");
        if (n_epoch < 1 || minibatch < 1 || rollout_episodes < 1) throw ConfigError("ppo: counts must be >= 1");
        if (!(reward_scale > 0.0)) throw ConfigError("ppo: reward_scale must be positive");
        if (buffer_capacity < 1) throw ConfigError("ppo: buffer_capacity must be >= 1");
    }
};

inline nn::Mlp make_actor(int obs_dim, Rng& rng, std::vector<int> hidden = {300, 200}) {
    nn::Mlp m(obs_dim, hidden, nn::Activation::tanh, 1, nn::Activation::tanh);
    m.init(rng);
    // near-zero initial mean action
    const auto& last = m.params().layout().back();
    m.params().values.segment(last.offset, last.size) *= 0.01;
    return m;
}

inline nn::Mlp make_critic(int obs_dim, Rng& rng, std::vector<int> hidden = {300, 200}) {
    nn::Mlp m(obs_dim, hidden, nn::Activation::relu, 1, nn::Activation::identity);
    m.init(rng);
    return m;
}

inline double gaussian_log_prob(double a, double mean, double sigma) {
    const double z = (a - mean) / sigma;
    return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

struct ActionSample {
    double action;     // clipped to [-1, 1], sent to the environment
    double raw;        // pre-clip sample
    double log_prob;   // of the raw sample
    double mean;
};

// sigma == 0 selects the deterministic mean action (log_prob is then 0).
inline ActionSample sample_action(const nn::Mlp& actor, const Eigen::VectorXd& obs, double sigma, Rng& rng) {
    if (sigma < 0.0) throw DomainError("sample_action: sigma must be non-negative");
    const double mu = actor.forward(obs)(0, 0);
    if (sigma == 0.0) return {std::clamp(mu, -1.0, 1.0), mu, 0.0, mu};
    const double raw = mu + sigma * rng.normal();
    return {std::clamp(raw, -1.0, 1.0), raw, gaussian_log_prob(raw, mu, sigma), mu};
}

struct RolloutStep {
    Eigen::VectorXd obs;
    double action = 0.0;  // pre-clip sample
    double log_prob = 0.0;
    double reward = 0.0;
    double value = 0.0;       // V(s_t), reward units
    double next_value = 0.0;  // V(s_{t+1}), used unless terminal
    bool terminal = false;    // no bootstrap past this step
    bool episode_end = false;  // recursion boundary (terminal or time limit)
};

class RolloutBuffer {
public:
    explicit RolloutBuffer(std::size_t capacity = 2000000) : capacity_(capacity) {}

    void push(RolloutStep s) {
        if (steps_.size() >= capacity_) throw EpisodeError("rollout buffer capacity exceeded");
        steps_.push_back(std::move(s));
    }
    void clear() { steps_.clear(); }
    std::size_t size() const noexcept { return steps_.size(); }
    bool empty() const noexcept { return steps_.empty(); }
    std::vector<RolloutStep>& steps() noexcept { return steps_; }
    const std::vector<RolloutStep>& steps() const noexcept { return steps_; }
    std::size_t capacity() const noexcept { return capacity_; }

private:
    std::size_t capacity_;
    std::vector<RolloutStep> steps_;
};

struct GaeResult {
    Eigen::VectorXd advantages;  // raw, not normalized
    Eigen::VectorXd returns;     // advantages + values
};

inline GaeResult compute_gae(const RolloutBuffer& buf, double gamma, double lam) {
    if (buf.empty()) throw EpisodeError("compute_gae: empty buffer");
    const auto& s = buf.steps();
    const Eigen::Index n = Eigen::Index(s.size());
    GaeResult r{Eigen::VectorXd(n), Eigen::VectorXd(n)};
    double next_adv = 0.0;
    for (Eigen::Index t = n - 1; t >= 0; --t) {
        const RolloutStep& st = s[std::size_t(t)];
        const double boot = st.terminal ? 0.0 : st.next_value;
        const double delta = st.reward + gamma * boot - st.value;
        const bool cut = st.episode_end || t == n - 1;
        next_adv = delta + (cut ? 0.0 : gamma * lam * next_adv);
        r.advantages[t] = next_adv;
        r.returns[t] = next_adv + st.value;
    }
    return r;
}

// clipped surrogate min(ratio*A, g(eps, A)), g = (1+eps)A for A >= 0, (1-eps)A otherwise.
inline double clip_term(double ratio, double advantage, double eps) {
    const double g = advantage >= 0.0 ? (1.0 + eps) * advantage : (1.0 - eps) * advantage;
    return std::min(ratio * advantage, g);
}

struct PolicyBatch {
    Eigen::MatrixXd obs;         // obs_dim x B
    Eigen::VectorXd actions;     // pre-clip samples
    Eigen::VectorXd old_log_prob;
    Eigen::VectorXd advantages;
};

struct PolicyObjective {
    double value = 0.0;  // mean clipped objective (to maximize)
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
};

// Mean clipped objective and, if grad != nullptr, its gradient w.r.t. the actor
// parameters p (accumulated). The entropy of a fixed-sigma Gaussian is constant,
// so entropy_coef only shifts the reported value.
inline PolicyObjective policy_objective(const nn::Mlp& actor, const Eigen::VectorXd& p, const PolicyBatch& b,
                                        double sigma, double eps, double entropy_coef, Eigen::VectorXd* grad) {
    const Eigen::Index n = b.obs.cols();
    std::vector<nn::DenseCache> caches;
    const Eigen::MatrixXd mu = actor.forward_with(p, b.obs, grad ? &caches : nullptr);
    Eigen::MatrixXd dmu(1, n);
    PolicyObjective out;
    int clipped = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double lp = gaussian_log_prob(b.actions[j], mu(0, j), sigma);
        const double ratio = std::exp(lp - b.old_log_prob[j]);
        const double adv = b.advantages[j];
        const double g = adv >= 0.0 ? (1.0 + eps) * adv : (1.0 - eps) * adv;
        const bool active = ratio * adv < g;
        out.value += std::min(ratio * adv, g);
        out.mean_ratio += ratio;
        if (ratio < 1.0 - eps || ratio > 1.0 + eps) ++clipped;
        // d ratio / d mu = ratio * (a - mu) / sigma^2
        dmu(0, j) = active ? adv * ratio * (b.actions[j] - mu(0, j)) / (sigma * sigma) / double(n) : 0.0;
    }
    out.value /= double(n);
    out.mean_ratio /= double(n);
    out.clip_fraction = double(clipped) / double(n);
    const double entropy = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * sigma * sigma);
    out.value += entropy_coef * entropy;
    if (grad) actor.backward_with(p, caches, dmu, *grad);
    return out;
}

// Value regression loss 0.5 * mean((V - target)^2) and its gradient.
inline double value_loss(const nn::Mlp& critic, const Eigen::VectorXd& p, const Eigen::MatrixXd& obs,
                         const Eigen::VectorXd& targets, Eigen::VectorXd* grad) {
    std::vector<nn::DenseCache> caches;
    const Eigen::MatrixXd v = critic.forward_with(p, obs, grad ? &caches : nullptr);
    const Eigen::RowVectorXd diff = v.row(0) - targets.transpose();
    const double loss = 0.5 * diff.squaredNorm() / double(obs.cols());
    if (grad) critic.backward_with(p, caches, diff / double(obs.cols()), *grad);
    return loss;
}

struct PpoStats {
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    int minibatches = 0;
    bool aborted = false;
};

class PpoAgent {
public:
    PpoAgent(nn::Mlp actor, nn::Mlp critic, PpoHyper hyper, double sigma)
        : actor_(std::move(actor)),
          critic_(std::move(critic)),
          hyper_(hyper),
          sigma_(sigma),
          actor_opt_(actor_.params().size()),
          critic_opt_(critic_.params().size()) {
        hyper_.validate();
        if (!(sigma > 0.0)) throw ConfigError("ppo: exploration sigma must be positive");
    }

    nn::Mlp& actor() noexcept { return actor_; }
    const nn::Mlp& actor() const noexcept { return actor_; }
    nn::Mlp& critic() noexcept { return critic_; }
    const nn::Mlp& critic() const noexcept { return critic_; }
    const PpoHyper& hyper() const noexcept { return hyper_; }
    double sigma() const noexcept { return sigma_; }

    // Critic output in reward units.
    double value(const Eigen::VectorXd& obs) const { return critic_.forward(obs)(0, 0) / hyper_.reward_scale; }

    PpoStats update(RolloutBuffer& buf, Rng& rng) {
        const GaeResult gae = compute_gae(buf, hyper_.gamma, hyper_.lam);
        const auto& st = buf.steps();
        const Eigen::Index n = Eigen::Index(st.size());
        const int obs_dim = int(st.front().obs.size());
        Eigen::MatrixXd obs(obs_dim, n);
        Eigen::VectorXd act(n), logp(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            obs.col(j) = st[std::size_t(j)].obs;
            act[j] = st[std::size_t(j)].action;
            logp[j] = st[std::size_t(j)].log_prob;
        }
        Eigen::VectorXd adv = gae.advantages;
        if (n > 1) {
            const double mean = adv.mean();
            const double sd = std::sqrt((adv.array() - mean).square().sum() / double(n));
            adv = (adv.array() - mean) / (sd + 1e-8);
        }
        const Eigen::VectorXd targets = gae.returns * hyper_.reward_scale;

        const Eigen::VectorXd actor_backup = actor_.params().values;
        const Eigen::VectorXd critic_backup = critic_.params().values;
        const nn::Adam actor_opt_backup = actor_opt_, critic_opt_backup = critic_opt_;

        PpoStats stats;
        std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
        for (Eigen::Index j = 0; j < n; ++j) idx[std::size_t(j)] = j;
        Eigen::VectorXd ga(actor_.params().size()), gc(critic_.params().size());
        try {
            for (int epoch = 0; epoch < hyper_.n_epoch; ++epoch) {
                for (std::size_t k = idx.size(); k > 1; --k) std::swap(idx[k - 1], idx[rng.below(k)]);
                for (Eigen::Index s = 0; s < n; s += hyper_.minibatch) {
                    const Eigen::Index m = std::min<Eigen::Index>(hyper_.minibatch, n - s);
                    PolicyBatch b{Eigen::MatrixXd(obs_dim, m), Eigen::VectorXd(m), Eigen::VectorXd(m), Eigen::VectorXd(m)};
                    Eigen::VectorXd tg(m);
                    for (Eigen::Index j = 0; j < m; ++j) {
                        const Eigen::Index i = idx[std::size_t(s + j)];
                        b.obs.col(j) = obs.col(i);
                        b.actions[j] = act[i];
                        b.old_log_prob[j] = logp[i];
                        b.advantages[j] = adv[i];
                        tg[j] = targets[i];
                    }
                    ga.setZero();
                    gc.setZero();
                    const PolicyObjective po = policy_objective(actor_, actor_.params().values, b, sigma_,
                                                                hyper_.clip_eps, hyper_.entropy_coef, &ga);
                    const double vl = value_loss(critic_, critic_.params().values, b.obs, tg, &gc);
                    if (!std::isfinite(po.value) || !std::isfinite(vl)) throw NonFiniteError("ppo: non-finite loss");
                    actor_opt_.step(actor_.params().values, -ga, hyper_.lr_actor);  // ascent
                    critic_opt_.step(critic_.params().values, gc, hyper_.lr_critic);
                    stats.mean_ratio += po.mean_ratio;
                    stats.clip_fraction += po.clip_fraction;
                    stats.actor_loss += -po.value;
                    stats.critic_loss += vl;
                    ++stats.minibatches;
                }
            }
            if (!actor_.params().values.allFinite() || !critic_.params().values.allFinite())
                throw NonFiniteError("ppo: non-finite parameters");
        } catch (const NonFiniteError&) {
            actor_.params().values = actor_backup;
            critic_.params().values = critic_backup;
            actor_opt_ = actor_opt_backup;
            critic_opt_ = critic_opt_backup;
            stats = PpoStats{};
            stats.aborted = true;
        }
        if (stats.minibatches > 0) {
            stats.mean_ratio /= stats.minibatches;
            stats.clip_fraction /= stats.minibatches;
            stats.actor_loss /= stats.minibatches;
            stats.critic_loss /= stats.minibatches;
        }
        buf.clear();
        return stats;
    }

private:
    nn::Mlp actor_, critic_;
    PpoHyper hyper_;
    double sigma_;
    nn::Adam actor_opt_, critic_opt_;
};

}  // namespace orc
