#pragma once

// LSTM one-step predictor of the plant observation trained on closed-loop data.
// Input per step: 6 observation channels plus the applied action.
// Output: the next observation, predicted as an increment on the last one.

#include <Eigen/Dense>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "orc/csv.hpp"
#include "orc/errors.hpp"
#include "orc/nn.hpp"
#include "orc/rng.hpp"

namespace orc {

constexpr int kObsDim = 6;
constexpr int kInputDim = kObsDim + 1;
using ObsVec = std::array<double, kObsDim>;

enum ObsChannel { kPe = 0, kToe = 1, kMai = 2, kOmegaP = 3, kSh = 4, kErr = 5 };
inline const std::array<const char*, kObsDim> kObsNames{"p_e", "t_oe", "m_ai", "omega_p", "sh", "err"};

// Closed-loop record: row k holds the observation at step k and the action
// applied from it. `segment` increments after each plant restart.
struct Trajectory {
    std::vector<ObsVec> obs;
    std::vector<double> action;
    std::vector<int> segment;
    std::vector<double> setpoint;
    std::vector<double> t_a;

    std::size_t size() const { return obs.size(); }
    void push(const ObsVec& o, double a, int seg, double sp, double ta) {
        obs.push_back(o);
        action.push_back(a);
        segment.push_back(seg);
        setpoint.push_back(sp);
        t_a.push_back(ta);
    }
};

inline CsvTable trajectory_table(const Trajectory& tr, std::vector<std::string> comments = {}) {
    CsvTable t;
    t.comments = std::move(comments);
    t.columns = {"step", "segment", "setpoint"};
    for (const char* n : kObsNames) t.columns.emplace_back(n);
    t.columns.insert(t.columns.end(), {"action", "t_a"});
    for (std::size_t k = 0; k < tr.size(); ++k) {
        std::vector<double> r{double(k), double(tr.segment[k]), tr.setpoint[k]};
        r.insert(r.end(), tr.obs[k].begin(), tr.obs[k].end());
        r.push_back(tr.action[k]);
        r.push_back(tr.t_a[k]);
        t.rows.push_back(std::move(r));
    }
    return t;
}

inline Trajectory trajectory_from_table(const CsvTable& t) {
    Trajectory tr;
    std::array<std::size_t, kObsDim> oc{};
    for (int c = 0; c < kObsDim; ++c) oc[c] = t.column(kObsNames[c]);
    const std::size_t cs = t.column("segment"), csp = t.column("setpoint"), ca = t.column("action"),
                      cta = t.column("t_a");
    for (const auto& r : t.rows) {
        ObsVec o{};
        for (int c = 0; c < kObsDim; ++c) o[c] = r[oc[c]];
        tr.push(o, r[ca], int(r[cs]), r[csp], r[cta]);
    }
    return tr;
}

// Per-channel min-max map onto [-1, 1]. Constant channels use a unit span.
struct Normalizer {
    Eigen::VectorXd lo, hi;

    static Normalizer fit(const Eigen::MatrixXd& rows_by_channel) {
        if (rows_by_channel.cols() == 0) throw DatasetError("normalizer: no rows to fit");
        Normalizer n;
        n.lo = rows_by_channel.rowwise().minCoeff();
        n.hi = rows_by_channel.rowwise().maxCoeff();
        return n;
    }

    double span(Eigen::Index c) const { return hi[c] > lo[c] ? hi[c] - lo[c] : 1.0; }
    double forward(Eigen::Index c, double v) const { return 2.0 * (v - lo[c]) / span(c) - 1.0; }
    double inverse(Eigen::Index c, double z) const { return lo[c] + 0.5 * (z + 1.0) * span(c); }

    Eigen::MatrixXd transform(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd z(x.rows(), x.cols());
        for (Eigen::Index c = 0; c < x.rows(); ++c)
            for (Eigen::Index j = 0; j < x.cols(); ++j) z(c, j) = forward(c, x(c, j));
        return z;
    }
    Eigen::MatrixXd inverse_transform(const Eigen::MatrixXd& z) const {
        Eigen::MatrixXd x(z.rows(), z.cols());
        for (Eigen::Index c = 0; c < z.rows(); ++c)
            for (Eigen::Index j = 0; j < z.cols(); ++j) x(c, j) = inverse(c, z(c, j));
        return x;
    }
};

inline Eigen::MatrixXd trajectory_matrix(const Trajectory& tr) {
    Eigen::MatrixXd m(kInputDim, Eigen::Index(tr.size()));
    for (std::size_t k = 0; k < tr.size(); ++k) {
        for (int c = 0; c < kObsDim; ++c) m(c, Eigen::Index(k)) = tr.obs[k][c];
        m(kObsDim, Eigen::Index(k)) = tr.action[k];
    }
    return m;
}

struct SequenceDataset {
    int window = 10;
    std::size_t n_train_rows = 0;
    Normalizer norm;
    Eigen::MatrixXd data;              // normalized, kInputDim x rows
    std::vector<long> train_targets;   // row index of each window's target
    std::vector<long> test_targets;
};

// Windows cover rows [target - W, target - 1] and must not straddle a restart.
inline SequenceDataset build_dataset(const Trajectory& tr, int window, std::size_t n_train_rows) {
    if (window < 1) throw DatasetError("build_dataset: window must be >= 1");
    if (tr.size() < std::size_t(window) + 1)
        throw DatasetError("build_dataset: trajectory of length " + std::to_string(tr.size()) +
                           " is too short for window " + std::to_string(window));
    n_train_rows = std::min(n_train_rows, tr.size());
    SequenceDataset ds;
    ds.window = window;
    ds.n_train_rows = n_train_rows;
    const Eigen::MatrixXd raw = trajectory_matrix(tr);
    ds.norm = Normalizer::fit(raw.leftCols(Eigen::Index(n_train_rows)));
    ds.data = ds.norm.transform(raw);
    for (long tgt = window; tgt < long(tr.size()); ++tgt) {
        if (tr.segment[tgt - window] != tr.segment[tgt]) continue;
        (std::size_t(tgt) < n_train_rows ? ds.train_targets : ds.test_targets).push_back(tgt);
    }
    return ds;
}

struct SurrogateCache {
    nn::LstmCache l1, l2;
    std::vector<Eigen::MatrixXd> mask1;
    Eigen::MatrixXd mask2;
    nn::DenseCache head;
};

class SurrogateNet {
public:
    SurrogateNet(int hidden1 = 80, int hidden2 = 100, double dropout = 0.2, int window = 10)
        : window_(window), dropout_(dropout) {
        l1_ = nn::Lstm(ps_, ps_.add_lstm(kInputDim, hidden1));
        l2_ = nn::Lstm(ps_, ps_.add_lstm(hidden1, hidden2));
        head_ = nn::Dense(ps_, ps_.add_dense(hidden2, kObsDim, nn::Activation::identity));
    }

    void init(Rng& rng) {
        l1_.init(ps_.values, rng);
        l2_.init(ps_.values, rng);
        head_.init(ps_.values, rng);
        // start from the persistence forecast
        ps_.values.segment(ps_.layout()[2].offset, ps_.layout()[2].size) *= 0.1;
    }

    int window() const noexcept { return window_; }
    double dropout() const noexcept { return dropout_; }
    nn::ParamSet& params() noexcept { return ps_; }
    const nn::ParamSet& params() const noexcept { return ps_; }
    const Normalizer& normalizer() const noexcept { return norm_; }
    void set_normalizer(Normalizer n) { norm_ = std::move(n); }

    // xs: W normalized input matrices (kInputDim x B). Returns normalized next observation.
    Eigen::MatrixXd forward(const Eigen::VectorXd& p, const std::vector<Eigen::MatrixXd>& xs, Rng* train_rng,
                            SurrogateCache* cache) const {
        if (int(xs.size()) != window_) {
            std::ostringstream os;
            os << "surrogate: expected window of " << window_ << " steps, got " << xs.size();
            throw ShapeError(os.str());
        }
        std::vector<Eigen::MatrixXd> h1 = l1_.forward(p, xs, cache ? &cache->l1 : nullptr);
        if (train_rng) {
            nn::Dropout d{dropout_};
            if (cache) cache->mask1.assign(h1.size(), {});
            for (std::size_t t = 0; t < h1.size(); ++t)
                h1[t] = d.forward(h1[t], *train_rng, cache ? &cache->mask1[t] : nullptr);
        } else if (cache) {
            cache->mask1.assign(h1.size(), Eigen::MatrixXd());
        }
        const std::vector<Eigen::MatrixXd> h2 = l2_.forward(p, h1, cache ? &cache->l2 : nullptr);
        Eigen::MatrixXd last = h2.back();
        if (train_rng) {
            last = nn::Dropout{dropout_}.forward(last, *train_rng, cache ? &cache->mask2 : nullptr);
        } else if (cache) {
            cache->mask2.resize(0, 0);
        }
        Eigen::MatrixXd y = head_.forward(p, last, cache ? &cache->head : nullptr);
        y += xs.back().topRows(kObsDim);
        return y;
    }

    // dy: dL/d(normalized prediction). Accumulates into g.
    void backward(const Eigen::VectorXd& p, const SurrogateCache& c, const Eigen::MatrixXd& dy, Eigen::VectorXd& g) const {
        Eigen::MatrixXd dlast = head_.backward(p, c.head, dy, g);
        dlast = nn::Dropout::backward(c.mask2, dlast);
        std::vector<Eigen::MatrixXd> dh2(std::size_t(window_), Eigen::MatrixXd::Zero(dlast.rows(), dlast.cols()));
        dh2.back() = dlast;
        std::vector<Eigen::MatrixXd> dh1 = l2_.backward(p, c.l2, dh2, g);
        for (std::size_t t = 0; t < dh1.size(); ++t) dh1[t] = nn::Dropout::backward(c.mask1[t], dh1[t]);
        l1_.backward(p, c.l1, dh1, g);
    }

    // Physical-units one-step prediction. obs_hist and act_hist hold the last W
    // rows, with act_hist.back() the action applied at the current step.
    ObsVec predict_next(const std::vector<ObsVec>& obs_hist, const std::vector<double>& act_hist) const {
        if (int(obs_hist.size()) != window_ || int(act_hist.size()) != window_) {
            std::ostringstream os;
            os << "predict_next: history must hold " << window_ << " rows (got " << obs_hist.size() << " observations, "
               << act_hist.size() << " actions)";
            throw ShapeError(os.str());
        }
        std::vector<Eigen::MatrixXd> xs(std::size_t(window_), Eigen::MatrixXd(kInputDim, 1));
        for (int t = 0; t < window_; ++t) {
            for (int c = 0; c < kObsDim; ++c) xs[t](c, 0) = norm_.forward(c, obs_hist[t][c]);
            xs[t](kObsDim, 0) = norm_.forward(kObsDim, act_hist[t]);
        }
        const Eigen::MatrixXd y = forward(ps_.values, xs, nullptr, nullptr);
        ObsVec out{};
        for (int c = 0; c < kObsDim; ++c) out[c] = norm_.inverse(c, y(c, 0));
        return out;
    }

private:
    int window_;
    double dropout_;
    nn::ParamSet ps_;
    nn::Lstm l1_, l2_;
    nn::Dense head_;
    Normalizer norm_;
};

// Channels owned by the caller during free run. Empty vectors leave the model's
// prediction in place. `setpoint` rewrites err as sh - setpoint.
struct ExogenousChannels {
    std::vector<double> m_ai;
    std::vector<double> omega_p;
    std::vector<double> setpoint;
};

inline void apply_exogenous(ObsVec& o, const ExogenousChannels& ex, std::size_t k) {
    if (k < ex.m_ai.size()) o[kMai] = ex.m_ai[k];
    if (k < ex.omega_p.size()) o[kOmegaP] = ex.omega_p[k];
    if (k < ex.setpoint.size()) o[kErr] = o[kSh] - ex.setpoint[k];
}

// Feeds predictions back as inputs. obs_hist holds W observations, act_hist the
// W-1 actions that preceded the last one; actions[k] is applied at free-run step k.
inline std::vector<ObsVec> free_run(const SurrogateNet& net, std::vector<ObsVec> obs_hist,
                                    std::vector<double> act_hist, const std::vector<double>& actions,
                                    const ExogenousChannels& ex = {}) {
    const int w = net.window();
    if (int(obs_hist.size()) != w || int(act_hist.size()) != w - 1)
        throw ShapeError("free_run: need W observations and W-1 prior actions");
    std::vector<ObsVec> out;
    out.reserve(actions.size());
    for (std::size_t k = 0; k < actions.size(); ++k) {
        act_hist.push_back(actions[k]);
        ObsVec next = net.predict_next(obs_hist, act_hist);
        apply_exogenous(next, ex, k);
        out.push_back(next);
        obs_hist.erase(obs_hist.begin());
        obs_hist.push_back(next);
        act_hist.erase(act_hist.begin());
    }
    return out;
}

struct SurrogateTrainConfig {
    int max_epochs = 200;
    int batch = 64;
    double lr = 1e-3;
    int patience = 8;            // epochs without test-MSE improvement
    double min_improvement = 1e-3;  // relative
    std::uint64_t seed = 0;
    double time_budget_s = 0.0;  // 0 = unlimited
};

struct SurrogateTrainReport {
    int epochs_run = 0;
    int best_epoch = 0;
    double initial_test_mse = 0.0;
    double train_mse = 0.0;
    double test_mse = 0.0;
    bool diverged = false;
    bool time_limited = false;  // stopped by the wall-clock guard; rerun may differ
    std::vector<double> test_history;
};

namespace detail {
inline void gather_batch(const SequenceDataset& ds, const std::vector<long>& targets, std::size_t begin,
                         std::size_t end, std::vector<Eigen::MatrixXd>& xs, Eigen::MatrixXd& y) {
    const Eigen::Index b = Eigen::Index(end - begin);
    xs.assign(std::size_t(ds.window), Eigen::MatrixXd(kInputDim, b));
    y.resize(kObsDim, b);
    for (Eigen::Index j = 0; j < b; ++j) {
        const long tgt = targets[begin + std::size_t(j)];
        for (int t = 0; t < ds.window; ++t) xs[t].col(j) = ds.data.col(tgt - ds.window + t);
        y.col(j) = ds.data.col(tgt).topRows(kObsDim);
    }
}
}  // namespace detail

// Mean squared one-step error over all windows and channels, normalized units.
inline double surrogate_mse(const SurrogateNet& net, const SequenceDataset& ds, const std::vector<long>& targets,
                            const Eigen::VectorXd* params = nullptr) {
    if (targets.empty()) throw DatasetError("surrogate_mse: no windows");
    const Eigen::VectorXd& p = params ? *params : net.params().values;
    double acc = 0.0;
    std::vector<Eigen::MatrixXd> xs;
    Eigen::MatrixXd y;
    for (std::size_t s = 0; s < targets.size(); s += 512) {
        const std::size_t e = std::min(targets.size(), s + 512);
        detail::gather_batch(ds, targets, s, e, xs, y);
        acc += (net.forward(p, xs, nullptr, nullptr) - y).squaredNorm();
    }
    return acc / double(targets.size() * kObsDim);
}

inline SurrogateTrainReport train_surrogate(SurrogateNet& net, const SequenceDataset& ds,
                                            const SurrogateTrainConfig& cfg) {
    if (ds.window != net.window()) throw ShapeError("train_surrogate: dataset window differs from network window");
    if (ds.train_targets.empty() || ds.test_targets.empty()) throw DatasetError("train_surrogate: empty split");
    net.set_normalizer(ds.norm);
    SurrogateTrainReport rep;
    rep.initial_test_mse = surrogate_mse(net, ds, ds.test_targets);
    double best = rep.initial_test_mse;
    Eigen::VectorXd best_params = net.params().values;
    Eigen::VectorXd& p = net.params().values;
    nn::Adam opt(p.size());
    Rng rng(derive_seed(cfg.seed, "surrogate-train"));
    std::vector<long> order = ds.train_targets;
    Eigen::VectorXd grad(p.size());
    std::vector<Eigen::MatrixXd> xs;
    Eigen::MatrixXd y;
    SurrogateCache cache;
    int since_best = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.below(k)]);
        const Eigen::VectorXd epoch_start = p;
        bool bad = false;
        for (std::size_t s = 0; s < order.size(); s += std::size_t(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + std::size_t(cfg.batch));
            detail::gather_batch(ds, order, s, e, xs, y);
            const Eigen::MatrixXd pred = net.forward(p, xs, &rng, &cache);
            const Eigen::MatrixXd diff = pred - y;
            const double loss = diff.squaredNorm() / double(diff.size());
            if (!std::isfinite(loss)) {
                bad = true;
                break;
            }
            grad.setZero();
            net.backward(p, cache, (2.0 / double(diff.size())) * diff, grad);
            if (!grad.allFinite()) {
                bad = true;
                break;
            }
            opt.step(p, grad, cfg.lr);
        }
        rep.epochs_run = epoch;
        const double test = bad ? std::numeric_limits<double>::quiet_NaN() : surrogate_mse(net, ds, ds.test_targets);
        if (bad || !std::isfinite(test) || !p.allFinite()) {
            p = epoch_start;  // last finite state
            rep.diverged = true;
            break;
        }
        rep.test_history.push_back(test);
        if (test < best * (1.0 - cfg.min_improvement)) {
            best = test;
            best_params = p;
            rep.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
        if (cfg.time_budget_s > 0.0 &&
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() > cfg.time_budget_s) {
            rep.time_limited = epoch < cfg.max_epochs;
            break;
        }
    }
    if (!rep.diverged) p = best_params;
    rep.test_mse = surrogate_mse(net, ds, ds.test_targets);
    rep.train_mse = surrogate_mse(net, ds, ds.train_targets);
    return rep;
}

inline std::string hexfloat(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

inline std::string vector_hex(const Eigen::VectorXd& v) {
    std::string s;
    for (Eigen::Index k = 0; k < v.size(); ++k) s += (k ? " " : "") + hexfloat(v[k]);
    return s;
}

inline Eigen::VectorXd vector_from_hex(const std::string& s) {
    std::istringstream is(s);
    std::vector<double> vals;
    std::string tok;
    while (is >> tok) vals.push_back(std::strtod(tok.c_str(), nullptr));
    return Eigen::Map<Eigen::VectorXd>(vals.data(), Eigen::Index(vals.size()));
}

inline void save_surrogate(const std::string& path, const SurrogateNet& net,
                           std::vector<std::pair<std::string, std::string>> meta = {}) {
    meta.emplace_back("window", std::to_string(net.window()));
    meta.emplace_back("dropout", hexfloat(net.dropout()));
    meta.emplace_back("norm_lo", vector_hex(net.normalizer().lo));
    meta.emplace_back("norm_hi", vector_hex(net.normalizer().hi));
    nn::save_checkpoint(path, net.params(), meta);
}

inline SurrogateNet load_surrogate(const std::string& path, nn::LoadedCheckpoint* out = nullptr) {
    nn::LoadedCheckpoint ck = nn::read_checkpoint(path);
    if (ck.layout.size() != 3 || ck.layout[0].kind != "lstm" || ck.layout[1].kind != "lstm")
        throw CheckpointError("'" + path + "' is not a surrogate checkpoint");
    SurrogateNet net(ck.layout[0].out, ck.layout[1].out, std::strtod(ck.meta_value("dropout").c_str(), nullptr),
                     std::stoi(ck.meta_value("window")));
    if (ck.layout != net.params().layout()) throw CheckpointError("surrogate layout mismatch in '" + path + "'");
    net.params().values = ck.values;
    net.set_normalizer({vector_from_hex(ck.meta_value("norm_lo")), vector_from_hex(ck.meta_value("norm_hi"))});
    if (out) *out = std::move(ck);
    return net;
}

}  // namespace orc
