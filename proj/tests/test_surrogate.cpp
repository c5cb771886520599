#include <gtest/gtest.h>

#include <filesystem>

#include "orc/surrogate.hpp"

using namespace orc;

namespace {

// Linear stable toy dynamics with a regime restart every 37 rows.
Trajectory toy_trajectory(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Trajectory tr;
    ObsVec o{1.2e6, 400.0, 0.45, 39.0, 20.0, 0.0};
    int seg = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (k > 0 && k % 37 == 0) ++seg;
        const double a = std::sin(0.07 * double(k)) + 0.2 * rng.normal();
        tr.push(o, a, seg, 20.0, 430.0);
        o[kSh] = 0.9 * o[kSh] + 2.0 - 1.5 * a;
        o[kPe] = 0.95 * o[kPe] + 0.05 * 1.2e6 + 2e4 * a;
        o[kToe] = 380.0 + o[kSh];
        o[kMai] = 0.45 + 0.05 * std::sin(0.01 * double(k));
        o[kOmegaP] = 39.0 + 3.0 * a;
        o[kErr] = o[kSh] - 20.0;
    }
    return tr;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("orc_sur_" + name)).string();
}

}  // namespace

TEST(Normalizer, MapsTrainingRangeOntoUnitInterval) {
    Eigen::MatrixXd x(2, 4);
    x << 1.0, 3.0, 2.0, 5.0,  //
        7.0, 7.0, 7.0, 7.0;
    const Normalizer n = Normalizer::fit(x);
    EXPECT_EQ(n.forward(0, 1.0), -1.0);
    EXPECT_EQ(n.forward(0, 5.0), 1.0);
    EXPECT_EQ(n.forward(0, 3.0), 0.0);
    EXPECT_EQ(n.span(1), 1.0);  // constant channel
    EXPECT_EQ(n.forward(1, 7.0), -1.0);
    const Eigen::MatrixXd back = n.inverse_transform(n.transform(x));
    EXPECT_LT((back - x).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(Normalizer::fit(Eigen::MatrixXd(2, 0)), DatasetError);
}

TEST(Dataset, WindowsNeverStraddleRestartsAndSplitIsChronological) {
    const Trajectory tr = toy_trajectory(400, 1);
    const SequenceDataset ds = build_dataset(tr, 10, 320);
    EXPECT_FALSE(ds.train_targets.empty());
    EXPECT_FALSE(ds.test_targets.empty());
    for (long t : ds.train_targets) EXPECT_LT(t, 320);
    for (long t : ds.test_targets) EXPECT_GE(t, 320);
    std::size_t expected = 0;
    for (long t = 10; t < 400; ++t) {
        bool same = true;
        for (long r = t - 10; r <= t; ++r) same &= tr.segment[std::size_t(r)] == tr.segment[std::size_t(t)];
        expected += same;
        const bool listed = std::count(ds.train_targets.begin(), ds.train_targets.end(), t) +
                            std::count(ds.test_targets.begin(), ds.test_targets.end(), t);
        EXPECT_EQ(listed, same) << t;
    }
    EXPECT_EQ(ds.train_targets.size() + ds.test_targets.size(), expected);
    // normalizer sees training rows only
    double sh_max = -1e300;
    for (std::size_t k = 0; k < 320; ++k) sh_max = std::max(sh_max, tr.obs[k][kSh]);
    EXPECT_EQ(ds.norm.hi[kSh], sh_max);
    EXPECT_THROW(build_dataset(toy_trajectory(5, 1), 10, 4), DatasetError);
}

TEST(Trajectory, CsvRoundTripIsExact) {
    const Trajectory tr = toy_trajectory(60, 2);
    const std::string path = tmp_path("traj.csv");
    write_csv(path, trajectory_table(tr, {"seed=2"}));
    const CsvTable t = read_csv(path);
    ASSERT_EQ(t.comments.size(), 1u);
    const Trajectory back = trajectory_from_table(t);
    EXPECT_EQ(back.obs, tr.obs);
    EXPECT_EQ(back.action, tr.action);
    EXPECT_EQ(back.segment, tr.segment);
}

TEST(SurrogateNet, GradientWithDropoutMatchesFiniteDifferences) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        SurrogateNet net(6, 5, 0.3, 4);
        Rng rng(seed);
        net.init(rng);
        net.params().values += 0.2 * Eigen::VectorXd::NullaryExpr(net.params().size(), [&] { return rng.normal(); });
        std::vector<Eigen::MatrixXd> xs;
        for (int t = 0; t < 4; ++t) xs.push_back(Eigen::MatrixXd::NullaryExpr(kInputDim, 3, [&] { return rng.normal(); }));
        const Eigen::MatrixXd y = Eigen::MatrixXd::NullaryExpr(kObsDim, 3, [&] { return rng.normal(); });
        auto loss = [&](const Eigen::VectorXd& p) {
            Rng mask_rng(99);  // same dropout masks on every evaluation
            return 0.5 * (net.forward(p, xs, &mask_rng, nullptr) - y).squaredNorm();
        };
        SurrogateCache cache;
        Rng mask_rng(99);
        const Eigen::MatrixXd pred = net.forward(net.params().values, xs, &mask_rng, &cache);
        Eigen::VectorXd g = Eigen::VectorXd::Zero(net.params().size());
        net.backward(net.params().values, cache, pred - y, g);
        EXPECT_LT(nn::grad_check(net.params().values, loss, g).max_rel_error, 1e-4) << seed;
    }
}

TEST(SurrogateNet, InitialisedNearPersistence) {
    SurrogateNet net(8, 8, 0.0, 3);
    Rng rng(4);
    net.init(rng);
    std::vector<Eigen::MatrixXd> xs(3, Eigen::MatrixXd::Constant(kInputDim, 1, 0.3));
    const Eigen::MatrixXd y = net.forward(net.params().values, xs, nullptr, nullptr);
    EXPECT_LT((y.array() - 0.3).abs().maxCoeff(), 0.2);
}

TEST(SurrogateNet, TrainingReducesTestErrorAndIsDeterministic) {
    const Trajectory tr = toy_trajectory(1500, 3);
    const SequenceDataset ds = build_dataset(tr, 5, 1200);
    SurrogateTrainConfig cfg;
    cfg.max_epochs = 30;  // the persistence plateau breaks after about 20 epochs
    cfg.lr = 3e-3;
    cfg.seed = 11;
    auto run = [&] {
        SurrogateNet net(12, 12, 0.1, 5);
        Rng rng(5);
        net.init(rng);
        const SurrogateTrainReport r = train_surrogate(net, ds, cfg);
        return std::make_pair(r, net.params().values);
    };
    const auto [a, pa] = run();
    const auto [b, pb] = run();
    EXPECT_LT(a.test_mse, 0.5 * a.initial_test_mse);
    EXPECT_FALSE(a.diverged);
    EXPECT_FALSE(a.time_limited);
    EXPECT_EQ(pa, pb);
    EXPECT_EQ(a.test_history, b.test_history);
}

TEST(SurrogateNet, DivergenceKeepsLastFiniteParameters) {
    const Trajectory tr = toy_trajectory(600, 3);
    const SequenceDataset ds = build_dataset(tr, 5, 480);
    SurrogateTrainConfig cfg;
    cfg.max_epochs = 5;
    cfg.lr = 1e200;
    SurrogateNet net(8, 8, 0.0, 5);
    Rng rng(5);
    net.init(rng);
    const SurrogateTrainReport r = train_surrogate(net, ds, cfg);
    EXPECT_TRUE(r.diverged);
    EXPECT_TRUE(net.params().values.allFinite());
}

TEST(SurrogateNet, SaveLoadPredictsBitExactly) {
    const Trajectory tr = toy_trajectory(300, 6);
    const SequenceDataset ds = build_dataset(tr, 4, 240);
    SurrogateNet net(7, 9, 0.2, 4);
    Rng rng(6);
    net.init(rng);
    net.set_normalizer(ds.norm);
    const std::string path = tmp_path("net.ckpt");
    save_surrogate(path, net, {{"seed", "6"}});
    nn::LoadedCheckpoint ck;
    const SurrogateNet back = load_surrogate(path, &ck);
    EXPECT_EQ(ck.meta_value("seed"), "6");
    EXPECT_EQ(back.window(), 4);
    EXPECT_EQ(back.dropout(), 0.2);
    EXPECT_EQ(back.params().values, net.params().values);
    const std::vector<ObsVec> h(tr.obs.begin() + 50, tr.obs.begin() + 54);
    const std::vector<double> a(tr.action.begin() + 50, tr.action.begin() + 54);
    EXPECT_EQ(back.predict_next(h, a), net.predict_next(h, a));
    EXPECT_THROW(net.predict_next(std::vector<ObsVec>(3), a), ShapeError);
}

TEST(SurrogateNet, FreeRunAppliesExogenousChannels) {
    const Trajectory tr = toy_trajectory(200, 7);
    const SequenceDataset ds = build_dataset(tr, 4, 160);
    SurrogateNet net(6, 6, 0.0, 4);
    Rng rng(7);
    net.init(rng);
    net.set_normalizer(ds.norm);
    const std::vector<ObsVec> h(tr.obs.begin(), tr.obs.begin() + 4);
    const std::vector<double> prior(tr.action.begin(), tr.action.begin() + 3);
    const std::vector<double> acts(tr.action.begin() + 3, tr.action.begin() + 23);
    ExogenousChannels ex;
    for (int k = 0; k < 20; ++k) {
        ex.m_ai.push_back(0.4 + 0.001 * k);
        ex.setpoint.push_back(15.0);
    }
    const std::vector<ObsVec> out = free_run(net, h, prior, acts, ex);
    ASSERT_EQ(out.size(), 20u);
    for (int k = 0; k < 20; ++k) {
        EXPECT_EQ(out[std::size_t(k)][kMai], ex.m_ai[std::size_t(k)]);
        EXPECT_EQ(out[std::size_t(k)][kErr], out[std::size_t(k)][kSh] - 15.0);
    }
    // first prediction equals a direct one-step call
    std::vector<double> a0 = prior;
    a0.push_back(acts[0]);
    ObsVec first = net.predict_next(h, a0);
    first[kMai] = ex.m_ai[0];
    first[kErr] = first[kSh] - 15.0;
    EXPECT_EQ(out[0], first);
}
