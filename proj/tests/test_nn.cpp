#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "orc/nn.hpp"

using namespace orc;
using namespace orc::nn;

namespace {

MatrixXd random_matrix(Rng& rng, Index r, Index c) {
    MatrixXd m(r, c);
    for (Index k = 0; k < m.size(); ++k) m.data()[k] = rng.normal();
    return m;
}

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("orc_nn_" + name)).string();
}

}  // namespace

class NnSeeds : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(NnSeeds, MlpGradientMatchesFiniteDifferences) {
    Rng rng(GetParam());
    for (Activation act : {Activation::tanh, Activation::relu}) {
        Mlp m(4, {7, 5}, act, 3, Activation::tanh);
        m.init(rng);
        const MatrixXd x = random_matrix(rng, 4, 6), t = random_matrix(rng, 3, 6);
        auto loss = [&](const VectorXd& p) { return 0.5 * (m.forward_with(p, x) - t).squaredNorm(); };
        std::vector<DenseCache> caches;
        const MatrixXd y = m.forward_with(m.params().values, x, &caches);
        VectorXd g = VectorXd::Zero(m.params().size());
        m.backward_with(m.params().values, caches, y - t, g);
        EXPECT_LT(grad_check(m.params().values, loss, g).max_rel_error, 1e-4);
    }
}

TEST_P(NnSeeds, LstmBpttGradientMatchesFiniteDifferences) {
    Rng rng(GetParam());
    ParamSet ps;
    const Lstm l1(ps, ps.add_lstm(3, 5));
    const Lstm l2(ps, ps.add_lstm(5, 4));
    const Dense head(ps, ps.add_dense(4, 2, Activation::identity));
    l1.init(ps.values, rng);
    l2.init(ps.values, rng);
    head.init(ps.values, rng);
    std::vector<MatrixXd> xs;
    for (int t = 0; t < 6; ++t) xs.push_back(random_matrix(rng, 3, 4));
    const MatrixXd target = random_matrix(rng, 2, 4);
    auto loss = [&](const VectorXd& p) {
        const auto h1 = l1.forward(p, xs);
        const auto h2 = l2.forward(p, h1);
        return 0.5 * (head.forward(p, h2.back()) - target).squaredNorm();
    };
    LstmCache c1, c2;
    DenseCache ch;
    const auto h1 = l1.forward(ps.values, xs, &c1);
    const auto h2 = l2.forward(ps.values, h1, &c2);
    const MatrixXd y = head.forward(ps.values, h2.back(), &ch);
    VectorXd g = VectorXd::Zero(ps.size());
    const MatrixXd dlast = head.backward(ps.values, ch, y - target, g);
    std::vector<MatrixXd> dh2(h2.size(), MatrixXd::Zero(4, 4));
    dh2.back() = dlast;
    const auto dh1 = l2.backward(ps.values, c2, dh2, g);
    l1.backward(ps.values, c1, dh1, g);
    EXPECT_LT(grad_check(ps.values, loss, g).max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, NnSeeds, ::testing::Values(1u, 2u, 3u));

TEST(Nn, LstmForgetBiasInitializedToOne) {
    ParamSet ps;
    const Lstm l(ps, ps.add_lstm(2, 3));
    Rng rng(1);
    l.init(ps.values, rng);
    const auto b = l.b(ps.values);
    for (int k = 0; k < 3; ++k) {
        EXPECT_EQ(b[k], 0.0);
        EXPECT_EQ(b[3 + k], 1.0);
        EXPECT_EQ(b[6 + k], 0.0);
        EXPECT_EQ(b[9 + k], 0.0);
    }
}

TEST(Nn, DenseForwardByHand) {
    ParamSet ps;
    const Dense d(ps, ps.add_dense(2, 1, Activation::identity));
    ps.values << 2.0, -1.0, 0.5;  // w = [2, -1], b = 0.5
    MatrixXd x(2, 1);
    x << 3.0, 4.0;
    EXPECT_DOUBLE_EQ(d.forward(ps.values, x)(0, 0), 2.0 * 3.0 - 4.0 + 0.5);
}

TEST(Nn, ShapeMismatchThrows) {
    Mlp m(3, {4}, Activation::tanh, 1, Activation::identity);
    EXPECT_THROW(m.forward(MatrixXd::Zero(2, 1)), ShapeError);
    Adam opt(m.params().size());
    VectorXd wrong = VectorXd::Zero(m.params().size() + 1);
    EXPECT_THROW(opt.step(m.params().values, wrong, 1e-3), ShapeError);
}

TEST(Nn, AdamFirstStepsMatchHandComputation) {
    VectorXd p(2);
    p << 1.0, -2.0;
    VectorXd g(2);
    g << 0.5, -4.0;
    Adam opt(2);
    opt.step(p, g, 0.1);
    // bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
    EXPECT_NEAR(p[1], -2.0 + 0.1 * 4.0 / (4.0 + 1e-8), 1e-12);
    VectorXd g2(2);
    g2 << 1.0, 0.0;
    opt.step(p, g2, 0.1);
    const double m = (0.9 * 0.1 * 0.5 + 0.1 * 1.0) / (1.0 - 0.81);
    const double v = (0.999 * 0.001 * 0.25 + 0.001 * 1.0) / (1.0 - 0.999 * 0.999);
    EXPECT_NEAR(p[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * m / (std::sqrt(v) + 1e-8), 1e-12);
}

TEST(Nn, AdamRejectsNonFiniteGradient) {
    VectorXd p = VectorXd::Zero(2), g(2);
    g << 1.0, std::nan("");
    Adam opt(2);
    EXPECT_THROW(opt.step(p, g, 1e-3), NonFiniteError);
    EXPECT_EQ(opt.step_count(), 0);
    EXPECT_EQ(p, VectorXd::Zero(2));
}

TEST(Nn, DropoutIsInvertedAndMaskedInBackward) {
    Rng rng(4);
    const Dropout d{0.25};
    const MatrixXd x = MatrixXd::Ones(50, 40);
    MatrixXd mask;
    const MatrixXd y = d.forward(x, rng, &mask);
    EXPECT_NEAR(y.mean(), 1.0, 0.05);
    for (Index k = 0; k < y.size(); ++k) EXPECT_TRUE(y.data()[k] == 0.0 || std::abs(y.data()[k] - 1.0 / 0.75) < 1e-15);
    const MatrixXd dy = MatrixXd::Ones(50, 40);
    EXPECT_EQ(Dropout::backward(mask, dy), mask);
}

TEST(Nn, GradCheckFlagsWrongGradient) {
    VectorXd p(3);
    p << 0.3, -0.2, 0.9;
    auto loss = [](const VectorXd& q) { return q.squaredNorm(); };
    VectorXd wrong = 2.0 * p;
    wrong[1] *= 1.01;
    const GradCheckResult r = grad_check(p, loss, wrong);
    EXPECT_GT(r.max_rel_error, 1e-3);
    EXPECT_EQ(r.worst_index, 1);
    EXPECT_LT(grad_check(p, loss, 2.0 * p).max_rel_error, 1e-8);
}

TEST(Nn, CheckpointRoundTripIsBitExact) {
    Rng rng(9);
    Mlp m(5, {6, 4}, Activation::relu, 2, Activation::tanh);
    m.init(rng);
    const std::string path = tmp_path("mlp.ckpt");
    save_checkpoint(path, m.params(), {{"seed", "9"}, {"note", "x y"}});
    Mlp n(5, {6, 4}, Activation::relu, 2, Activation::tanh);
    const LoadedCheckpoint ck = load_checkpoint(path, n.params());
    EXPECT_EQ(n.params().values, m.params().values);
    EXPECT_EQ(ck.meta_value("seed"), "9");
    EXPECT_EQ(ck.meta_value("note"), "x y");
    const MatrixXd x = random_matrix(rng, 5, 3);
    EXPECT_EQ(n.forward(x), m.forward(x));
}

TEST(Nn, CheckpointLayoutMismatchRejected) {
    Rng rng(9);
    Mlp m(5, {6}, Activation::relu, 2, Activation::tanh);
    m.init(rng);
    const std::string path = tmp_path("mismatch.ckpt");
    save_checkpoint(path, m.params());
    Mlp other(5, {7}, Activation::relu, 2, Activation::tanh);
    EXPECT_THROW(load_checkpoint(path, other.params()), CheckpointError);
    Mlp act(5, {6}, Activation::tanh, 2, Activation::tanh);
    EXPECT_THROW(load_checkpoint(path, act.params()), CheckpointError);
    EXPECT_THROW(read_checkpoint(tmp_path("does_not_exist")), CheckpointError);
}
