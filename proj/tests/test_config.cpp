#include <gtest/gtest.h>

#include "orc/config.hpp"

using namespace orc;

TEST(Config, DefaultsValidateAndRoundTrip) {
    const ExperimentConfig c;
    EXPECT_NO_THROW(validate(c));
    const json j = config_to_json(c);
    const ExperimentConfig back = config_from_json(j);
    EXPECT_EQ(config_to_json(back), j);
    EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(Config, ShippedDefaultFileMatchesBuiltInDefaults) {
    const ExperimentConfig file = load_config(ORC_SOURCE_DIR "/configs/default.json");
    EXPECT_EQ(config_hash(file), config_hash(ExperimentConfig{}));
}

TEST(Config, PartialOverrideKeepsOtherDefaults) {
    const ExperimentConfig c = config_from_json(json::parse(R"({"ppo": {"gamma": 0.95}, "seed": 4})"));
    EXPECT_EQ(c.ppo.gamma, 0.95);
    EXPECT_EQ(c.ppo.lam, 0.95);
    EXPECT_EQ(c.seed, 4u);
    EXPECT_EQ(c.pi.kp, 0.15);
}

TEST(Config, UnknownKeysAndWrongTypesRejected) {
    EXPECT_THROW(config_from_json(json::parse(R"({"ppo": {"gama": 0.9}})")), ConfigError);
    EXPECT_THROW(config_from_json(json::parse(R"({"bogus": 1})")), ConfigError);
    EXPECT_THROW(config_from_json(json::parse(R"({"ppo": {"n_epoch": 2.5}})")), ConfigError);
    EXPECT_THROW(config_from_json(json::parse(R"({"agent": {"obs_scale": [1, 2]}})")), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/orc.json"), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
    ExperimentConfig c;
    c.ppo.clip_eps = 0.0;
    EXPECT_THROW(validate(c), ConfigError);
    c = ExperimentConfig{};
    c.evaluation.seed = c.seed;
    EXPECT_THROW(validate(c), ConfigError);
    c = ExperimentConfig{};
    c.pretrain.mode = "sideways";
    EXPECT_THROW(validate(c), ConfigError);
    c = ExperimentConfig{};
    c.surrogate.n_train = c.data.n_points;
    EXPECT_THROW(validate(c), ConfigError);
    c = ExperimentConfig{};
    c.scratch.mode = "multi";
    EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, HashIgnoresOutputDirButTracksEverythingElse) {
    ExperimentConfig a, b;
    b.output_dir = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.reward.c_du = 0.81;
    EXPECT_NE(config_hash(a), config_hash(b));
    ExperimentConfig c;
    c.sweep.sigmas[2] = 0.25;
    EXPECT_NE(config_hash(a), config_hash(c));
}
