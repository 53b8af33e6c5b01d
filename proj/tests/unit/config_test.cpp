#include <gtest/gtest.h>

#include <set>

#include "fln/config.hpp"
#include "fln/error.hpp"

using namespace fln;

TEST(Config, DefaultsValidate) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.get("fln.lengths"), "2,6,8");
  EXPECT_EQ(c.scene_steps(), 20u);
  EXPECT_EQ(c.window().long_length, 8u);
}

TEST(Config, SetAndGetEveryKeyRoundTrips) {
  const RunConfig defaults;
  std::set<std::string> names;
  for (const auto& [key, value] : defaults.items()) {
    EXPECT_TRUE(names.insert(key).second) << "duplicate key " << key;
    RunConfig c;
    c.set(key, value);
    EXPECT_EQ(c.get(key), value) << key;
  }
  EXPECT_EQ(names.size(), config_keys().size());
  for (const auto& k : config_keys()) EXPECT_FALSE(k.description.empty()) << k.key;
}

TEST(Config, TextFormRoundTrips) {
  RunConfig c;
  c.set("seed", "42");
  c.set("model.d_model", "32");
  c.set("fln.lambda", "0.25");
  c.set("train.rho", "0,0,1");
  c.set("data.derivation", "sliding");
  const RunConfig back = RunConfig::parse(c.to_text());
  EXPECT_EQ(back.items(), c.items());
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.backbone.d_model, 32u);
  EXPECT_EQ(back.train.derivation, DerivationMode::sliding);
}

TEST(Config, ParseSkipsCommentsAndTrims) {
  const RunConfig c = RunConfig::parse("# comment\n\n  seed =  7 \nfln.lengths=3,5,9\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.branches.lengths, (LengthSet{3, 5, 9}));
}

TEST(Config, ErrorsNameTheKeyAndLine) {
  RunConfig c;
  try {
    c.set("model.bogus", "1");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.bogus"), std::string::npos);
  }
  try {
    c.set("train.epochs", "ten");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.epochs"), std::string::npos);
  }
  EXPECT_THROW(c.set("fln.detach_teacher", "maybe"), ConfigError);
  EXPECT_THROW(c.set("train.rho", "1,2"), ConfigError);
  try {
    RunConfig::parse("seed = 1\nnot a pair\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  try {
    RunConfig::parse("seed = 1\n\nmodel.heads = x\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(RunConfig::load("/nonexistent/run.cfg"), ConfigError);
}

TEST(Config, ValidateCatchesInconsistentValues) {
  RunConfig c;
  c.set("eval.samples", "5");
  EXPECT_THROW(c.validate(), ConfigError);
  c.set("eval.sampling", "stochastic");
  EXPECT_NO_THROW(c.validate());
  c.set("fln.lengths", "6,6,8");
  EXPECT_THROW(c.validate(), ConfigError);
  RunConfig d;
  d.set("model.heads", "3");
  EXPECT_THROW(d.validate(), ConfigError);
}

TEST(Config, SetupCarriesSeedAndEvaluation) {
  RunConfig c;
  c.seed = 11;
  c.threads = 4;
  c.deterministic = true;
  const TrainSetup s = c.setup();
  EXPECT_EQ(s.train.seed, 11u);
  EXPECT_EQ(s.train.validation.seed, 11u);
  EXPECT_EQ(s.train.validation.threads, 1u);
}

TEST(LengthList, RangesListsAndMixes) {
  EXPECT_EQ(parse_length_list("4..7"), (std::vector<std::size_t>{4, 5, 6, 7}));
  EXPECT_EQ(parse_length_list("3,5,7"), (std::vector<std::size_t>{3, 5, 7}));
  EXPECT_EQ(parse_length_list("2, 4..5"), (std::vector<std::size_t>{2, 4, 5}));
  EXPECT_THROW(parse_length_list(""), ConfigError);
  EXPECT_THROW(parse_length_list("5..3"), ConfigError);
  EXPECT_THROW(parse_length_list("0,2"), ConfigError);
  EXPECT_THROW(parse_length_list("a"), ConfigError);
}
