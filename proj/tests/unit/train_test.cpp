#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fln/error.hpp"
#include "fln/train.hpp"

using namespace fln;

namespace {

TrainSetup tiny_setup(std::size_t epochs = 2) {
  TrainSetup s;
  s.backbone.d_model = 8;
  s.backbone.heads = 2;
  s.backbone.ffn_hidden = 8;
  s.backbone.decoder_hidden = 8;
  s.backbone.modes = 2;
  s.backbone.horizon = 4;
  s.branches.lengths = {2, 3, 4};
  s.train.epochs = epochs;
  s.train.batch_size = 8;
  s.train.learning_rate = 1e-2;
  s.train.seed = 5;
  s.train.validation.samples = 2;
  return s;
}

DatasetSplit tiny_data(std::size_t scenes = 60, bool noiseless_cv = false) {
  SyntheticConfig c;
  c.scenes = scenes;
  c.steps = 8;
  c.max_agents = 2;
  c.seed = 3;
  if (noiseless_cv) {
    c.mix = {1.0, 0.0, 0.0};
    c.noise_sigma = 0.0;
    c.repulsion = 0.0;
  }
  return split_dataset(generate_synthetic(c), 3);
}

bool same_parameters(const FlnModel& a, const FlnModel& b) {
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  if (ea.size() != eb.size()) return false;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].first != eb[i].first) return false;
    const auto va = ea[i].second.values(), vb = eb[i].second.values();
    if (!std::equal(va.begin(), va.end(), vb.begin(), vb.end())) return false;
  }
  return true;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParameterStore p;
  p.add("w", Tensor::from({2}, {1.0, -2.0}, true));
  p.get("w").zero_grad();
  AdamState s;
  adam_step(p, s, 0.1);
  EXPECT_EQ(p.get("w").values()[0], 1.0);
  EXPECT_EQ(p.get("w").values()[1], -2.0);
}

// Closed-form moment recursion for a constant gradient g = 1:
// m_t = 1 - b1^t, v_t = 1 - b2^t, so the corrected step is lr / (1 + eps).
TEST(Adam, ConstantGradientStepsByLearningRate) {
  ParameterStore p;
  p.add("w", Tensor::scalar(0.0, true));
  AdamState s;
  const double lr = 0.01;
  double prev = 0.0;
  for (int t = 1; t <= 50; ++t) {
    std::fill(p.get("w").mutable_grad().begin(), p.get("w").mutable_grad().end(), 1.0);
    adam_step(p, s, lr);
    const double now = p.get("w").values()[0];
    EXPECT_NEAR(prev - now, lr / (1.0 + 1e-8), 1e-15);
    prev = now;
  }
  EXPECT_EQ(s.step, 50u);
}

TEST(Adam, MatchesReferenceRecursion) {
  ParameterStore p;
  p.add("w", Tensor::scalar(0.5, true));
  AdamState s;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double w = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 20; ++t) {
    const double g = std::sin(t) + 0.3;
    p.get("w").mutable_grad()[0] = g;
    adam_step(p, s, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    w -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    EXPECT_NEAR(p.get("w").values()[0], w, 1e-14);
  }
}

TEST(Adam, SkipsParametersWithoutGradient) {
  ParameterStore p;
  p.add("a", Tensor::scalar(1.0, true));
  p.add("b", Tensor::scalar(1.0, true));
  backward(p.get("a") * 2.0);
  AdamState s;
  adam_step(p, s, 0.1);
  EXPECT_NE(p.get("a").values()[0], 1.0);
  EXPECT_EQ(p.get("b").values()[0], 1.0);
  EXPECT_FALSE(s.m.contains("b"));
  EXPECT_THROW(adam_step(p, s, 0.0), ConfigError);
}

TEST(TrainConfig, ValidationAndParsing) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.rho = {0.0, 0.0, 0.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c.rho = {0.5, 1.5, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  for (Strategy s : {Strategy::fln, Strategy::isolated, Strategy::mixed, Strategy::finetune, Strategy::joint}) {
    EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  }
  EXPECT_THROW(parse_strategy("bogus"), ConfigError);
}

TEST(LengthSampler, RenormalizesAndMatchesFrequencies) {
  LengthSampler uniform({0.5, 0.5, 0.5}, 1);
  for (double p : uniform.probabilities()) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);

  const std::array<double, 3> rho{0.2, 0.3, 0.9};
  LengthSampler sampler(rho, 7);
  const std::size_t n = 10000;
  std::array<std::size_t, 3> counts{};
  for (std::size_t i = 0; i < n; ++i) ++counts[sampler.draw()];
  for (std::size_t k = 0; k < 3; ++k) {
    const double p = sampler.probabilities()[k];
    const double sigma = std::sqrt(n * p * (1 - p));
    EXPECT_LE(std::abs(static_cast<double>(counts[k]) - n * p), 3 * sigma) << k;
  }
  LengthSampler only_long({0, 0, 1}, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(only_long.draw(), 2u);
}

TEST(StreamSeed, DistinctPerName) {
  EXPECT_NE(stream_seed(1, "shuffle"), stream_seed(1, "length"));
  EXPECT_NE(stream_seed(1, "shuffle"), stream_seed(2, "shuffle"));
  EXPECT_EQ(stream_seed(1, "shuffle"), stream_seed(1, "shuffle"));
}

TEST(Training, FlnRunIsBitReproducible) {
  const auto data = tiny_data();
  const auto a = train_fln(data, tiny_setup());
  const auto b = train_fln(data, tiny_setup());
  EXPECT_TRUE(same_parameters(a.models[0], b.models[0]));
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
    EXPECT_EQ(a.log.epochs[i].total, b.log.epochs[i].total);
  }
}

TEST(Training, FlnLogRecordsConsistentLosses) {
  const auto data = tiny_data();
  const auto setup = tiny_setup(3);
  std::size_t calls = 0;
  const auto r = train_fln(data, setup, [&](const FlnModel&, const AdamState&, const EpochRecord& rec) {
    EXPECT_EQ(rec.epoch, ++calls);
  });
  EXPECT_EQ(calls, 3u);
  for (const auto& e : r.log.epochs) {
    EXPECT_GE(e.kl, 0.0);
    EXPECT_NEAR(e.total, e.regression + setup.branches.lambda * e.kl, 1e-12);
    EXPECT_EQ(e.val_ade.size(), 3u);
    EXPECT_GT(e.batches, 0u);
  }
  EXPECT_EQ(r.log.csv().substr(0, 36), "epoch,phase,l_reg,l_kl,total,batches");
  EXPECT_EQ(r.log.summary()["strategy"], "fln");
}

TEST(Training, DistillationOnlyStepLeavesTeacherParametersUnchanged) {
  const auto data = tiny_data();
  const auto setup = tiny_setup();
  FlnModel model = make_fln_model(setup.backbone, setup.branches, 1);
  const FlnModel before = model;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.train.size() && idx.size() < 4; ++i) {
    if (data.train[i].agents() == data.train[0].agents()) idx.push_back(i);
  }
  const auto bundle = make_batch_bundle(data.train, idx, setup.branches.lengths, setup.backbone.horizon);
  backward(fln_loss(model, bundle, setup.branches).kl);
  AdamState state;
  adam_step(model.params(), state, 0.1);
  for (const auto& [name, t] : model.params().entries()) {
    const auto old = before.params().get(name).values();
    const bool same = std::equal(old.begin(), old.end(), t.values().begin());
    if (name.starts_with("branch.L.")) {
      EXPECT_TRUE(same) << name;
    } else if (name.starts_with("branch.S.pe")) {
      EXPECT_FALSE(same) << name;
    }
  }
}

TEST(Training, LambdaZeroFlnMatchesStandardTrainingOfTheLongBranch) {
  const auto data = tiny_data();
  auto setup = tiny_setup();
  setup.branches.lambda = 0.0;
  setup.train.validate_each_epoch = false;
  const auto fln = train_fln(data, setup);
  const auto it = train_isolated(data, setup.branches.lengths[2], setup);
  const auto s_only = fln.models[0];
  // Shared weights and the long branch's own pieces follow the standard run exactly.
  for (const auto& name : s_only.branch_parameter_names(BranchId::L)) {
    const auto a = s_only.params().get(name).values();
    const auto b = it.models[0].params().get(name).values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
  }
}

TEST(Training, MixedWithOnlyLongLengthReproducesStandardTraining) {
  const auto data = tiny_data();
  auto setup = tiny_setup(3);
  std::vector<FlnModel> a_models, b_models;
  const auto a = train_mixed(data, {0.0, 0.0, 1.0}, setup,
                             [&](const FlnModel& m, const AdamState&, const EpochRecord&) { a_models.push_back(m); });
  const auto b = train_isolated(data, setup.branches.lengths[2], setup,
                                [&](const FlnModel& m, const AdamState&, const EpochRecord&) { b_models.push_back(m); });
  ASSERT_EQ(a_models.size(), b_models.size());
  for (std::size_t i = 0; i < a_models.size(); ++i) EXPECT_TRUE(same_parameters(a_models[i], b_models[i])) << i;
  EXPECT_EQ(a.optimizer.step, b.optimizer.step);
}

TEST(Training, LossHalvesOnNoiselessConstantVelocity) {
  const auto data = tiny_data(200, true);
  auto setup = tiny_setup(30);
  setup.train.validate_each_epoch = false;
  const auto r = train_fln(data, setup);
  const double first = r.log.epochs.front().regression;
  const double last = r.log.epochs.back().regression;
  // NLL can go negative; measure the drop relative to its starting magnitude.
  EXPECT_LE(last, first - 0.5 * std::abs(first));
}

TEST(Training, IsolatedUsesOneBranchOfTheRequestedLength) {
  const auto data = tiny_data();
  const auto r = train_isolated(data, 2, tiny_setup(1));
  ASSERT_EQ(r.models.size(), 1u);
  EXPECT_TRUE(r.models[0].layout().is_single());
  EXPECT_EQ(r.models[0].layout().length(BranchId::L), 2u);
  EXPECT_THROW(train_isolated(data, 9, tiny_setup(1)), ConfigError);
}

TEST(Training, FinetuneKeepsTheSourceModel) {
  const auto data = tiny_data();
  auto setup = tiny_setup(2);
  setup.train.patience = 1;
  setup.train.max_finetune_epochs = 3;
  const auto r = train_finetune(data, setup);
  ASSERT_TRUE(r.pre_finetune.has_value());
  EXPECT_EQ(r.model_lengths.front(), 2u);
  std::set<std::string> phases;
  for (const auto& e : r.log.epochs) phases.insert(e.phase);
  EXPECT_TRUE(phases.contains("source"));
  EXPECT_TRUE(phases.contains("target"));
  EXPECT_LE(r.log.epochs.size(), 2u + 3u);
}

TEST(Training, JointKeepsOneModelPerLength) {
  const auto data = tiny_data();
  const auto r = train_joint(data, tiny_setup(1));
  EXPECT_EQ(r.models.size(), 3u);
  EXPECT_EQ(r.model_lengths, (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(expand_joint(data.train).size(), 3 * data.train.size());
  const auto again = train_joint(data, tiny_setup(1));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(same_parameters(r.models[i], again.models[i]));
}

TEST(Training, DispatcherFollowsStrategy) {
  const auto data = tiny_data();
  auto setup = tiny_setup(1);
  setup.train.strategy = Strategy::mixed;
  EXPECT_EQ(train(data, setup).log.strategy, "mixed");
  setup.train.strategy = Strategy::isolated;
  setup.train.length = 3;
  EXPECT_EQ(train(data, setup).model_lengths.front(), 3u);
}
