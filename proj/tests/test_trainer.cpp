#include "outlier_lab/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace olab;

namespace {

ModelConfig small(Objective obj) {
  ModelConfig c;
  c.n_layers = 1;
  c.hidden = 32;
  c.n_heads = 2;
  c.vocab_size = 12;
  c.max_seq_len = 8;
  c.objective = obj;
  c.norm_placement = ModelConfig::default_placement(obj);
  c.softmax = obj == Objective::MLM ? SoftmaxConfig::normalized(1.0, -2.175)
                                    : SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal);
  return c;
}

PackedDataset dataset(std::vector<std::int32_t> ids, std::size_t T) { return pack_ids(ids, T); }

TrainConfig quick(std::size_t steps, std::uint64_t seed = 1) {
  TrainConfig t;
  t.max_steps = steps;
  t.warmup_steps = steps / 10;
  t.batch_size = 4;
  t.peak_lr = 3e-3;
  t.seed = seed;
  return t;
}

}  // namespace

TEST(Schedule, LinearWarmupAndDecay) {
  TrainConfig c;
  c.warmup_steps = 100;
  c.max_steps = 1100;
  c.peak_lr = 1e-3;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, c), 5e-4);
  EXPECT_EQ(lr_at(100, c), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(600, c), 5e-4);
  EXPECT_EQ(lr_at(1100, c), 0.0);
  EXPECT_EQ(lr_at(5000, c), 0.0);
  c.warmup_steps = 0;
  EXPECT_EQ(lr_at(0, c), 1e-3);
}

TEST(Schedule, ConfigValidation) {
  TrainConfig c;
  c.warmup_steps = c.max_steps;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "train.warmup_steps");
  }
  c = TrainConfig{};
  c.max_grad_norm = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdamW, OneParameterMatchesHandComputation) {
  std::vector<NamedParam> params{{"w", Tensor({1}, {0.5}, true), true}};
  TrainConfig c;
  c.beta1 = 0.9;
  c.beta2 = 0.98;
  c.eps = 1e-8;
  c.weight_decay = 0.0;
  AdamState st = AdamState::for_params(params);
  const double lr = 0.01;

  params[0].tensor.mutable_grad()[0] = 2.0;
  adamw_update(params, st, lr, c);
  // t=1: m = 0.2, v = 0.08, m_hat = 2, v_hat = 4
  const double w1 = 0.5 - lr * 2.0 / (2.0 + 1e-8);
  EXPECT_DOUBLE_EQ(params[0].tensor[0], w1);

  params[0].tensor.mutable_grad()[0] = -1.0;
  adamw_update(params, st, lr, c);
  // t=2: m = 0.9*0.2 - 0.1 = 0.08, v = 0.98*0.08 + 0.02 = 0.0984
  const double m_hat = 0.08 / (1 - 0.81);
  const double v_hat = 0.0984 / (1 - 0.9604);
  EXPECT_NEAR(params[0].tensor[0], w1 - lr * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
}

TEST(AdamW, DecoupledDecayOnlyOnDecayedParameters) {
  std::vector<NamedParam> params{{"w", Tensor({1}, {1.0}, true), true},
                                 {"b", Tensor({1}, {1.0}, true), false}};
  TrainConfig c;
  c.weight_decay = 0.1;
  AdamState st = AdamState::for_params(params);
  params[0].tensor.mutable_grad()[0] = 0.0;
  params[1].tensor.mutable_grad()[0] = 0.0;
  adamw_update(params, st, 0.5, c);
  EXPECT_DOUBLE_EQ(params[0].tensor[0], 1.0 - 0.5 * 0.1);
  EXPECT_EQ(params[1].tensor[0], 1.0);
}

TEST(Clip, NormBoundAfterClipping) {
  std::vector<NamedParam> params{{"a", Tensor({3}, {0, 0, 0}, true), true},
                                 {"b", Tensor({2}, {0, 0}, true), true}};
  const std::vector<double> ga{3, -4, 12};
  const std::vector<double> gb{84, 0};
  std::copy(ga.begin(), ga.end(), params[0].tensor.mutable_grad().begin());
  std::copy(gb.begin(), gb.end(), params[1].tensor.mutable_grad().begin());
  const double before = clip_grad_norm(params, 1.0);
  EXPECT_DOUBLE_EQ(before, 85.0);
  EXPECT_LE(global_grad_norm(params), 1.0 + 1e-9);
  EXPECT_DOUBLE_EQ(params[0].tensor.grad()[2], 12.0 / 85.0);
  // below the bound nothing changes
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 10.0), global_grad_norm(params));
}

TEST(BatchSchedule, EachEpochCoversEverySequenceOnce) {
  BatchSchedule s(10, 5, 3);
  std::multiset<std::size_t> epoch0;
  std::multiset<std::size_t> epoch1;
  for (std::size_t step = 0; step < 2; ++step) {
    for (auto i : s.indices(step)) epoch0.insert(i);
  }
  for (std::size_t step = 2; step < 4; ++step) {
    for (auto i : s.indices(step)) epoch1.insert(i);
  }
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(epoch0.count(i), 1u);
    EXPECT_EQ(epoch1.count(i), 1u);
  }
  BatchSchedule again(10, 5, 3);
  EXPECT_EQ(again.indices(3), s.indices(3));
}

TEST(Trainer, SameSeedBitIdenticalCurves) {
  std::vector<std::int32_t> ids;
  for (int i = 0; i < 160; ++i) ids.push_back(5 + (i * 3) % 7);
  auto run = [&](std::uint64_t seed) {
    Trainer t(Transformer(small(Objective::MLM), seed), dataset(ids, 8), quick(20, seed));
    std::vector<double> losses;
    t.run([&](const StepResult& r) { losses.push_back(r.loss); });
    return losses;
  };
  auto a = run(4);
  auto b = run(4);
  auto c = run(5);
  ASSERT_EQ(a.size(), 20u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(Trainer, ReportsPreClipNormAndSchedule) {
  std::vector<std::int32_t> ids(64);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5 + static_cast<std::int32_t>(i % 6);
  TrainConfig cfg = quick(10);
  cfg.max_grad_norm = 1e-3;
  Trainer t(Transformer(small(Objective::CausalLM), 1), dataset(ids, 8), cfg);
  t.run([&](const StepResult& r) {
    EXPECT_EQ(r.lr, lr_at(r.step, cfg));
    EXPECT_GT(r.grad_norm, 1e-3);
    EXPECT_LE(global_grad_norm(t.model().parameters()), 1e-3 + 1e-9);
  });
  EXPECT_TRUE(t.done());
}

TEST(Trainer, NonFiniteLossIsDivergence) {
  std::vector<std::int32_t> ids(64, 6);
  Transformer m(small(Objective::CausalLM), 1);
  m.param("layer0.ffn.out.bias").mutable_data()[0] = std::nan("");
  Trainer t(std::move(m), dataset(ids, 8), quick(10));
  try {
    t.step_once();
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.step(), 1u);
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
  }
}

TEST(Trainer, OverfitsOneSentenceMlm) {
  const std::vector<std::int32_t> sentence{5, 9, 7, 11, 6, 10, 8, 5};
  std::vector<std::int32_t> ids;
  for (int r = 0; r < 4; ++r) ids.insert(ids.end(), sentence.begin(), sentence.end());
  ModelConfig mc = small(Objective::MLM);
  mc.mlm_prob = 0.3;
  Trainer t(Transformer(mc, 2), dataset(ids, 8), quick(200, 2));
  t.run();
  // mask one position at a time; every one must be recovered
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    Batch b{sentence, 1, 8};
    std::vector<std::int32_t> labels(8, -1);
    labels[i] = sentence[i];
    b.ids[i] = Vocab::kMask;
    auto out = t.model().forward_mlm(b, labels);
    auto row = out.logits.data();
    correct += static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
               sentence[i];
  }
  EXPECT_EQ(correct, sentence.size());
}

TEST(Trainer, OverfitsAlternatingSequenceClm) {
  std::vector<std::int32_t> ids;
  for (int i = 0; i < 64; ++i) ids.push_back(i % 2 == 0 ? 5 : 6);
  Trainer t(Transformer(small(Objective::CausalLM), 3), dataset(ids, 8), quick(200, 3));
  double last = 0.0;
  t.run([&](const StepResult& r) { last = r.loss; });
  EXPECT_LT(last, 0.05);
}
