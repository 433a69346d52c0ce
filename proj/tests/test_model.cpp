#include "outlier_lab/model.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace olab;

namespace {

ModelConfig tiny(Objective obj, SoftmaxConfig sm) {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.n_heads = 2;
  c.vocab_size = 40;
  c.max_seq_len = 8;
  c.objective = obj;
  c.norm_placement = ModelConfig::default_placement(obj);
  c.softmax = sm;
  return c;
}

ModelConfig tiny_mlm(SoftmaxConfig sm = SoftmaxConfig::vanilla()) { return tiny(Objective::MLM, sm); }
ModelConfig tiny_clm(SoftmaxConfig sm = SoftmaxConfig::vanilla(AttentionDirection::Causal)) {
  return tiny(Objective::CausalLM, sm);
}

Batch random_batch(std::size_t b, std::size_t t, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  Batch out{std::vector<std::int32_t>(b * t), b, t};
  for (auto& id : out.ids) id = 5 + static_cast<std::int32_t>(rng.below(vocab - 5));
  return out;
}

struct Recorder : ActivationHook {
  std::vector<std::string> seen;
  Tensor on_site(const std::string& site, const Tensor& x) override {
    seen.push_back(site);
    return x;
  }
};

}  // namespace

TEST(Model, ParameterCountClosedForm) {
  for (auto cfg : {tiny_mlm(), tiny_clm()}) {
    Transformer m(cfg, 1);
    std::size_t total = 0;
    for (const auto& p : m.parameters()) total += p.tensor.numel();
    EXPECT_EQ(total, parameter_count(cfg));
  }
  // hand count: V=40, H=16, F=64, T=8, L=2, MLM/PostNorm
  // emb 640+128+32, layer 4*272+64+1088+1040 = 3280, head 272+32+40
  EXPECT_EQ(parameter_count(tiny_mlm()), 640u + 128 + 32 + 2 * 3280 + 272 + 32 + 40);
}

TEST(Model, BiasesAndGainsAreNotDecayed) {
  Transformer m(tiny_mlm(), 1);
  for (const auto& p : m.parameters()) {
    const bool matrix = p.tensor.rank() == 2;
    EXPECT_EQ(p.decay, matrix) << p.name;
  }
}

TEST(Model, InitStatistics) {
  ModelConfig c = tiny_mlm();
  c.hidden = 64;
  c.n_heads = 4;
  c.vocab_size = 500;
  Transformer m(c, 3);
  const auto w = m.param("embeddings.token").data();
  double s = 0.0;
  double s2 = 0.0;
  for (double v : w) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(w.size());
  EXPECT_NEAR(s / n, 0.0, 0.002);
  EXPECT_NEAR(std::sqrt(s2 / n), 0.02, 0.001);
  for (double g : m.param("layer0.ln1.gain").data()) EXPECT_EQ(g, 1.0);
  for (double b : m.param("layer1.ffn.in.bias").data()) EXPECT_EQ(b, 0.0);
}

TEST(Model, SameSeedSameWeights) {
  Transformer a(tiny_mlm(), 5);
  Transformer b(tiny_mlm(), 5);
  Transformer c(tiny_mlm(), 6);
  EXPECT_TRUE(std::ranges::equal(a.param("layer1.attn.v.weight").data(),
                                 b.param("layer1.attn.v.weight").data()));
  EXPECT_FALSE(std::ranges::equal(a.param("layer1.attn.v.weight").data(),
                                  c.param("layer1.attn.v.weight").data()));
}

TEST(Model, CopyIsDeep) {
  Transformer a(tiny_mlm(), 5);
  Transformer b = a;
  b.param("embeddings.token").mutable_data()[0] += 1.0;
  EXPECT_NE(a.param("embeddings.token")[0], b.param("embeddings.token")[0]);
}

TEST(Model, UntrainedLossNearLogVocab) {
  ModelConfig c = tiny_mlm();
  c.vocab_size = 200;
  Transformer m(c, 11);
  Batch b = random_batch(4, 8, 200, 1);
  std::vector<std::int32_t> labels(b.ids.size(), -1);
  for (std::size_t i = 0; i < labels.size(); i += 3) {
    labels[i] = b.ids[i];
    b.ids[i] = 1;
  }
  auto out = m.forward_mlm(b, labels);
  EXPECT_NEAR(out.loss.item(), std::log(200.0), 0.1);
  EXPECT_EQ(out.logits.dim(0), out.n_targets);

  Transformer clm(tiny_clm(), 11);
  auto o2 = clm.forward_clm(random_batch(4, 8, 40, 2));
  EXPECT_NEAR(o2.loss.item(), std::log(40.0), 0.1);
  EXPECT_EQ(o2.n_targets, 4u * 7);
}

TEST(Model, CausalOutputsIgnoreFutureTokens) {
  for (auto sm : {SoftmaxConfig::vanilla(AttentionDirection::Causal),
                  SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal),
                  SoftmaxConfig::clipped_alpha(1.0, 12.0, AttentionDirection::Causal)}) {
    ModelConfig c = tiny_clm(sm);
    c.init_std = 0.3;
    Transformer m(c, 4);
    Batch b = random_batch(1, 8, 40, 3);
    Tensor before = m.logits(b);
    Batch changed = b;
    changed.ids[5] = changed.ids[5] == 7 ? 8 : 7;
    Tensor after = m.logits(changed);
    const std::size_t v = c.vocab_size;
    for (std::size_t i = 0; i < 5 * v; ++i) ASSERT_EQ(before[i], after[i]) << to_string(sm.variant);
    bool later_changed = false;
    for (std::size_t i = 5 * v; i < 8 * v; ++i) later_changed |= before[i] != after[i];
    EXPECT_TRUE(later_changed);
  }
}

TEST(Model, BidirectionalOutputsSeeTheWholeRow) {
  ModelConfig c = tiny_mlm();
  c.init_std = 0.3;
  Transformer m(c, 4);
  Batch b = random_batch(1, 8, 40, 3);
  Tensor before = m.logits(b);
  b.ids[7] = b.ids[7] == 7 ? 8 : 7;
  Tensor after = m.logits(b);
  EXPECT_NE(before[0], after[0]);
}

TEST(Model, ZeroValueProjectionLeavesResidual) {
  Rng rng(9);
  const std::size_t h = 8;
  Tensor x = olab::testing::random_tensor({6, h}, rng);
  auto zero = [&](Shape s) { return Tensor::zeros(std::move(s)); };
  AttentionWeights w{olab::testing::random_tensor({h, h}, rng), olab::testing::random_tensor({h}, rng),
                     olab::testing::random_tensor({h, h}, rng), olab::testing::random_tensor({h}, rng),
                     zero({h, h}), zero({h}), olab::testing::random_tensor({h, h}, rng), zero({h})};
  for (auto sm : {SoftmaxConfig::vanilla(), SoftmaxConfig::clipped_alpha(1.003, 3.2),
                  SoftmaxConfig::normalized(1.0, -2.175)}) {
    Tensor y = attention_layer(x, x, 2, 3, w, 2, sm, nullptr, 128);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
  }
  auto mask = causal_mask(3);
  Tensor y = attention_layer(x, x, 2, 3, w, 2, SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal),
                             &mask, 128);
  for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(Model, ClippedWithUnitZetaZeroGammaMatchesVanillaExactly) {
  Transformer van(tiny_mlm(SoftmaxConfig::vanilla()), 21);
  Transformer cs(tiny_mlm(SoftmaxConfig::clipped(1.0, 0.0)), 21);
  Batch b = random_batch(2, 8, 40, 5);
  Tensor a = van.logits(b);
  Tensor c = cs.logits(b);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], c[i]);

  Transformer vc(tiny_clm(), 21);
  Transformer cc(tiny_clm(SoftmaxConfig::clipped(1.0, 0.0, AttentionDirection::Causal)), 21);
  Tensor d = vc.logits(b);
  Tensor e = cc.logits(b);
  for (std::size_t i = 0; i < d.numel(); ++i) ASSERT_EQ(d[i], e[i]);
}

TEST(Model, HookSeesEverySiteInOrder) {
  for (auto cfg : {tiny_mlm(), tiny_clm()}) {
    Transformer m(cfg, 2);
    Recorder rec;
    m.logits(random_batch(2, 5, 40, 1), {.hook = &rec});
    EXPECT_EQ(rec.seen, m.activation_sites());
    // 14 sites per layer plus embedding and head sites
    const std::size_t extra = cfg.objective == Objective::MLM ? 2 + 3 : 1 + 1;
    EXPECT_EQ(m.activation_sites().size(), 14 * cfg.n_layers + extra);
  }
}

TEST(Model, HookReplacementChangesOutput) {
  struct ZeroFfn : ActivationHook {
    Tensor on_site(const std::string& site, const Tensor& x) override {
      if (site.ends_with("ffn.out")) return Tensor::zeros(x.shape());
      return x;
    }
  } hook;
  ModelConfig c = tiny_mlm();
  c.init_std = 0.3;
  Transformer m(c, 2);
  Batch b = random_batch(1, 4, 40, 1);
  EXPECT_NE(m.logits(b)[0], m.logits(b, {.hook = &hook})[0]);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  for (auto cfg : {tiny_mlm(SoftmaxConfig::clipped_alpha(1.0, 3.2)),
                   tiny_clm(SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal))}) {
    cfg.n_layers = 1;
    cfg.hidden = 8;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 5;
    cfg.init_std = 0.4;
    Transformer m(cfg, 8);
    Batch b = random_batch(2, 5, 12, 4);
    std::vector<std::int32_t> labels(b.ids.size(), -1);
    labels[1] = b.ids[1];
    labels[7] = b.ids[7];
    b.ids[1] = 1;
    auto loss = [&](const Tensor&) {
      return cfg.objective == Objective::MLM ? m.forward_mlm(b, labels).loss : m.forward_clm(b).loss;
    };
    for (const char* name : {"layer0.attn.q.weight", "layer0.attn.v.bias", "layer0.ffn.in.weight",
                             "embeddings.position", "layer0.ln2.gain"}) {
      EXPECT_LT(finite_diff_check(loss, m.param(name)), 1e-4) << name;
    }
  }
}

TEST(Model, ShapeAndConfigErrors) {
  Transformer m(tiny_mlm(), 1);
  EXPECT_THROW(m.logits(random_batch(1, 9, 40, 1)), ShapeError);
  Batch bad{{5, 6, 7}, 2, 2};
  EXPECT_THROW(m.logits(bad), ShapeError);
  Batch ok = random_batch(1, 4, 40, 1);
  std::vector<std::int32_t> none(4, -1);
  EXPECT_THROW(m.forward_mlm(ok, none), std::invalid_argument);
  EXPECT_THROW(m.forward_clm(ok), std::logic_error);

  ModelConfig c = tiny_mlm();
  c.n_heads = 3;
  try {
    Transformer bad_model(c, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "model.n_heads");
  }
  c = tiny_mlm(SoftmaxConfig::vanilla(AttentionDirection::Causal));
  EXPECT_THROW(Transformer(c, 1), ConfigError);
}
