#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "combo/error.hpp"
#include "combo/synthgen.hpp"
#include "combo/training.hpp"
#include "test_util.hpp"

namespace combo {
namespace {

using testing::max_fd_error;
using testing::random_tensor;

TEST(LrSchedule, WarmupPeakAndCosineMidpoint) {
  TrainConfig tc;
  tc.epochs = 10;
  tc.warmup_epochs = 2;
  tc.peak_lr = 3e-3;
  const std::size_t spe = 7;
  EXPECT_EQ(lr_at(0, tc, spe), 0.0);
  EXPECT_NEAR(lr_at(7, tc, spe), 1.5e-3, 1e-15);
  EXPECT_NEAR(lr_at(14, tc, spe), 3e-3, 1e-12);
  EXPECT_NEAR(lr_at(14 + 28, tc, spe), 1.5e-3, 1e-12);
  EXPECT_NEAR(lr_at(70, tc, spe), 0.0, 1e-12);
  for (std::size_t s = 15; s < 70; ++s) EXPECT_LE(lr_at(s, tc, spe), lr_at(s - 1, tc, spe));
}

TEST(LrSchedule, NoWarmupStartsAtPeak) {
  TrainConfig tc;
  tc.epochs = 4;
  tc.warmup_epochs = 0;
  EXPECT_EQ(lr_at(0, tc, 5), tc.peak_lr);
}

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  tc.warmup_epochs = tc.epochs;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = TrainConfig{};
  tc.peak_lr = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", 3}, {"typo", 1}}), ConfigError);
  EXPECT_EQ(train_config_from_json(to_json(TrainConfig{})).peak_lr, TrainConfig{}.peak_lr);
}

TEST(AdamW, FirstStepClosedForm) {
  Parameter<double> decayed("w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
  Parameter<double> plain("b", Tensor<double>({2}, std::vector<double>{0.25, 0.0}));
  decayed.grad = Tensor<double>({3}, std::vector<double>{0.1, -3.0, 0.0});
  plain.grad = Tensor<double>({2}, std::vector<double>{2.0, -1e-3});
  const AdamHyper h{0.01, 0.9, 0.999, 1e-8, 0.1};
  std::vector<Parameter<double>*> ps = {&decayed, &plain};
  const bool mask[] = {true, false};
  AdamState<double> st;
  adamw_step<double>(ps, mask, st, h);
  // m_hat = g and v_hat = g^2 after one step.
  auto expect = [&](double theta, double g, bool wd) {
    return theta * (wd ? 1 - h.lr * h.weight_decay : 1) - h.lr * g / (std::abs(g) + h.eps);
  };
  EXPECT_NEAR(decayed.value[0], expect(1.0, 0.1, true), 1e-15);
  EXPECT_NEAR(decayed.value[1], expect(-2.0, -3.0, true), 1e-15);
  EXPECT_NEAR(decayed.value[2], expect(0.5, 0.0, true), 1e-15);
  EXPECT_NEAR(plain.value[0], expect(0.25, 2.0, false), 1e-15);
  EXPECT_NEAR(plain.value[1], expect(0.0, -1e-3, false), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, ZeroGradWithoutDecayLeavesParameters) {
  Parameter<double> p("w", Tensor<double>({4}, 1.5));
  p.zero_grad();
  std::vector<Parameter<double>*> ps = {&p};
  const bool mask[] = {true};
  AdamState<double> st;
  for (int i = 0; i < 3; ++i) adamw_step<double>(ps, mask, st, AdamHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
  EXPECT_EQ(p.value, Tensor<double>({4}, 1.5));
}

StackLayout two_group_layout() {
  const auto m = make_manifest("g", 2, {BackboneMeta{"a", {1}, 4, 2}, BackboneMeta{"b", {1}, 4, 2}}, {0, 1},
                               Splits{1, 1, 0});
  return make_layout(m);
}

TEST(GroupNorms, Examples) {
  const auto layout = two_group_layout();
  Parameter<double> w("proj.weight", Tensor<double>({4, 2}));
  EXPECT_EQ(group_norms(w, layout), (std::vector<double>{0, 0}));
  w.value = Tensor<double>({4, 2}, std::vector<double>{0, 0, 0, 0, 1, 2, 3, 4});
  const auto s = group_norms(w, layout);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_NEAR(s[1], std::sqrt(1 + 4 + 9 + 16.0), 1e-12);
  w.value = Tensor<double>({4, 2}, std::vector<double>{1, -1, 2, 0.5, 0, 3, -2, 1});
  const auto t = group_norms(w, layout);
  EXPECT_NEAR(t[0], std::sqrt(1 + 1 + 4 + 0.25), 1e-12);
  EXPECT_NEAR(t[1], std::sqrt(9 + 4 + 1.0), 1e-12);
  Parameter<double> wrong("proj.weight", Tensor<double>({5, 2}));
  EXPECT_THROW(group_norms(wrong, layout), DataError);
}

TEST(TotalLoss, AddsWeightedScoresAndDifferentiates) {
  const auto layout = two_group_layout();
  std::mt19937_64 rng(1);
  Parameter<double> w("proj.weight", random_tensor({4, 2}, rng));
  Parameter<double> logits("logits", random_tensor({2, 3}, rng));
  {
    Tape<double> t(false);
    auto task = ops::cross_entropy(t.parameter(logits), {0, 2});
    auto scores = ops::group_l2_norms(t.parameter(w), layout.groups);
    EXPECT_EQ(total_loss(task, scores, 0.0).value()[0], task.value()[0]);
    const auto sv = group_norms(w, layout);
    EXPECT_NEAR(total_loss(task, scores, 0.01).value()[0], task.value()[0] + 0.01 * (sv[0] + sv[1]), 1e-14);
  }
  EXPECT_LT(max_fd_error({&w, &logits}, [&](Tape<double>& t) {
              return total_loss(ops::cross_entropy(t.parameter(logits), {0, 2}),
                                ops::group_l2_norms(t.parameter(w), layout.groups), 0.5);
            }), 1e-4);
}

SynthSpec separable_spec() {
  SynthSpec s;
  s.backbones = {SynthBackbone{"bb", 2, 16, 8}};
  s.num_classes = 2;
  s.splits = Splits{80, 40, 0};
  s.signals = {SynthSignal{"bb", 2, 4.0, Encoding::pooled_linear}};
  s.seed = 3;
  return s;
}

AdapterConfig tiny_adapter() {
  AdapterConfig cfg;
  cfg.compress_dim = cfg.embed_dim = 16;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

TrainConfig short_schedule() {
  TrainConfig tc;
  tc.epochs = 20;
  tc.warmup_epochs = 2;
  tc.batch_size = 16;
  tc.peak_lr = 3e-3;
  tc.seed = 5;
  return tc;
}

TEST(Train, SeparableTwoClassReachesPerfectValidation) {
  const auto ds = generate(separable_spec());
  const auto r = train(ds, tiny_adapter(), short_schedule());
  EXPECT_EQ(r.report.final_val_accuracy, 1.0);
  EXPECT_EQ(r.report.epochs.size(), 20u);
  EXPECT_LT(r.report.epochs.back().train_loss, r.report.epochs.front().train_loss);
  EXPECT_EQ(evaluate(ds, r.checkpoint, Split::val), 1.0);
}

TEST(Train, SameSeedIsBitIdentical) {
  const auto ds = generate(separable_spec());
  auto tc = short_schedule();
  tc.epochs = 3;
  tc.warmup_epochs = 1;
  const auto a = train(ds, tiny_adapter(), tc), b = train(ds, tiny_adapter(), tc);
  EXPECT_EQ(a.report.to_json().dump(), b.report.to_json().dump());
  EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
  tc.seed = 6;
  const auto c = train(ds, tiny_adapter(), tc);
  EXPECT_NE(encode_checkpoint(a.checkpoint), encode_checkpoint(c.checkpoint));
}

TEST(Train, ReportJsonHasKindAndNoTiming) {
  const auto ds = generate(separable_spec());
  auto tc = short_schedule();
  tc.epochs = 2;
  tc.warmup_epochs = 0;
  const auto j = train(ds, tiny_adapter(), tc).report.to_json();
  EXPECT_EQ(j.at("kind"), "train_report");
  EXPECT_FALSE(j.contains("wall_time_s"));
}

TEST(Train, Float64MatchesFloat32Closely) {
  const auto ds = generate(separable_spec());
  auto tc = short_schedule();
  tc.epochs = 2;
  tc.warmup_epochs = 0;
  const auto f = train(ds, tiny_adapter(), tc);
  tc.precision = Precision::f64;
  const auto d = train(ds, tiny_adapter(), tc);
  EXPECT_NEAR(f.report.epochs.back().train_loss, d.report.epochs.back().train_loss, 1e-3);
}

TEST(ScoreModels, RanksTheInformativeBackboneFirst) {
  SynthSpec s;
  s.backbones = {SynthBackbone{"noise_a", 1, 16, 8}, SynthBackbone{"signal", 1, 16, 8},
                 SynthBackbone{"noise_b", 1, 16, 8}};
  s.splits = Splits{80, 40, 0};
  s.signals = {SynthSignal{"signal", 1, 2.0, Encoding::pooled_linear}};
  s.seed = 9;
  const auto ds = generate(s);
  auto tc = short_schedule();
  tc.epochs = 10;
  const auto rep = score_models(ds, tiny_adapter(), tc, {0, 1}, 0.01);
  EXPECT_EQ(rep.ranking.front(), "signal");
  EXPECT_EQ(rep.per_seed_scores.size(), 2u);
  EXPECT_EQ(ImportanceReport::from_json(rep.to_json()).to_json(), rep.to_json());

  const auto sub = top_backbones_subset(ds.manifest, rep, 1, std::nullopt);
  ASSERT_EQ(sub.size(), 1u);
  EXPECT_TRUE(sub.count("signal"));
  auto tc2 = short_schedule();
  const auto sel = select_and_retrain(ds, rep, 1, tiny_adapter(), tc2);
  EXPECT_EQ(sel.report.backbone_ids, (std::vector<std::string>{"signal"}));
  EXPECT_EQ(sel.report.total_dim, 8u);
  EXPECT_THROW(top_backbones_subset(ds.manifest, rep, 4, std::nullopt), ConfigError);
}

}  // namespace
}  // namespace combo
