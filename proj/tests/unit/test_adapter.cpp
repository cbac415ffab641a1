#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "combo/adapter.hpp"
#include "combo/error.hpp"
#include "test_util.hpp"

namespace combo {
namespace {

using testing::max_fd_error;
using testing::random_tensor;

// One backbone, two layers of 12 dims: D = 24, T = 9.
Manifest small_manifest(std::size_t classes = 3, std::size_t tokens = 9, std::size_t dim = 12) {
  BackboneMeta b{"bb", {1, 2}, tokens, dim};
  std::vector<int> labels(4);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % classes);
  return make_manifest("unit", classes, {b}, labels, Splits{2, 2, 0});
}

AdapterConfig small_config(std::size_t classes = 3) {
  AdapterConfig cfg;
  cfg.compress_dim = cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.num_classes = classes;
  return cfg;
}

// Replaces every parameter with O(0.3) Gaussian values so no gradient path
// is masked by the zero head or unit norms of the default init.
void randomize(AdapterParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* q : p.all()) q->value = random_tensor(q->value.shape(), rng, 0.3);
}

TEST(AdapterGradients, EveryParameterMatchesFiniteDifferences) {
  const auto m = small_manifest();
  const auto layout = make_layout(m);
  ASSERT_EQ(layout.total_dim, 24u);
  const auto cfg = small_config();
  auto p = init_params<double>(cfg, layout, 1);
  randomize(p, 2);
  std::mt19937_64 rng(3);
  const std::size_t batch = 3;
  const auto tokens = random_tensor({batch * 9, 24}, rng);
  const std::vector<int> labels = {0, 2, 1};
  for (auto* param : p.all()) {
    const double err = max_fd_error({param}, [&](Tape<double>& t) {
      return ops::cross_entropy(forward(t, p, cfg, tokens, batch), labels);
    });
    EXPECT_LT(err, 1e-4) << param->id;
  }
}

TEST(Adapter, ZeroWeightsGiveHeadBias) {
  const auto m = small_manifest();
  const auto layout = make_layout(m);
  const auto cfg = small_config();
  auto p = init_params<double>(cfg, layout, 1);
  p.head_b.value = Tensor<double>({3}, std::vector<double>{0.5, -1, 2});
  std::mt19937_64 rng(4);
  const auto logits = forward_sample(p, cfg, random_tensor({9, 24}, rng));
  EXPECT_EQ(logits.values(), (std::vector<double>{0.5, -1, 2}));
}

TEST(Adapter, WithoutPositionsIsPermutationInvariant) {
  const auto m = small_manifest();
  const auto layout = make_layout(m);
  auto cfg = small_config();
  cfg.use_positional_embedding = false;
  auto p = init_params<double>(cfg, layout, 1);
  randomize(p, 5);
  std::mt19937_64 rng(6);
  const auto x = random_tensor({9, 24}, rng);
  std::vector<std::size_t> perm(9);
  for (std::size_t i = 0; i < 9; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> y({9, 24});
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 24; ++c) y.at(r, c) = x.at(perm[r], c);
  const auto a = forward_sample(p, cfg, x), b = forward_sample(p, cfg, y);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Adapter, InitIsDeterministicAndSeedDependent) {
  const auto layout = make_layout(small_manifest());
  const auto cfg = small_config();
  auto a = init_params<double>(cfg, layout, 9), b = init_params<double>(cfg, layout, 9);
  auto c = init_params<double>(cfg, layout, 10);
  EXPECT_EQ(a.proj_w.value, b.proj_w.value);
  EXPECT_NE(a.proj_w.value, c.proj_w.value);
  EXPECT_EQ(a.head_w.value, Tensor<double>({16, 3}));
  for (std::size_t i = 0; i < a.proj_w.value.size(); ++i) EXPECT_LE(std::abs(a.proj_w.value[i]), 0.04 + 1e-15);
}

TEST(Adapter, BatchedForwardMatchesPerSample) {
  const auto layout = make_layout(small_manifest());
  const auto cfg = small_config();
  auto p = init_params<double>(cfg, layout, 1);
  randomize(p, 7);
  std::mt19937_64 rng(8);
  std::vector<Tensor<double>> samples = {random_tensor({9, 24}, rng), random_tensor({9, 24}, rng)};
  Tape<double> tape(false);
  const auto logits = forward(tape, p, cfg, batch_tokens(samples, {0, 1}), 2).value();
  for (std::size_t s = 0; s < 2; ++s) {
    const auto one = forward_sample(p, cfg, samples[s]);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(logits.at(s, c), one[c], 1e-12);
  }
}

TEST(ParameterCount, DefaultProjectionForOneViTB) {
  std::vector<int> layers(12);
  for (int i = 0; i < 12; ++i) layers[i] = i + 1;
  const auto m = make_manifest("vitb", 100, {BackboneMeta{"vit_b", layers, 196, 768}}, std::vector<int>(2, 0),
                               Splits{1, 1, 0});
  auto cfg = AdapterConfig{};
  cfg.num_classes = 100;
  const auto layout = make_layout(m);
  EXPECT_EQ(layout.total_dim, 9216u);
  const auto counts = count_parameters(init_params<float>(cfg, layout, 0));
  EXPECT_EQ(counts.projection, 1179776u);
  EXPECT_EQ(counts.total, counts.projection + counts.embedding + counts.transformer + counts.head);
}

TEST(ParameterCount, HeadForTenClasses) {
  auto cfg = AdapterConfig{};
  cfg.num_classes = 10;
  cfg.depth = 1;
  const auto m = make_manifest("h", 10, {BackboneMeta{"b", {1}, 4, 8}}, std::vector<int>(2, 0), Splits{1, 1, 0});
  EXPECT_EQ(count_parameters(init_params<float>(cfg, make_layout(m), 0)).head, 1290u);
}

TEST(Adapter, ConfigValidation) {
  auto cfg = small_config();
  cfg.compress_dim = 8;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.depth = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(adapter_config_from_json(nlohmann::json{{"depth", 1}, {"bogus", 2}}), ConfigError);
}

TEST(Checkpoint, RoundTripRestoresParameters) {
  const auto m = small_manifest();
  const auto layout = make_layout(m);
  const auto cfg = small_config();
  auto p = init_params<float>(cfg, layout, 11);
  const auto ck = make_checkpoint(p, cfg, m.hash());
  const auto dir = testing::scratch_dir("ckpt");
  write_checkpoint(dir / "a.cmbc", ck);
  const auto back = read_checkpoint(dir / "a.cmbc");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(ck));
  auto q = params_from_checkpoint<float>(back, m);
  const auto pa = p.all();
  const auto qa = q.all();
  ASSERT_EQ(pa.size(), qa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value, qa[i]->value) << pa[i]->id;
}

TEST(Checkpoint, RejectsOtherManifestAndCorruption) {
  const auto m = small_manifest();
  const auto cfg = small_config();
  const auto ck = make_checkpoint(init_params<float>(cfg, make_layout(m), 1), cfg, m.hash());
  EXPECT_THROW(params_from_checkpoint<float>(ck, small_manifest(3, 9, 10)), Error);
  auto bytes = encode_checkpoint(ck);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), Error);
}

}  // namespace
}  // namespace combo
