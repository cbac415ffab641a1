// Acceptance run: one PASS/FAIL line per criterion, with timing and the
// measured quantities. Exit status is nonzero when any criterion fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "../unit/test_util.hpp"
#include "combo/adapter.hpp"
#include "combo/baselines.hpp"
#include "combo/cli.hpp"
#include "combo/error.hpp"
#include "combo/features.hpp"
#include "combo/synthgen.hpp"
#include "combo/training.hpp"

namespace fs = std::filesystem;
using namespace combo;
using combo::testing::max_fd_error;
using combo::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  std::vector<int> layers = {1, 2};
  const auto m = make_manifest("grad", 3, {BackboneMeta{"bb", layers, 9, 12}}, {0, 1, 2, 0}, Splits{2, 2, 0});
  const auto layout = make_layout(m);
  AdapterConfig cfg;
  cfg.compress_dim = cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.num_classes = 3;
  auto p = init_params<double>(cfg, layout, 1);
  std::mt19937_64 rng(2);
  for (auto* q : p.all()) q->value = random_tensor(q->value.shape(), rng, 0.3);
  const std::size_t batch = 3;
  const auto tokens = random_tensor({batch * 9, 24}, rng);
  const std::vector<int> labels = {0, 2, 1};
  double worst = 0;
  std::string worst_id;
  for (auto* param : p.all()) {
    const double e = max_fd_error({param}, [&](Tape<double>& t) {
      return ops::cross_entropy(forward(t, p, cfg, tokens, batch), labels);
    });
    if (e > worst) worst = e, worst_id = param->id;
  }
  return {layout.total_dim == 24 && worst < 1e-4,
          std::to_string(p.all().size()) + " tensors, max rel err " + fmt("%.2e", worst) + " (" + worst_id + ")"};
}

Outcome naive_count() {
  std::vector<int> twelve(12);
  for (int i = 0; i < 12; ++i) twelve[i] = i + 1;
  const auto c = naive_stack_param_count({BackboneMeta{"vit", twelve, 197, 768}}, 100);
  return {c.weights == 181555200u, std::to_string(c.weights) + " weights + " + std::to_string(c.biases) + " biases"};
}

Outcome split_convention() {
  const BackboneMeta b{"bb", {1}, 4, 2};
  const std::vector<int> labels(1000, 0);
  bool ok = true;
  try {
    make_manifest("v", 2, {b}, labels, Splits{800, 200, 0}, "vtab-1k");
  } catch (const Error&) {
    ok = false;
  }
  int rejected = 0;
  for (Splits s : {Splits{700, 300, 0}, Splits{800, 100, 100}, Splits{1000, 0, 0}}) {
    try {
      make_manifest("v", 2, {b}, labels, s, "vtab-1k");
    } catch (const DataError&) {
      ++rejected;
    }
  }
  return {ok && rejected == 3, std::string("800/200 accepted: ") + (ok ? "yes" : "no") + ", " +
                                   std::to_string(rejected) + "/3 other splits rejected"};
}

Tensor<double> bilinear_oracle(const Tensor<double>& src, std::size_t in, std::size_t out) {
  const std::size_t dim = src.dim(1);
  auto coord = [&](std::size_t o) {
    return std::clamp((o + 0.5) * double(in) / double(out) - 0.5, 0.0, double(in - 1));
  };
  Tensor<double> dst({out * out, dim});
  for (std::size_t oy = 0; oy < out; ++oy)
    for (std::size_t ox = 0; ox < out; ++ox)
      for (std::size_t iy = 0; iy < in; ++iy)
        for (std::size_t ix = 0; ix < in; ++ix) {
          const double w = std::max(0.0, 1 - std::abs(coord(oy) - iy)) * std::max(0.0, 1 - std::abs(coord(ox) - ix));
          if (w == 0) continue;
          for (std::size_t c = 0; c < dim; ++c) dst.at(oy * out + ox, c) += w * src.at(iy * in + ix, c);
        }
  return dst;
}

Outcome interpolation_oracle() {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> side(2, 8), dims(1, 6);
  double worst = 0;
  bool identity_exact = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t in = side(rng), out = side(rng), d = dims(rng);
    const auto src = random_tensor({in * in, d}, rng);
    const auto got = interpolate_map(FeatureMap<double>{"bb", 1, src}, out * out).data;
    const auto want = bilinear_oracle(src, in, out);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    if (in == out) identity_exact = identity_exact && got == src;
    const auto same = interpolate_map(FeatureMap<double>{"bb", 1, src}, in * in).data;
    identity_exact = identity_exact && same == src;
  }
  return {worst <= 1e-12 && identity_exact,
          "1000 maps, max abs err " + fmt("%.2e", worst) + ", identity bit-exact: " + (identity_exact ? "yes" : "no")};
}

Outcome normalization_invariance() {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> shift(-50, 50);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto x = random_tensor({16, 8}, rng, 2.0);
    const auto base = normalize_map(FeatureMap<double>{"bb", 1, x}).data;
    for (double a : {0.5, 2.0, 100.0}) {
      Tensor<double> z = x;
      const double c = shift(rng);
      for (auto& v : z.span()) v = a * v + c;
      const auto n = normalize_map(FeatureMap<double>{"bb", 1, z}).data;
      for (std::size_t i = 0; i < n.size(); ++i) worst = std::max(worst, std::abs(n[i] - base[i]));
    }
  }
  // End to end: rescaling every raw map leaves the adapter's logits unchanged.
  SynthSpec spec;
  spec.backbones = {SynthBackbone{"a", 2, 16, 8}, SynthBackbone{"b", 1, 9, 4}};
  spec.splits = Splits{8, 4, 0};
  spec.seed = 3;
  const auto ds = generate(spec);
  auto scaled = ds;
  std::size_t k = 0;
  for (auto& [key, blob] : scaled.blobs) {
    const float a = k % 2 ? 100.0f : 0.5f, c = k % 2 ? -7.0f : 3.0f;
    for (auto& v : blob) v = a * v + c;
    ++k;
  }
  const auto layout = make_layout(ds.manifest);
  AdapterConfig cfg;
  cfg.compress_dim = cfg.embed_dim = 16;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.num_classes = 2;
  auto p = init_params<double>(cfg, layout, 4);
  for (auto* q : p.all()) q->value = random_tensor(q->value.shape(), rng, 0.3);
  double logit_worst = 0;
  for (std::size_t s = 0; s < ds.manifest.num_samples; ++s) {
    const auto a = forward_sample(p, cfg, preprocess_sample<double>(ds, layout, s));
    const auto b = forward_sample(p, cfg, preprocess_sample<double>(scaled, layout, s));
    for (std::size_t i = 0; i < a.size(); ++i) logit_worst = std::max(logit_worst, std::abs(a[i] - b[i]));
  }
  return {worst <= 1e-5 && logit_worst <= 1e-5,
          "map max err " + fmt("%.2e", worst) + ", logit max err " + fmt("%.2e", logit_worst)};
}

// ---------------------------------------------------------------------------
// Desk-scale learning analogs

AdapterConfig small_adapter() {
  AdapterConfig cfg;
  cfg.compress_dim = cfg.embed_dim = 32;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.mlp_ratio = 4;
  return cfg;
}

// Spatial task settings. A moderate prototype amplitude keeps the cell's
// positional embedding visible after the pre-norm LayerNorm.
constexpr double kSpatialSnr = 1.0;

TrainConfig spatial_schedule() {
  TrainConfig tc;
  tc.epochs = 40;
  tc.warmup_epochs = 2;
  tc.batch_size = 16;
  tc.peak_lr = 3e-3;
  return tc;
}

Outcome spatial_preservation() {
  double probe_sum = 0, combo_sum = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SynthSpec spec;
    spec.name = "spatial";
    spec.backbones = {SynthBackbone{"vit", 4, 196, 32}};
    spec.num_classes = 8;
    spec.splits = Splits{800, 200, 0};
    spec.signals = {SynthSignal{"vit", 3, kSpatialSnr, Encoding::spatial_position}};
    spec.seed = seed;
    const auto ds = generate(spec);

    LinearProbeConfig pc;
    pc.backbone = "vit";
    pc.seed = seed;
    const auto curve = layer_sweep(ds, "vit", pc);
    double probe_best = 0;
    for (const auto& l : curve.layers) probe_best = std::max(probe_best, l.best_val_accuracy);

    TrainConfig tc = spatial_schedule();
    tc.seed = seed;
    const double acc = train(ds, small_adapter(), tc).report.final_val_accuracy;
    probe_sum += probe_best;
    combo_sum += acc;
    per_seed += (seed ? ", " : "") + fmt("%.3f", probe_best) + "/" + fmt("%.3f", acc);
  }
  const double probe = probe_sum / 3, combo = combo_sum / 3;
  return {probe <= 1.0 / 8 + 0.10 && combo >= 0.90,
          "pooled probe " + fmt("%.3f", probe) + " (limit 0.225), adapter " + fmt("%.3f", combo) +
              " (need 0.90); per seed probe/adapter: " + per_seed};
}

Outcome layer_restriction() {
  double all_sum = 0, last_sum = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SynthSpec spec;
    spec.name = "layers";
    spec.backbones = {SynthBackbone{"vit", 8, 16, 16}};
    spec.num_classes = 4;
    spec.splits = Splits{800, 200, 0};
    spec.signals = {SynthSignal{"vit", 2, 1.0, Encoding::pooled_linear}};
    spec.seed = 100 + seed;
    const auto ds = generate(spec);
    TrainConfig tc;
    tc.epochs = 15;
    tc.warmup_epochs = 2;
    tc.batch_size = 32;
    tc.peak_lr = 3e-3;
    tc.seed = seed;
    all_sum += combo_layer_restriction(ds, LayerMode::all, small_adapter(), tc).report.final_val_accuracy;
    last_sum += combo_layer_restriction(ds, LayerMode::last, small_adapter(), tc).report.final_val_accuracy;
  }
  const double all = all_sum / 3, last = last_sum / 3;
  return {all - last >= 0.10, "all " + fmt("%.3f", all) + ", last " + fmt("%.3f", last) + ", gap " +
                                  fmt("%.1f", 100 * (all - last)) + " points (need 10)"};
}

Outcome relevance_scoring() {
  int first = 0;
  double gap_worst = 0;
  std::string gaps;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SynthSpec spec;
    spec.name = "relevance";
    spec.backbones = {SynthBackbone{"b0", 2, 16, 16}, SynthBackbone{"b1", 2, 16, 16}, SynthBackbone{"b2", 2, 16, 16},
                      SynthBackbone{"b3", 2, 16, 16}};
    const std::string informative = "b" + std::to_string(seed % 4);
    spec.num_classes = 4;
    spec.splits = Splits{800, 200, 0};
    spec.signals = {SynthSignal{informative, 2, 0.5, Encoding::pooled_linear}};
    spec.seed = 200 + seed;
    const auto ds = generate(spec);
    TrainConfig tc;
    tc.epochs = 10;
    tc.warmup_epochs = 1;
    tc.batch_size = 32;
    tc.peak_lr = 3e-3;
    tc.seed = seed;
    const auto rep = score_models(ds, small_adapter(), tc, {seed}, 0.01);
    if (rep.ranking.front() == informative) ++first;
    if (seed < 3) {
      // Selection versus all backbones, on the first three datasets.
      const double all = train(ds, small_adapter(), tc).report.final_val_accuracy;
      const double sel = select_and_retrain(ds, rep, 1, small_adapter(), tc).report.final_val_accuracy;
      gap_worst = std::max(gap_worst, all - sel);
      gaps += (seed ? ", " : "") + fmt("%.3f", sel) + " vs " + fmt("%.3f", all);
    }
  }
  return {first >= 9 && gap_worst <= 0.01, "ranked first in " + std::to_string(first) +
                                               "/10 seeds; selected vs all: " + gaps};
}

// ---------------------------------------------------------------------------

Outcome schedule() {
  TrainConfig tc;
  tc.epochs = 50;
  tc.warmup_epochs = 5;
  tc.peak_lr = 1e-3;
  const std::size_t spe = 12;  // warmup ends at step 60; the cosine phase spans 540 steps
  const double a = lr_at(0, tc, spe);
  const double b = lr_at(60, tc, spe);
  const double c = lr_at(60 + 270, tc, spe);
  const bool ok = std::abs(a) <= 1e-12 && std::abs(b - 1e-3) <= 1e-12 && std::abs(c - 5e-4) <= 1e-12;
  return {ok, "step 0: " + fmt("%.3g", a) + ", warmup end: " + fmt("%.15g", b) + ", cosine midpoint: " +
                  fmt("%.15g", c)};
}

Outcome determinism(const fs::path& work) {
  const fs::path ds_dir = work / "det_ds";
  const nlohmann::json cfg = {
      {"synth",
       {{"backbones", {{{"id", "a"}, {"num_layers", 3}, {"tokens", 16}, {"dim", 16}},
                       {{"id", "b"}, {"num_layers", 2}, {"tokens", 25}, {"dim", 8}}}},
        {"num_classes", 4},
        {"splits", {{"train", 200}, {"val", 100}, {"test", 0}}},
        {"signals", {{{"backbone", "a"}, {"layer", 2}, {"snr", 1.0}, {"encoding", "pooled-linear"}}}},
        {"seed", 5}}},
      {"dataset", ds_dir.string()},
      {"adapter", {{"compress_dim", 32}, {"embed_dim", 32}, {"depth", 2}, {"num_heads", 2}}},
      {"train", {{"epochs", 5}, {"warmup_epochs", 1}, {"batch_size", 32}, {"peak_lr", 0.003}, {"seed", 9}}}};
  const fs::path cfg_path = work / "det.json";
  std::ofstream(cfg_path) << cfg.dump(2);
  std::ostringstream sink;
  auto cli = [&](std::vector<std::string> args) { return run_cli(args, sink, sink); };
  int rc = cli({"combo", "synth", "--config", cfg_path.string(), "--out", ds_dir.string()});
  rc |= cli({"combo", "train", "--config", cfg_path.string(), "--out", (work / "run1").string()});
  rc |= cli({"combo", "train", "--config", cfg_path.string(), "--out", (work / "run2").string()});
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  const bool same_ck = slurp(work / "run1" / "checkpoint.cmbc") == slurp(work / "run2" / "checkpoint.cmbc");
  const bool same_rep = slurp(work / "run1" / "report.json") == slurp(work / "run2" / "report.json");
  const bool nonempty = !slurp(work / "run1" / "checkpoint.cmbc").empty();
  return {rc == 0 && same_ck && same_rep && nonempty,
          std::string("checkpoints ") + (same_ck ? "identical" : "differ") + ", reports " +
              (same_rep ? "identical" : "differ") + ", exit " + std::to_string(rc)};
}

Outcome format_round_trip(const fs::path& work) {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> small(1, 4), side(1, 5), dim(1, 9), classes(2, 5), samples(2, 12);
  std::normal_distribution<float> normal;
  int ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<BackboneMeta> metas;
    const int k = small(rng);
    for (int b = 0; b < k; ++b) {
      std::vector<int> ids;
      int next = 0;
      for (int l = 0, n = small(rng); l < n; ++l) ids.push_back(next += small(rng));
      const int s = side(rng);
      metas.push_back({"bb" + std::to_string(b), ids, std::size_t(s * s), std::size_t(dim(rng))});
    }
    const int c = classes(rng), n = samples(rng);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) labels[i] = i % c;
    FeatureDataset ds{make_manifest("rt" + std::to_string(trial), c, metas, labels, Splits{std::size_t(n - 1), 1, 0}),
                      {}};
    for (const auto& key : ds.manifest.order) {
      const auto& meta = ds.manifest.backbone(key.backbone);
      auto& blob = ds.blobs[key];
      blob.resize(n * meta.tokens * meta.dim);
      for (auto& v : blob) v = normal(rng);
      if (!blob.empty()) blob[0] = -0.0f;  // signed zero survives
    }
    const fs::path dir = work / ("rt_" + std::to_string(trial));
    write_dataset(dir, ds);
    const auto back = read_dataset(dir);
    bool same = back.blobs.size() == ds.blobs.size() && to_json(back.manifest) == to_json(ds.manifest);
    for (const auto& [key, blob] : ds.blobs) {
      const auto& other = back.blobs.at(key);
      same = same && other.size() == blob.size() &&
             std::equal(blob.begin(), blob.end(), other.begin(), [](float a, float b) {
               return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
             });
    }

    AdapterConfig cfg;
    cfg.compress_dim = cfg.embed_dim = 8;
    cfg.depth = 1 + trial % 2;
    cfg.num_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.num_classes = c;
    cfg.use_positional_embedding = trial % 3 != 0;
    auto p = init_params<float>(cfg, make_layout(ds.manifest), trial);
    for (auto* q : p.all())
      for (auto& v : q->value.span()) v = normal(rng);
    const auto ck = make_checkpoint(p, cfg, ds.manifest.hash());
    write_checkpoint(dir / "ck.cmbc", ck);
    const auto ck2 = read_checkpoint(dir / "ck.cmbc");
    same = same && encode_checkpoint(ck2) == encode_checkpoint(ck);
    const auto q = params_from_checkpoint<float>(ck2, ds.manifest);
    const auto pa = p.all();
    const auto qa = const_cast<AdapterParams<float>&>(q).all();
    for (std::size_t i = 0; i < pa.size(); ++i) {
      same = same && std::equal(pa[i]->value.span().begin(), pa[i]->value.span().end(), qa[i]->value.span().begin(),
                                [](float a, float b) {
                                  return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
                                });
    }
    ok += same;
    fs::remove_all(dir);
  }
  return {ok == 100, std::to_string(ok) + "/100 datasets and checkpoints bit-exact"};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments restrict the run to the named criteria.
  const std::vector<std::string> only(argv + 1, argv + argc);
  const fs::path work = fs::temp_directory_path() / "combo_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {"gradient-suite", gradient_suite},
      {"naive-stack-count", naive_count},
      {"split-convention", split_convention},
      {"interpolation-oracle", interpolation_oracle},
      {"normalization-invariance", normalization_invariance},
      {"spatial-preservation", spatial_preservation},
      {"layer-restriction", layer_restriction},
      {"relevance-scoring", relevance_scoring},
      {"schedule", schedule},
      {"determinism", [&] { return determinism(work); }},
      {"format-round-trip", [&] { return format_round_trip(work); }},
  };

  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %-26s %8.1fs  %s\n", o.pass ? "PASS" : "FAIL", c.name, s, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  fs::remove_all(work);
  return failed ? 1 : 0;
}
