#include "combo/baselines.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "combo/error.hpp"
#include "combo/parallel.hpp"

namespace combo {

using nlohmann::json;

void LinearProbeConfig::validate() const {
  if (lr_grid.empty()) throw ConfigError("linear probe lr_grid is empty");
  if (steps < 1) throw ConfigError("linear probe steps must be >= 1");
  if (batch_size < 1) throw ConfigError("linear probe batch_size must be >= 1");
  for (double lr : lr_grid) {
    if (!(lr > 0)) throw ConfigError("linear probe learning rates must be positive");
  }
}

json to_json(const LinearProbeConfig& c) {
  return {{"backbone", c.backbone}, {"layer", c.layer},     {"steps", c.steps},
          {"batch_size", c.batch_size}, {"lr_grid", c.lr_grid}, {"learned_norm", c.learned_norm},
          {"seed", c.seed}};
}

LinearProbeConfig probe_config_from_json(const json& j) {
  static const std::set<std::string> known = {"backbone", "layer", "steps", "batch_size",
                                              "lr_grid",  "learned_norm", "seed"};
  if (!j.is_object()) throw ConfigError("probe config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("probe config: unknown key \"" + key + "\"");
  }
  LinearProbeConfig c;
  try {
    c.backbone = j.value("backbone", c.backbone);
    c.layer = j.value("layer", c.layer);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_grid = j.value("lr_grid", c.lr_grid);
    c.learned_norm = j.value("learned_norm", c.learned_norm);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("probe config: ") + e.what());
  }
  return c;
}

std::uint64_t probe_job_seed(std::uint64_t seed, int layer, double lr) {
  // splitmix64 finalizer over the job coordinates
  std::uint64_t z = static_cast<std::uint64_t>(static_cast<std::int64_t>(layer)) * 0x9e3779b97f4a7c15ull ^
                    std::bit_cast<std::uint64_t>(lr);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  z ^= z >> 31;
  return seed ^ z;
}

namespace {

Tensor<double> pooled_raw(const FeatureDataset& ds, const MapKey& key, const std::vector<std::size_t>& samples) {
  const auto& meta = ds.manifest.backbone(key.backbone);
  if (std::find(meta.layer_ids.begin(), meta.layer_ids.end(), key.layer) == meta.layer_ids.end()) {
    throw DataError("manifest has no layer " + std::to_string(key.layer) + " for backbone " + key.backbone);
  }
  Tensor<double> out({samples.size(), meta.dim});
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const auto map = ds.sample_map(key, samples[s]);
    double* row = out.data() + s * meta.dim;
    for (std::size_t t = 0; t < meta.tokens; ++t)
      for (std::size_t c = 0; c < meta.dim; ++c) row[c] += map[t * meta.dim + c];
    for (std::size_t c = 0; c < meta.dim; ++c) row[c] /= static_cast<double>(meta.tokens);
  }
  return out;
}

std::vector<std::size_t> range(std::size_t begin, std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

constexpr double kNormEps = 1e-6;

struct ProbeModel {
  Parameter<double> gamma, beta, w, b;
};

Var<double> probe_logits(Tape<double>& tape, ProbeModel& m, bool learned_norm, Tensor<double> x) {
  auto xv = tape.constant(std::move(x));
  auto g = learned_norm ? tape.parameter(m.gamma) : tape.constant(m.gamma.value);
  auto be = learned_norm ? tape.parameter(m.beta) : tape.constant(m.beta.value);
  auto h = ops::layer_norm(xv, g, be, kNormEps);
  return ops::linear(h, tape.parameter(m.w), tape.parameter(m.b));
}

double probe_accuracy(ProbeModel& m, bool learned_norm, const Tensor<double>& x, const std::vector<int>& labels) {
  Tape<double> tape(false);
  const auto& logits = probe_logits(tape, m, learned_norm, x).value();
  std::size_t hit = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = logits.row(r);
    hit += (std::max_element(row.begin(), row.end()) - row.begin()) == labels[r];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double train_probe(const Tensor<double>& train_x, const std::vector<int>& train_y, const Tensor<double>& val_x,
                   const std::vector<int>& val_y, std::size_t classes, double lr, const LinearProbeConfig& cfg,
                   std::uint64_t seed) {
  const std::size_t d = train_x.cols(), n = train_x.rows();
  ProbeModel m{{"norm.weight", Tensor<double>({d}, 1.0)},
               {"norm.bias", Tensor<double>({d})},
               {"head.weight", Tensor<double>({d, classes})},
               {"head.bias", Tensor<double>({classes})}};
  std::vector<Parameter<double>*> params{&m.w, &m.b};
  if (cfg.learned_norm) params = {&m.gamma, &m.beta, &m.w, &m.b};
  auto mask = std::make_unique<bool[]>(params.size());
  AdamState<double> opt;
  const AdamHyper h{lr, 0.9, 0.999, 1e-8, 0.0};

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> perm(n);
  std::size_t cursor = n;
  const std::size_t batch = std::min(cfg.batch_size, n);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> idx;
    idx.reserve(batch);
    while (idx.size() < batch) {
      if (cursor == n) {
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        cursor = 0;
      }
      idx.push_back(perm[cursor++]);
    }
    Tensor<double> xb({batch, d});
    std::vector<int> yb;
    for (std::size_t i = 0; i < batch; ++i) {
      std::copy_n(train_x.data() + idx[i] * d, d, xb.data() + i * d);
      yb.push_back(train_y[idx[i]]);
    }
    for (auto* p : params) p->zero_grad();
    Tape<double> tape;
    auto loss = ops::cross_entropy(probe_logits(tape, m, cfg.learned_norm, std::move(xb)), yb);
    tape.backward(loss);
    adamw_step<double>(params, std::span<const bool>(mask.get(), params.size()), opt, h);
  }
  return probe_accuracy(m, cfg.learned_norm, val_x, val_y);
}

}  // namespace

Tensor<double> pooled_features(const FeatureDataset& ds, const MapKey& key, const std::vector<std::size_t>& samples) {
  auto raw = pooled_raw(ds, key, samples);
  Tape<double> tape(false);
  const std::size_t d = raw.cols();
  auto x = tape.constant(std::move(raw));
  return ops::layer_norm(x, tape.constant(Tensor<double>({d}, 1.0)), tape.constant(Tensor<double>({d})), kNormEps)
      .value();
}

ProbeResult linear_probe(const FeatureDataset& ds, const LinearProbeConfig& cfg) {
  cfg.validate();
  const Manifest& m = ds.manifest;
  const MapKey key{cfg.backbone, cfg.layer};
  const auto train_idx = range(m.split_begin(Split::train), m.split_size(Split::train));
  const auto val_idx = range(m.split_begin(Split::val), m.split_size(Split::val));
  if (train_idx.empty() || val_idx.empty()) throw DataError("linear probe needs nonempty train and val splits");
  const auto train_x = pooled_raw(ds, key, train_idx);
  const auto val_x = pooled_raw(ds, key, val_idx);
  std::vector<int> train_y, val_y;
  for (auto i : train_idx) train_y.push_back(m.labels[i]);
  for (auto i : val_idx) val_y.push_back(m.labels[i]);

  ProbeResult res{cfg.backbone, cfg.layer, {}, 0, -1};
  for (double lr : cfg.lr_grid) {
    const double acc = train_probe(train_x, train_y, val_x, val_y, m.num_classes, lr, cfg,
                                   probe_job_seed(cfg.seed, cfg.layer, lr));
    res.grid.push_back({lr, acc});
    if (acc > res.best_val_accuracy || (acc == res.best_val_accuracy && lr < res.best_lr)) {
      res.best_val_accuracy = acc;
      res.best_lr = lr;
    }
  }
  return res;
}

json LayerCurve::to_json() const {
  json rows = json::array();
  json curve = json::array();
  for (const auto& r : layers) {
    for (const auto& p : r.grid) {
      rows.push_back({{"backbone", r.backbone}, {"layer", r.layer}, {"lr", p.lr}, {"val_acc", p.val_accuracy}});
    }
    curve.push_back({{"backbone", r.backbone}, {"layer", r.layer}, {"lr", r.best_lr}, {"val_acc", r.best_val_accuracy}});
  }
  return {{"kind", "layer_sweep"}, {"backbone", backbone}, {"rows", rows}, {"curve", curve}};
}

LayerCurve layer_sweep(const FeatureDataset& ds, const std::string& backbone, const LinearProbeConfig& base) {
  const auto& meta = ds.manifest.backbone(backbone);
  if (meta.layer_ids.size() < 2) throw ConfigError("layer sweep needs at least 2 layers in backbone " + backbone);
  LayerCurve curve{backbone, std::vector<ProbeResult>(meta.layer_ids.size())};
  parallel_for(meta.layer_ids.size(), [&](std::size_t i) {
    LinearProbeConfig cfg = base;
    cfg.backbone = backbone;
    cfg.layer = meta.layer_ids[i];
    curve.layers[i] = linear_probe(ds, cfg);
  });
  return curve;
}

LayerMode parse_layer_mode(std::string_view s) {
  if (s == "all") return LayerMode::all;
  if (s == "last") return LayerMode::last;
  if (s == "first-half") return LayerMode::first_half;
  if (s == "last-half") return LayerMode::last_half;
  if (s == "even" || s == "even-blocks") return LayerMode::even_blocks;
  throw ConfigError("unknown layer mode \"" + std::string(s) + "\" (all, last, first-half, last-half, even)");
}

std::string_view layer_mode_name(LayerMode m) {
  switch (m) {
    case LayerMode::all: return "all";
    case LayerMode::last: return "last";
    case LayerMode::first_half: return "first-half";
    case LayerMode::last_half: return "last-half";
    case LayerMode::even_blocks: return "even";
  }
  return "?";
}

std::optional<LayerSubset> restrict_layers(const Manifest& m, LayerMode mode) {
  if (mode == LayerMode::all) return std::nullopt;
  LayerSubset subset;
  for (const auto& b : m.backbones) {
    const auto& ids = b.layer_ids;
    const std::size_t n = ids.size();
    std::vector<int> keep;
    switch (mode) {
      case LayerMode::last: keep = {ids.back()}; break;
      case LayerMode::first_half: keep.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n / 2)); break;
      case LayerMode::last_half: keep.assign(ids.end() - static_cast<std::ptrdiff_t>(n / 2), ids.end()); break;
      case LayerMode::even_blocks:
        // second, fourth, ... probed block
        for (std::size_t i = 1; i < n; i += 2) keep.push_back(ids[i]);
        break;
      case LayerMode::all: break;
    }
    if (keep.empty()) {
      throw ConfigError("layer mode " + std::string(layer_mode_name(mode)) + " leaves backbone " + b.id +
                        " with no layers");
    }
    subset[b.id] = std::move(keep);
  }
  return subset;
}

TrainResult combo_layer_restriction(const FeatureDataset& ds, LayerMode mode, AdapterConfig cfg,
                                    const TrainConfig& tc) {
  cfg.layer_subset = restrict_layers(ds.manifest, mode);
  return train(ds, std::move(cfg), tc);
}

}  // namespace combo
