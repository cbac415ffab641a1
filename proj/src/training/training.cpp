#include "combo/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "combo/error.hpp"
#include "combo/kernels.hpp"

namespace combo {

using nlohmann::json;

std::string_view precision_name(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision \"" + std::string(s) + "\" (expected f32 or f64)");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (warmup_epochs >= epochs) throw ConfigError("warmup_epochs must be smaller than epochs");
  if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (lambda_reg < 0) throw ConfigError("lambda must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size}, {"epochs", c.epochs},       {"warmup_epochs", c.warmup_epochs},
          {"peak_lr", c.peak_lr},       {"weight_decay", c.weight_decay}, {"lambda", c.lambda_reg},
          {"beta1", c.beta1},           {"beta2", c.beta2},         {"adam_eps", c.adam_eps},
          {"seed", c.seed},             {"precision", precision_name(c.precision)}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known = {"batch_size", "epochs", "warmup_epochs", "peak_lr",
                                              "weight_decay", "lambda", "beta1", "beta2",
                                              "adam_eps",     "seed",   "precision"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown key \"" + key + "\"");
  }
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda_reg = j.value("lambda", c.lambda_reg);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("precision")) c.precision = parse_precision(j.at("precision").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t steps_per_epoch) {
  const double warm = static_cast<double>(cfg.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(cfg.epochs * steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warm) return cfg.peak_lr * s / warm;
  const double u = std::min(1.0, (s - warm) / (total - warm));
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * u));
}

template <class Real>
std::vector<double> group_norms(const Parameter<Real>& w, const StackLayout& layout) {
  const auto& wv = w.value;
  validate_partition(layout.groups, wv.dim(0));
  const std::size_t c = wv.cols();
  std::vector<double> s;
  for (const auto& g : layout.groups) {
    double ss = 0;
    for (auto [b, e] : g)
      for (std::size_t i = b * c; i < e * c; ++i) ss += static_cast<double>(wv[i]) * static_cast<double>(wv[i]);
    s.push_back(std::sqrt(ss));
  }
  return s;
}

template <class Real>
Var<Real> total_loss(const Var<Real>& task_loss, const Var<Real>& scores, double lambda) {
  if (lambda < 0) throw ConfigError("lambda must be >= 0");
  return ops::add(task_loss, ops::scale(ops::sum(scores), static_cast<Real>(lambda)));
}

template <class Real>
void adamw_step(std::span<Parameter<Real>* const> params, std::span<const bool> decay_mask, AdamState<Real>& state,
                const AdamHyper& h) {
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.push_back(Tensor<Real>::zeros_like(p->value));
      state.v.push_back(Tensor<Real>::zeros_like(p->value));
    }
  }
  if (state.m.size() != params.size() || decay_mask.size() != params.size()) {
    throw StateError("optimizer state does not match the parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(h.beta1, t);
  const double bc2 = 1.0 - std::pow(h.beta2, t);
  const Real b1 = static_cast<Real>(h.beta1), b2 = static_cast<Real>(h.beta2);
  const Real lr = static_cast<Real>(h.lr), eps = static_cast<Real>(h.eps);
  const Real inv_bc1 = static_cast<Real>(1.0 / bc1), inv_bc2 = static_cast<Real>(1.0 / bc2);
  const Real decay = static_cast<Real>(h.lr * h.weight_decay);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& value = params[k]->value;
    const auto& grad = params[k]->grad;
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool wd = decay_mask[k] && h.weight_decay != 0;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Real g = grad[i];
      m[i] = b1 * m[i] + (Real(1) - b1) * g;
      v[i] = b2 * v[i] + (Real(1) - b2) * g * g;
      const Real mhat = m[i] * inv_bc1;
      const Real vhat = v[i] * inv_bc2;
      Real theta = value[i];
      if (wd) theta -= decay * theta;
      value[i] = theta - lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

json TrainReport::to_json(bool include_timing) const {
  json epochs_json = json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_accuracy", e.val_accuracy}});
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(manifest_hash));
  json j = {{"kind", "train_report"},
            {"dataset", dataset},
            {"manifest_hash", hash},
            {"adapter", combo::to_json(adapter)},
            {"train", combo::to_json(train)},
            {"tokens", tokens},
            {"total_dim", total_dim},
            {"parameters",
             {{"projection", parameters.projection},
              {"cls+pos", parameters.embedding},
              {"transformer", parameters.transformer},
              {"head", parameters.head},
              {"total", parameters.total}}},
            {"epochs", epochs_json},
            {"final_val_accuracy", final_val_accuracy},
            {"test_accuracy", test_accuracy ? json(*test_accuracy) : json(nullptr)},
            {"backbones", backbone_ids},
            {"kernel_isa", kernels::isa_name(kernels::active_isa())}};
  if (!importance_scores.empty()) j["importance_scores"] = importance_scores;
  if (include_timing) j["wall_time_s"] = wall_time_s;
  return j;
}

namespace {

std::vector<std::size_t> split_indices(const Manifest& m, Split s) {
  std::vector<std::size_t> idx(m.split_size(s));
  std::iota(idx.begin(), idx.end(), m.split_begin(s));
  return idx;
}

double accuracy_of(const std::vector<int>& predicted, const Manifest& m, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) hit += predicted[i] == m.labels[idx[i]];
  return static_cast<double>(hit) / static_cast<double>(idx.size());
}

template <class Real>
TrainResult train_impl(const FeatureDataset& ds, const AdapterConfig& cfg, const TrainConfig& tc) {
  const auto start = std::chrono::steady_clock::now();
  const Manifest& m = ds.manifest;
  const auto layout = make_layout(m, cfg.layer_subset, cfg.tokens);
  const auto train_idx = split_indices(m, Split::train);
  const auto val_idx = split_indices(m, Split::val);
  const auto test_idx = split_indices(m, Split::test);
  if (train_idx.empty()) throw DataError("train split is empty");
  if (val_idx.empty()) throw DataError("val split is empty");

  const auto train_x = preprocess_samples<Real>(ds, layout, train_idx);
  const auto val_x = preprocess_samples<Real>(ds, layout, val_idx);

  auto params = init_params<Real>(cfg, layout, tc.seed);
  auto plist = params.all();
  auto mask = std::make_unique<bool[]>(plist.size());
  for (std::size_t i = 0; i < plist.size(); ++i) mask[i] = decays(plist[i]->id);
  AdamState<Real> opt;

  const std::size_t n = train_idx.size();
  const std::size_t steps_per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  std::mt19937_64 shuffle_rng(tc.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> perm(n);

  TrainReport report;
  report.dataset = m.name;
  report.manifest_hash = m.hash();
  report.adapter = cfg;
  report.train = tc;
  report.tokens = layout.tokens;
  report.total_dim = layout.total_dim;
  report.parameters = count_parameters(params);
  report.backbone_ids = layout.backbone_ids;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);
    double loss_sum = 0;
    for (std::size_t begin = 0; begin < n; begin += tc.batch_size) {
      const std::size_t end = std::min(n, begin + tc.batch_size);
      std::vector<std::size_t> batch(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                                     perm.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<int> labels;
      labels.reserve(batch.size());
      for (std::size_t i : batch) labels.push_back(m.labels[train_idx[i]]);

      params.zero_grad();
      Tape<Real> tape;
      auto logits = forward(tape, params, cfg, batch_tokens(train_x, batch), batch.size());
      auto loss = ops::cross_entropy(logits, labels);
      if (tc.lambda_reg > 0) {
        auto scores = ops::group_l2_norms(tape.parameter(params.proj_w), layout.groups);
        loss = total_loss(loss, scores, tc.lambda_reg);
      }
      loss_sum += static_cast<double>(loss.value()[0]) * static_cast<double>(batch.size());
      tape.backward(loss);

      AdamHyper h{lr_at(step, tc, steps_per_epoch), tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay};
      adamw_step<Real>(plist, std::span<const bool>(mask.get(), plist.size()), opt, h);
      ++step;
    }
    const double val_acc = accuracy_of(predict(params, cfg, val_x), m, val_idx);
    report.epochs.push_back({epoch + 1, loss_sum / static_cast<double>(n), val_acc});
  }

  if (tc.lambda_reg > 0) report.importance_scores = group_norms(params.proj_w, layout);

  TrainResult result;
  result.checkpoint = make_checkpoint(params, cfg, report.manifest_hash);
  const auto saved = params_from_checkpoint<Real>(result.checkpoint, m);
  report.final_val_accuracy = accuracy_of(predict(saved, cfg, val_x), m, val_idx);
  if (!test_idx.empty()) {
    const auto test_x = preprocess_samples<Real>(ds, layout, test_idx);
    report.test_accuracy = accuracy_of(predict(saved, cfg, test_x), m, test_idx);
  }
  report.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.report = std::move(report);
  return result;
}

template <class Real>
double evaluate_impl(const FeatureDataset& ds, const Checkpoint& ck, Split split) {
  const auto params = params_from_checkpoint<Real>(ck, ds.manifest);
  const auto layout = make_layout(ds.manifest, ck.config.layer_subset, ck.config.tokens);
  const auto idx = split_indices(ds.manifest, split);
  if (idx.empty()) throw DataError(std::string(split_name(split)) + " split is empty");
  const auto x = preprocess_samples<Real>(ds, layout, idx);
  return accuracy_of(predict(params, ck.config, x), ds.manifest, idx);
}

}  // namespace

TrainResult train(const FeatureDataset& ds, AdapterConfig cfg, const TrainConfig& tc) {
  tc.validate();
  if (cfg.num_classes == 0) cfg.num_classes = ds.manifest.num_classes;
  if (cfg.num_classes != ds.manifest.num_classes) {
    throw ConfigError("adapter num_classes " + std::to_string(cfg.num_classes) + " but manifest declares " +
                      std::to_string(ds.manifest.num_classes));
  }
  cfg.validate();
  return tc.precision == Precision::f64 ? train_impl<double>(ds, cfg, tc) : train_impl<float>(ds, cfg, tc);
}

double evaluate(const FeatureDataset& ds, const Checkpoint& ck, Split split, Precision precision) {
  return precision == Precision::f64 ? evaluate_impl<double>(ds, ck, split) : evaluate_impl<float>(ds, ck, split);
}

json ImportanceReport::to_json() const {
  return {{"kind", "importance_report"}, {"backbones", backbone_ids}, {"seeds", seeds},
          {"per_seed_scores", per_seed_scores}, {"mean_scores", mean_scores}, {"ranking", ranking},
          {"lambda", lambda}};
}

ImportanceReport ImportanceReport::from_json(const json& j) {
  try {
    if (j.value("kind", std::string()) != "importance_report") throw DataError("not an importance report");
    ImportanceReport r;
    r.backbone_ids = j.at("backbones").get<std::vector<std::string>>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.per_seed_scores = j.at("per_seed_scores").get<std::vector<std::vector<double>>>();
    r.mean_scores = j.at("mean_scores").get<std::vector<double>>();
    r.ranking = j.at("ranking").get<std::vector<std::string>>();
    r.lambda = j.at("lambda").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(std::string("importance report: ") + e.what());
  }
}

ImportanceReport score_models(const FeatureDataset& ds, const AdapterConfig& cfg, const TrainConfig& tc,
                              const std::vector<std::uint64_t>& seeds, double lambda) {
  if (seeds.empty()) throw ConfigError("score_models needs at least one seed");
  if (!(lambda > 0)) throw ConfigError("score_models needs lambda > 0");
  ImportanceReport rep;
  rep.seeds = seeds;
  rep.lambda = lambda;
  for (auto seed : seeds) {
    TrainConfig run = tc;
    run.seed = seed;
    run.lambda_reg = lambda;
    auto result = train(ds, cfg, run);
    if (rep.backbone_ids.empty()) rep.backbone_ids = result.report.backbone_ids;
    rep.per_seed_scores.push_back(result.report.importance_scores);
  }
  if (rep.backbone_ids.size() < 2) throw ConfigError("score_models needs at least 2 backbones");
  rep.mean_scores.assign(rep.backbone_ids.size(), 0.0);
  for (const auto& s : rep.per_seed_scores)
    for (std::size_t k = 0; k < s.size(); ++k) rep.mean_scores[k] += s[k] / static_cast<double>(seeds.size());
  std::vector<std::size_t> order(rep.backbone_ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return rep.mean_scores[a] > rep.mean_scores[b]; });
  for (std::size_t k : order) rep.ranking.push_back(rep.backbone_ids[k]);
  return rep;
}

LayerSubset top_backbones_subset(const Manifest& m, const ImportanceReport& report, std::size_t top_n,
                                 const std::optional<LayerSubset>& base) {
  if (top_n < 1 || top_n > report.ranking.size()) {
    throw ConfigError("top-n " + std::to_string(top_n) + " outside [1, " + std::to_string(report.ranking.size()) + "]");
  }
  LayerSubset subset;
  for (std::size_t i = 0; i < top_n; ++i) {
    const auto& id = report.ranking[i];
    if (base) {
      auto it = base->find(id);
      if (it == base->end()) throw ConfigError("ranked backbone " + id + " is not in the probed layer subset");
      subset[id] = it->second;
    } else {
      subset[id] = m.backbone(id).layer_ids;
    }
  }
  return subset;
}

TrainResult select_and_retrain(const FeatureDataset& ds, const ImportanceReport& report, std::size_t top_n,
                               AdapterConfig cfg, TrainConfig tc) {
  auto subset = top_backbones_subset(ds.manifest, report, top_n, cfg.layer_subset);
  // Keeping every backbone is the unrestricted configuration.
  if (top_n != report.ranking.size() || cfg.layer_subset) cfg.layer_subset = std::move(subset);
  tc.lambda_reg = 0;
  return train(ds, cfg, tc);
}

template std::vector<double> group_norms<float>(const Parameter<float>&, const StackLayout&);
template std::vector<double> group_norms<double>(const Parameter<double>&, const StackLayout&);
template Var<float> total_loss<float>(const Var<float>&, const Var<float>&, double);
template Var<double> total_loss<double>(const Var<double>&, const Var<double>&, double);
template void adamw_step<float>(std::span<Parameter<float>* const>, std::span<const bool>, AdamState<float>&,
                                const AdamHyper&);
template void adamw_step<double>(std::span<Parameter<double>* const>, std::span<const bool>, AdamState<double>&,
                                 const AdamHyper&);

}  // namespace combo
