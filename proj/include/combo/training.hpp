#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "combo/adapter.hpp"
#include "combo/autograd.hpp"
#include "combo/features.hpp"
#include "json.hpp"

namespace combo {

enum class Precision { f32, f64 };
std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view s);

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::size_t warmup_epochs = 10;
  double peak_lr = 1e-3;
  double weight_decay = 1e-4;
  double lambda_reg = 0.0;  // group-sparsity coefficient on the projection
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warmup from 0 to peak_lr over warmup_epochs, then half-cosine
/// decay to 0 at the end of the last epoch.
double lr_at(std::size_t step, const TrainConfig& cfg, std::size_t steps_per_epoch);

/// Group-sparsity importance scores: l2 norm of the projection rows owned
/// by each backbone (bias excluded).
template <class Real>
std::vector<double> group_norms(const Parameter<Real>& w, const StackLayout& layout);

/// L_task + lambda * sum_k s_k.
template <class Real>
Var<Real> total_loss(const Var<Real>& task_loss, const Var<Real>& scores, double lambda);

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <class Real>
struct AdamState {
  std::vector<Tensor<Real>> m, v;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update over params[i] using params[i]->grad.
/// Decay applies only where decay_mask[i] is true.
template <class Real>
void adamw_step(std::span<Parameter<Real>* const> params, std::span<const bool> decay_mask, AdamState<Real>& state,
                const AdamHyper& h);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean total loss over the epoch's samples
  double val_accuracy = 0;
};

struct TrainReport {
  std::string dataset;
  std::uint64_t manifest_hash = 0;
  AdapterConfig adapter;
  TrainConfig train;
  std::size_t tokens = 0;
  std::size_t total_dim = 0;
  ParameterCount parameters;
  std::vector<EpochRecord> epochs;
  /// Accuracy of the checkpointed (float32) parameters.
  double final_val_accuracy = 0;
  std::optional<double> test_accuracy;
  std::vector<std::string> backbone_ids;
  /// Final-epoch importance scores; filled when lambda_reg > 0.
  std::vector<double> importance_scores;
  double wall_time_s = 0;

  /// Wall time is left out unless asked for, so reports of identical runs
  /// are byte-identical.
  nlohmann::json to_json(bool include_timing = false) const;
};

struct TrainResult {
  TrainReport report;
  Checkpoint checkpoint;
};

/// Full optimization run on the dataset's train split with per-epoch
/// validation. cfg.num_classes may be 0 (taken from the manifest).
TrainResult train(const FeatureDataset& ds, AdapterConfig cfg, const TrainConfig& tc);

/// Accuracy of a checkpoint on one split.
double evaluate(const FeatureDataset& ds, const Checkpoint& ck, Split split, Precision precision = Precision::f32);

struct ImportanceReport {
  std::vector<std::string> backbone_ids;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> per_seed_scores;
  std::vector<double> mean_scores;
  std::vector<std::string> ranking;  // most relevant first
  double lambda = 0;

  nlohmann::json to_json() const;
  static ImportanceReport from_json(const nlohmann::json& j);
};

/// Trains once per seed with the group penalty and averages the final scores.
ImportanceReport score_models(const FeatureDataset& ds, const AdapterConfig& cfg, const TrainConfig& tc,
                              const std::vector<std::uint64_t>& seeds, double lambda = 0.01);

/// Layer subset that keeps the top_n ranked backbones.
LayerSubset top_backbones_subset(const Manifest& m, const ImportanceReport& report, std::size_t top_n,
                                 const std::optional<LayerSubset>& base);

/// Keeps the top_n backbones by score and retrains without the penalty.
TrainResult select_and_retrain(const FeatureDataset& ds, const ImportanceReport& report, std::size_t top_n,
                               AdapterConfig cfg, TrainConfig tc);

}  // namespace combo
