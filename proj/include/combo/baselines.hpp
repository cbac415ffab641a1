#pragma once

// Reference probes: mean-pooled per-layer linear probing and the
// layer-restricted adapter variants.

#include <cstdint>
#include <string>
#include <vector>

#include "combo/features.hpp"
#include "combo/training.hpp"
#include "json.hpp"

namespace combo {

struct LinearProbeConfig {
  std::string backbone;
  int layer = 0;
  std::size_t steps = 100;
  std::size_t batch_size = 128;
  std::vector<double> lr_grid = {1.0, 0.1, 0.01, 0.001, 0.0001, 0.00001};
  /// Learned LayerNorm affine after pooling; off means scale 1, shift 0.
  bool learned_norm = false;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const LinearProbeConfig& c);
/// Strict parse; backbone/layer are optional here (set per sweep job).
LinearProbeConfig probe_config_from_json(const nlohmann::json& j);

struct ProbePoint {
  double lr = 0;
  double val_accuracy = 0;
};

struct ProbeResult {
  std::string backbone;
  int layer = 0;
  std::vector<ProbePoint> grid;
  double best_lr = 0;
  double best_val_accuracy = 0;
};

/// Per-job seed: seed xor a hash of (layer, lr), so jobs are independent of
/// sweep order.
std::uint64_t probe_job_seed(std::uint64_t seed, int layer, double lr);

/// Mean-pooled tokens of one map for the given samples, then per-sample
/// layer normalization (scale 1, shift 0). Output [samples x D_k].
Tensor<double> pooled_features(const FeatureDataset& ds, const MapKey& key, const std::vector<std::size_t>& samples);

/// Trains a linear classifier on pooled features for each lr in the grid
/// (AdamW, no weight decay, constant lr) and selects the lr with the best
/// validation accuracy; ties go to the smaller lr.
ProbeResult linear_probe(const FeatureDataset& ds, const LinearProbeConfig& cfg);

struct LayerCurve {
  std::string backbone;
  std::vector<ProbeResult> layers;  // manifest layer order

  /// JSON rows (backbone, layer, lr, val_acc) plus the per-layer best.
  nlohmann::json to_json() const;
};

LayerCurve layer_sweep(const FeatureDataset& ds, const std::string& backbone, const LinearProbeConfig& base);

enum class LayerMode { all, last, first_half, last_half, even_blocks };
LayerMode parse_layer_mode(std::string_view s);
std::string_view layer_mode_name(LayerMode m);

/// Per-backbone layers kept by a mode; nullopt for `all`. Throws
/// ConfigError when some backbone would keep no layers.
std::optional<LayerSubset> restrict_layers(const Manifest& m, LayerMode mode);

TrainResult combo_layer_restriction(const FeatureDataset& ds, LayerMode mode, AdapterConfig cfg,
                                    const TrainConfig& tc);

}  // namespace combo
