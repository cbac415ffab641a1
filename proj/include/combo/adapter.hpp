#pragma once

// The probing adapter: a shared affine projection of stacked per-position
// descriptors, a learnable class token, a pre-norm transformer encoder and
// a linear head on the class-token output.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "combo/autograd.hpp"
#include "combo/features.hpp"
#include "json.hpp"

namespace combo {

struct AdapterConfig {
  std::size_t compress_dim = 128;  // D'
  std::size_t depth = 6;
  std::size_t embed_dim = 128;
  std::size_t num_heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 0;
  bool use_positional_embedding = true;
  std::optional<LayerSubset> layer_subset;
  /// Common token count; defaults to the smallest probed T_k.
  std::optional<std::size_t> tokens;
  double layer_norm_eps = 1e-6;

  void validate() const;
};

nlohmann::json to_json(const AdapterConfig& c);
/// Strict; num_classes may be omitted (filled from the manifest later).
AdapterConfig adapter_config_from_json(const nlohmann::json& j);

template <class Real>
struct BlockParams {
  Parameter<Real> norm1_w, norm1_b;
  Parameter<Real> qkv_w, qkv_b;
  Parameter<Real> proj_w, proj_b;
  Parameter<Real> norm2_w, norm2_b;
  Parameter<Real> fc1_w, fc1_b;
  Parameter<Real> fc2_w, fc2_b;
};

template <class Real>
struct AdapterParams {
  Parameter<Real> proj_w;  // W [D x D']
  Parameter<Real> proj_b;  // b [D']
  Parameter<Real> cls;     // [D']
  Parameter<Real> pos;     // [(T+1) x D'], only when positional embeddings are on
  bool has_pos = false;
  std::vector<BlockParams<Real>> blocks;
  Parameter<Real> norm_w, norm_b;
  Parameter<Real> head_w;  // [D' x C]
  Parameter<Real> head_b;  // [C]

  /// Every trainable parameter, in a fixed order.
  std::vector<Parameter<Real>*> all();
  std::vector<const Parameter<Real>*> all() const;
  Parameter<Real>* find(const std::string& id);
  void zero_grad();
};

enum class ParamGroup { projection, embedding, transformer, head };
ParamGroup param_group(const std::string& id);
std::string_view group_name(ParamGroup g);

/// Weight decay applies to matrices only: not to biases, norms, cls or pos.
bool decays(const std::string& id);

struct ParameterCount {
  std::uint64_t projection = 0;
  std::uint64_t embedding = 0;  // cls + pos
  std::uint64_t transformer = 0;
  std::uint64_t head = 0;
  std::uint64_t total = 0;
};

template <class Real>
ParameterCount count_parameters(const AdapterParams<Real>& p);

/// Truncated normal (std 0.02, cut at 2 std) for W, cls, pos and attention/MLP
/// matrices; zeros for biases and the head weight; ones for norm scales.
template <class Real>
AdapterParams<Real> init_params(const AdapterConfig& cfg, const StackLayout& layout, std::uint64_t seed);

/// Concatenates per-sample [T x D] descriptors into [B*T x D].
template <class Real>
Tensor<Real> batch_tokens(const std::vector<Tensor<Real>>& samples, const std::vector<std::size_t>& indices);

/// t_i = S_i W + b for every position of one sample.
template <class Real>
Tensor<Real> compress(const Tensor<Real>& stacked, const AdapterParams<Real>& p);

/// Records the full forward pass for a batch of `batch` samples packed as
/// [batch*T x D]; returns logits [batch x C].
template <class Real>
Var<Real> forward(Tape<Real>& tape, AdapterParams<Real>& p, const AdapterConfig& cfg, Tensor<Real> tokens,
                  std::size_t batch);

/// Logits for one sample's stacked descriptor, without recording gradients.
template <class Real>
Tensor<Real> forward_sample(const AdapterParams<Real>& p, const AdapterConfig& cfg, const Tensor<Real>& stacked);

/// Argmax predictions in evaluation mode, processed in chunks of batch_size.
template <class Real>
std::vector<int> predict(const AdapterParams<Real>& p, const AdapterConfig& cfg,
                         const std::vector<Tensor<Real>>& samples, std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Checkpoints (CMBC)

struct CheckpointTensor {
  std::string id;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  static constexpr char kMagic[4] = {'C', 'M', 'B', 'C'};
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t manifest_hash = 0;
  AdapterConfig config;
  std::vector<CheckpointTensor> tensors;
};

template <class Real>
Checkpoint make_checkpoint(const AdapterParams<Real>& p, const AdapterConfig& cfg, std::uint64_t manifest_hash);

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Rebuilds parameters from a checkpoint after checking the manifest hash
/// and every tensor id and shape.
template <class Real>
AdapterParams<Real> params_from_checkpoint(const Checkpoint& ck, const Manifest& manifest);

}  // namespace combo
