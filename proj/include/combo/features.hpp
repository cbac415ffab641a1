#pragma once

// Feature-map ingestion and preprocessing: the on-disk dataset format,
// interpolation to a shared token grid, per-map normalization, and
// token-wise stacking of every probed (backbone, layer) map.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "combo/autograd.hpp"
#include "combo/tensor.hpp"
#include "json.hpp"

namespace combo {

struct BackboneMeta {
  std::string id;
  std::vector<int> layer_ids;
  std::size_t tokens = 0;  // T_k, patch tokens only
  std::size_t dim = 0;     // D_k

  /// Throws DataError/LayoutError when the invariants do not hold.
  void validate() const;
};

struct MapKey {
  std::string backbone;
  int layer = 0;
  auto operator<=>(const MapKey&) const = default;
};

std::string to_string(const MapKey& key);

/// Contiguous sample ranges: [0, train) then val, then test.
struct Splits {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

enum class Split { train, val, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

/// Per-backbone list of probed layers; backbones absent from the map are
/// not probed at all.
using LayerSubset = std::map<std::string, std::vector<int>>;

struct Manifest {
  static constexpr std::uint32_t kFormatVersion = 1;
  static constexpr std::string_view kVtab1k = "vtab-1k";

  std::string name;
  std::size_t num_classes = 0;
  std::size_t num_samples = 0;
  std::vector<BackboneMeta> backbones;
  std::vector<MapKey> order;  // concatenation order of the stacked descriptor
  std::vector<int> labels;
  Splits splits;
  std::string protocol;  // empty, or "vtab-1k" which pins 800 train / 200 val

  /// Full consistency check; throws DataError.
  void validate() const;
  const BackboneMeta& backbone(const std::string& id) const;
  std::size_t split_begin(Split s) const;
  std::size_t split_size(Split s) const;
  /// FNV-1a over the canonical JSON form.
  std::uint64_t hash() const;
};

nlohmann::json to_json(const Manifest& m);
/// Strict: unknown keys and missing fields are DataErrors.
Manifest manifest_from_json(const nlohmann::json& j);

/// Manifest with a default concatenation order (backbone-major, then layer).
Manifest make_manifest(std::string name, std::size_t num_classes, std::vector<BackboneMeta> backbones,
                       std::vector<int> labels, Splits splits, std::string protocol = {});

// ---------------------------------------------------------------------------
// Dataset container and CMBF blob files

/// Raw float32 maps for every (backbone, layer); each blob is
/// [num_samples x T_k x D_k] row-major.
struct FeatureDataset {
  Manifest manifest;
  std::map<MapKey, std::vector<float>> blobs;

  /// One sample's T_k x D_k map.
  std::span<const float> sample_map(const MapKey& key, std::size_t sample) const;
  void validate() const;
};

struct BlobHeader {
  static constexpr char kMagic[4] = {'C', 'M', 'B', 'F'};
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t num_samples = 0;
  std::uint64_t values_per_sample = 0;
};

std::string blob_filename(const MapKey& key);
void write_blob(const std::filesystem::path& path, std::uint64_t num_samples, std::uint64_t values_per_sample,
                std::span<const float> data);
std::vector<float> read_blob(const std::filesystem::path& path, BlobHeader* header = nullptr);

/// Writes manifest.json and every blob; each file goes through a temp file
/// and rename.
void write_dataset(const std::filesystem::path& dir, const FeatureDataset& ds);
FeatureDataset read_dataset(const std::filesystem::path& dir);
Manifest read_manifest(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Preprocessing

template <class Real>
struct FeatureMap {
  std::string backbone_id;
  int layer_id = 0;
  Tensor<Real> data;  // [tokens x dim]
};

template <class Real>
struct FeatureBundle {
  std::size_t sample_id = 0;
  int label = 0;
  std::vector<FeatureMap<Real>> maps;
};

template <class Real>
struct StackedTokens {
  Tensor<Real> data;  // [T x D]
};

/// Side length of a square token grid; throws LayoutError otherwise.
std::size_t grid_side(std::size_t tokens);

/// Half-pixel-center bilinear resize of the token grid to target_tokens
/// (both square). Bit-exact pass-through when the sizes agree.
template <class Real>
FeatureMap<Real> interpolate_map(const FeatureMap<Real>& map, std::size_t target_tokens);

/// (x - mean) / (std + eps) with one mean and one population std over
/// all T*D entries.
template <class Real>
FeatureMap<Real> normalize_map(const FeatureMap<Real>& map, double eps = 1e-6);

/// Concatenates the maps' rows in `order`. Maps must share a token count.
template <class Real>
StackedTokens<Real> stack_bundle(const FeatureBundle<Real>& bundle, const std::vector<MapKey>& order);

/// Where each probed map lands in the stacked descriptor, plus the row
/// groups of the projection weight owned by each backbone.
struct StackLayout {
  std::vector<MapKey> order;
  std::vector<std::size_t> offsets;  // column offset of each map
  std::vector<std::size_t> dims;
  std::size_t tokens = 0;     // common T
  std::size_t total_dim = 0;  // D
  std::vector<std::string> backbone_ids;  // one per group, manifest order
  RowGroups groups;
};

/// Layout for the maps selected by `subset` (all maps when empty). The
/// token count defaults to the smallest T_k among selected backbones.
StackLayout make_layout(const Manifest& m, const std::optional<LayerSubset>& subset = std::nullopt,
                        std::optional<std::size_t> target_tokens = std::nullopt);

/// Checks that groups cover [0, rows) exactly once; throws DataError.
void validate_partition(const RowGroups& groups, std::size_t rows);

template <class Real>
FeatureBundle<Real> load_bundle(const FeatureDataset& ds, const std::vector<MapKey>& keys, std::size_t sample);

/// interpolate -> normalize -> stack for one sample.
template <class Real>
Tensor<Real> preprocess_sample(const FeatureDataset& ds, const StackLayout& layout, std::size_t sample);

/// preprocess_sample over `samples`, in parallel (COMBO_THREADS workers).
template <class Real>
std::vector<Tensor<Real>> preprocess_samples(const FeatureDataset& ds, const StackLayout& layout,
                                             const std::vector<std::size_t>& samples);

/// Weight and bias count of a linear classifier over the fully flattened
/// stack of every map (tokens taken at the smallest T_k). No squareness
/// requirement: raw counts including cls tokens are accepted.
struct NaiveStackCount {
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t total() const { return weights + biases; }
};
NaiveStackCount naive_stack_param_count(const std::vector<BackboneMeta>& metas, std::size_t num_classes);

}  // namespace combo
