#pragma once

// Seeded synthetic feature datasets with known label-carrying maps.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "combo/features.hpp"
#include "json.hpp"

namespace combo {

enum class Encoding {
  pooled_linear,     // class prototype added to every token
  spatial_position,  // one shared prototype at a class-dependent cell
  spatial_count,     // shared prototype at (label + 1) random cells
};
std::string_view encoding_name(Encoding e);
Encoding parse_encoding(std::string_view s);

struct SynthBackbone {
  std::string id;
  std::size_t num_layers = 1;  // layer ids are 1..num_layers
  std::size_t tokens = 16;
  std::size_t dim = 16;
};

struct SynthSignal {
  std::string backbone;
  int layer = 1;
  double snr = 1.0;  // per-coordinate prototype amplitude over noise_std
  Encoding encoding = Encoding::pooled_linear;
};

struct SynthSpec {
  std::string name = "synth";
  std::vector<SynthBackbone> backbones;
  std::size_t num_classes = 2;
  Splits splits{800, 200, 0};
  std::string protocol;
  std::vector<SynthSignal> signals;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const SynthSpec& s);
/// Strict: unknown keys are ConfigErrors.
SynthSpec synth_spec_from_json(const nlohmann::json& j);

/// Pure function of the spec. Labels are balanced within each split.
FeatureDataset generate(const SynthSpec& spec);

/// generate + write_dataset.
void generate_to(const SynthSpec& spec, const std::filesystem::path& dir);

}  // namespace combo
