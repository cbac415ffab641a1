#include "combo/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "combo/error.hpp"

namespace combo {

using nlohmann::json;

std::string_view encoding_name(Encoding e) {
  switch (e) {
    case Encoding::pooled_linear: return "pooled-linear";
    case Encoding::spatial_position: return "spatial-position";
    case Encoding::spatial_count: return "spatial-count";
  }
  return "?";
}

Encoding parse_encoding(std::string_view s) {
  if (s == "pooled-linear") return Encoding::pooled_linear;
  if (s == "spatial-position") return Encoding::spatial_position;
  if (s == "spatial-count") return Encoding::spatial_count;
  throw ConfigError("unknown encoding \"" + std::string(s) + "\" (pooled-linear, spatial-position, spatial-count)");
}

void SynthSpec::validate() const {
  if (backbones.empty()) throw ConfigError("synth spec needs at least one backbone");
  if (num_classes < 2) throw ConfigError("synth spec needs at least 2 classes");
  if (!(noise_std > 0)) throw ConfigError("synth noise_std must be positive");
  if (splits.train + splits.val + splits.test == 0) throw ConfigError("synth spec has no samples");
  std::set<std::string> ids;
  for (const auto& b : backbones) {
    if (b.id.empty()) throw ConfigError("synth backbone id is empty");
    if (!ids.insert(b.id).second) throw ConfigError("duplicate synth backbone " + b.id);
    if (b.num_layers < 1 || b.tokens < 1 || b.dim < 1) {
      throw ConfigError("synth backbone " + b.id + " needs num_layers, tokens and dim >= 1");
    }
  }
  for (const auto& s : signals) {
    const auto it = std::find_if(backbones.begin(), backbones.end(), [&](const SynthBackbone& b) { return b.id == s.backbone; });
    if (it == backbones.end()) throw ConfigError("signal references unknown backbone " + s.backbone);
    if (s.layer < 1 || static_cast<std::size_t>(s.layer) > it->num_layers) {
      throw ConfigError("signal references missing layer " + std::to_string(s.layer) + " of " + s.backbone);
    }
    if (!(s.snr > 0)) throw ConfigError("signal snr must be positive");
    if (s.encoding != Encoding::pooled_linear && num_classes > it->tokens) {
      throw ConfigError("spatial encodings need at least as many tokens as classes");
    }
  }
}

json to_json(const SynthSpec& s) {
  json backbones = json::array();
  for (const auto& b : s.backbones) {
    backbones.push_back({{"id", b.id}, {"num_layers", b.num_layers}, {"tokens", b.tokens}, {"dim", b.dim}});
  }
  json signals = json::array();
  for (const auto& g : s.signals) {
    signals.push_back({{"backbone", g.backbone}, {"layer", g.layer}, {"snr", g.snr},
                       {"encoding", std::string(encoding_name(g.encoding))}});
  }
  return {{"name", s.name},
          {"backbones", backbones},
          {"num_classes", s.num_classes},
          {"splits", {{"train", s.splits.train}, {"val", s.splits.val}, {"test", s.splits.test}}},
          {"protocol", s.protocol},
          {"signals", signals},
          {"noise_std", s.noise_std},
          {"seed", s.seed}};
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError(what + ": unknown key \"" + key + "\"");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Gaussian direction rescaled to unit RMS, then to the signal amplitude.
std::vector<float> prototype(std::mt19937_64& rng, std::size_t dim, double amplitude) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(dim);
  double ss = 0;
  for (auto& x : v) {
    x = normal(rng);
    ss += x * x;
  }
  const double scale = amplitude / std::sqrt(ss / static_cast<double>(dim));
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(v[i] * scale);
  return out;
}

void add_at(std::vector<float>& blob, std::size_t offset, const std::vector<float>& p) {
  for (std::size_t i = 0; i < p.size(); ++i) blob[offset + i] += p[i];
}

}  // namespace

SynthSpec synth_spec_from_json(const json& j) {
  reject_unknown(j, {"name", "backbones", "num_classes", "splits", "protocol", "signals", "noise_std", "seed"},
                 "synth spec");
  SynthSpec s;
  try {
    read_opt(j, "name", s.name);
    read_opt(j, "num_classes", s.num_classes);
    read_opt(j, "protocol", s.protocol);
    read_opt(j, "noise_std", s.noise_std);
    read_opt(j, "seed", s.seed);
    if (j.contains("splits")) {
      const auto& sp = j.at("splits");
      reject_unknown(sp, {"train", "val", "test"}, "synth splits");
      read_opt(sp, "train", s.splits.train);
      read_opt(sp, "val", s.splits.val);
      read_opt(sp, "test", s.splits.test);
    }
    if (!j.contains("backbones")) throw ConfigError("synth spec: missing \"backbones\"");
    for (const auto& bj : j.at("backbones")) {
      reject_unknown(bj, {"id", "num_layers", "tokens", "dim"}, "synth backbone");
      SynthBackbone b;
      b.id = bj.at("id").get<std::string>();
      read_opt(bj, "num_layers", b.num_layers);
      read_opt(bj, "tokens", b.tokens);
      read_opt(bj, "dim", b.dim);
      s.backbones.push_back(std::move(b));
    }
    if (j.contains("signals")) {
      for (const auto& gj : j.at("signals")) {
        reject_unknown(gj, {"backbone", "layer", "snr", "encoding"}, "synth signal");
        SynthSignal g;
        g.backbone = gj.at("backbone").get<std::string>();
        read_opt(gj, "layer", g.layer);
        read_opt(gj, "snr", g.snr);
        if (gj.contains("encoding")) g.encoding = parse_encoding(gj.at("encoding").get<std::string>());
        s.signals.push_back(std::move(g));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

FeatureDataset generate(const SynthSpec& spec) {
  spec.validate();
  const std::size_t n = spec.splits.train + spec.splits.val + spec.splits.test;

  // Balanced labels per split, shuffled within the split.
  std::vector<int> labels;
  labels.reserve(n);
  std::mt19937_64 label_rng(mix(spec.seed, 0x1abe1));
  for (std::size_t size : {spec.splits.train, spec.splits.val, spec.splits.test}) {
    const std::size_t begin = labels.size();
    for (std::size_t i = 0; i < size; ++i) labels.push_back(static_cast<int>(i % spec.num_classes));
    std::shuffle(labels.begin() + static_cast<std::ptrdiff_t>(begin), labels.end(), label_rng);
  }

  std::vector<BackboneMeta> metas;
  for (const auto& b : spec.backbones) {
    BackboneMeta meta{b.id, {}, b.tokens, b.dim};
    for (std::size_t l = 1; l <= b.num_layers; ++l) meta.layer_ids.push_back(static_cast<int>(l));
    metas.push_back(std::move(meta));
  }

  FeatureDataset ds;
  try {
    ds.manifest = make_manifest(spec.name, spec.num_classes, metas, labels, spec.splits, spec.protocol);
  } catch (const DataError& e) {
    throw ConfigError(std::string("synth spec yields an invalid manifest: ") + e.what());
  }

  for (std::size_t k = 0; k < spec.backbones.size(); ++k) {
    const auto& b = spec.backbones[k];
    const std::size_t per = b.tokens * b.dim;
    for (std::size_t l = 1; l <= b.num_layers; ++l) {
      std::mt19937_64 rng(mix(mix(spec.seed, k), l));
      std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_std));
      std::vector<float> blob(n * per);
      for (auto& v : blob) v = noise(rng);

      for (const auto& sig : spec.signals) {
        if (sig.backbone != b.id || static_cast<std::size_t>(sig.layer) != l) continue;
        const double amp = sig.snr * spec.noise_std;
        switch (sig.encoding) {
          case Encoding::pooled_linear: {
            std::vector<std::vector<float>> protos;
            for (std::size_t c = 0; c < spec.num_classes; ++c) protos.push_back(prototype(rng, b.dim, amp));
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t t = 0; t < b.tokens; ++t) add_at(blob, s * per + t * b.dim, protos[labels[s]]);
            break;
          }
          case Encoding::spatial_position: {
            const auto proto = prototype(rng, b.dim, amp);
            std::vector<std::size_t> cells(b.tokens);
            std::iota(cells.begin(), cells.end(), std::size_t{0});
            std::shuffle(cells.begin(), cells.end(), rng);
            for (std::size_t s = 0; s < n; ++s) add_at(blob, s * per + cells[labels[s]] * b.dim, proto);
            break;
          }
          case Encoding::spatial_count: {
            const auto proto = prototype(rng, b.dim, amp);
            std::vector<std::size_t> cells(b.tokens);
            for (std::size_t s = 0; s < n; ++s) {
              std::iota(cells.begin(), cells.end(), std::size_t{0});
              std::shuffle(cells.begin(), cells.end(), rng);
              for (int c = 0; c <= labels[s]; ++c) add_at(blob, s * per + cells[c] * b.dim, proto);
            }
            break;
          }
        }
      }
      ds.blobs.emplace(MapKey{b.id, static_cast<int>(l)}, std::move(blob));
    }
  }
  return ds;
}

void generate_to(const SynthSpec& spec, const std::filesystem::path& dir) { write_dataset(dir, generate(spec)); }

}  // namespace combo
