#include <algorithm>
#include <cmath>
#include <set>

#include "combo/error.hpp"
#include "combo/features.hpp"

namespace combo {

using nlohmann::json;

namespace {

void require_keys(const json& j, const std::set<std::string>& required, const std::set<std::string>& optional,
                  const std::string& where) {
  if (!j.is_object()) throw DataError(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!required.contains(key) && !optional.contains(key)) {
      throw DataError(where + ": unknown key \"" + key + "\"");
    }
  }
  for (const auto& key : required) {
    if (!j.contains(key)) throw DataError(where + ": missing key \"" + key + "\"");
  }
}

template <class T>
T get_as(const json& j, const std::string& key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(where + ": bad value for \"" + key + "\": " + e.what());
  }
}

}  // namespace

std::string to_string(const MapKey& key) { return key.backbone + "." + std::to_string(key.layer); }

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split \"" + std::string(s) + "\" (expected train, val or test)");
}

std::size_t grid_side(std::size_t tokens) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  while (side * side > tokens) --side;
  while ((side + 1) * (side + 1) <= tokens) ++side;
  if (tokens == 0 || side * side != tokens) {
    throw LayoutError("token count " + std::to_string(tokens) + " is not a square grid");
  }
  return side;
}

void BackboneMeta::validate() const {
  if (id.empty() || id.find('/') != std::string::npos) {
    throw DataError("backbone id \"" + id + "\" must be nonempty and contain no '/'");
  }
  if (layer_ids.empty()) throw DataError("backbone " + id + " declares no layers");
  for (std::size_t i = 1; i < layer_ids.size(); ++i) {
    if (layer_ids[i] <= layer_ids[i - 1]) throw DataError("backbone " + id + ": layer_ids must be strictly increasing");
  }
  if (dim == 0) throw DataError("backbone " + id + ": dim must be positive");
  grid_side(tokens);
}

void Manifest::validate() const {
  if (num_classes == 0) throw DataError("manifest: num_classes must be positive");
  if (backbones.empty()) throw DataError("manifest: no backbones");
  std::set<std::string> ids;
  std::set<MapKey> declared;
  for (const auto& b : backbones) {
    b.validate();
    if (!ids.insert(b.id).second) throw DataError("manifest: duplicate backbone id " + b.id);
    for (int l : b.layer_ids) declared.insert({b.id, l});
  }
  std::set<MapKey> seen;
  for (const auto& key : order) {
    if (!declared.contains(key)) throw DataError("manifest: order references undeclared map " + to_string(key));
    if (!seen.insert(key).second) throw DataError("manifest: map " + to_string(key) + " appears twice in order");
  }
  if (seen.size() != declared.size()) throw DataError("manifest: order does not cover every declared map");
  if (labels.size() != num_samples) {
    throw DataError("manifest: " + std::to_string(labels.size()) + " labels for " + std::to_string(num_samples) +
                    " samples");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw DataError("manifest: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
  if (splits.train + splits.val + splits.test != num_samples) {
    throw DataError("manifest: splits sum to " + std::to_string(splits.train + splits.val + splits.test) +
                    ", expected " + std::to_string(num_samples));
  }
  if (protocol == kVtab1k) {
    if (splits.train != 800 || splits.val != 200) {
      throw DataError("manifest: vtab-1k protocol requires 800 train / 200 val samples, got " +
                      std::to_string(splits.train) + " / " + std::to_string(splits.val));
    }
  } else if (!protocol.empty()) {
    throw DataError("manifest: unknown protocol \"" + protocol + "\"");
  }
}

const BackboneMeta& Manifest::backbone(const std::string& id) const {
  for (const auto& b : backbones) {
    if (b.id == id) return b;
  }
  throw DataError("manifest has no backbone \"" + id + "\"");
}

std::size_t Manifest::split_begin(Split s) const {
  switch (s) {
    case Split::train: return 0;
    case Split::val: return splits.train;
    case Split::test: return splits.train + splits.val;
  }
  return 0;
}

std::size_t Manifest::split_size(Split s) const {
  switch (s) {
    case Split::train: return splits.train;
    case Split::val: return splits.val;
    case Split::test: return splits.test;
  }
  return 0;
}

std::uint64_t Manifest::hash() const {
  const std::string text = to_json(*this).dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

json to_json(const Manifest& m) {
  json backbones = json::array();
  for (const auto& b : m.backbones) {
    backbones.push_back({{"id", b.id}, {"layer_ids", b.layer_ids}, {"tokens", b.tokens}, {"dim", b.dim}});
  }
  json order = json::array();
  for (const auto& k : m.order) order.push_back({{"backbone", k.backbone}, {"layer", k.layer}});
  json j = {
      {"format_version", Manifest::kFormatVersion},
      {"name", m.name},
      {"num_classes", m.num_classes},
      {"num_samples", m.num_samples},
      {"backbones", backbones},
      {"order", order},
      {"labels", m.labels},
      {"splits", {{"train", m.splits.train}, {"val", m.splits.val}, {"test", m.splits.test}}},
  };
  if (!m.protocol.empty()) j["protocol"] = m.protocol;
  return j;
}

Manifest manifest_from_json(const json& j) {
  const std::string where = "manifest";
  require_keys(j, {"format_version", "name", "num_classes", "num_samples", "backbones", "order", "labels", "splits"},
               {"protocol"}, where);
  if (get_as<std::uint32_t>(j, "format_version", where) != Manifest::kFormatVersion) {
    throw DataError("manifest: unsupported format_version " + j.at("format_version").dump());
  }
  Manifest m;
  m.name = get_as<std::string>(j, "name", where);
  m.num_classes = get_as<std::size_t>(j, "num_classes", where);
  m.num_samples = get_as<std::size_t>(j, "num_samples", where);
  if (!j.at("backbones").is_array()) throw DataError("manifest: backbones must be an array");
  for (const auto& b : j.at("backbones")) {
    require_keys(b, {"id", "layer_ids", "tokens", "dim"}, {}, "manifest backbone");
    m.backbones.push_back({get_as<std::string>(b, "id", where), get_as<std::vector<int>>(b, "layer_ids", where),
                           get_as<std::size_t>(b, "tokens", where), get_as<std::size_t>(b, "dim", where)});
  }
  if (!j.at("order").is_array()) throw DataError("manifest: order must be an array");
  for (const auto& k : j.at("order")) {
    require_keys(k, {"backbone", "layer"}, {}, "manifest order entry");
    m.order.push_back({get_as<std::string>(k, "backbone", where), get_as<int>(k, "layer", where)});
  }
  m.labels = get_as<std::vector<int>>(j, "labels", where);
  const json& s = j.at("splits");
  require_keys(s, {"train", "val", "test"}, {}, "manifest splits");
  m.splits = {get_as<std::size_t>(s, "train", where), get_as<std::size_t>(s, "val", where),
              get_as<std::size_t>(s, "test", where)};
  if (j.contains("protocol")) m.protocol = get_as<std::string>(j, "protocol", where);
  m.validate();
  return m;
}

Manifest make_manifest(std::string name, std::size_t num_classes, std::vector<BackboneMeta> backbones,
                       std::vector<int> labels, Splits splits, std::string protocol) {
  Manifest m;
  m.name = std::move(name);
  m.num_classes = num_classes;
  m.num_samples = labels.size();
  for (const auto& b : backbones) {
    for (int l : b.layer_ids) m.order.push_back({b.id, l});
  }
  m.backbones = std::move(backbones);
  m.labels = std::move(labels);
  m.splits = splits;
  m.protocol = std::move(protocol);
  m.validate();
  return m;
}

NaiveStackCount naive_stack_param_count(const std::vector<BackboneMeta>& metas, std::size_t num_classes) {
  if (metas.empty()) return {};
  std::uint64_t tokens = metas.front().tokens;
  std::uint64_t dim = 0;
  for (const auto& b : metas) {
    tokens = std::min<std::uint64_t>(tokens, b.tokens);
    dim += static_cast<std::uint64_t>(b.layer_ids.size()) * b.dim;
  }
  return {tokens * dim * num_classes, num_classes};
}

}  // namespace combo
