#include "combo/adapter.hpp"

#include <cmath>
#include <random>
#include <set>

#include "combo/error.hpp"

namespace combo {

using nlohmann::json;

void AdapterConfig::validate() const {
  if (depth < 1) throw ConfigError("adapter depth must be >= 1");
  if (num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (compress_dim != embed_dim) {
    throw ConfigError("compress_dim (" + std::to_string(compress_dim) + ") must equal embed_dim (" +
                      std::to_string(embed_dim) + ")");
  }
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (!(layer_norm_eps > 0)) throw ConfigError("layer_norm_eps must be positive");
}

json to_json(const AdapterConfig& c) {
  json j = {{"compress_dim", c.compress_dim},
            {"depth", c.depth},
            {"embed_dim", c.embed_dim},
            {"num_heads", c.num_heads},
            {"mlp_ratio", c.mlp_ratio},
            {"num_classes", c.num_classes},
            {"use_positional_embedding", c.use_positional_embedding},
            {"layer_norm_eps", c.layer_norm_eps}};
  if (c.layer_subset) j["layer_subset"] = *c.layer_subset;
  if (c.tokens) j["tokens"] = *c.tokens;
  return j;
}

AdapterConfig adapter_config_from_json(const json& j) {
  static const std::set<std::string> known = {"compress_dim", "depth",       "embed_dim",  "num_heads",
                                              "mlp_ratio",    "num_classes", "layer_subset", "tokens",
                                              "use_positional_embedding", "layer_norm_eps"};
  if (!j.is_object()) throw ConfigError("adapter config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("adapter config: unknown key \"" + key + "\"");
  }
  AdapterConfig c;
  try {
    c.compress_dim = j.value("compress_dim", c.compress_dim);
    c.depth = j.value("depth", c.depth);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.use_positional_embedding = j.value("use_positional_embedding", c.use_positional_embedding);
    c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
    if (j.contains("layer_subset") && !j.at("layer_subset").is_null()) {
      c.layer_subset = j.at("layer_subset").get<LayerSubset>();
    }
    if (j.contains("tokens") && !j.at("tokens").is_null()) c.tokens = j.at("tokens").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("adapter config: ") + e.what());
  }
  return c;
}

template <class Real>
std::vector<Parameter<Real>*> AdapterParams<Real>::all() {
  std::vector<Parameter<Real>*> out{&proj_w, &proj_b, &cls};
  if (has_pos) out.push_back(&pos);
  for (auto& b : blocks) {
    for (auto* p : {&b.norm1_w, &b.norm1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.norm2_w, &b.norm2_b,
                    &b.fc1_w, &b.fc1_b, &b.fc2_w, &b.fc2_b}) {
      out.push_back(p);
    }
  }
  for (auto* p : {&norm_w, &norm_b, &head_w, &head_b}) out.push_back(p);
  return out;
}

template <class Real>
std::vector<const Parameter<Real>*> AdapterParams<Real>::all() const {
  auto mut = const_cast<AdapterParams*>(this)->all();
  return {mut.begin(), mut.end()};
}

template <class Real>
Parameter<Real>* AdapterParams<Real>::find(const std::string& id) {
  for (auto* p : all()) {
    if (p->id == id) return p;
  }
  return nullptr;
}

template <class Real>
void AdapterParams<Real>::zero_grad() {
  for (auto* p : all()) p->zero_grad();
}

ParamGroup param_group(const std::string& id) {
  if (id.starts_with("proj.")) return ParamGroup::projection;
  if (id == "cls" || id == "pos") return ParamGroup::embedding;
  if (id.starts_with("head.")) return ParamGroup::head;
  return ParamGroup::transformer;
}

std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::projection: return "projection";
    case ParamGroup::embedding: return "cls+pos";
    case ParamGroup::transformer: return "transformer";
    case ParamGroup::head: return "head";
  }
  return "?";
}

bool decays(const std::string& id) {
  return id.ends_with(".weight") && id.find("norm") == std::string::npos;
}

template <class Real>
ParameterCount count_parameters(const AdapterParams<Real>& p) {
  ParameterCount c;
  for (const auto* param : p.all()) {
    const std::uint64_t n = param->value.size();
    switch (param_group(param->id)) {
      case ParamGroup::projection: c.projection += n; break;
      case ParamGroup::embedding: c.embedding += n; break;
      case ParamGroup::transformer: c.transformer += n; break;
      case ParamGroup::head: c.head += n; break;
    }
    c.total += n;
  }
  return c;
}

template <class Real>
AdapterParams<Real> init_params(const AdapterConfig& cfg, const StackLayout& layout, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto trunc_normal = [&](Shape shape) {
    Tensor<Real> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      double v;
      do {
        v = normal(rng);
      } while (std::abs(v) > 0.04);
      t[i] = static_cast<Real>(v);
    }
    return t;
  };
  auto zeros = [](Shape shape) { return Tensor<Real>(std::move(shape)); };
  auto ones = [](Shape shape) { return Tensor<Real>(std::move(shape), Real(1)); };

  const std::size_t d = cfg.embed_dim, hidden = cfg.embed_dim * cfg.mlp_ratio;
  AdapterParams<Real> p;
  p.proj_w = {"proj.weight", trunc_normal({layout.total_dim, d})};
  p.proj_b = {"proj.bias", zeros({d})};
  p.cls = {"cls", trunc_normal({d})};
  p.has_pos = cfg.use_positional_embedding;
  if (p.has_pos) p.pos = {"pos", trunc_normal({layout.tokens + 1, d})};
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    BlockParams<Real> b;
    b.norm1_w = {pre + "norm1.weight", ones({d})};
    b.norm1_b = {pre + "norm1.bias", zeros({d})};
    b.qkv_w = {pre + "attn.qkv.weight", trunc_normal({d, 3 * d})};
    b.qkv_b = {pre + "attn.qkv.bias", zeros({3 * d})};
    b.proj_w = {pre + "attn.proj.weight", trunc_normal({d, d})};
    b.proj_b = {pre + "attn.proj.bias", zeros({d})};
    b.norm2_w = {pre + "norm2.weight", ones({d})};
    b.norm2_b = {pre + "norm2.bias", zeros({d})};
    b.fc1_w = {pre + "mlp.fc1.weight", trunc_normal({d, hidden})};
    b.fc1_b = {pre + "mlp.fc1.bias", zeros({hidden})};
    b.fc2_w = {pre + "mlp.fc2.weight", trunc_normal({hidden, d})};
    b.fc2_b = {pre + "mlp.fc2.bias", zeros({d})};
    p.blocks.push_back(std::move(b));
  }
  p.norm_w = {"norm.weight", ones({d})};
  p.norm_b = {"norm.bias", zeros({d})};
  p.head_w = {"head.weight", zeros({d, cfg.num_classes})};
  p.head_b = {"head.bias", zeros({cfg.num_classes})};
  return p;
}

template <class Real>
Tensor<Real> batch_tokens(const std::vector<Tensor<Real>>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DimensionError("batch_tokens with an empty batch");
  const Shape& s = samples.at(indices.front()).shape();
  std::vector<Real> data;
  data.reserve(indices.size() * shape_size(s));
  for (std::size_t i : indices) {
    const auto& t = samples.at(i);
    if (t.shape() != s) throw DimensionError("batch_tokens: mixed sample shapes " + shape_str(s) + " and " + shape_str(t.shape()));
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor<Real>({indices.size() * s[0], s[1]}, std::move(data));
}

template <class Real>
Tensor<Real> compress(const Tensor<Real>& stacked, const AdapterParams<Real>& p) {
  if (stacked.cols() != p.proj_w.value.dim(0)) {
    throw ConfigError("stacked descriptor width " + std::to_string(stacked.cols()) +
                      " does not match projection rows " + std::to_string(p.proj_w.value.dim(0)));
  }
  Tape<Real> tape(false);
  auto x = tape.constant(stacked.reshaped({stacked.rows(), stacked.cols()}));
  return ops::linear(x, tape.constant(p.proj_w.value), tape.constant(p.proj_b.value)).value();
}

template <class Real>
Var<Real> forward(Tape<Real>& tape, AdapterParams<Real>& p, const AdapterConfig& cfg, Tensor<Real> tokens,
                  std::size_t batch) {
  const std::size_t d = cfg.embed_dim;
  if (batch == 0 || tokens.rank() != 2 || tokens.dim(0) % batch != 0) {
    throw DimensionError("forward: tokens " + shape_str(tokens.shape()) + " do not split into " +
                         std::to_string(batch) + " samples");
  }
  if (tokens.dim(1) != p.proj_w.value.dim(0)) {
    throw ConfigError("stacked descriptor width " + std::to_string(tokens.dim(1)) +
                      " does not match projection rows " + std::to_string(p.proj_w.value.dim(0)) +
                      " (config/manifest inconsistency)");
  }
  const std::size_t T = tokens.dim(0) / batch, S = T + 1;
  if (p.has_pos && p.pos.value.dim(0) != S) {
    throw ConfigError("positional embedding covers " + std::to_string(p.pos.value.dim(0) - 1) + " tokens, input has " +
                      std::to_string(T));
  }
  const Real eps = static_cast<Real>(cfg.layer_norm_eps);

  auto x = tape.constant(std::move(tokens));
  auto t = ops::linear(x, tape.parameter(p.proj_w), tape.parameter(p.proj_b));

  auto cls = ops::reshape(tape.parameter(p.cls), {1, d});
  std::vector<Var<Real>> parts;
  parts.reserve(2 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    parts.push_back(cls);
    parts.push_back(ops::slice_rows(t, b * T, (b + 1) * T));
  }
  auto seq = ops::concat_rows(parts);
  if (p.has_pos) seq = ops::add_tiled(seq, tape.parameter(p.pos));

  for (auto& blk : p.blocks) {
    auto h = ops::layer_norm(seq, tape.parameter(blk.norm1_w), tape.parameter(blk.norm1_b), eps);
    auto qkv = ops::linear(h, tape.parameter(blk.qkv_w), tape.parameter(blk.qkv_b));
    auto a = ops::attention(qkv, batch, S, cfg.num_heads);
    a = ops::linear(a, tape.parameter(blk.proj_w), tape.parameter(blk.proj_b));
    seq = ops::add(seq, a);
    h = ops::layer_norm(seq, tape.parameter(blk.norm2_w), tape.parameter(blk.norm2_b), eps);
    h = ops::gelu(ops::linear(h, tape.parameter(blk.fc1_w), tape.parameter(blk.fc1_b)));
    h = ops::linear(h, tape.parameter(blk.fc2_w), tape.parameter(blk.fc2_b));
    seq = ops::add(seq, h);
  }

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * S;
  auto o = ops::gather_rows(seq, cls_rows);
  o = ops::layer_norm(o, tape.parameter(p.norm_w), tape.parameter(p.norm_b), eps);
  return ops::linear(o, tape.parameter(p.head_w), tape.parameter(p.head_b));
}

template <class Real>
Tensor<Real> forward_sample(const AdapterParams<Real>& p, const AdapterConfig& cfg, const Tensor<Real>& stacked) {
  Tape<Real> tape(false);
  // An evaluation tape only reads parameter values.
  auto& mp = const_cast<AdapterParams<Real>&>(p);
  auto logits = forward(tape, mp, cfg, stacked.reshaped({stacked.rows(), stacked.cols()}), 1);
  return logits.value().reshaped({cfg.num_classes});
}

template <class Real>
std::vector<int> predict(const AdapterParams<Real>& p, const AdapterConfig& cfg,
                         const std::vector<Tensor<Real>>& samples, std::size_t batch_size) {
  auto& mp = const_cast<AdapterParams<Real>&>(p);
  std::vector<int> out;
  out.reserve(samples.size());
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t end = std::min(samples.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    Tape<Real> tape(false);
    const auto& logits = forward(tape, mp, cfg, batch_tokens(samples, idx), idx.size()).value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.row(r);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

#define COMBO_INSTANTIATE_ADAPTER(R)                                                                     \
  template struct AdapterParams<R>;                                                                      \
  template ParameterCount count_parameters<R>(const AdapterParams<R>&);                                  \
  template AdapterParams<R> init_params<R>(const AdapterConfig&, const StackLayout&, std::uint64_t);     \
  template Tensor<R> batch_tokens<R>(const std::vector<Tensor<R>>&, const std::vector<std::size_t>&);   \
  template Tensor<R> compress<R>(const Tensor<R>&, const AdapterParams<R>&);                             \
  template Var<R> forward<R>(Tape<R>&, AdapterParams<R>&, const AdapterConfig&, Tensor<R>, std::size_t); \
  template Tensor<R> forward_sample<R>(const AdapterParams<R>&, const AdapterConfig&, const Tensor<R>&); \
  template std::vector<int> predict<R>(const AdapterParams<R>&, const AdapterConfig&,                    \
                                       const std::vector<Tensor<R>>&, std::size_t);

COMBO_INSTANTIATE_ADAPTER(float)
COMBO_INSTANTIATE_ADAPTER(double)

#undef COMBO_INSTANTIATE_ADAPTER

}  // namespace combo
