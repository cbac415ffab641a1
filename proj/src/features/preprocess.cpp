#include <algorithm>
#include <cmath>
#include <set>

#include "combo/error.hpp"
#include "combo/features.hpp"
#include "combo/parallel.hpp"

namespace combo {

namespace {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel-center sampling positions along one axis; source coordinates
// below zero clamp to the first cell.
std::vector<Tap> taps(std::size_t in, std::size_t out) {
  std::vector<Tap> t(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
    std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
    t[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
  }
  return t;
}

}  // namespace

template <class Real>
FeatureMap<Real> interpolate_map(const FeatureMap<Real>& map, std::size_t target_tokens) {
  const auto& src = map.data;
  const std::size_t tokens = src.dim(0), dim = src.dim(1);
  const std::size_t in = grid_side(tokens);
  const std::size_t out = grid_side(target_tokens);
  if (in == out) return map;

  const auto ty = taps(in, out);
  const auto tx = taps(in, out);
  Tensor<Real> dst({target_tokens, dim});
  for (std::size_t oy = 0; oy < out; ++oy) {
    const Real fy = static_cast<Real>(ty[oy].frac);
    for (std::size_t ox = 0; ox < out; ++ox) {
      const Real fx = static_cast<Real>(tx[ox].frac);
      const Real* a = src.data() + (ty[oy].i0 * in + tx[ox].i0) * dim;
      const Real* b = src.data() + (ty[oy].i0 * in + tx[ox].i1) * dim;
      const Real* c = src.data() + (ty[oy].i1 * in + tx[ox].i0) * dim;
      const Real* d = src.data() + (ty[oy].i1 * in + tx[ox].i1) * dim;
      Real* o = dst.data() + (oy * out + ox) * dim;
      // lerp as p + t*(q - p) keeps constant inputs exact.
      for (std::size_t ch = 0; ch < dim; ++ch) {
        const Real top = a[ch] + fx * (b[ch] - a[ch]);
        const Real bottom = c[ch] + fx * (d[ch] - c[ch]);
        o[ch] = top + fy * (bottom - top);
      }
    }
  }
  return {map.backbone_id, map.layer_id, std::move(dst)};
}

template <class Real>
FeatureMap<Real> normalize_map(const FeatureMap<Real>& map, double eps) {
  const auto& x = map.data;
  double mu = 0;
  for (Real v : x.span()) mu += static_cast<double>(v);
  mu /= static_cast<double>(x.size());
  double var = 0;
  for (Real v : x.span()) var += (static_cast<double>(v) - mu) * (static_cast<double>(v) - mu);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / (std::sqrt(var) + eps);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<Real>((static_cast<double>(x[i]) - mu) * inv);
  return {map.backbone_id, map.layer_id, std::move(out)};
}

template <class Real>
StackedTokens<Real> stack_bundle(const FeatureBundle<Real>& bundle, const std::vector<MapKey>& order) {
  std::vector<const FeatureMap<Real>*> maps;
  maps.reserve(order.size());
  for (const auto& key : order) {
    auto it = std::find_if(bundle.maps.begin(), bundle.maps.end(), [&](const FeatureMap<Real>& m) {
      return m.backbone_id == key.backbone && m.layer_id == key.layer;
    });
    if (it == bundle.maps.end()) {
      throw DataError("incomplete bundle for sample " + std::to_string(bundle.sample_id) + ": missing map " +
                      to_string(key));
    }
    maps.push_back(&*it);
  }
  if (maps.empty()) throw DataError("stack_bundle with an empty order");
  const std::size_t tokens = maps.front()->data.dim(0);
  std::size_t total = 0;
  for (const auto* m : maps) {
    if (m->data.dim(0) != tokens) {
      throw DimensionError("stack_bundle: map " + m->backbone_id + "." + std::to_string(m->layer_id) + " has " +
                           std::to_string(m->data.dim(0)) + " tokens, expected " + std::to_string(tokens));
    }
    total += m->data.dim(1);
  }
  Tensor<Real> out({tokens, total});
  std::size_t offset = 0;
  for (const auto* m : maps) {
    const std::size_t d = m->data.dim(1);
    for (std::size_t i = 0; i < tokens; ++i) {
      std::copy_n(m->data.data() + i * d, d, out.data() + i * total + offset);
    }
    offset += d;
  }
  return {std::move(out)};
}

void validate_partition(const RowGroups& groups, std::size_t rows) {
  std::vector<int> hits(rows, 0);
  for (const auto& g : groups) {
    for (auto [b, e] : g) {
      if (b > e || e > rows) throw DataError("row group exceeds the " + std::to_string(rows) + " projection rows");
      for (std::size_t r = b; r < e; ++r) ++hits[r];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (hits[r] != 1) {
      throw DataError("backbone row groups cover projection row " + std::to_string(r) + " " +
                      std::to_string(hits[r]) + " times");
    }
  }
}

StackLayout make_layout(const Manifest& m, const std::optional<LayerSubset>& subset,
                        std::optional<std::size_t> target_tokens) {
  if (subset) {
    for (const auto& [bk, layers] : *subset) {
      const BackboneMeta* meta = nullptr;
      for (const auto& b : m.backbones) {
        if (b.id == bk) meta = &b;
      }
      if (!meta) throw ConfigError("layer subset names unknown backbone \"" + bk + "\"");
      if (layers.empty()) throw ConfigError("layer subset for backbone " + bk + " is empty");
      for (int l : layers) {
        if (std::find(meta->layer_ids.begin(), meta->layer_ids.end(), l) == meta->layer_ids.end()) {
          throw ConfigError("layer subset: backbone " + bk + " has no layer " + std::to_string(l));
        }
      }
    }
  }
  StackLayout layout;
  for (const auto& key : m.order) {
    if (subset) {
      auto it = subset->find(key.backbone);
      if (it == subset->end() || std::find(it->second.begin(), it->second.end(), key.layer) == it->second.end()) {
        continue;
      }
    }
    const auto& meta = m.backbone(key.backbone);
    layout.order.push_back(key);
    layout.offsets.push_back(layout.total_dim);
    layout.dims.push_back(meta.dim);
    layout.total_dim += meta.dim;
  }
  if (layout.order.empty()) throw ConfigError("layer selection leaves no feature maps to probe");

  std::size_t min_tokens = 0;
  for (const auto& b : m.backbones) {
    const bool used = std::any_of(layout.order.begin(), layout.order.end(),
                                  [&](const MapKey& k) { return k.backbone == b.id; });
    if (!used) continue;
    min_tokens = min_tokens == 0 ? b.tokens : std::min(min_tokens, b.tokens);
    layout.backbone_ids.push_back(b.id);
    std::vector<RowRange> ranges;
    for (std::size_t i = 0; i < layout.order.size(); ++i) {
      if (layout.order[i].backbone != b.id) continue;
      const std::size_t begin = layout.offsets[i], end = begin + layout.dims[i];
      if (!ranges.empty() && ranges.back().second == begin) {
        ranges.back().second = end;
      } else {
        ranges.emplace_back(begin, end);
      }
    }
    layout.groups.push_back(std::move(ranges));
  }
  layout.tokens = target_tokens.value_or(min_tokens);
  grid_side(layout.tokens);
  validate_partition(layout.groups, layout.total_dim);
  return layout;
}

template <class Real>
FeatureBundle<Real> load_bundle(const FeatureDataset& ds, const std::vector<MapKey>& keys, std::size_t sample) {
  FeatureBundle<Real> bundle;
  bundle.sample_id = sample;
  bundle.label = ds.manifest.labels.at(sample);
  for (const auto& key : keys) {
    const auto& meta = ds.manifest.backbone(key.backbone);
    auto raw = ds.sample_map(key, sample);
    std::vector<Real> values(raw.begin(), raw.end());
    for (Real v : values) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw DataError("non-finite value in map " + to_string(key) + " of sample " + std::to_string(sample));
      }
    }
    bundle.maps.push_back({key.backbone, key.layer, Tensor<Real>({meta.tokens, meta.dim}, std::move(values))});
  }
  return bundle;
}

template <class Real>
Tensor<Real> preprocess_sample(const FeatureDataset& ds, const StackLayout& layout, std::size_t sample) {
  auto bundle = load_bundle<Real>(ds, layout.order, sample);
  for (auto& map : bundle.maps) map = normalize_map(interpolate_map(map, layout.tokens));
  return stack_bundle(bundle, layout.order).data;
}

template <class Real>
std::vector<Tensor<Real>> preprocess_samples(const FeatureDataset& ds, const StackLayout& layout,
                                             const std::vector<std::size_t>& samples) {
  std::vector<Tensor<Real>> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) { out[i] = preprocess_sample<Real>(ds, layout, samples[i]); });
  return out;
}

#define COMBO_INSTANTIATE_FEATURES(R)                                                                      \
  template FeatureMap<R> interpolate_map<R>(const FeatureMap<R>&, std::size_t);                            \
  template FeatureMap<R> normalize_map<R>(const FeatureMap<R>&, double);                                   \
  template StackedTokens<R> stack_bundle<R>(const FeatureBundle<R>&, const std::vector<MapKey>&);          \
  template FeatureBundle<R> load_bundle<R>(const FeatureDataset&, const std::vector<MapKey>&, std::size_t); \
  template Tensor<R> preprocess_sample<R>(const FeatureDataset&, const StackLayout&, std::size_t);         \
  template std::vector<Tensor<R>> preprocess_samples<R>(const FeatureDataset&, const StackLayout&,         \
                                                        const std::vector<std::size_t>&);

COMBO_INSTANTIATE_FEATURES(float)
COMBO_INSTANTIATE_FEATURES(double)

#undef COMBO_INSTANTIATE_FEATURES

}  // namespace combo
