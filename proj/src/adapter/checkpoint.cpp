#include <algorithm>
#include <bit>
#include <cstring>

#include "combo/adapter.hpp"
#include "combo/error.hpp"
#include "../common/binary_io.hpp"

namespace combo {

using detail::get_le;
using detail::put_le;

template <class Real>
Checkpoint make_checkpoint(const AdapterParams<Real>& p, const AdapterConfig& cfg, std::uint64_t manifest_hash) {
  Checkpoint ck;
  ck.manifest_hash = manifest_hash;
  ck.config = cfg;
  for (const auto* param : p.all()) {
    std::vector<float> values(param->value.size());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(param->value[i]);
    ck.tensors.push_back({param->id, param->value.shape(), std::move(values)});
  }
  return ck;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(Checkpoint::kMagic, 4);
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, ck.manifest_hash);
  const std::string config = to_json(ck.config).dump();
  put_le<std::uint64_t>(out, config.size());
  out += config;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (shape_size(t.shape) != t.values.size()) throw DimensionError("checkpoint tensor " + t.id + " shape/data mismatch");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.id.size()));
    out += t.id;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) put_le<std::uint64_t>(out, e);
    for (float v : t.values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

namespace {

class Reader {
 public:
  explicit Reader(const std::string& bytes)
      : p_(reinterpret_cast<const unsigned char*>(bytes.data())), n_(bytes.size()) {}

  const unsigned char* take(std::size_t k) {
    if (k > n_ - pos_) throw DataError("checkpoint truncated");
    const unsigned char* at = p_ + pos_;
    pos_ += k;
    return at;
  }
  template <class U>
  U le() {
    return get_le<U>(take(sizeof(U)));
  }
  std::string str(std::size_t k) {
    const auto* at = take(k);
    return {reinterpret_cast<const char*>(at), k};
  }
  bool done() const { return pos_ == n_; }

 private:
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(4), Checkpoint::kMagic, 4) != 0) throw DataError("not a CMBC checkpoint");
  const auto version = r.le<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw DataError("unsupported CMBC version " + std::to_string(version));
  Checkpoint ck;
  ck.manifest_hash = r.le<std::uint64_t>();
  const auto config_len = r.le<std::uint64_t>();
  try {
    ck.config = adapter_config_from_json(nlohmann::json::parse(r.str(config_len)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.id = r.str(r.le<std::uint32_t>());
    const auto rank = r.le<std::uint32_t>();
    if (rank == 0 || rank > 3) throw DataError("checkpoint tensor " + t.id + " has rank " + std::to_string(rank));
    for (std::uint32_t a = 0; a < rank; ++a) t.shape.push_back(r.le<std::uint64_t>());
    const std::size_t n = shape_size(t.shape);
    if (n == 0 || n > (bytes.size() / 4)) throw DataError("checkpoint tensor " + t.id + " has an invalid shape");
    t.values.resize(n);
    for (auto& v : t.values) v = std::bit_cast<float>(r.le<std::uint32_t>());
    ck.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint payload");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::atomic_write(path, encode_checkpoint(ck));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(detail::read_file(path)); }

template <class Real>
AdapterParams<Real> params_from_checkpoint(const Checkpoint& ck, const Manifest& manifest) {
  if (ck.manifest_hash != manifest.hash()) {
    throw DataError("checkpoint manifest hash does not match the dataset (trained on different data)");
  }
  const auto layout = make_layout(manifest, ck.config.layer_subset, ck.config.tokens);
  auto params = init_params<Real>(ck.config, layout, 0);
  auto all = params.all();
  if (all.size() != ck.tensors.size()) {
    throw DataError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                    std::to_string(all.size()));
  }
  for (auto* p : all) {
    auto it = std::find_if(ck.tensors.begin(), ck.tensors.end(), [&](const CheckpointTensor& t) { return t.id == p->id; });
    if (it == ck.tensors.end()) throw DataError("checkpoint is missing tensor " + p->id);
    if (it->shape != p->value.shape()) {
      throw DataError("checkpoint tensor " + p->id + " has shape " + shape_str(it->shape) + ", expected " +
                      shape_str(p->value.shape()));
    }
    for (std::size_t i = 0; i < it->values.size(); ++i) p->value[i] = static_cast<Real>(it->values[i]);
  }
  return params;
}

template Checkpoint make_checkpoint<float>(const AdapterParams<float>&, const AdapterConfig&, std::uint64_t);
template Checkpoint make_checkpoint<double>(const AdapterParams<double>&, const AdapterConfig&, std::uint64_t);
template AdapterParams<float> params_from_checkpoint<float>(const Checkpoint&, const Manifest&);
template AdapterParams<double> params_from_checkpoint<double>(const Checkpoint&, const Manifest&);

}  // namespace combo
