#include <bit>
#include <limits>
#include <cstring>
#include <fstream>
#include <set>

#include "combo/error.hpp"
#include "combo/features.hpp"
#include "../common/binary_io.hpp"

namespace combo {

namespace fs = std::filesystem;
using detail::atomic_write;
using detail::get_le;
using detail::put_le;
using detail::read_file;

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

constexpr std::size_t kHeaderBytes = 4 + 4 + 8 + 8;

}  // namespace

std::span<const float> FeatureDataset::sample_map(const MapKey& key, std::size_t sample) const {
  const auto it = blobs.find(key);
  if (it == blobs.end()) throw DataError("dataset has no map " + to_string(key));
  const auto& meta = manifest.backbone(key.backbone);
  const std::size_t per = meta.tokens * meta.dim;
  if (sample >= manifest.num_samples) throw DataError("sample index " + std::to_string(sample) + " out of range");
  return std::span<const float>(it->second).subspan(sample * per, per);
}

void FeatureDataset::validate() const {
  manifest.validate();
  for (const auto& key : manifest.order) {
    const auto it = blobs.find(key);
    if (it == blobs.end()) throw DataError("dataset is missing map " + to_string(key));
    const auto& meta = manifest.backbone(key.backbone);
    if (it->second.size() != manifest.num_samples * meta.tokens * meta.dim) {
      throw DataError("map " + to_string(key) + " holds " + std::to_string(it->second.size()) + " values, expected " +
                      std::to_string(manifest.num_samples * meta.tokens * meta.dim));
    }
  }
  if (blobs.size() != manifest.order.size()) throw DataError("dataset holds maps not declared in the manifest");
}

std::string blob_filename(const MapKey& key) { return key.backbone + "." + std::to_string(key.layer) + ".f32"; }

void write_blob(const fs::path& path, std::uint64_t num_samples, std::uint64_t values_per_sample,
                std::span<const float> data) {
  if (data.size() != num_samples * values_per_sample) {
    throw DataError("blob payload of " + std::to_string(data.size()) + " floats does not match header " +
                    std::to_string(num_samples) + " x " + std::to_string(values_per_sample));
  }
  std::string bytes;
  bytes.reserve(kHeaderBytes + data.size() * 4);
  bytes.append(BlobHeader::kMagic, 4);
  put_le<std::uint32_t>(bytes, BlobHeader::kVersion);
  put_le<std::uint64_t>(bytes, num_samples);
  put_le<std::uint64_t>(bytes, values_per_sample);
  if constexpr (std::endian::native == std::endian::little) {
    bytes.append(reinterpret_cast<const char*>(data.data()), data.size() * 4);
  } else {
    for (float v : data) put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));
  }
  atomic_write(path, bytes);
}

std::vector<float> read_blob(const fs::path& path, BlobHeader* header) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kHeaderBytes || std::memcmp(p, BlobHeader::kMagic, 4) != 0) {
    throw DataError(path.string() + ": not a CMBF blob");
  }
  const auto version = get_le<std::uint32_t>(p + 4);
  if (version != BlobHeader::kVersion) {
    throw DataError(path.string() + ": unsupported CMBF version " + std::to_string(version));
  }
  BlobHeader h{get_le<std::uint64_t>(p + 8), get_le<std::uint64_t>(p + 16)};
  const std::uint64_t count = h.num_samples * h.values_per_sample;
  if (bytes.size() != kHeaderBytes + count * 4) {
    throw DataError(path.string() + ": payload is " + std::to_string(bytes.size() - kHeaderBytes) +
                    " bytes, header implies " + std::to_string(count * 4));
  }
  std::vector<float> data(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(data.data(), p + kHeaderBytes, count * 4);
  } else {
    for (std::size_t i = 0; i < count; ++i) data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + kHeaderBytes + 4 * i));
  }
  if (header) *header = h;
  return data;
}

void write_dataset(const fs::path& dir, const FeatureDataset& ds) {
  ds.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& key : ds.manifest.order) {
    const auto& meta = ds.manifest.backbone(key.backbone);
    write_blob(dir / blob_filename(key), ds.manifest.num_samples, meta.tokens * meta.dim, ds.blobs.at(key));
  }
  atomic_write(dir / "manifest.json", to_json(ds.manifest).dump(2) + "\n");
}

Manifest read_manifest(const fs::path& dir) {
  if (!fs::is_regular_file(dir / "manifest.json")) {
    throw DataError("no dataset at " + dir.string() + " (manifest.json not found)");
  }
  const std::string text = read_file(dir / "manifest.json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

FeatureDataset read_dataset(const fs::path& dir) {
  FeatureDataset ds;
  ds.manifest = read_manifest(dir);
  for (const auto& key : ds.manifest.order) {
    BlobHeader h;
    if (!fs::is_regular_file(dir / blob_filename(key))) {
      throw DataError("dataset " + dir.string() + " is missing blob " + blob_filename(key));
    }
    auto data = read_blob(dir / blob_filename(key), &h);
    const auto& meta = ds.manifest.backbone(key.backbone);
    if (h.num_samples != ds.manifest.num_samples || h.values_per_sample != meta.tokens * meta.dim) {
      throw DataError(blob_filename(key) + ": header " + std::to_string(h.num_samples) + " x " +
                      std::to_string(h.values_per_sample) + " disagrees with manifest " +
                      std::to_string(ds.manifest.num_samples) + " x " + std::to_string(meta.tokens * meta.dim));
    }
    ds.blobs.emplace(key, std::move(data));
  }
  return ds;
}

}  // namespace combo
