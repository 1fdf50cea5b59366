#pragma once

// Checkpoint layout:
//   "RFHD" | u32 version | u32 header length | header (UTF-8 JSON) | payload
// Integers and the float32 payload are little-endian. The header holds the
// model config and a manifest (name, kind, shape, element offset, frozen) in
// payload order: parameters first, then batch-norm running statistics.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "beamsight/error.hpp"
#include "beamsight/resnet.hpp"

namespace beamsight {

inline constexpr char kCheckpointMagic[4] = {'R', 'F', 'H', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

struct ManifestEntry {
  std::string name;
  std::string kind;  // "parameter" or "buffer"
  Shape shape;
  bool frozen = false;
};

template <typename T>
std::vector<ManifestEntry> manifest_of(const Model<T>& model) {
  std::vector<ManifestEntry> out;
  for (const auto& p : model.params()) out.push_back({p.name, "parameter", p.value.shape(), p.frozen});
  for (const auto& bn : model.batch_norms()) {
    out.push_back({bn.name + ".running_mean", "buffer", bn.stats.running_mean.shape(), false});
    out.push_back({bn.name + ".running_var", "buffer", bn.stats.running_var.shape(), false});
  }
  return out;
}

template <typename T, typename Fn>
void for_each_tensor(Model<T>& model, Fn&& fn) {
  for (auto& p : model.params()) fn(p.value);
  for (auto& bn : model.batch_norms()) {
    fn(bn.stats.running_mean);
    fn(bn.stats.running_var);
  }
}

[[noreturn]] inline void corrupt(const std::string& what) { fail(ErrorKind::CorruptCheckpoint, what); }

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> checkpoint_bytes(const Model<T>& model) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : detail::manifest_of(model)) {
    manifest.push_back({{"name", e.name}, {"kind", e.kind}, {"shape", e.shape}, {"offset", offset},
                        {"frozen", e.frozen}});
    offset += shape_size(e.shape);
  }
  const nlohmann::json header = {{"format", "beamsight-checkpoint"},
                                 {"config", model.config()},
                                 {"manifest", manifest},
                                 {"elements", offset}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset * 4);
  detail::for_each_tensor(const_cast<Model<T>&>(model), [&](const Tensor<T>& t) {
    for (T v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  });
  return out;
}

template <typename T = float>
Model<T> model_from_checkpoint_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) detail::corrupt("file shorter than the fixed preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) detail::corrupt("bad magic bytes");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) detail::corrupt("unsupported version " + std::to_string(version));
  const std::uint32_t header_len = detail::get_u32(bytes.data() + 8);
  if (bytes.size() - 12 < header_len) detail::corrupt("truncated header");

  nlohmann::json header;
  ModelConfig config;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    config = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    detail::corrupt(std::string("unreadable header: ") + e.what());
  }
  Model<T> model;
  try {
    model = Model<T>::zeros(config);
  } catch (const Error& e) {
    detail::corrupt(std::string("invalid config: ") + e.what());
  }

  const auto expected = detail::manifest_of(model);
  std::size_t total = 0;
  try {
    const auto& manifest = header.at("manifest");
    if (!manifest.is_array() || manifest.size() != expected.size())
      detail::corrupt("manifest does not list the architecture's tensors");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& m = manifest[i];
      if (m.at("name").get<std::string>() != expected[i].name || m.at("kind").get<std::string>() != expected[i].kind)
        detail::corrupt("manifest entry " + std::to_string(i) + " names an unexpected tensor");
      if (m.at("shape").get<Shape>() != expected[i].shape)
        detail::corrupt("shape mismatch for " + expected[i].name);
      if (m.at("offset").get<std::size_t>() != total) detail::corrupt("non-contiguous offset for " + expected[i].name);
      total += shape_size(expected[i].shape);
    }
    if (header.at("elements").get<std::size_t>() != total) detail::corrupt("element count mismatch");
    for (std::size_t i = 0; i < model.params().size(); ++i) model.params()[i].frozen = manifest[i].at("frozen").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    detail::corrupt(std::string("malformed manifest: ") + e.what());
  }

  const std::size_t payload = bytes.size() - 12 - header_len;
  if (payload != total * 4)
    detail::corrupt("payload holds " + std::to_string(payload) + " bytes, manifest needs " + std::to_string(total * 4));
  const std::uint8_t* p = bytes.data() + 12 + header_len;
  detail::for_each_tensor(model, [&](Tensor<T>& t) {
    for (T& v : t.storage()) {
      const float f = std::bit_cast<float>(detail::get_u32(p));
      if (!std::isfinite(f)) detail::corrupt("non-finite value in payload");
      v = static_cast<T>(f);
      p += 4;
    }
  });
  return model;
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  const auto bytes = checkpoint_bytes(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::IOError, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::IOError, "failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IOError, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

template <typename T = float>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  return model_from_checkpoint_bytes<T>(read_file_bytes(path));
}

}  // namespace beamsight
