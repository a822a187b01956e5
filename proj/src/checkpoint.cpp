#include "bamrl/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <type_traits>

#include "bamrl/config_json.hpp"

namespace bamrl {

namespace {

using nlohmann::json;

template <typename T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw FormatError("checkpoint: unsupported dtype '" + dtype + "'");
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
void put_values(std::string& out, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : values) {
    const Bits b = std::bit_cast<Bits>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out.push_back(static_cast<char>((b >> (8 * i)) & 0xFFu));
    }
  }
}

template <typename Src>
Src get_value(const unsigned char* p) {
  using Bits = std::conditional_t<sizeof(Src) == 4, std::uint32_t, std::uint64_t>;
  Bits b = 0;
  for (std::size_t i = 0; i < sizeof(Src); ++i) b |= static_cast<Bits>(p[i]) << (8 * i);
  return std::bit_cast<Src>(b);
}

}  // namespace

template <typename T>
void save_checkpoint(const PolicyNetwork<T>& net, const std::filesystem::path& path) {
  json meta;
  meta["config"] = net.config();
  meta["tensors"] = json::array();
  for (const auto& p : net.named_parameters()) {
    meta["tensors"].push_back(
        {{"name", p.name}, {"shape", p.tensor->shape()}, {"dtype", dtype_name<T>()}});
  }
  const std::string text = meta.dump();

  std::string blob(kCheckpointMagic, 4);
  put_u32(blob, kCheckpointVersion);
  put_u32(blob, static_cast<std::uint32_t>(text.size()));
  blob += text;
  for (const auto& p : net.named_parameters()) put_values<T>(blob, p.tensor->data());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

template <typename T>
PolicyNetwork<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  const std::string where = "checkpoint " + path.string() + ": ";

  if (raw.size() < 12) throw FormatError(where + "truncated header");
  if (std::memcmp(raw.data(), kCheckpointMagic, 4) != 0) throw FormatError(where + "bad magic bytes");
  const std::uint32_t version = get_u32(bytes + 4);
  if (version != kCheckpointVersion) {
    throw FormatError(where + "unsupported format version " + std::to_string(version));
  }
  const std::uint32_t meta_len = get_u32(bytes + 8);
  if (raw.size() < 12 + static_cast<std::size_t>(meta_len)) {
    throw FormatError(where + "truncated metadata");
  }

  json meta;
  ArchitectureConfig config;
  try {
    meta = json::parse(raw.substr(12, meta_len));
    config = meta.at("config").get<ArchitectureConfig>();
  } catch (const json::exception& e) {
    throw FormatError(where + "bad metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(where + "bad metadata: " + e.what());
  }

  PolicyNetwork<T> net = [&] {
    try {
      return PolicyNetwork<T>(config);
    } catch (const ConfigError& e) {
      throw FormatError(where + "stored config invalid: " + e.what());
    }
  }();

  auto params = net.named_parameters();
  const json& manifest = meta.contains("tensors") ? meta.at("tensors") : json();
  if (!manifest.is_array() || manifest.size() != params.size()) {
    throw FormatError(where + "tensor manifest does not match the stored config");
  }
  std::size_t offset = 12 + meta_len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest[i];
    std::string name;
    Shape shape;
    std::string dtype;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      dtype = entry.at("dtype").get<std::string>();
    } catch (const json::exception& e) {
      throw FormatError(where + "bad manifest entry: " + e.what());
    }
    auto& target = *params[i].tensor;
    if (name != params[i].name || shape != target.shape()) {
      throw FormatError(where + "manifest entry '" + name + "' " + shape_str(shape) +
                        " disagrees with config tensor '" + params[i].name + "' " +
                        shape_str(target.shape()));
    }
    const std::size_t width = dtype_size(dtype);
    const std::size_t bytes_needed = width * target.size();
    if (raw.size() < offset + bytes_needed) throw FormatError(where + "truncated tensor payload");
    for (std::size_t k = 0; k < target.size(); ++k) {
      const unsigned char* p = bytes + offset + k * width;
      target[k] = width == 4 ? static_cast<T>(get_value<float>(p)) : static_cast<T>(get_value<double>(p));
      if (!std::isfinite(target[k])) {
        throw FormatError(where + "non-finite value in tensor '" + name + "'");
      }
    }
    offset += bytes_needed;
  }
  if (offset != raw.size()) throw FormatError(where + "trailing bytes after tensor payload");
  return net;
}

template <typename T>
PolicyNetwork<T> load_checkpoint(const std::filesystem::path& path,
                                 const ArchitectureConfig& expected) {
  auto net = load_checkpoint<T>(path);
  if (!(net.config() == expected)) {
    throw CheckpointMismatch("checkpoint " + path.string() + " holds architecture " +
                             nlohmann::json(net.config()).dump() + ", expected " +
                             nlohmann::json(expected).dump());
  }
  return net;
}

template void save_checkpoint(const PolicyNetwork<float>&, const std::filesystem::path&);
template void save_checkpoint(const PolicyNetwork<double>&, const std::filesystem::path&);
template PolicyNetwork<float> load_checkpoint(const std::filesystem::path&);
template PolicyNetwork<double> load_checkpoint(const std::filesystem::path&);
template PolicyNetwork<float> load_checkpoint(const std::filesystem::path&, const ArchitectureConfig&);
template PolicyNetwork<double> load_checkpoint(const std::filesystem::path&, const ArchitectureConfig&);

}  // namespace bamrl
