#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "calibkd/nets.hpp"

// Binary checkpoint layout (all integers little-endian):
//   "CKDC" | u32 version | u32 text length | canonical config text |
//   u32 tensor count | per tensor: u32 name length, name bytes, u32 rank,
//   u64 dims[rank], f32 values | u32 CRC32 of every preceding byte.
namespace calibkd {

using KeyValues = std::map<std::string, std::string>;

/// One "key = value" line per entry, sorted by key.
inline std::string canonical_text(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    if (k.empty() || k.find(" = ") != std::string::npos || (k + v).find('\n') != std::string::npos) {
      throw ContractError("checkpoint config entry '" + k + "' cannot be written as one 'key = value' line");
    }
    out += k + " = " + v + "\n";
  }
  return out;
}

inline KeyValues parse_canonical_text(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw FormatError("checkpoint config line without ' = ': " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  KeyValues config;  // experiment snapshot plus checkpoint.* metadata
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::vector<NamedTensor<float>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError("checkpoint has no tensor named " + name);
  }

  const std::string& get(const std::string& key) const {
    auto it = config.find(key);
    if (it == config.end()) throw FormatError("checkpoint config lacks key " + key);
    return it->second;
  }
};

namespace detail {

class ByteWriter {
 public:
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class LeReader {
 public:
  explicit LeReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(bytes_.size()));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw("CKDC", 4);
  w.u32(Checkpoint::kVersion);
  KeyValues text = ckpt.config;
  text["checkpoint.epoch"] = std::to_string(ckpt.epoch);
  text["checkpoint.rng_state"] = ckpt.rng_state;
  w.str(canonical_text(text));
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (float v : t.data()) w.f32(v);
  }
  w.u32(detail::crc32_of(w.bytes()));
  return std::move(w.bytes());
}

inline Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "CKDC", 4) != 0) throw FormatError("checkpoint: bad magic at byte offset 0");
  const auto body = bytes.first(bytes.size() - 4);
  detail::LeReader tail(bytes.last(4));
  if (tail.u32() != detail::crc32_of(body)) throw FormatError("checkpoint: CRC32 checksum mismatch");

  detail::LeReader r(body.subspan(4));
  const auto version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                      std::to_string(Checkpoint::kVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config = parse_canonical_text(r.str());
  if (auto it = ckpt.config.find("checkpoint.epoch"); it != ckpt.config.end()) {
    ckpt.epoch = std::stoull(it->second);
    ckpt.config.erase(it);
  }
  if (auto it = ckpt.config.find("checkpoint.rng_state"); it != ckpt.config.end()) {
    ckpt.rng_state = it->second;
    ckpt.config.erase(it);
  }
  const auto count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name = r.str();
    const auto rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: tensor " + name + " has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const auto n = shape_numel(shape);
    if (n * 4 > r.remaining()) throw FormatError("checkpoint truncated inside tensor " + name);
    std::vector<float> values(n);
    for (auto& v : values) v = r.f32();
    ckpt.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes before checksum");
  return ckpt;
}

/// Writes through a temporary file and a rename.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Network <-> checkpoint

/// Stages as "channels:convs:downsample" joined by commas.
inline void encode_network_spec(const NetworkSpec& spec, const std::string& prefix, KeyValues& kv) {
  std::string stages;
  for (const auto& s : spec.stages) {
    if (!stages.empty()) stages += ",";
    stages += std::to_string(s.out_channels) + ":" + std::to_string(s.conv_count) + ":" + (s.downsample ? "1" : "0");
  }
  kv[prefix + ".stages"] = stages;
  kv[prefix + ".input"] = std::to_string(spec.in_channels) + "," + std::to_string(spec.in_height) + "," +
                          std::to_string(spec.in_width);
  kv[prefix + ".classes"] = std::to_string(spec.num_classes);
}

inline NetworkSpec decode_network_spec(const KeyValues& kv, const std::string& prefix) {
  auto get = [&](const std::string& key) {
    auto it = kv.find(prefix + key);
    if (it == kv.end()) throw FormatError("missing key " + prefix + key);
    return it->second;
  };
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    return parts;
  };
  NetworkSpec spec;
  try {
    for (const auto& stage : split(get(".stages"), ',')) {
      auto f = split(stage, ':');
      if (f.size() != 3) throw FormatError("bad stage entry '" + stage + "'");
      spec.stages.push_back({std::stoul(f[0]), std::stoul(f[1]), f[2] == "1"});
    }
    auto in = split(get(".input"), ',');
    if (in.size() != 3) throw FormatError("bad input shape '" + get(".input") + "'");
    spec.in_channels = std::stoul(in[0]);
    spec.in_height = std::stoul(in[1]);
    spec.in_width = std::stoul(in[2]);
    spec.num_classes = std::stoul(get(".classes"));
  } catch (const std::logic_error&) {
    throw FormatError("malformed network description under " + prefix);
  }
  return spec;
}

inline std::vector<NamedTensor<float>> network_tensors(const Network<float>& net, const std::string& prefix) {
  std::vector<NamedTensor<float>> out;
  for (auto& [name, t] : net.named_parameters()) out.emplace_back(prefix + "." + name, t.detach());
  return out;
}

/// Rebuilds the network described under `prefix` ("teacher"/"student").
inline Network<float> network_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const auto spec = decode_network_spec(ckpt.config, prefix);
  spec.validate();
  auto net = build_network<float>(spec, 0);
  for (auto& [name, t] : net.named_parameters()) {
    const auto& stored = ckpt.tensor(prefix + "." + name);
    if (stored.shape() != t.shape()) {
      throw FormatError("checkpoint tensor " + prefix + "." + name + " has shape " + shape_str(stored.shape()) +
                        ", expected " + shape_str(t.shape()));
    }
    auto dst = t;
    std::copy(stored.data().begin(), stored.data().end(), dst.mutable_data().begin());
  }
  net.set_trainable(false);
  return net;
}

}  // namespace calibkd
