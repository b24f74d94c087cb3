#pragma once

// Checkpoint container shared by every trained component.
//
//   "PDCK" | version u32 | metadata: u32 length + UTF-8 "key=value\n" lines |
//   records until EOF: u32 name length + name | rank u32 | dims u64 x rank |
//   payload f64 little-endian

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "protodiff/io.hpp"
#include "protodiff/nn.hpp"
#include "protodiff/optim.hpp"

namespace protodiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const CheckpointRecord&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  // Ordered to keep the encoding stable.
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<CheckpointRecord> records;

  void set(const std::string& key, const std::string& value) {
    if (key.find('=') != std::string::npos || key.find('\n') != std::string::npos ||
        value.find('\n') != std::string::npos) {
      throw ContractError("checkpoint metadata key/value may not contain '=' or newlines: " + key);
    }
    for (auto& kv : metadata) {
      if (kv.first == key) {
        kv.second = value;
        return;
      }
    }
    metadata.emplace_back(key, value);
  }

  template <typename T>
  void set(const std::string& key, const T& value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    set(key, os.str());
  }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& kv : metadata)
      if (kv.first == key) return kv.second;
    return std::nullopt;
  }

  std::string require(const std::string& key) const {
    auto v = get(key);
    if (!v) throw ContractError("checkpoint is missing metadata key '" + key + "'");
    return *v;
  }

  double require_double(const std::string& key) const { return std::stod(require(key)); }
  std::uint64_t require_u64(const std::string& key) const { return std::stoull(require(key)); }

  void add(const std::string& name, const Tensor& t) {
    for (const auto& r : records)
      if (r.name == name) throw ContractError("checkpoint already has a record '" + name + "'");
    records.push_back({name, t.shape(), t.values()});
  }

  void add(const ParameterList& params) {
    for (const auto& p : params) add(p.name, p.tensor);
  }

  const CheckpointRecord& record(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r;
    throw ContractError("checkpoint has no record '" + name + "'");
  }

  // Loads record values into already-shaped parameters.
  void load_into(ParameterList& params) const {
    for (auto& p : params) {
      const auto& r = record(p.name);
      if (r.shape != p.tensor.shape()) {
        throw DimensionError("checkpoint record '" + p.name + "' has shape " + detail::shape_string(r.shape) +
                             ", parameter has " + detail::shape_string(p.tensor.shape()));
      }
      auto dst = p.tensor.mutable_data();
      std::copy(r.values.begin(), r.values.end(), dst.begin());
    }
  }

  std::vector<char> encode() const {
    io::ByteWriter w;
    w.bytes("PDCK");
    w.u32(version);
    std::string meta;
    for (const auto& [k, v] : metadata) meta += k + "=" + v + "\n";
    w.string(meta);
    for (const auto& r : records) {
      w.string(r.name);
      w.u32(static_cast<std::uint32_t>(r.shape.size()));
      for (std::size_t d : r.shape) w.u64(d);
      for (double x : r.values) w.f64(x);
    }
    return w.take();
  }

  static Checkpoint decode(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes), "checkpoint");
    r.expect_magic("PDCK");
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != kCheckpointVersion) {
      throw ContractError("unsupported checkpoint version " + std::to_string(ck.version));
    }
    std::istringstream meta(r.string());
    for (std::string line; std::getline(meta, line);) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ContractError("checkpoint metadata line without '=': " + line);
      ck.metadata.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    while (!r.at_end()) {
      CheckpointRecord rec;
      rec.name = r.string();
      const std::uint32_t rank = r.u32();
      for (std::uint32_t i = 0; i < rank; ++i) rec.shape.push_back(static_cast<std::size_t>(r.u64()));
      const std::size_t n = shape_size(rec.shape);
      if (r.remaining() / 8 < n) throw ContractError("checkpoint: truncated payload for '" + rec.name + "'");
      rec.values.resize(n);
      for (double& x : rec.values) x = r.f64();
      ck.records.push_back(std::move(rec));
    }
    return ck;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static Checkpoint load(const std::filesystem::path& path) { return decode(io::read_file(path)); }
};

inline void record_optimizer_config(Checkpoint& ck, const AdamWConfig& c) {
  ck.set("optim.name", "adamw");
  ck.set("optim.lr", c.lr);
  ck.set("optim.weight_decay", c.weight_decay);
  ck.set("optim.beta1", c.beta1);
  ck.set("optim.beta2", c.beta2);
  ck.set("optim.eps", c.eps);
}

}  // namespace protodiff
