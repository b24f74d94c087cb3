#pragma once

// Patch-embedding collections and the PEMB container:
//
//   "PEMB" | version u32 | cohort_id (u32 len + UTF-8) | rows u64 | dim u32 |
//   rows x dim float32 LE | rows x patch_ref (u32 len + UTF-8)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protodiff/errors.hpp"
#include "protodiff/io.hpp"

namespace protodiff {

inline constexpr std::uint32_t kEmbeddingVersion = 1;

struct EmbeddingCollection {
  std::string cohort_id;
  std::size_t dim = 0;
  std::vector<double> data;  // row-major rows x dim
  std::vector<std::string> patch_refs;

  EmbeddingCollection() = default;
  EmbeddingCollection(std::string cohort, std::size_t d, std::vector<double> values, std::vector<std::string> refs)
      : cohort_id(std::move(cohort)), dim(d), data(std::move(values)), patch_refs(std::move(refs)) {
    validate();
  }

  std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  void validate() const {
    if (dim == 0) throw ContractError("embedding collection '" + cohort_id + "' has dim 0");
    if (data.size() % dim != 0) throw DimensionError("embedding data length is not a multiple of dim");
    if (rows() < 1) throw ContractError("embedding collection '" + cohort_id + "' is empty");
    if (patch_refs.size() != rows()) {
      throw ContractError("embedding collection '" + cohort_id + "': " + std::to_string(patch_refs.size()) +
                          " patch refs for " + std::to_string(rows()) + " rows");
    }
    for (double x : data)
      if (!std::isfinite(x)) throw NumericError("embedding collection '" + cohort_id + "' has non-finite values");
  }

  // Rows selected by index, refs carried along.
  EmbeddingCollection select(std::span<const std::size_t> indices) const {
    EmbeddingCollection out;
    out.cohort_id = cohort_id;
    out.dim = dim;
    out.data.reserve(indices.size() * dim);
    for (std::size_t i : indices) {
      if (i >= rows()) throw BoundsError("row index " + std::to_string(i) + " out of range");
      auto r = row(i);
      out.data.insert(out.data.end(), r.begin(), r.end());
      out.patch_refs.push_back(patch_refs[i]);
    }
    return out;
  }
};

inline std::vector<char> encode_embeddings(const EmbeddingCollection& c) {
  io::ByteWriter w;
  w.bytes("PEMB");
  w.u32(kEmbeddingVersion);
  w.string(c.cohort_id);
  w.u64(c.rows());
  w.u32(static_cast<std::uint32_t>(c.dim));
  for (double x : c.data) w.f32(static_cast<float>(x));
  for (const auto& ref : c.patch_refs) w.string(ref);
  return w.take();
}

inline EmbeddingCollection decode_embeddings(std::vector<char> bytes) {
  io::ByteReader r(std::move(bytes), "embedding file");
  r.expect_magic("PEMB");
  const std::uint32_t version = r.u32();
  if (version != kEmbeddingVersion) throw ContractError("unsupported embedding version " + std::to_string(version));
  EmbeddingCollection c;
  c.cohort_id = r.string();
  const std::uint64_t rows = r.u64();
  c.dim = r.u32();
  if (c.dim == 0 || r.remaining() / 4 / c.dim < rows) throw ContractError("embedding file: truncated payload");
  c.data.resize(rows * c.dim);
  for (double& x : c.data) x = static_cast<double>(r.f32());
  c.patch_refs.reserve(rows);
  for (std::uint64_t i = 0; i < rows; ++i) c.patch_refs.push_back(r.string());
  c.validate();
  return c;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingCollection& c) {
  io::write_file(path, encode_embeddings(c));
}

inline EmbeddingCollection load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

// Every *.pemb file in a directory, sorted by file name.
inline std::vector<EmbeddingCollection> load_embedding_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DependencyError("embedding directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".pemb") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<EmbeddingCollection> out;
  for (const auto& f : files) out.push_back(load_embeddings(f));
  return out;
}

}  // namespace protodiff
