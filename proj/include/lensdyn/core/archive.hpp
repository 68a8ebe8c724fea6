#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/fs.hpp"
#include "lensdyn/core/hash.hpp"
#include "lensdyn/core/tensor.hpp"

namespace lensdyn {

/// Tensor envelope shared by weights, translators and raw traces: a JSON
/// manifest (format, version, kind, metadata, tensor table) next to a blob of
/// little-endian float32 values, row-major, at the offsets the table lists.
inline constexpr std::string_view kArchiveFormat = "lensdyn-archive";
inline constexpr int kArchiveVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix data;
};

struct Archive {
  std::string kind;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<NamedTensor> tensors;

  const Matrix& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.data;
    throw FormatError("archive: missing tensor '" + name + "'");
  }
};

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

namespace detail {

inline void append_le_floats(std::string& out, const Matrix& m) {
  const auto n = static_cast<std::size_t>(m.size());
  const std::size_t start = out.size();
  out.resize(start + n * sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + start, m.data(), n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
      for (int b = 0; b < 4; ++b) out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

inline void read_le_floats(const char* src, Matrix& m) {
  const auto n = static_cast<std::size_t>(m.size());
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(m.data(), src, n * sizeof(float));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      m.data()[i] = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace detail

/// Writes blob then manifest, each atomically. Returns the blob's SHA-256.
inline std::string write_archive(const std::filesystem::path& manifest_path, const Archive& archive) {
  std::string blob;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& t : archive.tensors) {
    const auto offset = blob.size();
    detail::append_le_floats(blob, t.data);
    table.push_back({{"name", t.name},
                     {"shape", {t.data.rows(), t.data.cols()}},
                     {"offset", offset},
                     {"length", blob.size() - offset}});
  }
  const auto blob_path = blob_path_for(manifest_path);
  const std::string digest = Sha256().update(blob).hex();
  write_file_atomic(blob_path, blob);

  nlohmann::ordered_json manifest;
  manifest["format"] = kArchiveFormat;
  manifest["version"] = kArchiveVersion;
  manifest["kind"] = archive.kind;
  manifest["meta"] = archive.meta;
  manifest["blob"] = blob_path.filename().string();
  manifest["blob_sha256"] = digest;
  manifest["tensors"] = std::move(table);
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
  return digest;
}

/// Reads an archive. Every structural problem raises FormatError naming the
/// offending tensor where there is one.
inline Archive read_archive(const std::filesystem::path& manifest_path, std::string_view expected_kind = {}) {
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.value("format", std::string{}) != kArchiveFormat)
      throw FormatError("manifest " + manifest_path.string() + " is not a lensdyn archive");
    const int version = manifest.at("version").get<int>();
    if (version != kArchiveVersion)
      throw FormatError("unsupported archive format version " + std::to_string(version) + " in " +
                        manifest_path.string());
    Archive a;
    a.kind = manifest.at("kind").get<std::string>();
    if (!expected_kind.empty() && a.kind != expected_kind)
      throw FormatError("archive " + manifest_path.string() + " holds '" + a.kind + "', expected '" +
                        std::string(expected_kind) + "'");
    a.meta = manifest.value("meta", nlohmann::ordered_json::object());
    const auto blob_path = manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    const std::string blob = read_file(blob_path);
    if (manifest.contains("blob_sha256") && Sha256().update(blob).hex() != manifest["blob_sha256"].get<std::string>())
      throw FormatError("blob " + blob_path.string() + " does not match the hash recorded in " + manifest_path.string());
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto& shape = entry.at("shape");
      if (!shape.is_array() || shape.size() != 2)
        throw FormatError("tensor '" + name + "': shape must have two dimensions");
      const auto rows = shape[0].get<std::int64_t>(), cols = shape[1].get<std::int64_t>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto length = entry.at("length").get<std::uint64_t>();
      if (rows < 0 || cols < 0) throw FormatError("tensor '" + name + "': negative dimension");
      if (length != static_cast<std::uint64_t>(rows * cols) * sizeof(float))
        throw FormatError("tensor '" + name + "': byte length " + std::to_string(length) +
                          " does not match shape " + std::to_string(rows) + "x" + std::to_string(cols));
      if (offset + length > blob.size())
        throw FormatError("tensor '" + name + "': truncated blob (needs bytes up to " +
                          std::to_string(offset + length) + ", blob has " + std::to_string(blob.size()) + ")");
      NamedTensor t{name, Matrix(rows, cols)};
      detail::read_le_floats(blob.data() + offset, t.data);
      a.tensors.push_back(std::move(t));
    }
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace lensdyn
