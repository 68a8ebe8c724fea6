#pragma once

#include <filesystem>
#include <string>

#include "lensdyn/core/archive.hpp"
#include "lensdyn/core/hash.hpp"
#include "lensdyn/core/weights.hpp"

namespace lensdyn {

inline constexpr std::string_view kWeightsKind = "transformer-weights";

/// Saves weights; returns the blob hash used to tag dependent artifacts.
inline std::string save_weights(const Weights& w, const std::filesystem::path& path) {
  Archive a;
  a.kind = std::string(kWeightsKind);
  a.meta["config"] = w.config;
  a.meta["unembedding_bias"] = false;
  w.for_each_tensor([&](const std::string& name, const Matrix& m) { a.tensors.push_back({name, m}); });
  return write_archive(path, a);
}

/// Hash of the weight blob as save_weights would write it.
inline std::string weights_fingerprint(const Weights& w) {
  std::string blob;
  w.for_each_tensor([&](const std::string&, const Matrix& m) { detail::append_le_floats(blob, m); });
  return Sha256().update(blob).hex();
}

inline Weights load_weights(const std::filesystem::path& path) {
  const Archive a = read_archive(path, kWeightsKind);
  ModelConfig cfg;
  try {
    cfg = a.meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("weights manifest: bad config: " + std::string(e.what()));
  }
  try {
    cfg.validate();
  } catch (const SpecError& e) {
    throw FormatError(std::string("weights manifest: ") + e.what());
  }
  Weights w = Weights::zeros(cfg);
  std::size_t i = 0;
  w.for_each_tensor([&](const std::string& name, Matrix& m) {
    if (i >= a.tensors.size()) throw FormatError("weights: missing tensor '" + name + "'");
    const auto& t = a.tensors[i++];
    if (t.name != name) throw FormatError("weights: expected tensor '" + name + "', found '" + t.name + "'");
    if (t.data.rows() != m.rows() || t.data.cols() != m.cols())
      throw FormatError("weights: tensor '" + name + "' has shape " + std::to_string(t.data.rows()) + "x" +
                        std::to_string(t.data.cols()) + ", config requires " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()));
    m = t.data;
  });
  if (i != a.tensors.size()) throw FormatError("weights: unexpected extra tensor '" + a.tensors[i].name + "'");
  if (!w.all_finite()) throw FormatError("weights: non-finite values in " + path.string());
  return w;
}

}  // namespace lensdyn
