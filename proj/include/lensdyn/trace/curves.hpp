#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/fs.hpp"

namespace lensdyn {

enum class Role { Suc, Fail, Hal };
enum class LensKind { Logit, Tuned };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::Suc: return "Suc";
    case Role::Fail: return "Fail";
    case Role::Hal: return "Hal";
  }
  return "?";
}
inline const char* to_string(LensKind k) { return k == LensKind::Logit ? "logit" : "tuned"; }

inline Role parse_role(std::string_view s) {
  if (s == "Suc") return Role::Suc;
  if (s == "Fail") return Role::Fail;
  if (s == "Hal") return Role::Hal;
  throw FormatError("unknown role '" + std::string(s) + "'");
}
inline LensKind parse_lens(std::string_view s) {
  if (s == "logit") return LensKind::Logit;
  if (s == "tuned") return LensKind::Tuned;
  throw FormatError("unknown lens '" + std::string(s) + "'");
}

/// Probability of one tracked token across depth under one lens.
struct CurveRecord {
  std::string sample_id;
  std::string relation_id;
  int pair_id = 0;
  Role role = Role::Suc;
  LensKind lens = LensKind::Logit;
  int tracked_token_id = 0;
  std::vector<double> values;

  bool operator==(const CurveRecord&) const = default;
};

inline constexpr std::string_view kCurveFormat = "lensdyn-curves";
inline constexpr int kCurveVersion = 1;

struct CurveHeader {
  std::string model;
  int n_layers = 0;
  std::string answer_token_rule = "first word-level token of the object";

  int logit_length() const { return 2 * n_layers + 1; }
  int tuned_length() const { return n_layers; }
  int length(LensKind k) const { return k == LensKind::Logit ? logit_length() : tuned_length(); }
};

struct CurveDiagnostic {
  int line = 0;  // 1-based line in the file, header = 1
  std::string sample_id;
  std::string message;
};

struct CurveFile {
  CurveHeader header;
  std::vector<CurveRecord> records;
  std::vector<CurveDiagnostic> rejected;
};

/// Empty string when the record is valid for the header.
inline std::string check_curve(const CurveRecord& r, const CurveHeader& h) {
  const int expected = h.length(r.lens);
  if (static_cast<int>(r.values.size()) != expected)
    return std::string(to_string(r.lens)) + " curve has " + std::to_string(r.values.size()) + " values, expected " +
           std::to_string(expected) + " for L=" + std::to_string(h.n_layers);
  for (std::size_t i = 0; i < r.values.size(); ++i)
    if (!(r.values[i] >= 0.0 && r.values[i] <= 1.0))
      return "value " + std::to_string(r.values[i]) + " at index " + std::to_string(i) + " is outside [0, 1]";
  if (r.tracked_token_id < 0) return "negative tracked_token_id";
  return {};
}

inline std::string serialize_curves(const CurveHeader& h, const std::vector<CurveRecord>& records) {
  if (h.n_layers < 1) throw FormatError("curve header: n_layers must be >= 1");
  nlohmann::ordered_json head{{"format", kCurveFormat},
                              {"version", kCurveVersion},
                              {"model", h.model},
                              {"n_layers", h.n_layers},
                              {"lens_lengths", {{"logit", h.logit_length()}, {"tuned", h.tuned_length()}}},
                              {"answer_token_rule", h.answer_token_rule}};
  std::string out = head.dump() + "\n";
  for (const auto& r : records) {
    if (auto err = check_curve(r, h); !err.empty()) throw FormatError("curve " + r.sample_id + ": " + err);
    nlohmann::ordered_json j{{"sample_id", r.sample_id},     {"relation_id", r.relation_id},
                             {"pair_id", r.pair_id},         {"role", to_string(r.role)},
                             {"lens", to_string(r.lens)},    {"tracked_token_id", r.tracked_token_id},
                             {"values", r.values}};
    out += j.dump() + "\n";
  }
  return out;
}

inline void export_curves(const std::vector<CurveRecord>& records, const CurveHeader& h,
                          const std::filesystem::path& path) {
  write_file_atomic(path, serialize_curves(h, records));
}

/// Parses a curve file. A malformed header is fatal; bad records are skipped
/// and reported in `rejected`.
inline CurveFile parse_curves(std::string_view text) {
  CurveFile file;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw FormatError("curve file is empty");
  try {
    const auto head = nlohmann::json::parse(line);
    if (head.at("format").get<std::string>() != kCurveFormat) throw FormatError("curve file: unknown format");
    const int version = head.at("version").get<int>();
    if (version != kCurveVersion)
      throw FormatError("curve file: unsupported version " + std::to_string(version));
    file.header.model = head.value("model", std::string{});
    file.header.n_layers = head.at("n_layers").get<int>();
    file.header.answer_token_rule = head.value("answer_token_rule", std::string{});
    if (file.header.n_layers < 1) throw FormatError("curve header: n_layers must be >= 1");
    if (head.contains("lens_lengths")) {
      const auto& ll = head["lens_lengths"];
      if (ll.value("logit", file.header.logit_length()) != file.header.logit_length() ||
          ll.value("tuned", file.header.tuned_length()) != file.header.tuned_length())
        throw FormatError("curve header: lens_lengths disagree with n_layers=" + std::to_string(file.header.n_layers));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("curve header: ") + e.what());
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    CurveRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      r.sample_id = j.at("sample_id").get<std::string>();
      r.relation_id = j.at("relation_id").get<std::string>();
      r.pair_id = j.at("pair_id").get<int>();
      r.role = parse_role(j.at("role").get<std::string>());
      r.lens = parse_lens(j.at("lens").get<std::string>());
      r.tracked_token_id = j.at("tracked_token_id").get<int>();
      r.values = j.at("values").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      file.rejected.push_back({line_no, r.sample_id, e.what()});
      continue;
    } catch (const FormatError& e) {
      file.rejected.push_back({line_no, r.sample_id, e.what()});
      continue;
    }
    if (auto err = check_curve(r, file.header); !err.empty()) {
      file.rejected.push_back({line_no, r.sample_id, std::move(err)});
      continue;
    }
    file.records.push_back(std::move(r));
  }
  return file;
}

inline CurveFile import_curves(const std::filesystem::path& path) { return parse_curves(read_file(path)); }

}  // namespace lensdyn
