#pragma once

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "lensdyn/core/hash.hpp"
#include "lensdyn/pipeline/config.hpp"

#ifndef LENSDYN_VERSION
#define LENSDYN_VERSION "unknown"
#endif

namespace lensdyn {

inline void log_line(const std::string& msg) { std::fprintf(stderr, "[lensdyn] %s\n", msg.c_str()); }

/// Output directory layout.
struct Layout {
  std::filesystem::path root;

  std::filesystem::path operator()(std::string_view rel) const { return root / rel; }
};

/// Which subcommand produces each artifact directory, for error messages.
inline std::string producer_of(std::string_view rel) {
  static const std::map<std::string, std::string, std::less<>> kProducers{
      {"world", "gen-world"},      {"model", "train-model"},   {"lens", "train-lens"},
      {"probe", "probe"},          {"stats", "stats"},         {"attribution", "attribute"},
      {"detector", "train-detector"}, {"imported", "import-curves"}, {"report", "report"}};
  const auto dir = std::string(rel.substr(0, rel.find('/')));
  auto it = kProducers.find(dir);
  return it == kProducers.end() ? "an earlier step" : it->second;
}

/// Exclusive per-output-directory lock held for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw ConfigError("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ConfigError("another lensdyn process is using " + dir.string());
    }
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

/// Records what one subcommand read and wrote. Inputs are checked against the
/// hashes their producer recorded; a mismatch is reported as stale.
class RunManifest {
 public:
  RunManifest(std::string command, const PipelineConfig& cfg, Layout layout)
      : command_(std::move(command)), cfg_(cfg), layout_(std::move(layout)) {}

  /// Returns the path after checking it exists.
  std::filesystem::path input(std::string_view rel) {
    const auto path = layout_(rel);
    if (!std::filesystem::exists(path))
      throw PrerequisiteError("missing " + path.string() + "; run " + producer_of(rel) + " first");
    const auto hash = sha256_file(path);
    inputs_[std::string(rel)] = hash;
    check_stale(rel, hash);
    return path;
  }

  /// Records an input given by absolute path (outside the layout).
  std::filesystem::path external_input(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw PrerequisiteError("missing input file " + path.string());
    inputs_[path.string()] = sha256_file(path);
    return path;
  }

  std::filesystem::path output_path(std::string_view rel) const { return layout_(rel); }

  void write(std::string_view rel, std::string_view contents) {
    write_file_atomic(layout_(rel), contents);
    outputs_[std::string(rel)] = Sha256().update(contents).hex();
  }

  /// For files written by other helpers (archives).
  void record_output(std::string_view rel) { outputs_[std::string(rel)] = sha256_file(layout_(rel)); }

  void finish() {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["tool_version"] = LENSDYN_VERSION;
    j["config"] = cfg_.to_json();
    j["seeds"] = j["config"]["seeds"];
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    write_file_atomic(layout_("manifests/" + command_ + ".json"), j.dump(2) + "\n");
  }

 private:
  void check_stale(std::string_view rel, const std::string& hash) const {
    const auto producer = producer_of(rel);
    const auto manifest = layout_("manifests/" + producer + ".json");
    if (!std::filesystem::exists(manifest)) return;
    try {
      const auto j = nlohmann::json::parse(read_file(manifest));
      const auto& outs = j.at("outputs");
      if (outs.contains(std::string(rel)) && outs.at(std::string(rel)).get<std::string>() != hash)
        log_line("warning: " + std::string(rel) + " changed since " + producer + " wrote it (stale hash)");
    } catch (const std::exception&) {
      log_line("warning: unreadable manifest " + manifest.string());
    }
  }

  std::string command_;
  const PipelineConfig& cfg_;
  Layout layout_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

inline std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  std::istringstream in(read_file(path));
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Rows of a simple comma separated file (no quoting); '#' lines skipped.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(path));
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace lensdyn
