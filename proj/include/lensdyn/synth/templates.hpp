#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/fs.hpp"

namespace lensdyn {

inline constexpr std::string_view kSubjectPlaceholder = "{subject}";

struct RelationTemplates {
  std::string relation_id;
  std::string description;
  std::vector<std::string> templates;
};

inline int count_placeholders(std::string_view tmpl) {
  int n = 0;
  for (auto pos = tmpl.find(kSubjectPlaceholder); pos != std::string_view::npos;
       pos = tmpl.find(kSubjectPlaceholder, pos + kSubjectPlaceholder.size()))
    ++n;
  return n;
}

/// Relation id -> paraphrase templates, in file order.
class TemplateRegistry {
 public:
  TemplateRegistry() = default;
  explicit TemplateRegistry(std::vector<RelationTemplates> relations) : relations_(std::move(relations)) {
    validate();
  }

  const std::vector<RelationTemplates>& relations() const { return relations_; }
  std::size_t size() const { return relations_.size(); }

  bool contains(std::string_view id) const { return find(id) != nullptr; }

  const RelationTemplates& at(std::string_view id) const {
    if (const auto* r = find(id)) return *r;
    throw TemplateError("unknown relation '" + std::string(id) + "'");
  }

  /// First `n` relations (file order).
  TemplateRegistry prefix(std::size_t n) const {
    if (n > relations_.size())
      throw SpecError("world asks for " + std::to_string(n) + " relations, registry has " +
                      std::to_string(relations_.size()));
    return TemplateRegistry(std::vector<RelationTemplates>(relations_.begin(), relations_.begin() + static_cast<long>(n)));
  }

  std::string serialize() const {
    std::ostringstream out;
    out << "# Query templates per relation. {subject} marks the subject.\n";
    for (const auto& r : relations_) {
      out << "\n[" << r.relation_id << "] " << r.description << "\n";
      for (const auto& t : r.templates) out << t << "\n";
    }
    return out.str();
  }

  static TemplateRegistry parse(std::string_view text) {
    std::vector<RelationTemplates> rels;
    std::istringstream in{std::string(text)};
    int line_no = 0;
    for (std::string line; std::getline(in, line);) {
      ++line_no;
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      line.erase(0, first);
      if (line.front() == '[') {
        const auto close = line.find(']');
        if (close == std::string::npos || close == 1)
          throw FormatError("templates line " + std::to_string(line_no) + ": malformed relation header");
        std::string desc = line.substr(close + 1);
        desc.erase(0, std::min(desc.size(), desc.find_first_not_of(' ')));
        rels.push_back({line.substr(1, close - 1), desc, {}});
      } else {
        if (rels.empty())
          throw FormatError("templates line " + std::to_string(line_no) + ": template before any relation header");
        rels.back().templates.push_back(line);
      }
    }
    return TemplateRegistry(std::move(rels));
  }

  static TemplateRegistry load(const std::filesystem::path& path) { return parse(read_file(path)); }

 private:
  const RelationTemplates* find(std::string_view id) const {
    for (const auto& r : relations_)
      if (r.relation_id == id) return &r;
    return nullptr;
  }

  void validate() const {
    for (std::size_t i = 0; i < relations_.size(); ++i) {
      const auto& r = relations_[i];
      for (std::size_t j = 0; j < i; ++j)
        if (relations_[j].relation_id == r.relation_id)
          throw TemplateError("duplicate relation '" + r.relation_id + "'");
      if (r.templates.size() < 2)
        throw TemplateError("relation '" + r.relation_id + "' needs at least two templates");
      for (const auto& t : r.templates)
        if (count_placeholders(t) < 1)
          throw TemplateError("template \"" + t + "\" of relation '" + r.relation_id + "' lacks {subject}");
    }
  }

  std::vector<RelationTemplates> relations_;
};

}  // namespace lensdyn
