#pragma once

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "espl/errors.hpp"

// System prompts are an optional preamble followed by an ordered list of
// numbered principles. Edits are structured operations over that list, not
// fuzzy text patches: application is deterministic and renumbers the
// principles contiguously.

namespace espl {

struct PromptDoc {
  std::string preamble;
  std::vector<std::string> principles;

  static PromptDoc parse(const std::string& text);
  std::string render() const;
};

namespace detail {

// "  12. some text" -> principle text; anything else -> nullopt.
inline std::optional<std::string> principle_line(const std::string& line) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  std::size_t digits = i;
  while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits])))
    ++digits;
  if (digits == i) return std::nullopt;
  if (digits >= line.size() || line[digits] != '.') return std::nullopt;
  std::size_t body = digits + 1;
  if (body < line.size() && line[body] == ' ') ++body;
  std::string text = line.substr(body);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.pop_back();
  return text;
}

inline std::string rtrim(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == ' ' || s.back() == '\r'))
    s.pop_back();
  return s;
}

} // namespace detail

inline PromptDoc PromptDoc::parse(const std::string& text) {
  PromptDoc doc;
  std::string preamble;
  std::size_t start = 0;
  bool in_principles = false;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    std::string line = text.substr(
        start, end == std::string::npos ? std::string::npos : end - start);
    auto p = detail::principle_line(line);
    if (p) {
      in_principles = true;
      doc.principles.push_back(*p);
    } else if (!in_principles) {
      preamble += line;
      preamble += '\n';
    } else {
      // Wrapped continuation of the previous principle.
      std::string t = detail::rtrim(line);
      std::size_t first = t.find_first_not_of(" \t");
      if (first != std::string::npos) {
        doc.principles.back() += ' ';
        doc.principles.back() += t.substr(first);
      }
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  doc.preamble = detail::rtrim(std::move(preamble));
  return doc;
}

inline std::string PromptDoc::render() const {
  std::string out = preamble;
  if (!preamble.empty() && !principles.empty()) out += "\n\n";
  for (std::size_t i = 0; i < principles.size(); ++i) {
    out += std::to_string(i + 1);
    out += ". ";
    out += principles[i];
    if (i + 1 < principles.size()) out += '\n';
  }
  return out;
}

struct AddEdit {
  std::string text;
};
struct ModifyEdit {
  int index = 0; // 0-based principle index at application time
  std::string text;
};
struct MergeEdit {
  std::vector<int> indices; // >= 2 sources, removed; merged text appended
  std::string text;
};
using Edit = std::variant<AddEdit, ModifyEdit, MergeEdit>;

struct EditScript {
  std::vector<Edit> edits;
  bool empty() const { return edits.empty(); }
};

// Applies the script sequentially; indices refer to the evolving principle
// list. Throws EditError identifying the offending edit; on error callers
// keep the parent prompt unchanged.
inline std::string apply_edits(const std::string& prompt_text,
                               const EditScript& script) {
  if (script.empty()) return prompt_text;
  PromptDoc doc = PromptDoc::parse(prompt_text);
  for (std::size_t e = 0; e < script.edits.size(); ++e) {
    const int n = static_cast<int>(doc.principles.size());
    const Edit& edit = script.edits[e];
    if (const auto* add = std::get_if<AddEdit>(&edit)) {
      if (add->text.empty()) throw EditError("add: empty principle text", e);
      doc.principles.push_back(add->text);
    } else if (const auto* mod = std::get_if<ModifyEdit>(&edit)) {
      if (mod->index < 0 || mod->index >= n)
        throw EditError("modify: principle index " + std::to_string(mod->index) +
                            " out of range [0, " + std::to_string(n) + ")",
                        e);
      if (mod->text.empty())
        throw EditError("modify: empty principle text is not allowed", e);
      doc.principles[mod->index] = mod->text;
    } else {
      const auto& merge = std::get<MergeEdit>(edit);
      if (merge.indices.size() < 2)
        throw EditError("merge: needs at least two source principles", e);
      if (merge.text.empty()) throw EditError("merge: empty merged text", e);
      std::vector<int> sorted = merge.indices;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] < 0 || sorted[i] >= n)
          throw EditError("merge: principle index " + std::to_string(sorted[i]) +
                              " out of range [0, " + std::to_string(n) + ")",
                          e);
        if (i > 0 && sorted[i] == sorted[i - 1])
          throw EditError("merge: duplicate source index", e);
      }
      for (auto it = sorted.rbegin(); it != sorted.rend(); ++it)
        doc.principles.erase(doc.principles.begin() + *it);
      doc.principles.push_back(merge.text);
    }
  }
  return doc.render();
}

inline nlohmann::json to_json(const EditScript& script) {
  nlohmann::json edits = nlohmann::json::array();
  for (const Edit& edit : script.edits) {
    if (const auto* add = std::get_if<AddEdit>(&edit)) {
      edits.push_back({{"op", "add"}, {"text", add->text}});
    } else if (const auto* mod = std::get_if<ModifyEdit>(&edit)) {
      edits.push_back({{"op", "modify"}, {"index", mod->index}, {"text", mod->text}});
    } else {
      const auto& merge = std::get<MergeEdit>(edit);
      edits.push_back({{"op", "merge"}, {"indices", merge.indices}, {"text", merge.text}});
    }
  }
  return nlohmann::json{{"edits", std::move(edits)}};
}

inline EditScript edit_script_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("edits") || !j["edits"].is_array())
    throw ParseError("edit script: expected object with an 'edits' array");
  EditScript script;
  try {
    for (const auto& e : j["edits"]) {
      if (!e.is_object() || !e.contains("op"))
        throw ParseError("edit script: each edit needs an 'op'");
      const std::string op = e["op"].get<std::string>();
      if (op == "add") {
        script.edits.push_back(AddEdit{e.at("text").get<std::string>()});
      } else if (op == "modify") {
        script.edits.push_back(
            ModifyEdit{e.at("index").get<int>(), e.at("text").get<std::string>()});
      } else if (op == "merge") {
        script.edits.push_back(MergeEdit{e.at("indices").get<std::vector<int>>(),
                                         e.at("text").get<std::string>()});
      } else {
        throw ParseError("edit script: unknown op '" + op + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("edit script: ") + e.what());
  }
  return script;
}

} // namespace espl
