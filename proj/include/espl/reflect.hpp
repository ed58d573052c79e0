#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "espl/errors.hpp"
#include "espl/prompt.hpp"
#include "espl/rollout.hpp"

// The reflection boundary. Mutation runs a four-stage pipeline (trajectory
// summaries -> per-problem critique -> local edit proposals capped at K_ops
// -> global aggregation); crossover is a single reflection over per-problem
// win evidence. Two backends: a deterministic mock for desk-scale runs and a
// chat-completions client behind a pluggable transport.

namespace espl {

inline std::uint64_t fnv1a(const std::string& data, std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct TrajectorySummary {
  std::string problem_id;
  int rollout_index = 0;
  bool success = false;
  std::string text;
};

struct ReflectionLesson {
  std::string problem_id;
  std::string diagnosis;
  EditScript edits; // at most K_ops entries
};

struct CrossoverEvidence {
  PromptRef prompt;
  std::vector<Problem> won_problems; // non-empty by construction
};

struct ReflectionTemplates {
  std::string summarize;
  std::string critique;
  std::string aggregate;
  std::string crossover;
  std::string repair;
};

ReflectionTemplates default_reflection_templates();

struct ReflectorConfig {
  enum class Backend { mock, http };
  Backend backend = Backend::mock;
  std::string endpoint = "http://localhost:8080";
  std::string model = "reference-model";
  double temperature = 0.7;
  int max_retries = 3;
  double timeout_seconds = 30.0;
  double backoff_initial_seconds = 0.5;
  int max_in_flight = 4;
  std::string api_key_env = "ESPL_API_KEY";
  int k_ops = 2;
  int max_principle_chars = 500;
  std::string templates_dir; // overrides the built-in stage templates
  ReflectionTemplates templates = default_reflection_templates();

  void validate() const {
    if (k_ops < 1) throw ConfigError("reflect: k_ops must be >= 1");
    if (max_principle_chars < 1)
      throw ConfigError("reflect: max_principle_chars must be >= 1");
    if (max_retries < 0) throw ConfigError("reflect: max_retries must be >= 0");
    if (max_in_flight < 1) throw ConfigError("reflect: max_in_flight must be >= 1");
  }
};

// Enforced regardless of backend behavior: a lesson never carries more than
// k_ops local edits.
inline ReflectionLesson clamp_lesson_edits(ReflectionLesson lesson, int k_ops) {
  if (static_cast<int>(lesson.edits.edits.size()) > k_ops)
    lesson.edits.edits.resize(k_ops);
  return lesson;
}

// Every principle a script would write must stay under the configured cap;
// silently truncating model output is worse than skipping the child.
inline void validate_script_lengths(const EditScript& script, int max_chars) {
  for (std::size_t e = 0; e < script.edits.size(); ++e) {
    const std::string* text = nullptr;
    if (const auto* add = std::get_if<AddEdit>(&script.edits[e])) text = &add->text;
    if (const auto* mod = std::get_if<ModifyEdit>(&script.edits[e])) text = &mod->text;
    if (const auto* mrg = std::get_if<MergeEdit>(&script.edits[e])) text = &mrg->text;
    if (text && static_cast<int>(text->size()) > max_chars)
      throw EditError("principle text exceeds " + std::to_string(max_chars) +
                          " characters",
                      e);
  }
}

class Reflector {
public:
  virtual ~Reflector() = default;

  // One summary per rollout, labeled success/failure.
  virtual std::vector<TrajectorySummary>
  summarize(const PromptRef& prompt, const Problem& problem,
            const std::vector<const Trajectory*>& rollouts) = 0;

  // Contrast the summaries and propose at most K_ops local edits.
  virtual ReflectionLesson critique(const PromptRef& prompt, const Problem& problem,
                                    const std::vector<TrajectorySummary>& summaries) = 0;

  // Consolidate per-problem lessons into one global edit script.
  virtual EditScript aggregate(const PromptRef& prompt,
                               const std::vector<ReflectionLesson>& lessons) = 0;

  // Recombination edits against the top prompt; nullopt is the skip signal.
  virtual std::optional<EditScript>
  crossover(const PromptRef& top_prompt,
            const std::vector<CrossoverEvidence>& evidence) = 0;
};

// ---------------------------------------------------------------------------
// Hint extraction for the synthetic world: payloads embed the tokens that
// matter as "[hints: tok-a tok-b]".

inline std::vector<std::string> parse_payload_hints(const std::string& payload) {
  std::vector<std::string> hints;
  const std::string marker = "[hints:";
  std::size_t pos = payload.find(marker);
  if (pos == std::string::npos) return hints;
  std::size_t end = payload.find(']', pos);
  if (end == std::string::npos) return hints;
  std::istringstream in(payload.substr(pos + marker.size(), end - pos - marker.size()));
  std::string token;
  while (in >> token) hints.push_back(token);
  return hints;
}

// ---------------------------------------------------------------------------
// Deterministic mock backend. Its whole contract is reproducibility: same
// inputs, same outputs, no I/O.

class MockReflector final : public Reflector {
public:
  explicit MockReflector(const ReflectorConfig& cfg) : cfg_(cfg) { cfg_.validate(); }
  MockReflector() : MockReflector(ReflectorConfig{}) {}

  std::vector<TrajectorySummary>
  summarize(const PromptRef& prompt, const Problem& problem,
            const std::vector<const Trajectory*>& rollouts) override {
    std::vector<TrajectorySummary> out;
    out.reserve(rollouts.size());
    for (std::size_t j = 0; j < rollouts.size(); ++j) {
      const Trajectory& t = *rollouts[j];
      TrajectorySummary s;
      s.problem_id = problem.id;
      s.rollout_index = static_cast<int>(j);
      s.success = t.reward > 0.5;
      std::uint64_t trace = fnv1a(prompt.text);
      trace = fnv1a(problem.payload, trace);
      trace = fnv1a(t.text + "#" + std::to_string(t.action), trace);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%016llx",
                    static_cast<unsigned long long>(trace));
      s.text = "rollout " + std::to_string(j) + " " +
               (s.success ? "succeeded" : "failed") +
               " (reward=" + std::to_string(t.reward) + ", trace=" + buf + ")";
      out.push_back(std::move(s));
    }
    return out;
  }

  ReflectionLesson critique(const PromptRef& prompt, const Problem& problem,
                            const std::vector<TrajectorySummary>&) override {
    ReflectionLesson lesson;
    lesson.problem_id = problem.id;
    std::vector<std::string> missing;
    for (const std::string& hint : parse_payload_hints(problem.payload))
      if (prompt.text.find(hint) == std::string::npos) missing.push_back(hint);
    if (missing.empty()) {
      lesson.diagnosis = "mixed outcomes on " + problem.id +
                         "; existing principles already cover the hinted techniques";
      return lesson;
    }
    lesson.diagnosis = "failures on " + problem.id +
                       " trace back to principles missing hinted techniques";
    for (const std::string& hint : missing)
      lesson.edits.edits.push_back(
          AddEdit{"Apply the " + hint + " technique whenever the problem calls for it."});
    return clamp_lesson_edits(std::move(lesson), cfg_.k_ops);
  }

  EditScript aggregate(const PromptRef&,
                       const std::vector<ReflectionLesson>& lessons) override {
    if (lessons.empty()) throw Error("aggregate: needs at least one lesson");
    EditScript script;
    std::vector<std::string> seen_adds;
    std::map<int, std::size_t> modify_slot; // principle index -> script position
    for (const ReflectionLesson& lesson : lessons) {
      for (const Edit& edit : lesson.edits.edits) {
        if (const auto* add = std::get_if<AddEdit>(&edit)) {
          bool dup = false;
          for (const std::string& s : seen_adds)
            if (s == add->text) dup = true;
          if (!dup) {
            seen_adds.push_back(add->text);
            script.edits.push_back(*add);
          }
        } else if (const auto* mod = std::get_if<ModifyEdit>(&edit)) {
          auto it = modify_slot.find(mod->index);
          if (it == modify_slot.end()) {
            modify_slot[mod->index] = script.edits.size();
            script.edits.push_back(*mod);
          } else {
            // Overlapping proposals merge by concatenation.
            auto& existing = std::get<ModifyEdit>(script.edits[it->second]);
            existing.text += " " + mod->text;
          }
        } else {
          script.edits.push_back(edit);
        }
      }
    }
    // The global revision plan stays small: knowledge accumulates over
    // generations instead of landing in one oversized child.
    if (static_cast<int>(script.edits.size()) > cfg_.k_ops)
      script.edits.resize(cfg_.k_ops);
    validate_script_lengths(script, cfg_.max_principle_chars);
    return script;
  }

  std::optional<EditScript>
  crossover(const PromptRef& top_prompt,
            const std::vector<CrossoverEvidence>& evidence) override {
    std::size_t winners = 0;
    for (const CrossoverEvidence& e : evidence)
      if (!e.won_problems.empty()) ++winners;
    if (winners < 2) return std::nullopt;

    EditScript script;
    std::vector<std::string> imported;
    for (const CrossoverEvidence& e : evidence) {
      if (e.prompt.id == top_prompt.id || e.won_problems.empty()) continue;
      // Rank the parent's principles by how many hint tokens from its won
      // problems they cover; import the best one the top prompt lacks.
      std::vector<std::string> hints;
      for (const Problem& p : e.won_problems)
        for (const std::string& h : parse_payload_hints(p.payload))
          hints.push_back(h);
      PromptDoc doc = PromptDoc::parse(e.prompt.text);
      int best_score = -1;
      std::string best;
      for (const std::string& principle : doc.principles) {
        if (top_prompt.text.find(principle) != std::string::npos) continue;
        int score = 0;
        for (const std::string& h : hints)
          if (principle.find(h) != std::string::npos) ++score;
        if (score > best_score) {
          best_score = score;
          best = principle;
        }
      }
      if (best.empty()) continue;
      bool dup = false;
      for (const std::string& s : imported)
        if (s == best) dup = true;
      if (!dup) {
        imported.push_back(best);
        script.edits.push_back(AddEdit{best});
      }
    }
    validate_script_lengths(script, cfg_.max_principle_chars);
    return script;
  }

private:
  ReflectorConfig cfg_;
};

// ---------------------------------------------------------------------------
// Chat transport boundary. The HTTP implementation lives in espl/http.hpp;
// tests substitute recorded fixtures.

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
};

inline nlohmann::json chat_request_to_json(const ChatRequest& req) {
  nlohmann::json messages = nlohmann::json::array();
  for (const ChatMessage& m : req.messages)
    messages.push_back({{"role", m.role}, {"content", m.content}});
  return nlohmann::json{{"model", req.model},
                        {"messages", std::move(messages)},
                        {"temperature", req.temperature}};
}

class ChatTransport {
public:
  virtual ~ChatTransport() = default;
  // Returns the assistant message content; throws TransportError on failure.
  virtual std::string complete(const ChatRequest& request) = 0;
};

// Tees every request/response pair into a JSON-lines fixture file.
class RecordingTransport final : public ChatTransport {
public:
  RecordingTransport(ChatTransport& inner, const std::string& path)
      : inner_(&inner), out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open fixture for writing: '" + path + "'");
  }

  std::string complete(const ChatRequest& request) override {
    std::string response = inner_->complete(request);
    nlohmann::json line{{"request", chat_request_to_json(request)},
                        {"response", response}};
    out_ << line.dump() << '\n';
    out_.flush();
    return response;
  }

private:
  ChatTransport* inner_;
  std::ofstream out_;
};

// Replays a recorded fixture offline. Requests are matched by content hash;
// repeated identical requests consume recorded responses in order.
class ReplayTransport final : public ChatTransport {
public:
  explicit ReplayTransport(std::istream& in) { load(in); }
  explicit ReplayTransport(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fixture '" + path + "'");
    load(in);
  }

  std::string complete(const ChatRequest& request) override {
    std::uint64_t key = fnv1a(chat_request_to_json(request).dump());
    auto it = responses_.find(key);
    if (it == responses_.end() || it->second.empty())
      throw LookupError("replay fixture has no response for this request");
    std::string response = it->second.front();
    it->second.erase(it->second.begin());
    return response;
  }

private:
  void load(std::istream& in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) throw ParseError("replay fixture: invalid JSON line");
      responses_[fnv1a(j.at("request").dump())].push_back(
          j.at("response").get<std::string>());
    }
  }

  std::map<std::uint64_t, std::vector<std::string>> responses_;
};

// ---------------------------------------------------------------------------
// Template-driven reflector speaking the chat-completions contract. The
// backend must answer with a fenced JSON block; one repair reprompt is
// allowed before the stage is abandoned.

inline std::string render_template(const std::string& tmpl,
                                   const std::map<std::string, std::string>& vars) {
  std::string out = tmpl;
  for (const auto& [key, value] : vars) {
    const std::string needle = "{{" + key + "}}";
    std::size_t pos = 0;
    while ((pos = out.find(needle, pos)) != std::string::npos) {
      out.replace(pos, needle.size(), value);
      pos += value.size();
    }
  }
  return out;
}

// Extracts the first fenced code block; falls back to treating the whole
// reply as JSON.
inline nlohmann::json parse_fenced_json(const std::string& reply) {
  std::string body;
  std::size_t fence = reply.find("```");
  if (fence != std::string::npos) {
    std::size_t start = reply.find('\n', fence);
    if (start == std::string::npos) throw ParseError("malformed code fence");
    std::size_t end = reply.find("```", start);
    if (end == std::string::npos) throw ParseError("unterminated code fence");
    body = reply.substr(start + 1, end - start - 1);
  } else {
    body = reply;
  }
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw ParseError("backend reply is not valid JSON");
  return j;
}

class ChatReflector final : public Reflector {
public:
  ChatReflector(ChatTransport& transport, const ReflectorConfig& cfg)
      : transport_(&transport), cfg_(cfg) {
    cfg_.validate();
  }

  std::vector<TrajectorySummary>
  summarize(const PromptRef& prompt, const Problem& problem,
            const std::vector<const Trajectory*>& rollouts) override {
    std::ostringstream user;
    user << "System prompt under evaluation:\n" << prompt.text << "\n\n"
         << "Problem:\n" << problem.payload << "\n\n"
         << ground_truth_section(problem) << "Rollouts:\n";
    for (std::size_t j = 0; j < rollouts.size(); ++j)
      user << "--- rollout " << j << " (reward=" << rollouts[j]->reward << ")\n"
           << rollout_body(*rollouts[j]) << "\n";
    nlohmann::json j = call(cfg_.templates.summarize, user.str());

    std::vector<TrajectorySummary> out;
    try {
      for (const auto& sj : j.at("summaries")) {
        TrajectorySummary s;
        s.problem_id = problem.id;
        s.rollout_index = sj.at("index").get<int>();
        s.success = sj.at("success").get<bool>();
        s.text = sj.at("text").get<std::string>();
        out.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("summarize reply: ") + e.what());
    }
    if (out.size() != rollouts.size())
      throw ParseError("summarize reply: expected one summary per rollout");
    return out;
  }

  ReflectionLesson critique(const PromptRef& prompt, const Problem& problem,
                            const std::vector<TrajectorySummary>& summaries) override {
    std::ostringstream user;
    user << "Current system prompt:\n" << prompt.text << "\n\n"
         << "Problem:\n" << problem.payload << "\n\n"
         << ground_truth_section(problem) << "Trajectory summaries:\n";
    for (const TrajectorySummary& s : summaries)
      user << "--- " << (s.success ? "SUCCESS" : "FAILURE") << ": " << s.text << "\n";
    nlohmann::json j = call(cfg_.templates.critique, user.str());

    ReflectionLesson lesson;
    lesson.problem_id = problem.id;
    try {
      lesson.diagnosis = j.at("diagnosis").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("critique reply: ") + e.what());
    }
    lesson.edits = edit_script_from_json(j);
    return clamp_lesson_edits(std::move(lesson), cfg_.k_ops);
  }

  EditScript aggregate(const PromptRef& prompt,
                       const std::vector<ReflectionLesson>& lessons) override {
    if (lessons.empty()) throw Error("aggregate: needs at least one lesson");
    std::ostringstream user;
    user << "Current system prompt:\n" << prompt.text << "\n\nProposed local edits:\n";
    for (const ReflectionLesson& lesson : lessons)
      user << "--- problem " << lesson.problem_id << ": " << lesson.diagnosis << "\n"
           << to_json(lesson.edits).dump(2) << "\n";
    nlohmann::json j = call(cfg_.templates.aggregate, user.str());
    EditScript script = edit_script_from_json(j);
    validate_script_lengths(script, cfg_.max_principle_chars);
    return script;
  }

  std::optional<EditScript>
  crossover(const PromptRef& top_prompt,
            const std::vector<CrossoverEvidence>& evidence) override {
    std::size_t winners = 0;
    for (const CrossoverEvidence& e : evidence)
      if (!e.won_problems.empty()) ++winners;
    if (winners < 2) return std::nullopt;

    std::ostringstream user;
    user << "Top prompt (the one to edit):\n" << top_prompt.text << "\n\n";
    for (const CrossoverEvidence& e : evidence) {
      user << "=== Prompt " << e.prompt.id << " won these problems:\n";
      for (const Problem& p : e.won_problems) user << "- " << p.payload << "\n";
      user << "Its text:\n" << e.prompt.text << "\n\n";
    }
    nlohmann::json j = call(cfg_.templates.crossover, user.str());
    if (j.is_object() && j.value("skip", false)) return std::nullopt;
    EditScript script = edit_script_from_json(j);
    validate_script_lengths(script, cfg_.max_principle_chars);
    return script;
  }

private:
  std::string ground_truth_section(const Problem& problem) const {
    if (problem.grader_args.contains("target"))
      return "Ground truth answer: " +
             problem.grader_args["target"].get<std::string>() + "\n\n";
    return {};
  }

  static std::string rollout_body(const Trajectory& t) {
    if (!t.text.empty()) return t.text;
    return "(action " + std::to_string(t.action) + ")";
  }

  nlohmann::json call(const std::string& system_template, const std::string& user) {
    std::map<std::string, std::string> vars{
        {"k_ops", std::to_string(cfg_.k_ops)},
        {"max_principle_chars", std::to_string(cfg_.max_principle_chars)}};
    ChatRequest req{cfg_.model,
                    {{"system", render_template(system_template, vars)},
                     {"user", user}},
                    cfg_.temperature};
    std::string reply = transport_->complete(req);
    try {
      return parse_fenced_json(reply);
    } catch (const ParseError&) {
      // One repair reprompt, then give up on this stage.
      ChatRequest repair = req;
      repair.messages.push_back({"assistant", reply});
      repair.messages.push_back(
          {"user", render_template(cfg_.templates.repair, vars)});
      return parse_fenced_json(transport_->complete(repair));
    }
  }

  ChatTransport* transport_;
  ReflectorConfig cfg_;
};

// Stage templates are configuration, not contract: a directory of
// summarize/critique/aggregate/crossover/repair .txt files replaces the
// built-in wording wholesale.
inline ReflectionTemplates load_reflection_templates(const std::string& dir) {
  auto read = [&](const char* name) {
    std::ifstream in(dir + "/" + name + ".txt");
    if (!in) throw IoError("cannot open template '" + dir + "/" + name + ".txt'");
    std::ostringstream out;
    out << in.rdbuf();
    std::string text = out.str();
    while (!text.empty() && text.back() == '\n') text.pop_back();
    return text;
  };
  ReflectionTemplates t;
  t.summarize = read("summarize");
  t.critique = read("critique");
  t.aggregate = read("aggregate");
  t.crossover = read("crossover");
  t.repair = read("repair");
  return t;
}

inline ReflectionTemplates default_reflection_templates() {
  ReflectionTemplates t;
  t.summarize =
      "You review reinforcement-learning rollouts produced under a system prompt.\n"
      "For each rollout, write a short step-by-step summary: the reasoning steps\n"
      "taken, which numbered principles of the system prompt were used, and where\n"
      "errors or detours occurred given the outcome and the ground truth.\n"
      "Reply with a fenced JSON block:\n"
      "```json\n{\"summaries\": [{\"index\": 0, \"success\": true, \"text\": \"...\"}]}\n```\n"
      "Emit exactly one entry per rollout, in order.";
  t.critique =
      "You diagnose a batch of contrasted rollout summaries (successes and\n"
      "failures under the same system prompt). Identify reasoning patterns that\n"
      "consistently led to success, diagnose systematic failure modes, and decide\n"
      "whether existing principles are insufficient. Propose at most {{k_ops}}\n"
      "edit operations. Allowed ops: add (new general principle), modify (refine\n"
      "an existing principle; 0-based index). Principles must be abstract decision\n"
      "heuristics, not problem-specific calculations.\n"
      "Reply with a fenced JSON block:\n"
      "```json\n{\"diagnosis\": \"...\", \"edits\": [{\"op\": \"add\", \"text\": \"...\"}]}\n```";
  t.aggregate =
      "You consolidate local edit proposals from parallel reflections into one\n"
      "global revision plan for the system prompt. Refine edits that repeat\n"
      "evidence, and merge semantically overlapping principles into more general\n"
      "formulations. Allowed ops: add, modify (0-based index), merge (>= 2\n"
      "0-based indices; sources are removed and the merged principle is appended).\n"
      "Keep every principle short, abstract and strategy-focused, and under\n"
      "{{max_principle_chars}} characters.\n"
      "Reply with a fenced JSON block:\n"
      "```json\n{\"edits\": [{\"op\": \"modify\", \"index\": 0, \"text\": \"...\"}]}\n```";
  t.crossover =
      "Multiple system prompts were compared on the same problem batch; each won\n"
      "a different subset. Recombine the most effective complementary segments of\n"
      "the winning prompts into the top prompt by proposing edits against it.\n"
      "Allowed ops: add, modify (0-based index), merge (>= 2 0-based indices).\n"
      "Keep every principle under {{max_principle_chars}} characters.\n"
      "Reply with a fenced JSON block:\n"
      "```json\n{\"edits\": [{\"op\": \"add\", \"text\": \"...\"}]}\n```\n"
      "Reply with {\"skip\": true} if no recombination is worthwhile.";
  t.repair =
      "Your previous reply could not be parsed. Reply again with only a fenced\n"
      "JSON block exactly matching the requested schema.";
  return t;
}

} // namespace espl
