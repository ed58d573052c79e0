#pragma once

#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "espl/errors.hpp"
#include "espl/rng.hpp"

// The sampling boundary: prompts x problems -> trajectories, rewards, the
// per-prompt values V and the prompt x problem score matrix Phi reused for
// crossover evidence.

namespace espl {

struct Problem {
  std::string id;
  std::string payload;
  std::string grader_key;
  nlohmann::json grader_args;
};

// One object per line: {"id":..., "payload":..., "grader_key":..., "grader_args":{...}}
inline std::vector<Problem> load_problems_jsonl(std::istream& in) {
  std::vector<Problem> problems;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos)
      continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ParseError("problems: invalid JSON on line " + std::to_string(line_no));
    try {
      Problem p;
      p.id = j.at("id").get<std::string>();
      p.payload = j.at("payload").get<std::string>();
      p.grader_key = j.at("grader_key").get<std::string>();
      p.grader_args = j.value("grader_args", nlohmann::json::object());
      for (const Problem& q : problems)
        if (q.id == p.id)
          throw ParseError("problems: duplicate id '" + p.id + "'");
      problems.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("problems line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return problems;
}

inline std::vector<Problem> load_problems_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open problem set '" + path + "'");
  return load_problems_jsonl(in);
}

// Exact-match grader: reward 1 when the final answer equals the target.
// Answers are read from the text after the last "Answer:" marker if present.
inline double grade_exact_match(const Problem& problem, const std::string& response) {
  const std::string target = problem.grader_args.at("target").get<std::string>();
  std::string answer = response;
  std::size_t pos = response.rfind("Answer:");
  if (pos != std::string::npos) answer = response.substr(pos + 7);
  auto trim = [](std::string s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
  };
  return trim(answer) == trim(target) ? 1.0 : 0.0;
}

struct PromptRef {
  std::string id;
  std::string text;
};

struct Trajectory {
  std::string prompt_id;
  std::string problem_id;
  int action = -1;  // toy-policy action index; -1 for text backends
  std::string text; // rollout text for LLM backends
  double reward = 0.0;
};

class Sampler {
public:
  virtual ~Sampler() = default;
  virtual Trajectory sample(const PromptRef& prompt, const Problem& problem,
                            RngStream& rng) = 0;
};

struct RolloutBatch {
  std::vector<PromptRef> prompts;  // M
  std::vector<Problem> problems;   // B
  int n = 0;                       // rollouts per (prompt, problem)
  std::vector<Trajectory> trajectories;    // (i*B + b)*N + j
  std::vector<std::vector<double>> values; // V[i][b] = mean reward; Phi alias

  const Trajectory& at(int i, int b, int j) const {
    return trajectories[(static_cast<std::size_t>(i) * problems.size() + b) * n + j];
  }
  const std::vector<std::vector<double>>& phi() const { return values; }

  std::vector<const Trajectory*> group(int i, int b) const {
    std::vector<const Trajectory*> g;
    g.reserve(n);
    for (int j = 0; j < n; ++j) g.push_back(&at(i, b, j));
    return g;
  }
};

// Samples all M x B x N cells. Each cell draws from its own derived stream,
// so the batch is reproducible regardless of evaluation order. Any sampler
// failure aborts the whole batch; partial batches are never returned.
inline RolloutBatch sample_batch(Sampler& sampler,
                                 const std::vector<PromptRef>& prompts,
                                 const std::vector<Problem>& problems, int n,
                                 std::uint64_t seed, std::uint64_t iteration) {
  if (n < 1) throw ConfigError("sample_batch: N must be >= 1");
  if (prompts.empty() || problems.empty())
    throw ConfigError("sample_batch: prompts and problems must be non-empty");

  RolloutBatch batch;
  batch.prompts = prompts;
  batch.problems = problems;
  batch.n = n;
  batch.trajectories.reserve(prompts.size() * problems.size() * n);
  batch.values.assign(prompts.size(), std::vector<double>(problems.size(), 0.0));

  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t b = 0; b < problems.size(); ++b) {
      double sum = 0.0;
      for (int j = 0; j < n; ++j) {
        RngStream cell = derive_stream(
            seed, {stream::kRollout, iteration, i, b, static_cast<std::uint64_t>(j)});
        Trajectory t;
        try {
          t = sampler.sample(prompts[i], problems[b], cell);
        } catch (const TransportError&) {
          throw;
        } catch (const std::exception& e) {
          throw TransportError(std::string("sampler failure: ") + e.what(),
                               prompts[i].id, problems[b].id);
        }
        t.prompt_id = prompts[i].id;
        t.problem_id = problems[b].id;
        if (!(t.reward >= 0.0 && t.reward <= 1.0))
          throw TransportError("sampler returned reward outside [0, 1]",
                               prompts[i].id, problems[b].id);
        sum += t.reward;
        batch.trajectories.push_back(std::move(t));
      }
      batch.values[i][b] = sum / n;
    }
  }
  return batch;
}

// argmax_i sum_b Phi[i][b]; ties resolve to the lowest index.
inline int best_prompt(const RolloutBatch& batch) {
  if (batch.values.empty()) throw Error("best_prompt: empty batch");
  int best = 0;
  double best_sum = std::accumulate(batch.values[0].begin(), batch.values[0].end(), 0.0);
  for (std::size_t i = 1; i < batch.values.size(); ++i) {
    double s = std::accumulate(batch.values[i].begin(), batch.values[i].end(), 0.0);
    if (s > best_sum) {
      best = static_cast<int>(i);
      best_sum = s;
    }
  }
  return best;
}

// Per-problem winners: problem b belongs to the row with the highest
// Phi[.][b] (lowest index on ties). The returned lists partition the batch.
inline std::vector<std::vector<int>> per_problem_winners(const RolloutBatch& batch) {
  std::vector<std::vector<int>> wins(batch.values.size());
  if (batch.values.empty()) return wins;
  for (std::size_t b = 0; b < batch.problems.size(); ++b) {
    std::size_t winner = 0;
    for (std::size_t i = 1; i < batch.values.size(); ++i)
      if (batch.values[i][b] > batch.values[winner][b]) winner = i;
    wins[winner].push_back(static_cast<int>(b));
  }
  return wins;
}

// Problems where prompt i both failed and succeeded (0 < V < 1 strictly):
// the only ones worth reflecting on.
inline std::vector<int> reflection_eligible(const RolloutBatch& batch, int i) {
  std::vector<int> out;
  for (std::size_t b = 0; b < batch.problems.size(); ++b) {
    double v = batch.values[i][b];
    if (v > 0.0 && v < 1.0) out.push_back(static_cast<int>(b));
  }
  return out;
}

} // namespace espl
