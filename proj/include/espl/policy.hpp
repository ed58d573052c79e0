#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "espl/errors.hpp"
#include "espl/rng.hpp"
#include "espl/rollout.hpp"

// A small differentiable policy over discrete actions, one logit row per
// problem. It exists so the policy-gradient objective, the group-mean
// baseline and the KL regularizer can be verified against finite differences
// rather than trusted.

namespace espl {

using Matrix = std::vector<std::vector<double>>;

inline Matrix zeros_like(const Matrix& m) {
  Matrix z(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) z[i].assign(m[i].size(), 0.0);
  return z;
}

// The synthetic world definition: beneficial-token lexicon, per-problem
// success model and the per-problem prompt-feature weight tables that couple
// prompt content to the policy's action preferences.
struct PolicyFixture {
  struct ProblemSpec {
    std::string id;
    double base_rate = 0.0;
    std::vector<double> action_bonus;                      // num_actions
    std::map<std::string, std::vector<double>> feature_weights; // token -> per-action
  };

  std::vector<std::string> lexicon;
  int num_actions = 0;
  double quality_gain = 0.0;
  std::vector<ProblemSpec> problems;

  void validate() const {
    if (num_actions < 1) throw ConfigError("fixture: num_actions must be >= 1");
    if (problems.empty()) throw ConfigError("fixture: needs at least one problem");
    for (const auto& p : problems) {
      if (static_cast<int>(p.action_bonus.size()) != num_actions)
        throw ConfigError("fixture: action_bonus size mismatch for '" + p.id + "'");
      if (!(p.base_rate >= 0.0 && p.base_rate <= 1.0))
        throw ConfigError("fixture: base_rate out of [0,1] for '" + p.id + "'");
      for (const auto& [token, w] : p.feature_weights)
        if (static_cast<int>(w.size()) != num_actions)
          throw ConfigError("fixture: feature weight size mismatch for token '" +
                            token + "'");
    }
  }

  int problem_index(const std::string& id) const {
    for (std::size_t i = 0; i < problems.size(); ++i)
      if (problems[i].id == id) return static_cast<int>(i);
    throw LookupError("fixture: unknown problem '" + id + "'");
  }

  // Count of distinct beneficial tokens present in the prompt text.
  int prompt_quality(const std::string& prompt_text) const {
    int q = 0;
    for (const std::string& token : lexicon)
      if (prompt_text.find(token) != std::string::npos) ++q;
    return q;
  }

  // Per-action bonus: dot product of the prompt's token-indicator vector
  // with the problem's feature weight table.
  std::vector<double> prompt_bonus(const std::string& prompt_text,
                                   int problem) const {
    std::vector<double> bonus(num_actions, 0.0);
    for (const auto& [token, weights] : problems[problem].feature_weights)
      if (prompt_text.find(token) != std::string::npos)
        for (int a = 0; a < num_actions; ++a) bonus[a] += weights[a];
    return bonus;
  }

  static PolicyFixture from_json(const nlohmann::json& j) {
    try {
      PolicyFixture f;
      f.lexicon = j.at("lexicon").get<std::vector<std::string>>();
      f.num_actions = j.at("num_actions").get<int>();
      f.quality_gain = j.at("quality_gain").get<double>();
      for (const auto& pj : j.at("problems")) {
        ProblemSpec p;
        p.id = pj.at("id").get<std::string>();
        p.base_rate = pj.at("base_rate").get<double>();
        p.action_bonus = pj.at("action_bonus").get<std::vector<double>>();
        if (pj.contains("feature_weights"))
          for (const auto& [token, w] : pj["feature_weights"].items())
            p.feature_weights[token] = w.get<std::vector<double>>();
        f.problems.push_back(std::move(p));
      }
      f.validate();
      return f;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("fixture: ") + e.what());
    }
  }

  static PolicyFixture load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open fixture '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ParseError("fixture: invalid JSON in '" + path + "'");
    return from_json(j);
  }
};

struct RlConfig {
  double alpha = 0.1;   // toy default; the paper's 4e-5 targets LoRA finetuning
  double kl_beta = 0.0; // KL regularization weight
  int group_size = 5;   // N

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("rl: alpha must be > 0");
    if (!(kl_beta >= 0.0)) throw ConfigError("rl: kl_beta must be >= 0");
    if (group_size < 1) throw ConfigError("rl: group size must be >= 1");
  }
};

class ToyPolicy {
public:
  explicit ToyPolicy(const PolicyFixture* fixture)
      : fixture_(fixture),
        theta_(fixture->problems.size(),
               std::vector<double>(fixture->num_actions, 0.0)),
        reference_theta_(theta_) {}

  const PolicyFixture& fixture() const { return *fixture_; }
  Matrix& theta() { return theta_; }
  const Matrix& theta() const { return theta_; }
  const Matrix& reference_theta() const { return reference_theta_; }

  // softmax(theta[problem] + prompt bonus); sums to 1 within 1e-12.
  std::vector<double> action_probs(const std::string& prompt_text,
                                   int problem) const {
    check_problem(problem);
    std::vector<double> logits = theta_[problem];
    std::vector<double> bonus = fixture_->prompt_bonus(prompt_text, problem);
    for (std::size_t a = 0; a < logits.size(); ++a) logits[a] += bonus[a];
    return softmax(logits);
  }

  double logprob(const std::string& prompt_text, int problem, int action) const {
    check_action(problem, action);
    return std::log(action_probs(prompt_text, problem)[action]);
  }

  int sample_action(const std::string& prompt_text, int problem,
                    RngStream& rng) const {
    std::vector<double> probs = action_probs(prompt_text, problem);
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t a = 0; a + 1 < probs.size(); ++a) {
      acc += probs[a];
      if (u < acc) return static_cast<int>(a);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  static std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (std::size_t a = 0; a < logits.size(); ++a) {
      p[a] = std::exp(logits[a] - mx);
      total += p[a];
    }
    for (double& x : p) x /= total;
    return p;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"theta", theta_}, {"reference_theta", reference_theta_}};
  }

  void restore(const nlohmann::json& j) {
    try {
      Matrix theta = j.at("theta").get<Matrix>();
      Matrix ref = j.at("reference_theta").get<Matrix>();
      if (theta.size() != theta_.size() || ref.size() != theta_.size())
        throw ParseError("policy: checkpoint shape does not match fixture");
      theta_ = std::move(theta);
      reference_theta_ = std::move(ref);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("policy: ") + e.what());
    }
  }

private:
  void check_problem(int problem) const {
    if (problem < 0 || problem >= static_cast<int>(theta_.size()))
      throw LookupError("policy: problem index out of range");
  }
  void check_action(int problem, int action) const {
    check_problem(problem);
    if (action < 0 || action >= fixture_->num_actions)
      throw LookupError("policy: action index out of range");
  }

  const PolicyFixture* fixture_;
  Matrix theta_;
  Matrix reference_theta_;
};

// Gradient of the empirical objective
//   J = (1/B) sum_b (1/(N*M)) sum_{i,j} (r_{i,j,b} - V[i][b]) log pi(y | s_i, x_b)
// with the group mean V[i][b] as baseline, treated as a constant.
inline Matrix policy_gradient(const ToyPolicy& policy, const RolloutBatch& batch) {
  const auto& fixture = policy.fixture();
  const std::size_t m = batch.prompts.size();
  const std::size_t bsz = batch.problems.size();
  if (m == 0 || bsz == 0 || batch.n < 1)
    throw Error("policy_gradient: malformed batch");
  if (batch.trajectories.size() != m * bsz * static_cast<std::size_t>(batch.n))
    throw Error("policy_gradient: batch shape mismatch");

  Matrix grad = zeros_like(policy.theta());
  const double scale = 1.0 / (static_cast<double>(batch.n) * m * bsz);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t b = 0; b < bsz; ++b) {
      const int pidx = fixture.problem_index(batch.problems[b].id);
      const double baseline = batch.values[i][b];
      std::vector<double> probs =
          policy.action_probs(batch.prompts[i].text, pidx);
      for (int j = 0; j < batch.n; ++j) {
        const Trajectory& t = batch.at(static_cast<int>(i), static_cast<int>(b), j);
        if (t.action < 0 || t.action >= fixture.num_actions)
          throw Error("policy_gradient: batch was not produced by this policy");
        double adv = t.reward - baseline;
        if (adv == 0.0) continue;
        for (int a = 0; a < fixture.num_actions; ++a) {
          double indicator = (a == t.action) ? 1.0 : 0.0;
          grad[pidx][a] += scale * adv * (indicator - probs[a]);
        }
      }
    }
  }
  return grad;
}

struct KlResult {
  double value = 0.0;
  Matrix grad;
};

// Exact KL(pi_theta || pi_ref) of the bare logit tables, averaged over all
// problem rows, with its exact gradient in theta.
inline KlResult kl_to_reference(const ToyPolicy& policy) {
  KlResult out;
  out.grad = zeros_like(policy.theta());
  const std::size_t rows = policy.theta().size();
  for (std::size_t x = 0; x < rows; ++x) {
    std::vector<double> p = ToyPolicy::softmax(policy.theta()[x]);
    std::vector<double> q = ToyPolicy::softmax(policy.reference_theta()[x]);
    double kl = 0.0;
    std::vector<double> log_ratio(p.size());
    for (std::size_t a = 0; a < p.size(); ++a) {
      log_ratio[a] = std::log(p[a]) - std::log(q[a]);
      kl += p[a] * log_ratio[a];
    }
    out.value += kl / rows;
    for (std::size_t a = 0; a < p.size(); ++a)
      out.grad[x][a] = p[a] * (log_ratio[a] - kl) / rows;
  }
  return out;
}

// One ascent step on J - kl_beta * KL. With kl_beta = 0 this is plain
// REINFORCE with the group-mean baseline.
inline void step(ToyPolicy& policy, const RolloutBatch& batch, const RlConfig& cfg) {
  cfg.validate();
  Matrix grad = policy_gradient(policy, batch);
  if (cfg.kl_beta != 0.0) {
    KlResult kl = kl_to_reference(policy);
    for (std::size_t x = 0; x < grad.size(); ++x)
      for (std::size_t a = 0; a < grad[x].size(); ++a)
        grad[x][a] -= cfg.kl_beta * kl.grad[x][a];
  }
  for (std::size_t x = 0; x < grad.size(); ++x)
    for (std::size_t a = 0; a < grad[x].size(); ++a)
      policy.theta()[x][a] += cfg.alpha * grad[x][a];
}

} // namespace espl
