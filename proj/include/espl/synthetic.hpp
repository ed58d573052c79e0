#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "espl/policy.hpp"
#include "espl/rollout.hpp"

// Desk-scale stand-in for the LLM policy: Bernoulli success whose probability
// combines a per-problem base rate, the prompt's beneficial-token quality and
// (when coupled) the toy policy's chosen action.

namespace espl {

class SyntheticEnv final : public Sampler {
public:
  // policy may be null: the environment then rewards prompt quality alone.
  SyntheticEnv(const PolicyFixture& fixture, const ToyPolicy* policy)
      : fixture_(&fixture), policy_(policy) {}

  const PolicyFixture& fixture() const { return *fixture_; }

  // clamp(base_rate + quality_gain * quality + action bonus, 0, 1).
  double success_probability(int problem, int quality, int action) const {
    return std::clamp(success_probability_raw(problem, quality, action), 0.0, 1.0);
  }

  double success_probability_raw(int problem, int quality, int action) const {
    const auto& spec = fixture_->problems[problem];
    double p = spec.base_rate + fixture_->quality_gain * quality;
    if (action >= 0) p += spec.action_bonus[action];
    return p;
  }

  Trajectory sample(const PromptRef& prompt, const Problem& problem,
                    RngStream& rng) override {
    if (problem.grader_key != "synthetic_bernoulli")
      throw TransportError("synthetic env cannot grade '" + problem.grader_key + "'",
                           prompt.id, problem.id);
    const int pidx = fixture_->problem_index(problem.id);
    const int quality = fixture_->prompt_quality(prompt.text);
    Trajectory t;
    if (policy_) t.action = policy_->sample_action(prompt.text, pidx, rng);
    double p = success_probability(pidx, quality, t.action);
    t.reward = rng.bernoulli(p) ? 1.0 : 0.0;
    return t;
  }

private:
  const PolicyFixture* fixture_;
  const ToyPolicy* policy_;
};

// Expected reward of a prompt under the current policy, averaged over every
// fixture problem: the deterministic test-time performance measure used to
// compare trained variants.
inline double expected_reward(const PolicyFixture& fixture, const ToyPolicy* policy,
                              const std::string& prompt_text) {
  SyntheticEnv env(fixture, policy);
  const int quality = fixture.prompt_quality(prompt_text);
  double total = 0.0;
  for (std::size_t x = 0; x < fixture.problems.size(); ++x) {
    if (policy) {
      std::vector<double> probs =
          policy->action_probs(prompt_text, static_cast<int>(x));
      double e = 0.0;
      for (std::size_t a = 0; a < probs.size(); ++a)
        e += probs[a] *
             env.success_probability(static_cast<int>(x), quality, static_cast<int>(a));
      total += e;
    } else {
      total += env.success_probability(static_cast<int>(x), quality, -1);
    }
  }
  return total / fixture.problems.size();
}

} // namespace espl
