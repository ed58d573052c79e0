#pragma once

#include <algorithm>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "espl/errors.hpp"
#include "espl/population.hpp"
#include "espl/prompt.hpp"
#include "espl/reflect.hpp"
#include "espl/rng.hpp"
#include "espl/rollout.hpp"

// Composes rollout evidence with a reflection backend into the two genetic
// operators. Failures anywhere in a pipeline degrade to "no child this
// iteration" with a recorded cause; they never abort training and never
// leave a half-built node behind.

namespace espl {

enum class ChildSigmaMode {
  variance_additive, // sigma_child = sqrt(sigma^2 + delta^2), the default
  additive           // sigma_child = sigma + delta
};

struct GeneticConfig {
  double delta_sigma = 1.0;
  double p_crossover = 0.2;
  int k_ops = 2;
  ChildSigmaMode child_sigma_mode = ChildSigmaMode::variance_additive;

  void validate() const {
    if (!(delta_sigma >= 0.0)) throw ConfigError("genetic: delta_sigma must be >= 0");
    if (!(p_crossover >= 0.0 && p_crossover <= 1.0))
      throw ConfigError("genetic: p_crossover must lie in [0, 1]");
    if (k_ops < 1) throw ConfigError("genetic: k_ops must be >= 1");
  }

  Rating child_rating(const Rating& parent) const {
    return child_sigma_mode == ChildSigmaMode::variance_additive
               ? mutation_child_rating(parent, delta_sigma)
               : mutation_child_rating_additive(parent, delta_sigma);
  }
};

struct GeneticContext {
  int iteration = 0;
  std::function<std::string()> next_id;
};

struct MutationOutcome {
  std::optional<PromptNode> child;
  std::string skip_reason; // set when child is absent
};

struct CrossoverOutcome {
  std::optional<PromptNode> child;
  std::string skip_reason;
  bool gate_fired = false; // the p_crossover coin, independent of success
};

// Mutation: reflect on the tournament winner's own mixed-outcome rollouts
// and apply the aggregated edit script to it. The parent is always the
// V-argmax of the batch, never a rating-based choice.
inline MutationOutcome mutate(const RolloutBatch& batch,
                              const std::vector<PromptNode>& participants,
                              Reflector& reflector, const GeneticConfig& cfg,
                              const GeneticContext& ctx) {
  cfg.validate();
  const int k = best_prompt(batch);
  const PromptNode& parent = participants[k];
  const PromptRef parent_ref{parent.id, parent.text};

  std::vector<int> eligible = reflection_eligible(batch, k);
  if (eligible.empty()) return {std::nullopt, "no reflection-eligible problems"};

  try {
    std::vector<ReflectionLesson> lessons;
    for (int b : eligible) {
      auto summaries =
          reflector.summarize(parent_ref, batch.problems[b], batch.group(k, b));
      lessons.push_back(clamp_lesson_edits(
          reflector.critique(parent_ref, batch.problems[b], summaries), cfg.k_ops));
    }
    EditScript script = reflector.aggregate(parent_ref, lessons);
    if (script.empty()) return {std::nullopt, "aggregate produced no edits"};
    std::string child_text = apply_edits(parent.text, script);

    PromptNode child;
    child.id = ctx.next_id();
    child.text = std::move(child_text);
    child.parent_ids = {parent.id};
    child.origin = Origin::mutation;
    child.birth_iteration = ctx.iteration + 1;
    child.rating = cfg.child_rating(parent.rating);
    return {std::move(child), {}};
  } catch (const Error& e) {
    return {std::nullopt, std::string("reflection failed: ") + e.what()};
  }
}

// Crossover: fires with probability p_crossover; reflects over per-problem
// win evidence and edits the overall top prompt. The child's rating fuses
// all M participants; its tree parents are the winners plus the top prompt.
inline CrossoverOutcome maybe_crossover(const RolloutBatch& batch,
                                        const std::vector<PromptNode>& participants,
                                        Reflector& reflector,
                                        const GeneticConfig& cfg,
                                        const GeneticContext& ctx, RngStream& rng) {
  cfg.validate();
  CrossoverOutcome out;
  out.gate_fired = cfg.p_crossover > rng.uniform();
  if (!out.gate_fired) {
    out.skip_reason = "crossover gate did not fire";
    return out;
  }

  const int k = best_prompt(batch);
  const PromptNode& top = participants[k];
  std::vector<std::vector<int>> wins = per_problem_winners(batch);

  std::vector<CrossoverEvidence> evidence;
  std::vector<std::string> parent_ids;
  for (std::size_t i = 0; i < participants.size(); ++i) {
    if (wins[i].empty()) continue;
    CrossoverEvidence e;
    e.prompt = {participants[i].id, participants[i].text};
    for (int b : wins[i]) e.won_problems.push_back(batch.problems[b]);
    evidence.push_back(std::move(e));
    parent_ids.push_back(participants[i].id);
  }
  if (evidence.size() < 2) {
    out.skip_reason = "fewer than two distinct winners";
    return out;
  }

  try {
    std::optional<EditScript> script =
        reflector.crossover({top.id, top.text}, evidence);
    if (!script) {
      out.skip_reason = "reflector declined crossover";
      return out;
    }
    if (script->empty()) {
      out.skip_reason = "crossover produced no edits";
      return out;
    }
    std::string child_text = apply_edits(top.text, *script);

    std::vector<Rating> parent_ratings;
    parent_ratings.reserve(participants.size());
    for (const PromptNode& p : participants) parent_ratings.push_back(p.rating);

    if (std::find(parent_ids.begin(), parent_ids.end(), top.id) == parent_ids.end())
      parent_ids.push_back(top.id);

    PromptNode child;
    child.id = ctx.next_id();
    child.text = std::move(child_text);
    child.parent_ids = std::move(parent_ids);
    child.origin = Origin::crossover;
    child.birth_iteration = ctx.iteration + 1;
    child.rating = crossover_fusion_rating(parent_ratings, cfg.delta_sigma);
    out.child = std::move(child);
    return out;
  } catch (const Error& e) {
    out.skip_reason = std::string("reflection failed: ") + e.what();
    return out;
  }
}

} // namespace espl
