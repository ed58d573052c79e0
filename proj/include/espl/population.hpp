#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "espl/errors.hpp"
#include "espl/rating.hpp"
#include "espl/rng.hpp"

// The evolving population of system prompts: an append-only tree of rated
// nodes, a sliding selection window, tournament recording, and tree export.

namespace espl {

enum class Origin { root, mutation, crossover };

inline const char* origin_name(Origin o) {
  switch (o) {
  case Origin::root: return "root";
  case Origin::mutation: return "mutation";
  case Origin::crossover: return "crossover";
  }
  return "?";
}

inline Origin origin_from_name(const std::string& s) {
  if (s == "root") return Origin::root;
  if (s == "mutation") return Origin::mutation;
  if (s == "crossover") return Origin::crossover;
  throw ParseError("unknown origin '" + s + "'");
}

struct PromptNode {
  std::string id;
  std::string text;
  std::vector<std::string> parent_ids;
  Origin origin = Origin::root;
  int birth_iteration = 0;
  Rating rating;
};

class Population {
public:
  explicit Population(int window_size) : window_size_(window_size) {
    if (window_size < 1) throw ConfigError("population: window size must be >= 1");
  }

  const std::vector<PromptNode>& nodes() const { return nodes_; }
  int window_size() const { return window_size_; }
  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }

  const PromptNode* find(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &nodes_[it->second];
  }

  PromptNode& at(const std::string& id) {
    auto it = index_.find(id);
    if (it == index_.end()) throw LookupError("population: no node '" + id + "'");
    return nodes_[it->second];
  }

  const PromptNode& at(const std::string& id) const {
    return const_cast<Population*>(this)->at(id);
  }

  // Append position, used as the deterministic tie-break everywhere.
  std::size_t position(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw LookupError("population: no node '" + id + "'");
    return it->second;
  }

  void append(PromptNode node) {
    if (index_.count(node.id))
      throw Error("population: duplicate node id '" + node.id + "'");
    if (!node.rating.valid())
      throw Error("population: node '" + node.id + "' has an invalid rating");
    switch (node.origin) {
    case Origin::root:
      if (!node.parent_ids.empty())
        throw Error("population: root node must have no parents");
      break;
    case Origin::mutation:
      if (node.parent_ids.size() != 1)
        throw Error("population: mutation node must have exactly one parent");
      break;
    case Origin::crossover:
      if (node.parent_ids.empty())
        throw Error("population: crossover node must have at least one parent");
      break;
    }
    for (const std::string& pid : node.parent_ids) {
      const PromptNode* parent = find(pid);
      if (!parent) throw LookupError("population: unknown parent '" + pid + "'");
      if (parent->birth_iteration >= node.birth_iteration)
        throw Error("population: parent must be born before child");
    }
    index_[node.id] = nodes_.size();
    nodes_.push_back(std::move(node));
  }

  // Latest K nodes in append order (the whole tree persists; only selection
  // is restricted to the window).
  std::vector<const PromptNode*> window() const {
    std::size_t k = std::min<std::size_t>(window_size_, nodes_.size());
    std::vector<const PromptNode*> out;
    out.reserve(k);
    for (std::size_t i = nodes_.size() - k; i < nodes_.size(); ++i)
      out.push_back(&nodes_[i]);
    return out;
  }

private:
  std::vector<PromptNode> nodes_;
  std::map<std::string, std::size_t> index_;
  int window_size_;
};

struct SelectionPolicy {
  enum class Mode { softmax, simplified };
  Mode mode = Mode::simplified;
  double lambda = 2.0;
  double temperature = 1.0;
  int m = 3;

  void validate() const {
    if (!(temperature > 0.0))
      throw ConfigError("selection: temperature must be > 0");
    if (m < 1) throw ConfigError("selection: M must be >= 1");
  }
};

namespace detail {

// Argmax by UCB score; ties go to the earliest appended node.
inline std::size_t argmax_score(const std::vector<const PromptNode*>& window,
                                double lambda) {
  std::size_t best = 0;
  double best_score = ucb_score(window[0]->rating, lambda);
  for (std::size_t i = 1; i < window.size(); ++i) {
    double s = ucb_score(window[i]->rating, lambda);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

} // namespace detail

// Sample min(M, |window|) distinct prompts from the sliding window.
// softmax: successive draws without replacement, p_i proportional to
// exp((mu_i + lambda*sigma_i)/T). simplified: the top-scoring node always
// included, the rest drawn uniformly without replacement.
inline std::vector<const PromptNode*> select(const Population& pop,
                                             const SelectionPolicy& policy,
                                             RngStream& rng) {
  policy.validate();
  if (pop.empty()) throw Error("select: population is empty");
  std::vector<const PromptNode*> window = pop.window();
  const std::size_t m = std::min<std::size_t>(policy.m, window.size());

  std::vector<const PromptNode*> chosen;
  chosen.reserve(m);
  std::vector<const PromptNode*> rest;

  if (policy.mode == SelectionPolicy::Mode::simplified) {
    std::size_t top = detail::argmax_score(window, policy.lambda);
    chosen.push_back(window[top]);
    for (std::size_t i = 0; i < window.size(); ++i)
      if (i != top) rest.push_back(window[i]);
    while (chosen.size() < m) {
      std::size_t pick = static_cast<std::size_t>(rng.below(rest.size()));
      chosen.push_back(rest[pick]);
      rest.erase(rest.begin() + pick);
    }
    return chosen;
  }

  rest = window;
  while (chosen.size() < m) {
    double max_score = -std::numeric_limits<double>::infinity();
    for (const PromptNode* n : rest)
      max_score = std::max(max_score, ucb_score(n->rating, policy.lambda));
    std::vector<double> weights(rest.size());
    double total = 0.0;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      weights[i] = std::exp(
          (ucb_score(rest[i]->rating, policy.lambda) - max_score) /
          policy.temperature);
      total += weights[i];
    }
    double u = rng.uniform() * total;
    std::size_t pick = rest.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      acc += weights[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    chosen.push_back(rest[pick]);
    rest.erase(rest.begin() + pick);
  }
  return chosen;
}

struct TournamentResult {
  Ranking ranking;
  std::vector<Rating> posteriors; // participant order
};

// One tournament: rank participants by their values, update ratings through
// the rating module, and write the posteriors back into the population.
inline TournamentResult record_tournament(Population& pop,
                                          const std::vector<std::string>& participants,
                                          const std::vector<double>& values,
                                          const RatingConfig& cfg) {
  if (participants.size() != values.size())
    throw MatchError("record_tournament: participants/values length mismatch");
  std::vector<Rating> priors;
  priors.reserve(participants.size());
  for (const std::string& id : participants) priors.push_back(pop.at(id).rating);

  TournamentResult result;
  result.ranking = ranking_from_values(values);
  result.posteriors = rank_update(priors, result.ranking, cfg);
  for (std::size_t i = 0; i < participants.size(); ++i)
    pop.at(participants[i]).rating = result.posteriors[i];
  return result;
}

inline nlohmann::json node_to_json(const PromptNode& n) {
  return nlohmann::json{{"id", n.id},
                        {"text", n.text},
                        {"parents", n.parent_ids},
                        {"origin", origin_name(n.origin)},
                        {"birth_iteration", n.birth_iteration},
                        {"mu", n.rating.mu},
                        {"sigma", n.rating.sigma}};
}

inline PromptNode node_from_json(const nlohmann::json& j) {
  try {
    PromptNode n;
    n.id = j.at("id").get<std::string>();
    n.text = j.at("text").get<std::string>();
    n.parent_ids = j.at("parents").get<std::vector<std::string>>();
    n.origin = origin_from_name(j.at("origin").get<std::string>());
    n.birth_iteration = j.at("birth_iteration").get<int>();
    n.rating = {j.at("mu").get<double>(), j.at("sigma").get<double>()};
    return n;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("prompt node: ") + e.what());
  }
}

inline nlohmann::json export_tree_json(const Population& pop) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const PromptNode& n : pop.nodes()) nodes.push_back(node_to_json(n));
  return nlohmann::json{{"window_size", pop.window_size()},
                        {"nodes", std::move(nodes)}};
}

inline Population import_tree_json(const nlohmann::json& j) {
  try {
    Population pop(j.at("window_size").get<int>());
    for (const auto& nj : j.at("nodes")) pop.append(node_from_json(nj));
    return pop;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("population: ") + e.what());
  }
}

inline std::string export_tree_dot(const Population& pop) {
  std::string out = "digraph espl {\n  rankdir=TB;\n  node [shape=box];\n";
  char buf[256];
  for (const PromptNode& n : pop.nodes()) {
    std::snprintf(buf, sizeof(buf),
                  "  \"%s\" [label=\"%s\\n%s it=%d\\nmu=%.2f sigma=%.2f\"];\n",
                  n.id.c_str(), n.id.c_str(), origin_name(n.origin),
                  n.birth_iteration, n.rating.mu, n.rating.sigma);
    out += buf;
    for (const std::string& p : n.parent_ids) {
      std::snprintf(buf, sizeof(buf), "  \"%s\" -> \"%s\" [label=\"%s\"];\n",
                    p.c_str(), n.id.c_str(), origin_name(n.origin));
      out += buf;
    }
  }
  out += "}\n";
  return out;
}

} // namespace espl
