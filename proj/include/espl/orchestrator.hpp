#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "espl/config.hpp"
#include "espl/genetic.hpp"
#include "espl/http.hpp"
#include "espl/policy.hpp"
#include "espl/population.hpp"
#include "espl/reflect.hpp"
#include "espl/rng.hpp"
#include "espl/rollout.hpp"
#include "espl/synthetic.hpp"

// The main training loop: selection -> rollouts -> RL step -> tournament
// rating update -> mutation -> optional crossover, with deterministic
// derived RNG streams, JSON-lines metrics sufficient to re-derive every
// tournament offline, and atomic checkpoints.

namespace espl {

class MetricsSink {
public:
  virtual ~MetricsSink() = default;
  virtual void write(const nlohmann::json& record) = 0;
};

class JsonlFileSink final : public MetricsSink {
public:
  explicit JsonlFileSink(const std::string& path) : out_(path) {
    if (!out_) throw IoError("cannot open metrics file '" + path + "'");
  }
  void write(const nlohmann::json& record) override {
    out_ << record.dump() << '\n';
    out_.flush();
  }

private:
  std::ofstream out_;
};

class MemorySink final : public MetricsSink {
public:
  void write(const nlohmann::json& record) override { records.push_back(record); }
  std::vector<nlohmann::json> records;
};

struct TrainerState {
  EsplConfig cfg;
  std::string cfg_hash;
  std::vector<Problem> problems;
  std::unique_ptr<PolicyFixture> fixture;   // synthetic env only
  std::unique_ptr<ToyPolicy> policy;        // synthetic env only
  std::unique_ptr<ChatTransport> transport; // when anything speaks http
  std::unique_ptr<Reflector> reflector;
  std::unique_ptr<Sampler> sampler;
  Population pop{1};
  int iteration = 0;
  std::uint64_t node_seq = 0;
  double early_stop_best = -1.0;
  int early_stop_since = 0;

  std::string next_node_id() { return "n" + std::to_string(node_seq++); }
};

namespace detail {

inline void init_backends(TrainerState& s) {
  const EsplConfig& cfg = s.cfg;
  ReflectorConfig rcfg = cfg.reflect;
  rcfg.k_ops = cfg.genetic.k_ops;
  if (!rcfg.templates_dir.empty())
    rcfg.templates = load_reflection_templates(rcfg.templates_dir);

  if (cfg.env == "http" || rcfg.backend == ReflectorConfig::Backend::http)
    s.transport = std::make_unique<HttpChatTransport>(rcfg);

  if (cfg.env == "synthetic") {
    s.fixture = std::make_unique<PolicyFixture>(PolicyFixture::load(cfg.fixture_path));
    s.policy = std::make_unique<ToyPolicy>(s.fixture.get());
    s.sampler = std::make_unique<SyntheticEnv>(*s.fixture, s.policy.get());
    for (const Problem& p : s.problems)
      if (p.grader_key == "synthetic_bernoulli") s.fixture->problem_index(p.id);
  } else {
    s.sampler =
        std::make_unique<HttpSampler>(*s.transport, rcfg.model, rcfg.temperature);
  }

  if (rcfg.backend == ReflectorConfig::Backend::mock)
    s.reflector = std::make_unique<MockReflector>(rcfg);
  else
    s.reflector = std::make_unique<ChatReflector>(*s.transport, rcfg);
}

} // namespace detail

inline TrainerState init_state(EsplConfig cfg) {
  cfg.validate();
  TrainerState s;
  s.cfg = std::move(cfg);
  s.cfg_hash = config_hash(s.cfg);
  s.problems = load_problems_jsonl(s.cfg.problems_path);
  if (s.problems.empty()) throw ConfigError("problem set is empty");
  detail::init_backends(s);

  s.pop = Population(s.cfg.window_k);
  PromptNode root;
  root.id = s.next_node_id();
  root.text = s.cfg.root_prompt;
  root.origin = Origin::root;
  root.birth_iteration = 0;
  root.rating = s.cfg.rating.initial();
  s.pop.append(std::move(root));
  return s;
}

// Per-prompt tournament fitness: the problem-batch mean of V[i][b].
inline std::vector<double> aggregate_tournament_values(const RolloutBatch& batch) {
  std::vector<double> v(batch.values.size(), 0.0);
  for (std::size_t i = 0; i < batch.values.size(); ++i) {
    double sum = 0.0;
    for (double x : batch.values[i]) sum += x;
    v[i] = sum / batch.values[i].size();
  }
  return v;
}

// One full loop iteration. Returns the metrics record; the record stream is
// sufficient to recompute every rating offline (see replay_ratings).
inline nlohmann::json run_iteration(TrainerState& s) {
  const EsplConfig& cfg = s.cfg;
  const std::uint64_t iter = static_cast<std::uint64_t>(s.iteration);
  nlohmann::json rec{{"type", "iteration"}, {"iteration", s.iteration}};
  std::vector<std::string> phases;

  // Selection from the sliding window.
  RngStream sel_rng = derive_stream(cfg.seed, {stream::kSelection, iter});
  std::vector<const PromptNode*> selected = select(s.pop, cfg.selection, sel_rng);
  std::vector<PromptNode> participants;
  std::vector<PromptRef> prompt_refs;
  std::vector<std::string> participant_ids;
  for (const PromptNode* n : selected) {
    participants.push_back(*n);
    prompt_refs.push_back({n->id, n->text});
    participant_ids.push_back(n->id);
  }
  phases.push_back("select");

  // Problem batch: distinct problems when the set is large enough.
  RngStream prob_rng = derive_stream(cfg.seed, {stream::kProblemBatch, iter});
  std::vector<Problem> batch_problems;
  if (s.problems.size() >= static_cast<std::size_t>(cfg.batch_problems)) {
    std::vector<std::size_t> idx(s.problems.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    prob_rng.shuffle(idx);
    for (int b = 0; b < cfg.batch_problems; ++b)
      batch_problems.push_back(s.problems[idx[b]]);
  } else {
    for (int b = 0; b < cfg.batch_problems; ++b)
      batch_problems.push_back(s.problems[prob_rng.below(s.problems.size())]);
  }

  // Rollouts, all-or-nothing, with a bounded retry for transport faults.
  RolloutBatch batch;
  for (int attempt = 0;; ++attempt) {
    try {
      batch = sample_batch(*s.sampler, prompt_refs, batch_problems,
                           cfg.rl.group_size, cfg.seed, iter);
      break;
    } catch (const TransportError& e) {
      if (attempt >= cfg.max_iteration_retries)
        throw Error("iteration " + std::to_string(s.iteration) +
                    " aborted after " + std::to_string(attempt + 1) +
                    " attempts: " + e.what());
    }
  }
  phases.push_back("rollout");

  // RL update before any rating or genetic work.
  if (cfg.rl_enabled && s.policy) {
    step(*s.policy, batch, cfg.rl);
    phases.push_back("rl_update");
  }

  std::vector<double> values = aggregate_tournament_values(batch);
  rec["participants"] = participant_ids;
  rec["values"] = values;
  double mean_reward = 0.0;
  for (double v : values) mean_reward += v;
  mean_reward /= values.size();
  rec["mean_batch_reward"] = mean_reward;

  // Tournament rating update (needs at least two players).
  if (participants.size() >= 2) {
    TournamentResult result =
        record_tournament(s.pop, participant_ids, values, cfg.rating);
    rec["ranking"] = {{"order", result.ranking.order}, {"ties", result.ranking.ties}};
    phases.push_back("rating_update");
    for (PromptNode& p : participants) p.rating = s.pop.at(p.id).rating;
  } else {
    rec["ranking"] = nullptr;
  }

  nlohmann::json ratings = nlohmann::json::array();
  for (const PromptNode& p : participants)
    ratings.push_back(
        {{"id", p.id}, {"mu", p.rating.mu}, {"sigma", p.rating.sigma}});
  rec["ratings"] = std::move(ratings);

  // Genetic operators, in loop order: mutation then optional crossover.
  nlohmann::json children = nlohmann::json::array();
  bool gate_fired = false;
  if (cfg.evolution_enabled) {
    GeneticContext ctx{s.iteration, [&s] { return s.next_node_id(); }};
    MutationOutcome mut = mutate(batch, participants, *s.reflector, cfg.genetic, ctx);
    phases.push_back("mutate");

    RngStream gate_rng = derive_stream(cfg.seed, {stream::kCrossoverGate, iter});
    CrossoverOutcome cross = maybe_crossover(batch, participants, *s.reflector,
                                             cfg.genetic, ctx, gate_rng);
    phases.push_back("crossover");
    gate_fired = cross.gate_fired;

    for (std::optional<PromptNode>* childp : {&mut.child, &cross.child}) {
      if (!childp->has_value()) continue;
      const PromptNode& c = **childp;
      children.push_back({{"id", c.id},
                          {"origin", origin_name(c.origin)},
                          {"parents", c.parent_ids},
                          {"mu", c.rating.mu},
                          {"sigma", c.rating.sigma}});
      s.pop.append(std::move(**childp));
    }
    if (!mut.child && !mut.skip_reason.empty()) rec["mutation_skip"] = mut.skip_reason;
    if (!cross.child && !cross.skip_reason.empty())
      rec["crossover_skip"] = cross.skip_reason;
  }
  rec["children"] = std::move(children);
  rec["crossover_gate"] = gate_fired;
  rec["phases"] = phases;

  ++s.iteration;
  return rec;
}

// Best node by posterior mean; earliest appended wins ties.
inline const PromptNode& best_by_mu(const Population& pop) {
  const PromptNode* best = &pop.nodes().front();
  for (const PromptNode& n : pop.nodes())
    if (n.rating.mu > best->rating.mu) best = &n;
  return *best;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json save_checkpoint(const TrainerState& s) {
  nlohmann::json cfg_obj = nlohmann::json::object();
  for (const auto& [k, v] : config_to_kv(s.cfg)) cfg_obj[k] = v;
  return nlohmann::json{
      {"version", 1},
      {"config_hash", s.cfg_hash},
      {"config", std::move(cfg_obj)},
      {"iteration", s.iteration},
      {"node_seq", s.node_seq},
      {"early_stop", {{"best", s.early_stop_best}, {"since", s.early_stop_since}}},
      {"population", export_tree_json(s.pop)},
      {"policy", s.policy ? s.policy->to_json() : nlohmann::json(nullptr)}};
}

inline void write_checkpoint_atomic(const std::string& path,
                                    const nlohmann::json& checkpoint) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
    out << checkpoint.dump(2) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline TrainerState load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1)
      throw ConfigError("checkpoint: unsupported version");
    std::vector<std::pair<std::string, std::string>> kv;
    for (const auto& [k, v] : j.at("config").items())
      kv.emplace_back(k, v.get<std::string>());
    EsplConfig cfg = config_from_kv(kv);
    if (config_hash(cfg) != j.at("config_hash").get<std::string>())
      throw ConfigError("checkpoint: config hash mismatch (edited checkpoint?)");

    TrainerState s;
    s.cfg = std::move(cfg);
    s.cfg.validate();
    s.cfg_hash = j.at("config_hash").get<std::string>();
    s.problems = load_problems_jsonl(s.cfg.problems_path);
    detail::init_backends(s);

    s.pop = import_tree_json(j.at("population"));
    s.iteration = j.at("iteration").get<int>();
    s.node_seq = j.at("node_seq").get<std::uint64_t>();
    s.early_stop_best = j.at("early_stop").at("best").get<double>();
    s.early_stop_since = j.at("early_stop").at("since").get<int>();
    if (!j.at("policy").is_null()) {
      if (!s.policy) throw ConfigError("checkpoint: policy present but env is http");
      s.policy->restore(j.at("policy"));
    } else if (s.policy) {
      throw ConfigError("checkpoint: synthetic env but no policy weights");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

inline TrainerState load_checkpoint_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ParseError("checkpoint: invalid JSON in '" + path + "'");
  return load_checkpoint(j);
}

// ---------------------------------------------------------------------------
// Full runs

struct RunResult {
  TrainerState state;
  double final_expected_reward = std::nan("");
  std::string best_prompt_id;
  bool stopped_early = false;
};

inline RunResult run_loop(TrainerState s, MetricsSink* sink,
                          const std::string& checkpoint_dir = {}) {
  auto checkpoint_path = [&](const std::string& name) {
    return (std::filesystem::path(checkpoint_dir) / name).string();
  };
  if (!checkpoint_dir.empty())
    std::filesystem::create_directories(checkpoint_dir);

  if (sink && s.iteration == 0) {
    nlohmann::json cfg_obj = nlohmann::json::object();
    for (const auto& [k, v] : config_to_kv(s.cfg)) cfg_obj[k] = v;
    sink->write({{"type", "config"},
                 {"config", std::move(cfg_obj)},
                 {"config_hash", s.cfg_hash},
                 {"root_id", s.pop.nodes().front().id}});
  }

  RunResult result;
  while (s.iteration < s.cfg.iterations) {
    nlohmann::json rec = run_iteration(s);
    double mean_reward = rec.at("mean_batch_reward").get<double>();
    if (sink) sink->write(rec);

    bool plateaued = false;
    if (s.cfg.early_stop_patience > 0) {
      if (mean_reward > s.early_stop_best + s.cfg.early_stop_min_delta) {
        s.early_stop_best = mean_reward;
        s.early_stop_since = 0;
      } else {
        plateaued = ++s.early_stop_since >= s.cfg.early_stop_patience;
      }
    }

    if (!checkpoint_dir.empty() && s.cfg.checkpoint_interval > 0 &&
        s.iteration % s.cfg.checkpoint_interval == 0) {
      char name[64];
      std::snprintf(name, sizeof(name), "checkpoint_%06d.json", s.iteration);
      write_checkpoint_atomic(checkpoint_path(name), save_checkpoint(s));
    }

    if (plateaued) {
      result.stopped_early = true;
      break;
    }
  }

  const PromptNode& best = best_by_mu(s.pop);
  result.best_prompt_id = best.id;
  if (s.fixture)
    result.final_expected_reward =
        expected_reward(*s.fixture, s.policy.get(), best.text);
  if (sink) {
    nlohmann::json final_rec{{"type", "final"},
                             {"iteration", s.iteration},
                             {"best_prompt_id", result.best_prompt_id},
                             {"stopped_early", result.stopped_early}};
    if (s.fixture) final_rec["expected_reward"] = result.final_expected_reward;
    sink->write(final_rec);
  }
  if (!checkpoint_dir.empty())
    write_checkpoint_atomic(checkpoint_path("checkpoint_final.json"),
                            save_checkpoint(s));
  result.state = std::move(s);
  return result;
}

inline RunResult run(const EsplConfig& cfg, MetricsSink* sink,
                     const std::string& checkpoint_dir = {}) {
  return run_loop(init_state(cfg), sink, checkpoint_dir);
}

// ---------------------------------------------------------------------------
// Offline rating replay: recompute every rating in the run from nothing but
// the metrics log. Used to audit tournaments after the fact.

inline std::map<std::string, Rating> replay_ratings(std::istream& metrics) {
  std::map<std::string, Rating> ratings;
  RatingConfig rating_cfg;
  GeneticConfig genetic_cfg;
  bool saw_config = false;

  std::string line;
  while (std::getline(metrics, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
    if (rec.is_discarded()) throw ParseError("metrics: invalid JSON line");
    const std::string type = rec.value("type", "");

    if (type == "config") {
      std::vector<std::pair<std::string, std::string>> kv;
      for (const auto& [k, v] : rec.at("config").items())
        kv.emplace_back(k, v.get<std::string>());
      EsplConfig cfg = config_from_kv(kv);
      rating_cfg = cfg.rating;
      genetic_cfg = cfg.genetic;
      ratings[rec.at("root_id").get<std::string>()] = rating_cfg.initial();
      saw_config = true;
      continue;
    }
    if (type != "iteration") continue;
    if (!saw_config) throw ParseError("metrics: missing config record");

    const auto participants = rec.at("participants").get<std::vector<std::string>>();
    if (!rec.at("ranking").is_null()) {
      Ranking ranking;
      ranking.order = rec["ranking"].at("order").get<std::vector<int>>();
      ranking.ties = rec["ranking"].at("ties").get<std::vector<int>>();
      std::vector<Rating> priors;
      for (const std::string& id : participants) {
        auto it = ratings.find(id);
        if (it == ratings.end())
          throw ParseError("metrics: unknown participant '" + id + "'");
        priors.push_back(it->second);
      }
      std::vector<Rating> post = rank_update(priors, ranking, rating_cfg);
      for (std::size_t i = 0; i < participants.size(); ++i)
        ratings[participants[i]] = post[i];
    }

    for (const auto& child : rec.at("children")) {
      const std::string id = child.at("id").get<std::string>();
      const std::string origin = child.at("origin").get<std::string>();
      if (origin == "mutation") {
        const auto parents = child.at("parents").get<std::vector<std::string>>();
        ratings[id] = genetic_cfg.child_rating(ratings.at(parents.at(0)));
      } else if (origin == "crossover") {
        std::vector<Rating> parent_ratings;
        for (const std::string& pid : participants)
          parent_ratings.push_back(ratings.at(pid));
        ratings[id] =
            crossover_fusion_rating(parent_ratings, genetic_cfg.delta_sigma);
      } else {
        throw ParseError("metrics: unexpected child origin '" + origin + "'");
      }
    }
  }
  return ratings;
}

} // namespace espl
