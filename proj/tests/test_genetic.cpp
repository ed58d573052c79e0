#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "espl/genetic.hpp"
#include "espl/reflect.hpp"

using namespace espl;
using Catch::Approx;

namespace {

Problem hinted(const std::string& id, const std::string& hints) {
  return {id, "Task " + id + ". [hints: " + hints + "]", "synthetic_bernoulli",
          nlohmann::json::object()};
}

PromptNode participant(const std::string& id, const std::string& text, Rating r) {
  PromptNode n;
  n.id = id;
  n.text = text;
  n.origin = Origin::root;
  n.birth_iteration = 0;
  n.rating = r;
  return n;
}

// Hand-built batch: values matrix plus enough trajectories for the groups.
RolloutBatch make_batch(std::vector<PromptNode>& nodes,
                        std::vector<Problem> problems,
                        std::vector<std::vector<double>> values, int n = 5) {
  RolloutBatch batch;
  for (const PromptNode& p : nodes) batch.prompts.push_back({p.id, p.text});
  batch.problems = std::move(problems);
  batch.n = n;
  batch.values = std::move(values);
  for (std::size_t i = 0; i < batch.prompts.size(); ++i)
    for (std::size_t b = 0; b < batch.problems.size(); ++b) {
      int successes = static_cast<int>(batch.values[i][b] * n + 0.5);
      for (int j = 0; j < n; ++j)
        batch.trajectories.push_back({batch.prompts[i].id, batch.problems[b].id, 0,
                                      "", j < successes ? 1.0 : 0.0});
    }
  return batch;
}

GeneticContext context(int iteration = 3) {
  static int counter; // fresh ids per call site via the lambda below
  counter = 100;
  return {iteration, [] { return "c" + std::to_string(counter++); }};
}

// Counts which (problem) indices each stage was asked about.
class CountingReflector final : public Reflector {
public:
  MockReflector inner;
  std::set<std::string> summarized_problems;
  int aggregate_calls = 0;

  std::vector<TrajectorySummary>
  summarize(const PromptRef& p, const Problem& x,
            const std::vector<const Trajectory*>& r) override {
    summarized_problems.insert(x.id);
    return inner.summarize(p, x, r);
  }
  ReflectionLesson critique(const PromptRef& p, const Problem& x,
                            const std::vector<TrajectorySummary>& s) override {
    return inner.critique(p, x, s);
  }
  EditScript aggregate(const PromptRef& p,
                       const std::vector<ReflectionLesson>& l) override {
    ++aggregate_calls;
    return inner.aggregate(p, l);
  }
  std::optional<EditScript>
  crossover(const PromptRef& p, const std::vector<CrossoverEvidence>& e) override {
    return inner.crossover(p, e);
  }
};

class FailingReflector final : public Reflector {
public:
  std::vector<TrajectorySummary>
  summarize(const PromptRef&, const Problem&,
            const std::vector<const Trajectory*>&) override {
    throw TransportError("reflector offline");
  }
  ReflectionLesson critique(const PromptRef&, const Problem&,
                            const std::vector<TrajectorySummary>&) override {
    throw TransportError("reflector offline");
  }
  EditScript aggregate(const PromptRef&,
                       const std::vector<ReflectionLesson>&) override {
    throw TransportError("reflector offline");
  }
  std::optional<EditScript>
  crossover(const PromptRef&, const std::vector<CrossoverEvidence>&) override {
    throw TransportError("reflector offline");
  }
};

} // namespace

TEST_CASE("mutation skips when every value is saturated") {
  std::vector<PromptNode> nodes{participant("n0", "1. base", {25.0, 8.0})};
  RolloutBatch batch = make_batch(nodes, {hinted("p0", "tok-a")}, {{1.0}});
  MockReflector mock;
  MutationOutcome out = mutate(batch, nodes, mock, {}, context());
  CHECK_FALSE(out.child.has_value());
  CHECK(out.skip_reason == "no reflection-eligible problems");
}

TEST_CASE("mutation edits the V-argmax parent and initializes its rating") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. unrelated principle.", {26.0, 7.0}),
      participant("n1", "1. another baseline.", {24.0, 6.0})};
  // Row sums: n0 -> 0.4, n1 -> 1.2: the parent must be n1 even though n0
  // has the higher rating.
  RolloutBatch batch = make_batch(
      nodes, {hinted("p0", "missing-tok"), hinted("p1", "present-tok")},
      {{0.2, 0.2}, {0.6, 0.6}});
  MockReflector mock;
  GeneticConfig cfg;
  MutationOutcome out = mutate(batch, nodes, mock, cfg, context(9));
  REQUIRE(out.child.has_value());
  CHECK(out.child->parent_ids == std::vector<std::string>{"n1"});
  CHECK(out.child->origin == Origin::mutation);
  CHECK(out.child->birth_iteration == 10);
  CHECK(out.child->text.find("missing-tok") != std::string::npos);
  CHECK(out.child->rating.mu == 24.0);
  CHECK(out.child->rating.sigma == Approx(std::sqrt(36.0 + 1.0)).epsilon(1e-12));
}

TEST_CASE("the additive child-sigma mode is available behind the config flag") {
  std::vector<PromptNode> nodes{participant("n0", "1. base.", {25.0, 6.0})};
  RolloutBatch batch = make_batch(nodes, {hinted("p0", "tok-z")}, {{0.4}});
  MockReflector mock;
  GeneticConfig cfg;
  cfg.child_sigma_mode = ChildSigmaMode::additive;
  MutationOutcome out = mutate(batch, nodes, mock, cfg, context());
  REQUIRE(out.child.has_value());
  CHECK(out.child->rating.sigma == Approx(7.0));
}

TEST_CASE("reflection is never invoked for saturated problems") {
  std::vector<PromptNode> nodes{participant("n0", "1. base.", {25.0, 8.0})};
  RolloutBatch batch = make_batch(
      nodes, {hinted("p0", "a"), hinted("p1", "b"), hinted("p2", "c")},
      {{0.0, 0.6, 1.0}});
  CountingReflector counting;
  mutate(batch, nodes, counting, {}, context());
  CHECK(counting.summarized_problems == std::set<std::string>{"p1"});
  CHECK(counting.aggregate_calls == 1);
}

TEST_CASE("reflection failures degrade to no child") {
  std::vector<PromptNode> nodes{participant("n0", "1. base.", {25.0, 8.0})};
  RolloutBatch batch = make_batch(nodes, {hinted("p0", "tok-q")}, {{0.4}});
  FailingReflector failing;
  MutationOutcome out = mutate(batch, nodes, failing, {}, context());
  CHECK_FALSE(out.child.has_value());
  CHECK(out.skip_reason.find("reflector offline") != std::string::npos);
}

TEST_CASE("a fully covered prompt produces no mutation child") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. Apply the tok-a technique always.", {25.0, 8.0})};
  RolloutBatch batch = make_batch(nodes, {hinted("p0", "tok-a")}, {{0.4}});
  MockReflector mock;
  MutationOutcome out = mutate(batch, nodes, mock, {}, context());
  CHECK_FALSE(out.child.has_value());
  CHECK(out.skip_reason == "aggregate produced no edits");
}

TEST_CASE("crossover honors its probability gate") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. alpha.", {25.0, 8.0}),
      participant("n1", "1. beta.", {25.0, 8.0})};
  RolloutBatch batch =
      make_batch(nodes, {hinted("p0", "a"), hinted("p1", "b")}, {{1, 0}, {0, 1}});
  MockReflector mock;

  GeneticConfig off;
  off.p_crossover = 0.0;
  int fired = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) {
    RngStream rng = derive_stream(i, {stream::kTest, 40});
    CrossoverOutcome out = maybe_crossover(batch, nodes, mock, off, context(), rng);
    fired += out.gate_fired;
    CHECK_FALSE(out.child.has_value());
  }
  CHECK(fired == 0);

  GeneticConfig p20;
  int gates = 0;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    RngStream rng = derive_stream(i, {stream::kTest, 41});
    gates += maybe_crossover(batch, nodes, mock, p20, context(), rng).gate_fired;
  }
  // 99% binomial interval around 200 of 1000 at p = 0.2.
  CHECK(gates > 167);
  CHECK(gates < 233);
}

TEST_CASE("crossover recombines winners into the top prompt") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. Use tok-a on hard sums.", {26.0, 4.0}),
      participant("n1", "1. Use tok-b on counting.", {22.0, 6.0}),
      participant("n2", "1. Nothing special.", {24.0, 5.0})};
  // n0 wins p0, n1 wins p1; n2 wins nothing. Top row sum is n0.
  RolloutBatch batch = make_batch(
      nodes, {hinted("p0", "tok-a"), hinted("p1", "tok-b")},
      {{0.8, 0.4}, {0.2, 0.6}, {0.2, 0.2}});
  MockReflector mock;
  GeneticConfig cfg;
  cfg.p_crossover = 1.0;
  RngStream rng = derive_stream(5, {stream::kTest, 42});
  CrossoverOutcome out = maybe_crossover(batch, nodes, mock, cfg, context(6), rng);
  REQUIRE(out.child.has_value());
  CHECK(out.gate_fired);
  CHECK(out.child->origin == Origin::crossover);
  CHECK(out.child->birth_iteration == 7);
  // Child carries both parents' distinguishing principles.
  CHECK(out.child->text.find("tok-a") != std::string::npos);
  CHECK(out.child->text.find("tok-b") != std::string::npos);
  // Tree parents: winners plus the top prompt (already a winner here).
  CHECK(out.child->parent_ids == std::vector<std::string>{"n0", "n1"});
  // Rating fuses ALL participants, not only the tree parents.
  Rating expected = crossover_fusion_rating(
      {nodes[0].rating, nodes[1].rating, nodes[2].rating}, cfg.delta_sigma);
  CHECK(out.child->rating.mu == Approx(expected.mu).margin(1e-12));
  CHECK(out.child->rating.sigma == Approx(expected.sigma).margin(1e-12));
}

TEST_CASE("crossover skips without two distinct winners") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. a.", {25.0, 8.0}),
      participant("n1", "1. b.", {25.0, 8.0})};
  RolloutBatch batch = make_batch(
      nodes, {hinted("p0", "x"), hinted("p1", "y")}, {{0.8, 0.8}, {0.2, 0.2}});
  MockReflector mock;
  GeneticConfig cfg;
  cfg.p_crossover = 1.0;
  RngStream rng = derive_stream(6, {stream::kTest, 43});
  CrossoverOutcome out = maybe_crossover(batch, nodes, mock, cfg, context(), rng);
  CHECK(out.gate_fired);
  CHECK_FALSE(out.child.has_value());
  CHECK(out.skip_reason == "fewer than two distinct winners");
}

TEST_CASE("crossover includes a winless top prompt among the parents") {
  std::vector<PromptNode> nodes{
      participant("n0", "1. Use tok-a.", {25.0, 8.0}),
      participant("n1", "1. Use tok-b.", {25.0, 8.0}),
      participant("n2", "1. Steady everywhere.", {25.0, 8.0})};
  // n2 has the best row sum but wins no single column.
  RolloutBatch batch = make_batch(
      nodes, {hinted("p0", "tok-a"), hinted("p1", "tok-b")},
      {{0.9, 0.0}, {0.0, 0.9}, {0.5, 0.5}});
  MockReflector mock;
  GeneticConfig cfg;
  cfg.p_crossover = 1.0;
  RngStream rng = derive_stream(7, {stream::kTest, 44});
  CrossoverOutcome out = maybe_crossover(batch, nodes, mock, cfg, context(), rng);
  REQUIRE(out.child.has_value());
  CHECK(out.child->parent_ids == std::vector<std::string>{"n0", "n1", "n2"});
}
