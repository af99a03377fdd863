#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace kgedit::kg {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

// Names in first-appearance order; id == position.
class Vocabulary {
 public:
  std::uint32_t add(std::string_view name);
  std::optional<std::uint32_t> find(std::string_view name) const;
  std::uint32_t id(std::string_view name) const;  // throws IndexError
  const std::string& name(std::uint32_t id) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> index_;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;

  friend auto operator<=>(const Triple&, const Triple&) = default;
};

struct TripleHash {
  std::size_t operator()(const Triple& t) const noexcept {
    std::uint64_t h = t.head;
    h = h * 0x9E3779B97F4A7C15ULL + t.relation;
    h = h * 0x9E3779B97F4A7C15ULL + t.tail;
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

// Which slot of a triple is missing: (?, r, t) is a head query.
enum class Direction : std::uint8_t { head_query, tail_query };

std::string_view to_string(Direction d);
Direction parse_direction(std::string_view text);

// Known entity + relation + the missing slot.
struct QueryKey {
  Direction direction = Direction::tail_query;
  EntityId known = 0;
  RelationId relation = 0;

  Triple complete(EntityId answer) const;
  friend auto operator<=>(const QueryKey&, const QueryKey&) = default;
};

struct QueryKeyHash {
  std::size_t operator()(const QueryKey& q) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(q.direction);
    h = h * 0x9E3779B97F4A7C15ULL + q.known;
    h = h * 0x9E3779B97F4A7C15ULL + q.relation;
    return static_cast<std::size_t>(h ^ (h >> 29));
  }
};

// A fact asked in one direction; the gold answer is the missing slot.
struct Probe {
  Triple triple;
  Direction direction = Direction::tail_query;

  QueryKey key() const;
  EntityId gold() const { return direction == Direction::tail_query ? triple.tail : triple.head; }
  friend auto operator<=>(const Probe&, const Probe&) = default;
};

// (known, relation) query whose answer should become `target`. `old` is the
// entity the model currently answers with (absent for ADD requests).
struct EditRequest {
  Direction direction = Direction::tail_query;
  EntityId known = 0;
  RelationId relation = 0;
  std::optional<EntityId> old;
  EntityId target = 0;

  QueryKey key() const { return {direction, known, relation}; }
  Triple target_triple() const { return key().complete(target); }
  std::optional<Triple> old_triple() const;
  Probe target_probe() const { return {target_triple(), direction}; }
  friend bool operator==(const EditRequest&, const EditRequest&) = default;
};

class Graph {
 public:
  Vocabulary entities;
  Vocabulary relations;

  // False if the triple is already present. Ids must be in range.
  bool insert(const Triple& t);
  bool contains(const Triple& t) const { return set_.count(t) > 0; }
  const std::vector<Triple>& triples() const { return triples_; }
  std::size_t size() const { return triples_.size(); }

  // Every entity completing `q` to a stored triple, ascending by id.
  std::vector<EntityId> answers(const QueryKey& q) const;

  // A graph with this graph's vocabularies and the given triples.
  Graph with_triples(std::span<const Triple> triples) const;

 private:
  std::vector<Triple> triples_;
  std::unordered_set<Triple, TripleHash> set_;
  std::unordered_map<QueryKey, std::vector<EntityId>, QueryKeyHash> answers_;
};

struct LoadReport {
  std::size_t lines = 0;
  std::size_t duplicates = 0;
};

// `head<TAB>relation<TAB>tail` per line, UTF-8. Vocabularies are built in
// first-appearance order; duplicate lines are dropped and counted.
Graph load_triples(const std::filesystem::path& path, LoadReport* report = nullptr);
Graph parse_triples(std::string_view text, LoadReport* report = nullptr);
std::string format_triples(const Graph& graph);

// `id<TAB>surface text` per line.
std::unordered_map<std::string, std::string> load_descriptions(const std::filesystem::path& path);

// ---- ranking ----------------------------------------------------------------

// Anything that assigns a score to every entity for a batch of queries.
class EntityScorer {
 public:
  virtual ~EntityScorer() = default;
  virtual std::size_t num_entities() const = 0;
  // Row-major (queries.size() x num_entities()); higher is better.
  virtual std::vector<double> score(std::span<const QueryKey> queries) const = 0;
};

// 1 + #{e : s_e > s_gold} + #{e < gold : s_e == s_gold}. Ties therefore go to
// the lower entity id.
std::size_t rank_of(std::span<const double> scores, EntityId gold);

struct RankRecord {
  std::size_t item = 0;
  std::size_t rank = 0;
};

std::vector<std::size_t> rank_probes(const EntityScorer& scorer, std::span<const Probe> probes,
                                     std::size_t batch_size = 256);

// Highest-scoring entity (lowest id on ties).
EntityId top1(std::span<const double> scores);

// ---- dataset construction ---------------------------------------------------------

// Both directions of every triple, in triple order (tail query first).
std::vector<Probe> all_probes(const Graph& graph);

// ceil(fraction * num_entities).
std::size_t hardness_threshold(std::size_t num_entities, double fraction);

// Probes whose gold rank exceeds hardness_threshold(...).
std::vector<Probe> filter_hard(std::span<const Probe> candidates, const EntityScorer& scorer,
                               double fraction);
std::vector<Probe> filter_hard(const Graph& graph, const EntityScorer& scorer, double fraction);

struct CorruptionResult {
  std::vector<Triple> pretrain;
  std::vector<EditRequest> requests;
  std::size_t shortfall = 0;
};

// Samples candidate triples in seeded order; for each, picks one of its
// candidate slots uniformly and replaces the gold entity there with the
// model's best-scoring entity that does not complete a known triple. A triple
// whose gold is already the model's top-1 is skipped, as is a second request
// on an already-used query.
CorruptionResult corrupt_for_edit(const Graph& graph, const EntityScorer& scorer,
                                  std::span<const Probe> candidates, std::size_t n_corrupt,
                                  std::uint64_t seed);
CorruptionResult corrupt_for_edit(const Graph& graph, const EntityScorer& scorer,
                                  std::size_t n_corrupt, std::uint64_t seed);

// Queries and triples a locality reference set must avoid.
class Exclusions {
 public:
  static Exclusions from_requests(std::span<const EditRequest> requests);
  void add_request(const EditRequest& request);
  void add_probe(const Probe& probe);
  bool excludes(const Probe& probe) const;

 private:
  std::unordered_set<QueryKey, QueryKeyHash> queries_;
  std::unordered_set<Triple, TripleHash> triples_;
};

struct LTestResult {
  std::vector<Probe> probes;
  bool shortfall = false;  // fewer qualifying probes than requested
};

// Probes of `facts` ranked <= k by `scorer`, not excluded, seeded sample of
// at most `size` (size == 0 keeps every qualifying probe).
LTestResult build_ltest(const Graph& facts, const EntityScorer& scorer, std::size_t k,
                        std::size_t size, const Exclusions& exclusions, std::uint64_t seed);

enum class Task : std::uint8_t { edit, add };
std::string_view to_string(Task t);
Task parse_task(std::string_view text);

struct BundleMeta {
  Task task = Task::edit;
  std::string provenance;
  std::uint64_t seed = 0;
  double rank_threshold_fraction = 0.0;
  std::size_t rank_threshold = 0;
  std::size_t ltest_k = 3;
  double train_fraction = 0.5;
  double holdout_fraction = 0.0;
  std::string slot_policy = "uniform";
  std::size_t requested = 0;
  std::size_t shortfall = 0;
  std::size_t dropped_on_reassessment = 0;
  bool ltest_shortfall = false;
  // Indices into `train` whose entity never occurs in the pretrain facts.
  std::vector<std::size_t> strictly_inductive;

  friend bool operator==(const BundleMeta&, const BundleMeta&) = default;
};

// Pre-train / Train / Test / L-Test splits plus construction metadata.
struct DatasetBundle {
  Vocabulary entities;
  Vocabulary relations;
  std::vector<Triple> pretrain;
  std::vector<EditRequest> train;
  std::vector<EditRequest> test;
  std::vector<Probe> ltest;
  BundleMeta meta;

  Graph pretrain_graph() const;
  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

// Turns a pretrain fact set into the model that will be edited. The caller
// owns training; bundle construction only consumes the resulting scorer.
using RetrainHook = std::function<std::shared_ptr<const EntityScorer>(const Graph& pretrain)>;

struct EditBundleConfig {
  std::size_t n_corrupt = 100;
  double rank_threshold_fraction = 0.17;
  double train_fraction = 0.5;
  std::size_t ltest_k = 3;
  std::size_t ltest_size = 200;
  std::uint64_t seed = 0;
  std::string provenance;
};

// filter_hard -> corrupt_for_edit -> retrain hook -> reassessment (requests
// the retrained model already answers correctly are dropped) -> train/test
// split -> build_ltest under the retrained model. Without a hook the origin
// scorer stands in for the retrained one.
DatasetBundle build_edit_bundle(const Graph& graph, const EntityScorer& origin,
                                const EditBundleConfig& config, const RetrainHook& retrain = {});

struct AddBundleConfig {
  double holdout_fraction = 0.1;
  std::size_t ltest_k = 3;
  std::size_t ltest_size = 200;
  std::uint64_t seed = 0;
  std::string provenance;
};

// Holds out a seeded fraction of triples as ADD requests (one uniformly chosen
// slot each, no old entity); `train` trains the model on the rest. Requests the
// trained model already ranks first are dropped; the test split stays empty.
DatasetBundle build_add_bundle(const Graph& graph, const AddBundleConfig& config,
                               const RetrainHook& train);

inline constexpr int kBundleVersion = 1;

// Directory layout: manifest.json, entities.tsv, relations.tsv, pretrain.tsv,
// train.tsv, test.tsv, ltest.tsv. The manifest carries the version, metadata,
// split counts in Pre-train/Train/Test/L-Test order and a checksum per file.
void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

// ---- synthetic graphs -----------------------------------------------------------

struct SyntheticSpec {
  std::size_t entities = 200;
  std::size_t relations = 12;
  std::size_t triples = 3000;
  std::uint64_t seed = 7;
};

// Uniformly random distinct triples without self-loops over named entities
// e0000... and relations r00...; every entity appears at least once.
Graph synthesize_graph(const SyntheticSpec& spec);

}  // namespace kgedit::kg
