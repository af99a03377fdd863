#include "kgedit/kgdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include <json.hpp>

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/rng.hpp"

namespace kgedit::kg {

// ---- vocabulary / basic types ------------------------------------------------

std::uint32_t Vocabulary::add(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it != index_.end()) return it->second;
  const auto id = static_cast<std::uint32_t>(names_.size());
  names_.emplace_back(name);
  index_.emplace(names_.back(), id);
  return id;
}

std::optional<std::uint32_t> Vocabulary::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint32_t Vocabulary::id(std::string_view name) const {
  auto found = find(name);
  if (!found) throw IndexError("unknown name '" + std::string(name) + "'");
  return *found;
}

const std::string& Vocabulary::name(std::uint32_t id) const {
  if (id >= names_.size()) {
    throw IndexError("id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(names_.size()));
  }
  return names_[id];
}

std::string_view to_string(Direction d) {
  return d == Direction::head_query ? "head" : "tail";
}

Direction parse_direction(std::string_view text) {
  if (text == "head") return Direction::head_query;
  if (text == "tail") return Direction::tail_query;
  throw ParseError("unknown query direction '" + std::string(text) + "'");
}

Triple QueryKey::complete(EntityId answer) const {
  return direction == Direction::tail_query ? Triple{known, relation, answer}
                                            : Triple{answer, relation, known};
}

QueryKey Probe::key() const {
  return direction == Direction::tail_query
             ? QueryKey{direction, triple.head, triple.relation}
             : QueryKey{direction, triple.tail, triple.relation};
}

std::optional<Triple> EditRequest::old_triple() const {
  if (!old) return std::nullopt;
  return key().complete(*old);
}

std::string_view to_string(Task t) { return t == Task::edit ? "EDIT" : "ADD"; }

Task parse_task(std::string_view text) {
  if (text == "EDIT" || text == "edit") return Task::edit;
  if (text == "ADD" || text == "add") return Task::add;
  throw ParseError("unknown task '" + std::string(text) + "' (expected EDIT or ADD)");
}

// ---- graph ---------------------------------------------------------------------

bool Graph::insert(const Triple& t) {
  if (t.head >= entities.size() || t.tail >= entities.size() || t.relation >= relations.size()) {
    throw IndexError("triple ids out of range");
  }
  if (!set_.insert(t).second) return false;
  triples_.push_back(t);
  for (Direction d : {Direction::tail_query, Direction::head_query}) {
    const Probe p{t, d};
    auto& list = answers_[p.key()];
    list.insert(std::upper_bound(list.begin(), list.end(), p.gold()), p.gold());
  }
  return true;
}

std::vector<EntityId> Graph::answers(const QueryKey& q) const {
  auto it = answers_.find(q);
  return it == answers_.end() ? std::vector<EntityId>{} : it->second;
}

Graph Graph::with_triples(std::span<const Triple> triples) const {
  Graph g;
  g.entities = entities;
  g.relations = relations;
  for (const auto& t : triples) g.insert(t);
  return g;
}

Graph DatasetBundle::pretrain_graph() const {
  Graph g;
  g.entities = entities;
  g.relations = relations;
  for (const auto& t : pretrain) g.insert(t);
  return g;
}

// ---- ingestion -------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

// Calls fn(line_number, line) for every line; a final newline does not start
// an extra line, and a trailing '\r' is stripped.
template <typename Fn>
void for_each_line(std::string_view text, Fn fn) {
  std::size_t start = 0, number = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    fn(++number, line);
    start = end + 1;
  }
}

}  // namespace

Graph parse_triples(std::string_view text, LoadReport* report) {
  Graph g;
  LoadReport local;
  for_each_line(text, [&](std::size_t number, std::string_view line) {
    const auto fields = split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw ParseError("line " + std::to_string(number) +
                       ": expected head<TAB>relation<TAB>tail");
    }
    ++local.lines;
    const Triple t{g.entities.add(fields[0]), g.relations.add(fields[1]), g.entities.add(fields[2])};
    if (!g.insert(t)) ++local.duplicates;
  });
  if (g.size() == 0) throw ParseError("no triples found (empty graph)");
  if (report) *report = local;
  return g;
}

Graph load_triples(const std::filesystem::path& path, LoadReport* report) {
  return parse_triples(io::read_file(path), report);
}

std::string format_triples(const Graph& graph) {
  std::string out;
  for (const auto& t : graph.triples()) {
    out += graph.entities.name(t.head);
    out += '\t';
    out += graph.relations.name(t.relation);
    out += '\t';
    out += graph.entities.name(t.tail);
    out += '\n';
  }
  return out;
}

std::unordered_map<std::string, std::string> load_descriptions(const std::filesystem::path& path) {
  std::unordered_map<std::string, std::string> out;
  const std::string text = io::read_file(path);
  for_each_line(text, [&](std::size_t number, std::string_view line) {
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos || tab == 0) {
      throw ParseError(path.string() + " line " + std::to_string(number) +
                       ": expected id<TAB>text");
    }
    out.emplace(std::string(line.substr(0, tab)), std::string(line.substr(tab + 1)));
  });
  return out;
}

// ---- ranking -----------------------------------------------------------------------

std::size_t rank_of(std::span<const double> scores, EntityId gold) {
  if (gold >= scores.size()) {
    throw IndexError("gold entity " + std::to_string(gold) + " outside " +
                     std::to_string(scores.size()) + " candidates");
  }
  const double g = scores[gold];
  std::size_t rank = 1;
  for (std::size_t e = 0; e < scores.size(); ++e) {
    if (scores[e] > g || (scores[e] == g && e < gold)) ++rank;
  }
  return rank;
}

EntityId top1(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t e = 1; e < scores.size(); ++e) {
    if (scores[e] > scores[best]) best = e;
  }
  return static_cast<EntityId>(best);
}

std::vector<std::size_t> rank_probes(const EntityScorer& scorer, std::span<const Probe> probes,
                                     std::size_t batch_size) {
  std::vector<std::size_t> ranks;
  ranks.reserve(probes.size());
  const std::size_t n_ent = scorer.num_entities();
  for (std::size_t start = 0; start < probes.size(); start += batch_size) {
    const std::size_t end = std::min(probes.size(), start + batch_size);
    std::vector<QueryKey> keys;
    for (std::size_t i = start; i < end; ++i) keys.push_back(probes[i].key());
    const std::vector<double> scores = scorer.score(keys);
    for (std::size_t i = start; i < end; ++i) {
      ranks.push_back(rank_of(std::span(scores).subspan((i - start) * n_ent, n_ent),
                              probes[i].gold()));
    }
  }
  return ranks;
}

// ---- construction ---------------------------------------------------------------------

std::vector<Probe> all_probes(const Graph& graph) {
  std::vector<Probe> probes;
  probes.reserve(graph.size() * 2);
  for (const auto& t : graph.triples()) {
    probes.push_back({t, Direction::tail_query});
    probes.push_back({t, Direction::head_query});
  }
  return probes;
}

std::size_t hardness_threshold(std::size_t num_entities, double fraction) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(num_entities)));
}

std::vector<Probe> filter_hard(std::span<const Probe> candidates, const EntityScorer& scorer,
                               double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ContractError("filter_hard: rank threshold fraction must lie in [0, 1)");
  }
  const std::size_t threshold = hardness_threshold(scorer.num_entities(), fraction);
  const auto ranks = rank_probes(scorer, candidates);
  std::vector<Probe> out;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (ranks[i] > threshold) out.push_back(candidates[i]);
  }
  return out;
}

std::vector<Probe> filter_hard(const Graph& graph, const EntityScorer& scorer, double fraction) {
  const auto probes = all_probes(graph);
  return filter_hard(probes, scorer, fraction);
}

CorruptionResult corrupt_for_edit(const Graph& graph, const EntityScorer& scorer,
                                  std::span<const Probe> candidates, std::size_t n_corrupt,
                                  std::uint64_t seed) {
  CorruptionResult result;
  result.pretrain = graph.triples();
  if (n_corrupt == 0) return result;

  // Candidate slots grouped per triple, in first-appearance order.
  std::vector<Triple> order;
  std::map<Triple, std::vector<Direction>> slots;
  for (const auto& p : candidates) {
    if (!graph.contains(p.triple)) throw ContractError("corrupt_for_edit: candidate not in graph");
    auto& dirs = slots[p.triple];
    if (dirs.empty()) order.push_back(p.triple);
    if (std::find(dirs.begin(), dirs.end(), p.direction) == dirs.end()) dirs.push_back(p.direction);
  }
  Rng rng(seed);
  rng.shuffle(order);

  std::unordered_map<Triple, std::size_t, TripleHash> position;
  for (std::size_t i = 0; i < result.pretrain.size(); ++i) position[result.pretrain[i]] = i;

  std::unordered_set<QueryKey, QueryKeyHash> used;
  std::unordered_set<Triple, TripleHash> corrupted;
  const std::size_t n_ent = scorer.num_entities();
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < order.size() && result.requests.size() < n_corrupt;
       start += kChunk) {
    const std::size_t end = std::min(order.size(), start + kChunk);
    std::vector<Probe> chunk;
    std::vector<QueryKey> keys;
    for (std::size_t i = start; i < end; ++i) {
      const auto& dirs = slots[order[i]];
      chunk.push_back({order[i], dirs[rng.below(dirs.size())]});
      keys.push_back(chunk.back().key());
    }
    const std::vector<double> scores = scorer.score(keys);
    for (std::size_t c = 0; c < chunk.size() && result.requests.size() < n_corrupt; ++c) {
      const Probe& probe = chunk[c];
      const QueryKey key = probe.key();
      if (used.count(key)) continue;
      const auto row = std::span(scores).subspan(c * n_ent, n_ent);
      const EntityId gold = probe.gold();
      if (top1(row) == gold) continue;
      std::optional<EntityId> wrong;
      for (EntityId e = 0; e < n_ent; ++e) {
        if (e == gold) continue;
        const Triple t = key.complete(e);
        if (graph.contains(t) || corrupted.count(t)) continue;
        if (!wrong || row[e] > row[*wrong]) wrong = e;
      }
      if (!wrong) continue;
      const Triple replacement = key.complete(*wrong);
      result.pretrain[position.at(probe.triple)] = replacement;
      corrupted.insert(replacement);
      used.insert(key);
      result.requests.push_back({probe.direction, key.known, key.relation, *wrong, gold});
    }
  }
  result.shortfall = n_corrupt - result.requests.size();
  return result;
}

CorruptionResult corrupt_for_edit(const Graph& graph, const EntityScorer& scorer,
                                  std::size_t n_corrupt, std::uint64_t seed) {
  const auto probes = all_probes(graph);
  return corrupt_for_edit(graph, scorer, probes, n_corrupt, seed);
}

Exclusions Exclusions::from_requests(std::span<const EditRequest> requests) {
  Exclusions ex;
  for (const auto& r : requests) ex.add_request(r);
  return ex;
}

void Exclusions::add_request(const EditRequest& request) {
  queries_.insert(request.key());
  triples_.insert(request.target_triple());
  if (auto old = request.old_triple()) triples_.insert(*old);
}

void Exclusions::add_probe(const Probe& probe) {
  queries_.insert(probe.key());
  triples_.insert(probe.triple);
}

bool Exclusions::excludes(const Probe& probe) const {
  return queries_.count(probe.key()) > 0 || triples_.count(probe.triple) > 0;
}

LTestResult build_ltest(const Graph& facts, const EntityScorer& scorer, std::size_t k,
                        std::size_t size, const Exclusions& exclusions, std::uint64_t seed) {
  if (k == 0) throw ContractError("build_ltest: k must be at least 1");
  std::vector<Probe> candidates;
  for (const auto& p : all_probes(facts)) {
    if (!exclusions.excludes(p)) candidates.push_back(p);
  }
  const auto ranks = rank_probes(scorer, candidates);
  std::vector<Probe> qualifying;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (ranks[i] <= k) qualifying.push_back(candidates[i]);
  }
  LTestResult result;
  if (size == 0) {
    result.probes = std::move(qualifying);
    return result;
  }
  Rng rng(seed);
  rng.shuffle(qualifying);
  result.shortfall = qualifying.size() < size;
  if (qualifying.size() > size) qualifying.resize(size);
  result.probes = std::move(qualifying);
  return result;
}

namespace {

constexpr std::uint64_t kLTestSalt = 0x4c54455354ULL;  // "LTEST"

std::size_t split_point(std::size_t n, double fraction) {
  return std::min(n, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 0.5)));
}

// Keeps requests whose target the scorer does not already rank first.
std::vector<EditRequest> reassess(const EntityScorer& scorer,
                                  const std::vector<EditRequest>& requests) {
  std::vector<Probe> probes;
  for (const auto& r : requests) probes.push_back(r.target_probe());
  const auto ranks = rank_probes(scorer, probes);
  std::vector<EditRequest> kept;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    if (ranks[i] > 1) kept.push_back(requests[i]);
  }
  return kept;
}

}  // namespace

DatasetBundle build_edit_bundle(const Graph& graph, const EntityScorer& origin,
                                const EditBundleConfig& config, const RetrainHook& retrain) {
  if (!(config.train_fraction >= 0.0 && config.train_fraction <= 1.0)) {
    throw ContractError("build_edit_bundle: train_fraction must lie in [0, 1]");
  }
  DatasetBundle bundle;
  bundle.entities = graph.entities;
  bundle.relations = graph.relations;
  auto& meta = bundle.meta;
  meta.task = Task::edit;
  meta.provenance = config.provenance;
  meta.seed = config.seed;
  meta.rank_threshold_fraction = config.rank_threshold_fraction;
  meta.rank_threshold = hardness_threshold(graph.entities.size(), config.rank_threshold_fraction);
  meta.ltest_k = config.ltest_k;
  meta.train_fraction = config.train_fraction;
  meta.requested = config.n_corrupt;

  if (config.n_corrupt == 0) {
    bundle.pretrain = graph.triples();
    const Graph pre = bundle.pretrain_graph();
    std::shared_ptr<const EntityScorer> model = retrain ? retrain(pre) : nullptr;
    auto lt = build_ltest(pre, model ? *model : origin, config.ltest_k, config.ltest_size, {},
                          config.seed ^ kLTestSalt);
    bundle.ltest = std::move(lt.probes);
    meta.ltest_shortfall = lt.shortfall;
    return bundle;
  }

  const auto eligible = filter_hard(graph, origin, config.rank_threshold_fraction);
  auto corrupted = corrupt_for_edit(graph, origin, eligible, config.n_corrupt, config.seed);
  meta.shortfall = corrupted.shortfall;
  bundle.pretrain = std::move(corrupted.pretrain);
  const Graph pre = bundle.pretrain_graph();

  std::shared_ptr<const EntityScorer> retrained = retrain ? retrain(pre) : nullptr;
  const EntityScorer& model = retrained ? *retrained : origin;

  auto kept = reassess(model, corrupted.requests);
  meta.dropped_on_reassessment = corrupted.requests.size() - kept.size();
  const std::size_t n_train = split_point(kept.size(), config.train_fraction);
  bundle.train.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_train));
  bundle.test.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_train), kept.end());

  const auto exclusions = Exclusions::from_requests(corrupted.requests);
  auto lt = build_ltest(pre, model, config.ltest_k, config.ltest_size, exclusions,
                        config.seed ^ kLTestSalt);
  bundle.ltest = std::move(lt.probes);
  meta.ltest_shortfall = lt.shortfall;
  return bundle;
}

DatasetBundle build_add_bundle(const Graph& graph, const AddBundleConfig& config,
                               const RetrainHook& train) {
  if (!train) throw ContractError("build_add_bundle: a training hook is required");
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0)) {
    throw ContractError("build_add_bundle: holdout_fraction must lie in [0, 1)");
  }
  DatasetBundle bundle;
  bundle.entities = graph.entities;
  bundle.relations = graph.relations;
  auto& meta = bundle.meta;
  meta.task = Task::add;
  meta.provenance = config.provenance;
  meta.seed = config.seed;
  meta.ltest_k = config.ltest_k;
  meta.train_fraction = 1.0;
  meta.holdout_fraction = config.holdout_fraction;

  const auto& triples = graph.triples();
  const std::size_t n_hold =
      static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(triples.size())));
  if (config.holdout_fraction > 0.0 && n_hold == 0) {
    throw ContractError("build_add_bundle: holdout fraction selects no triple");
  }
  meta.requested = n_hold;

  Rng rng(config.seed);
  std::vector<std::size_t> order(triples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<bool> held(triples.size(), false);
  for (std::size_t i = 0; i < n_hold; ++i) held[order[i]] = true;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (!held[i]) bundle.pretrain.push_back(triples[i]);
  }

  std::vector<EditRequest> requests;
  std::unordered_set<QueryKey, QueryKeyHash> used;
  for (std::size_t i = 0; i < n_hold; ++i) {
    const Triple& t = triples[order[i]];
    const Direction first = rng.below(2) == 0 ? Direction::tail_query : Direction::head_query;
    const Direction second =
        first == Direction::tail_query ? Direction::head_query : Direction::tail_query;
    for (Direction d : {first, second}) {
      const Probe p{t, d};
      if (used.insert(p.key()).second) {
        requests.push_back({d, p.key().known, t.relation, std::nullopt, p.gold()});
        break;
      }
    }
  }
  meta.shortfall = n_hold - requests.size();

  const Graph pre = bundle.pretrain_graph();
  const auto model = train(pre);
  if (!model) throw ContractError("build_add_bundle: training hook returned no model");
  auto kept = reassess(*model, requests);
  meta.dropped_on_reassessment = requests.size() - kept.size();
  bundle.train = std::move(kept);

  std::unordered_set<EntityId> seen;
  for (const auto& t : bundle.pretrain) {
    seen.insert(t.head);
    seen.insert(t.tail);
  }
  for (std::size_t i = 0; i < bundle.train.size(); ++i) {
    const auto& r = bundle.train[i];
    if (!seen.count(r.known) || !seen.count(r.target)) meta.strictly_inductive.push_back(i);
  }

  const auto exclusions = Exclusions::from_requests(requests);
  auto lt = build_ltest(pre, *model, config.ltest_k, config.ltest_size, exclusions,
                        config.seed ^ kLTestSalt);
  bundle.ltest = std::move(lt.probes);
  meta.ltest_shortfall = lt.shortfall;
  return bundle;
}

// ---- bundle files -----------------------------------------------------------------------

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::array<const char*, 6> kBundleFiles = {
    "entities.tsv", "relations.tsv", "pretrain.tsv", "train.tsv", "test.tsv", "ltest.tsv"};

std::string vocab_text(const Vocabulary& v) {
  std::string out;
  for (const auto& n : v.names()) {
    if (n.find_first_of("\t\n") != std::string::npos) {
      throw FormatError("name '" + n + "' contains a tab or newline");
    }
    out += n;
    out += '\n';
  }
  return out;
}

std::string triple_text(const DatasetBundle& b, const Triple& t) {
  return b.entities.name(t.head) + '\t' + b.relations.name(t.relation) + '\t' +
         b.entities.name(t.tail);
}

std::string requests_text(const DatasetBundle& b, const std::vector<EditRequest>& reqs) {
  std::string out;
  for (const auto& r : reqs) {
    out += std::string(to_string(r.direction)) + '\t' + b.entities.name(r.known) + '\t' +
           b.relations.name(r.relation) + '\t' + (r.old ? b.entities.name(*r.old) : "") + '\t' +
           b.entities.name(r.target) + '\n';
  }
  return out;
}

ordered_json meta_json(const BundleMeta& m) {
  ordered_json j;
  j["provenance"] = m.provenance;
  j["seed"] = m.seed;
  j["rank_threshold_fraction"] = m.rank_threshold_fraction;
  j["rank_threshold"] = m.rank_threshold;
  j["ltest_k"] = m.ltest_k;
  j["train_fraction"] = m.train_fraction;
  j["holdout_fraction"] = m.holdout_fraction;
  j["slot_policy"] = m.slot_policy;
  j["requested"] = m.requested;
  j["shortfall"] = m.shortfall;
  j["dropped_on_reassessment"] = m.dropped_on_reassessment;
  j["ltest_shortfall"] = m.ltest_shortfall;
  j["strictly_inductive"] = m.strictly_inductive;
  return j;
}

std::vector<std::vector<std::string_view>> rows_of(std::string_view text, std::size_t width,
                                                   const char* file) {
  std::vector<std::vector<std::string_view>> rows;
  for_each_line(text, [&](std::size_t number, std::string_view line) {
    auto fields = split_tabs(line);
    if (fields.size() != width) {
      throw FormatError(std::string(file) + " line " + std::to_string(number) + ": expected " +
                        std::to_string(width) + " fields");
    }
    rows.push_back(std::move(fields));
  });
  return rows;
}

}  // namespace

void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::array<std::string, 6> texts;
  texts[0] = vocab_text(bundle.entities);
  texts[1] = vocab_text(bundle.relations);
  for (const auto& t : bundle.pretrain) texts[2] += triple_text(bundle, t) + '\n';
  texts[3] = requests_text(bundle, bundle.train);
  texts[4] = requests_text(bundle, bundle.test);
  for (const auto& p : bundle.ltest) {
    texts[5] += triple_text(bundle, p.triple) + '\t' + std::string(to_string(p.direction)) + '\n';
  }

  ordered_json manifest;
  manifest["format"] = "kgedit-bundle";
  manifest["version"] = kBundleVersion;
  manifest["task"] = std::string(to_string(bundle.meta.task));
  manifest["counts"] = ordered_json{{"pretrain", bundle.pretrain.size()},
                                    {"train", bundle.train.size()},
                                    {"test", bundle.test.size()},
                                    {"ltest", bundle.ltest.size()}};
  manifest["entities"] = bundle.entities.size();
  manifest["relations"] = bundle.relations.size();
  manifest["meta"] = meta_json(bundle.meta);
  ordered_json files = ordered_json::object();
  for (std::size_t i = 0; i < kBundleFiles.size(); ++i) {
    files[kBundleFiles[i]] = io::hex64(io::fnv1a64(texts[i]));
  }
  manifest["files"] = files;

  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < kBundleFiles.size(); ++i) {
    io::write_file_atomic(dir / kBundleFiles[i], texts[i]);
  }
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(io::read_file(dir / "manifest.json"));
  } catch (const ordered_json::exception& e) {
    throw FormatError("bundle manifest unreadable: " + std::string(e.what()));
  }
  try {
    if (manifest.at("format") != "kgedit-bundle") throw FormatError("not a bundle manifest");
    const int version = manifest.at("version").get<int>();
    if (version != kBundleVersion) {
      throw FormatError("bundle version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kBundleVersion) + ")");
    }
    std::array<std::string, 6> texts;
    for (std::size_t i = 0; i < kBundleFiles.size(); ++i) {
      texts[i] = io::read_file(dir / kBundleFiles[i]);
      const auto expected = manifest.at("files").at(kBundleFiles[i]).get<std::string>();
      if (io::hex64(io::fnv1a64(texts[i])) != expected) {
        throw FormatError(std::string(kBundleFiles[i]) + " checksum mismatch (corrupt or truncated)");
      }
    }

    DatasetBundle b;
    for (const auto& row : rows_of(texts[0], 1, "entities.tsv")) b.entities.add(row[0]);
    for (const auto& row : rows_of(texts[1], 1, "relations.tsv")) b.relations.add(row[0]);
    auto triple = [&](const std::vector<std::string_view>& row) {
      return Triple{b.entities.id(row[0]), b.relations.id(row[1]), b.entities.id(row[2])};
    };
    for (const auto& row : rows_of(texts[2], 3, "pretrain.tsv")) b.pretrain.push_back(triple(row));
    auto requests = [&](const std::string& text, const char* file) {
      std::vector<EditRequest> out;
      for (const auto& row : rows_of(text, 5, file)) {
        EditRequest r;
        r.direction = parse_direction(row[0]);
        r.known = b.entities.id(row[1]);
        r.relation = b.relations.id(row[2]);
        if (!row[3].empty()) r.old = b.entities.id(row[3]);
        r.target = b.entities.id(row[4]);
        out.push_back(r);
      }
      return out;
    };
    b.train = requests(texts[3], "train.tsv");
    b.test = requests(texts[4], "test.tsv");
    for (const auto& row : rows_of(texts[5], 4, "ltest.tsv")) {
      b.ltest.push_back({triple(row), parse_direction(row[3])});
    }

    const auto& m = manifest.at("meta");
    b.meta.task = parse_task(manifest.at("task").get<std::string>());
    b.meta.provenance = m.at("provenance").get<std::string>();
    b.meta.seed = m.at("seed").get<std::uint64_t>();
    b.meta.rank_threshold_fraction = m.at("rank_threshold_fraction").get<double>();
    b.meta.rank_threshold = m.at("rank_threshold").get<std::size_t>();
    b.meta.ltest_k = m.at("ltest_k").get<std::size_t>();
    b.meta.train_fraction = m.at("train_fraction").get<double>();
    b.meta.holdout_fraction = m.at("holdout_fraction").get<double>();
    b.meta.slot_policy = m.at("slot_policy").get<std::string>();
    b.meta.requested = m.at("requested").get<std::size_t>();
    b.meta.shortfall = m.at("shortfall").get<std::size_t>();
    b.meta.dropped_on_reassessment = m.at("dropped_on_reassessment").get<std::size_t>();
    b.meta.ltest_shortfall = m.at("ltest_shortfall").get<bool>();
    b.meta.strictly_inductive = m.at("strictly_inductive").get<std::vector<std::size_t>>();

    const auto& counts = manifest.at("counts");
    if (counts.at("pretrain") != b.pretrain.size() || counts.at("train") != b.train.size() ||
        counts.at("test") != b.test.size() || counts.at("ltest") != b.ltest.size()) {
      throw FormatError("bundle split counts disagree with manifest");
    }
    return b;
  } catch (const ordered_json::exception& e) {
    throw FormatError("bundle manifest malformed: " + std::string(e.what()));
  } catch (const IndexError& e) {
    throw FormatError("bundle refers to an unknown name: " + std::string(e.what()));
  }
}

// ---- synthetic ---------------------------------------------------------------------------

Graph synthesize_graph(const SyntheticSpec& spec) {
  if (spec.entities < 2 || spec.relations < 1) {
    throw ContractError("synthesize_graph: need at least 2 entities and 1 relation");
  }
  const std::size_t capacity = spec.entities * (spec.entities - 1) * spec.relations;
  if (spec.triples > capacity || spec.triples < spec.entities / 2) {
    throw ContractError("synthesize_graph: triple count incompatible with vocabulary sizes");
  }
  auto padded = [](char prefix, std::size_t i, std::size_t width) {
    std::string digits = std::to_string(i);
    return std::string(1, prefix) + std::string(width - std::min(width, digits.size()), '0') + digits;
  };
  const std::size_t ew = std::to_string(spec.entities - 1).size();
  const std::size_t rw = std::to_string(spec.relations - 1).size();

  Graph g;
  for (std::size_t i = 0; i < spec.entities; ++i) g.entities.add(padded('e', i, ew));
  for (std::size_t i = 0; i < spec.relations; ++i) g.relations.add(padded('r', i, rw));

  Rng rng(spec.seed);
  std::vector<Triple> out;
  std::unordered_set<Triple, TripleHash> seen;
  auto draw = [&](std::optional<EntityId> fixed_head) {
    while (true) {
      const auto h = fixed_head ? *fixed_head : static_cast<EntityId>(rng.below(spec.entities));
      const auto r = static_cast<RelationId>(rng.below(spec.relations));
      const auto t = static_cast<EntityId>(rng.below(spec.entities));
      if (h == t) continue;
      const Triple tr{h, r, t};
      if (seen.insert(tr).second) return tr;
    }
  };
  // One triple per entity first so that no entity is isolated.
  for (std::size_t i = 0; i < spec.entities && out.size() < spec.triples; i += 2) {
    out.push_back(draw(static_cast<EntityId>(i)));
  }
  while (out.size() < spec.triples) out.push_back(draw(std::nullopt));
  rng.shuffle(out);
  for (const auto& t : out) g.insert(t);
  return g;
}

}  // namespace kgedit::kg
