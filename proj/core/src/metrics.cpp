#include "kgedit/metrics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "kgedit/error.hpp"

namespace kgedit::metrics {

double succ_at_k(std::span<const std::size_t> ranks_after, std::size_t k) {
  if (k == 0) throw ContractError("Succ@k needs k >= 1");
  if (ranks_after.empty()) throw MetricError("Succ@" + std::to_string(k) + " of an empty edit set");
  std::size_t hits = 0;
  for (auto r : ranks_after) hits += r <= k ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ranks_after.size());
}

double rk_at_k(std::span<const RankPair> pairs, std::size_t k) {
  if (k == 0) throw ContractError("RK@k needs k >= 1");
  std::size_t before = 0, after = 0;
  for (const auto& p : pairs) {
    before += p.rank_before <= k ? 1 : 0;
    after += p.rank_after <= k ? 1 : 0;
  }
  if (before == 0) {
    throw MetricError("RK@" + std::to_string(k) + " undefined: no reference fact ranked <= " +
                      std::to_string(k) + " before editing");
  }
  return static_cast<double>(after) / static_cast<double>(before);
}

double mean_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw MetricError("mean rank of an empty list");
  const unsigned long long sum = std::accumulate(ranks.begin(), ranks.end(), 0ULL);
  return static_cast<double>(sum) / static_cast<double>(ranks.size());
}

RocMetrics roc_metrics(const MeanRanks& r) {
  if (!(r.origin > 0.0)) throw MetricError("ER_roc undefined: R_origin is not positive");
  if (!(r.s_edit > 0.0)) throw MetricError("RK_roc undefined: R_s_edit is not positive");
  return {std::abs(r.edit - r.origin) / r.origin, std::abs(r.s_edit - r.s_origin) / r.s_edit};
}

// ---- serialization ---------------------------------------------------------------------

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json map_to_json(const std::map<std::size_t, double>& m) {
  ordered_json out = ordered_json::object();
  for (const auto& [k, v] : m) out[std::to_string(k)] = v;
  return out;
}

std::map<std::size_t, double> map_from_json(const ordered_json& j) {
  std::map<std::size_t, double> out;
  for (const auto& [k, v] : j.items()) out[std::stoul(k)] = v.get<double>();
  return out;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string to_ndjson(const EvalReport& r) {
  ordered_json j;
  j["schema"] = "kgedit-report";
  j["schema_version"] = kReportSchemaVersion;
  j["meta"] = {{"bundle_id", r.meta.bundle_id}, {"variant", r.meta.variant},
               {"task", r.meta.task},           {"split", r.meta.split},
               {"n", r.meta.n},                 {"seed", r.meta.seed}};
  j["succ_at"] = map_to_json(r.succ_at);
  j["rk_at"] = map_to_json(r.rk_at);
  j["er_roc"] = r.er_roc;
  j["rk_roc"] = r.rk_roc;
  j["mean_ranks"] = {{"origin", r.mean_ranks.origin},
                     {"edit", r.mean_ranks.edit},
                     {"s_origin", r.mean_ranks.s_origin},
                     {"s_edit", r.mean_ranks.s_edit}};
  j["params_tuned"] = r.params_tuned;
  j["wall_time_s"] = r.wall_time_s;
  j["edits"] = r.edits;
  j["groups"] = r.groups;
  j["ltest"] = r.ltest;
  return j.dump();
}

EvalReport parse_ndjson(std::string_view line) {
  try {
    const auto j = ordered_json::parse(line);
    if (j.at("schema").get<std::string>() != "kgedit-report") throw FormatError("not a report record");
    const int version = j.at("schema_version").get<int>();
    if (version != kReportSchemaVersion) {
      throw FormatError("report schema version " + std::to_string(version) + ", expected " +
                        std::to_string(kReportSchemaVersion));
    }
    EvalReport r;
    const auto& m = j.at("meta");
    r.meta = {m.at("bundle_id").get<std::string>(), m.at("variant").get<std::string>(),
              m.at("task").get<std::string>(),      m.at("split").get<std::string>(),
              m.at("n").get<std::size_t>(),         m.at("seed").get<std::uint64_t>()};
    r.succ_at = map_from_json(j.at("succ_at"));
    r.rk_at = map_from_json(j.at("rk_at"));
    r.er_roc = j.at("er_roc").get<double>();
    r.rk_roc = j.at("rk_roc").get<double>();
    const auto& mr = j.at("mean_ranks");
    r.mean_ranks = {mr.at("origin").get<double>(), mr.at("edit").get<double>(),
                    mr.at("s_origin").get<double>(), mr.at("s_edit").get<double>()};
    r.params_tuned = j.at("params_tuned").get<std::size_t>();
    r.wall_time_s = j.at("wall_time_s").get<double>();
    r.edits = j.at("edits").get<std::size_t>();
    r.groups = j.at("groups").get<std::size_t>();
    r.ltest = j.at("ltest").get<std::size_t>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report record: ") + e.what());
  }
}

std::string tsv_header() {
  return "Variant\tn\tParams\tTime\tSucc@1\tSucc@3\tER_roc\tRK@3\tRK_roc";
}

std::string tsv_row(const EvalReport& r) {
  auto at = [](const std::map<std::size_t, double>& m, std::size_t k) {
    const auto it = m.find(k);
    return it == m.end() ? std::string("NA") : fixed(it->second, 4);
  };
  std::string row = r.meta.variant + "\t" + std::to_string(r.meta.n) + "\t" +
                    std::to_string(r.params_tuned) + "\t" +
                    (r.wall_time_s < 0.0 ? std::string("NA") : fixed(r.wall_time_s, 4));
  row += "\t" + at(r.succ_at, 1) + "\t" + at(r.succ_at, 3) + "\t" + fixed(r.er_roc, 4) + "\t" +
         at(r.rk_at, 3) + "\t" + fixed(r.rk_roc, 4);
  return row;
}

// ---- evaluation -------------------------------------------------------------------------------

std::vector<std::size_t> target_ranks(const kg::EntityScorer& scorer,
                                      std::span<const kg::EditRequest> edits) {
  std::vector<kg::Probe> probes;
  probes.reserve(edits.size());
  for (const auto& e : edits) probes.push_back({e.target_triple(), e.direction});
  return kg::rank_probes(scorer, probes);
}

EvalReport evaluate(const kg::EntityScorer& base, std::span<const kg::EditRequest> edits,
                    const ApplyFn& apply, std::span<const kg::Probe> ltest,
                    const EvalOptions& options) {
  if (options.n == 0) throw ContractError("edit group size must be >= 1");
  if (options.ks.empty()) throw ContractError("no k values to evaluate");
  const std::size_t groups = edits.size() / options.n;
  if (groups == 0) {
    throw MetricError("no full group of " + std::to_string(options.n) + " edits among " +
                      std::to_string(edits.size()));
  }
  if (ltest.empty()) throw MetricError("empty L-Test reference set");
  const std::size_t used = groups * options.n;
  const auto evaluated = edits.first(used);

  const auto before_targets = target_ranks(base, evaluated);
  const auto before_ltest = kg::rank_probes(base, ltest);

  std::vector<std::size_t> after_targets;
  std::vector<RankPair> pairs;
  std::vector<std::size_t> after_ltest;
  after_targets.reserve(used);
  pairs.reserve(groups * ltest.size());
  double edit_seconds = 0.0;
  for (std::size_t g = 0; g < groups; ++g) {
    const auto group = evaluated.subspan(g * options.n, options.n);
    const auto start = std::chrono::steady_clock::now();
    const auto edited = apply(group);
    edit_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto ranks = target_ranks(*edited, group);
    after_targets.insert(after_targets.end(), ranks.begin(), ranks.end());
    const auto loc = kg::rank_probes(*edited, ltest);
    for (std::size_t i = 0; i < ltest.size(); ++i) {
      pairs.push_back({i, before_ltest[i], loc[i]});
      after_ltest.push_back(loc[i]);
    }
  }

  EvalReport r;
  for (auto k : options.ks) {
    r.succ_at[k] = succ_at_k(after_targets, k);
    r.rk_at[k] = rk_at_k(pairs, k);
  }
  // The L-Test "before" mean is the same for every group.
  r.mean_ranks = {mean_rank(before_targets), mean_rank(after_targets), mean_rank(before_ltest),
                  mean_rank(after_ltest)};
  const auto roc = roc_metrics(r.mean_ranks);
  r.er_roc = roc.er_roc;
  r.rk_roc = roc.rk_roc;
  r.wall_time_s = options.record_time ? edit_seconds / static_cast<double>(used) : -1.0;
  r.edits = used;
  r.groups = groups;
  r.ltest = ltest.size();
  r.meta.n = options.n;
  return r;
}

}  // namespace kgedit::metrics
