#pragma once

// Editing metrics: reliability (Succ@k), locality (RK@k, RK_roc), the
// relative change of the edit targets' mean rank (ER_roc) and efficiency
// (tuned parameter count, wall time).
//
//   RK@k   = #{L-Test facts ranked <= k after} / #{ranked <= k before}
//   ER_roc = |R_edit - R_origin| / R_origin
//   RK_roc = |R_s_edit - R_s_origin| / R_s_edit
//
// Note the different denominators of the two rate-of-change values.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kgedit/kgdata.hpp"

namespace kgedit::metrics {

struct RankPair {
  std::size_t item = 0;
  std::size_t rank_before = 0;
  std::size_t rank_after = 0;
  friend bool operator==(const RankPair&, const RankPair&) = default;
};

// Fraction of ranks <= k. MetricError on an empty list, ContractError if k == 0.
double succ_at_k(std::span<const std::size_t> ranks_after, std::size_t k);

// MetricError when no pair was ranked <= k before editing.
double rk_at_k(std::span<const RankPair> pairs, std::size_t k);

// Integer sum divided once; MetricError on an empty list.
double mean_rank(std::span<const std::size_t> ranks);

struct MeanRanks {
  double origin = 0.0;    // edit targets, before
  double edit = 0.0;      // edit targets, after
  double s_origin = 0.0;  // L-Test, before
  double s_edit = 0.0;    // L-Test, after
  friend bool operator==(const MeanRanks&, const MeanRanks&) = default;
};

struct RocMetrics {
  double er_roc = 0.0;
  double rk_roc = 0.0;
};

// MetricError if R_origin or R_s_edit is not positive.
RocMetrics roc_metrics(const MeanRanks& ranks);

inline constexpr int kReportSchemaVersion = 1;

struct ReportMeta {
  std::string bundle_id;
  std::string variant;
  std::string task;
  std::string split;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  friend bool operator==(const ReportMeta&, const ReportMeta&) = default;
};

struct EvalReport {
  std::map<std::size_t, double> succ_at;
  std::map<std::size_t, double> rk_at;
  double er_roc = 0.0;
  double rk_roc = 0.0;
  MeanRanks mean_ranks;
  std::size_t params_tuned = 0;
  double wall_time_s = 0.0;  // editing seconds per edit; negative = not recorded
  std::size_t edits = 0;     // edits evaluated (full groups only)
  std::size_t groups = 0;
  std::size_t ltest = 0;
  ReportMeta meta;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

// One JSON object per line, without the trailing newline.
std::string to_ndjson(const EvalReport& report);
EvalReport parse_ndjson(std::string_view line);  // FormatError on bad input

// Params, Time, Succ@1, Succ@3, ER_roc, RK@3, RK_roc (plus variant and n).
std::string tsv_header();
std::string tsv_row(const EvalReport& report);

// Called once per group; returns the edited view of the model.
using ApplyFn =
    std::function<std::shared_ptr<const kg::EntityScorer>(std::span<const kg::EditRequest>)>;

struct EvalOptions {
  std::size_t n = 1;                    // edits per group
  std::vector<std::size_t> ks{1, 3};    // Succ@k and RK@k cut-offs
  bool record_time = true;
};

// Splits `edits` into consecutive groups of n (a trailing partial group is
// left out), applies each group, ranks its targets and the L-Test under the
// edited model. RK pairs are pooled over all groups.
EvalReport evaluate(const kg::EntityScorer& base, std::span<const kg::EditRequest> edits,
                    const ApplyFn& apply, std::span<const kg::Probe> ltest,
                    const EvalOptions& options);

// Ranks of the edit targets under `scorer`.
std::vector<std::size_t> target_ranks(const kg::EntityScorer& scorer,
                                      std::span<const kg::EditRequest> edits);

}  // namespace kgedit::metrics
