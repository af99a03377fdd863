// Acceptance run: one PASS / FAIL line per criterion.
//
// Usage: acceptance [work_dir]
// Criteria 6 to 10 run the full toy-scale pipeline under work_dir (default
// ./acceptance_runs). The exit status is non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "kgedit/container.hpp"
#include "kgedit/editors.hpp"
#include "kgedit/harness.hpp"
#include "kgedit/metrics.hpp"
#include "test_support.hpp"

using namespace kgedit;
namespace fs = std::filesystem;
using ad::Tensor;
using ad::Var;
using harness::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

int failures = 0;

void report(int id, const std::string& title, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << "  [" << id << "] " << title << ": " << detail << std::endl;
  if (!ok) ++failures;
}

// Runs `body`; an exception counts as a failure of that criterion.
void criterion(int id, const std::string& title, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [ok, detail] = body();
    report(id, title, ok, detail);
  } catch (const std::exception& e) {
    report(id, title, false, std::string("exception: ") + e.what());
  }
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

// ---- 1: gradient correctness -------------------------------------------------------------

std::pair<bool, std::string> gradient_correctness() {
  const auto start = Clock::now();
  Rng rng(101);
  auto param = [&](ad::Shape s, double sd = 1.0) { return ad::parameter(Tensor::normal(s, rng, sd)); };
  // Away from the kink of relu.
  auto off_kink = [&](ad::Shape s) {
    Tensor t = Tensor::normal(s, rng, 1.0);
    for (auto& x : t.values()) x = x >= 0 ? x + 0.1 : x - 0.1;
    return ad::parameter(t);
  };
  const Tensor weights = Tensor::normal({3, 4}, rng, 1.0);
  auto weighted = [&](const Var& v) { return ad::sum(v * ad::constant(weights)); };

  struct Case {
    std::string name;
    std::vector<Var> params;
    std::function<Var()> f;
  };
  std::vector<Case> cases;
  {
    auto a = param({3, 5}), b = param({5, 4});
    cases.push_back({"matmul", {a, b}, [=] { return weighted(ad::matmul(a, b)); }});
  }
  {
    auto a = param({4, 3});
    cases.push_back({"transpose", {a}, [=] { return weighted(ad::transpose(a)); }});
    cases.push_back({"reshape", {a}, [=] { return weighted(ad::reshape(a, {3, 4})); }});
  }
  {
    auto a = param({3, 4}), b = param({3, 4}), row = param({4}), one = param({1});
    cases.push_back({"add", {a, b}, [=] { return weighted(a + b); }});
    cases.push_back({"sub", {a, b}, [=] { return weighted(a - b); }});
    cases.push_back({"mul", {a, b}, [=] { return weighted(a * b); }});
    cases.push_back({"broadcast", {a, row, one}, [=] { return weighted(a * row + row - a * one); }});
    cases.push_back({"sigmoid", {a}, [=] { return weighted(ad::sigmoid(a)); }});
    cases.push_back({"tanh", {a}, [=] { return weighted(ad::tanh(a)); }});
    cases.push_back({"scale", {a}, [=] { return weighted(ad::scale(a, -1.7)); }});
    cases.push_back({"sum", {a}, [=] { return ad::sum(a * a); }});
    cases.push_back({"mean", {a}, [=] { return ad::mean(a * a); }});
    cases.push_back({"softmax_rows", {a}, [=] { return weighted(ad::softmax(a, 1)); }});
    cases.push_back({"softmax_cols", {a}, [=] { return weighted(ad::softmax(a, 0)); }});
    cases.push_back({"log_softmax", {a}, [=] { return weighted(ad::log_softmax(a)); }});
    const std::vector<std::size_t> targets{3, 0, 2};
    cases.push_back({"cross_entropy", {a}, [=] { return ad::cross_entropy(a, targets); }});
    const Tensor ref = ad::log_softmax(ad::constant(Tensor::normal({3, 4}, rng, 1.0))).value();
    cases.push_back({"kl_divergence", {a}, [=] { return ad::kl_divergence(a, ref); }});
    cases.push_back({"slice_cols", {a}, [=] { return ad::sum(ad::slice_cols(a, 1, 3) * ad::slice_cols(a, 1, 3)); }});
    cases.push_back({"concat_cols", {a, b}, [=] { return ad::sum(ad::concat_cols(a, b) * ad::concat_cols(b, a)); }});
    const std::vector<std::size_t> idx{2, 0, 2};
    cases.push_back({"gather_rows", {a}, [=] { return weighted(ad::gather_rows(a, idx)); }});
  }
  {
    auto a = off_kink({3, 4});
    cases.push_back({"relu", {a}, [=] { return weighted(ad::relu(a)); }});
  }
  {
    auto x = param({5, 1});
    const std::vector<double> labels{1, 0, 0, 1, 1};
    cases.push_back({"binary_cross_entropy", {x}, [=] { return ad::binary_cross_entropy(x, labels); }});
  }
  {
    auto x = param({3, 4}), g = param({4}), b = param({4});
    cases.push_back({"layer_norm", {x, g, b}, [=] { return weighted(ad::layer_norm(x, g, b)); }});
  }
  {
    // Two sequences of length 3, the second padded after 2 positions.
    auto q = param({6, 4}), k = param({6, 4}), v = param({6, 4});
    const Tensor w = Tensor::normal({6, 4}, rng, 1.0);
    const std::vector<std::size_t> lengths{3, 2};
    cases.push_back({"attention", {q, k, v}, [=] {
                       return ad::sum(ad::attention(q, k, v, 2, 3, 2, lengths) * ad::constant(w));
                     }});
  }
  {
    auto m = testing::tiny_model(6, 2);
    Rng krng(5);
    std::vector<kg::QueryKey> keys;
    for (int i = 0; i < 4; ++i) {
      keys.push_back({krng.below(2) ? kg::Direction::tail_query : kg::Direction::head_query,
                      static_cast<kg::EntityId>(krng.below(6)), static_cast<kg::RelationId>(krng.below(2))});
    }
    const std::vector<std::size_t> targets{1, 0, 5, 3};
    cases.push_back({"tiny model loss", m->params(), [m, keys, targets] {
                       return ad::cross_entropy(m->entity_logits(keys), targets);
                     }});
  }

  double worst = 0.0;
  std::string worst_name, failed;
  std::size_t coordinates = 0;
  for (auto& c : cases) {
    const auto r = ad::grad_check(c.f, c.params);
    coordinates += r.entries.size();
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = c.name;
    }
    if (!r.passed || r.max_relative_error >= 1e-4) failed += " " + c.name;
  }
  const double secs = seconds_since(start);
  const bool ok = failed.empty() && secs < 60.0;
  return {ok, std::to_string(cases.size()) + " checks, " + std::to_string(coordinates) +
                  " coordinates, max rel err " + sci(worst) + " (" + worst_name + ") < 1e-4, " + fmt(secs, 1) +
                  " s < 60 s" + (failed.empty() ? "" : "; failed:" + failed)};
}

// ---- 2: shift formula vs scalar reference ----------------------------------------------------

std::vector<double> softmax_ref(const std::vector<double>& x) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i] - mx));
  for (auto& v : e) v /= s;
  return e;
}

std::pair<bool, std::string> shift_oracle() {
  Rng rng(202);
  edit::EditorConfig config;
  config.embed_dim = 8;
  config.lstm_hidden = 8;
  config.cond_dim = 6;
  double worst = 0.0;
  bool shut_ok = false;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(32), m = 1 + rng.below(32);
    edit::HyperNetwork hn(4, 2, {{"t", n, m}}, config);
    for (const auto& [name, v] : hn.named_params()) {
      for (auto& x : Var(v).mutable_value().values()) x = rng.normal(0.0, 0.5);
    }
    const std::size_t width = 2 * m + 2 * n + 1;
    Tensor* w = nullptr;
    Tensor* b = nullptr;
    for (const auto& [name, v] : hn.named_params()) {
      if (name == "hyper.head.t.w") w = &Var(v).mutable_value();
      if (name == "hyper.head.t.b") b = &Var(v).mutable_value();
    }
    if (trial == 0) {
      for (std::size_t r = 0; r < hn.cond_dim(); ++r) w->at(r, width - 1) = 0.0;
      (*b)[width - 1] = -20.0;
    }
    const Tensor h = Tensor::normal({1, hn.cond_dim()}, rng, 1.0);
    const Tensor grad = trial == 1 ? Tensor({n, m}, 0.0) : Tensor::normal({n, m}, rng, 1.0);

    std::vector<double> out(width);
    for (std::size_t c = 0; c < width; ++c) {
      out[c] = (*b)[c];
      for (std::size_t r = 0; r < hn.cond_dim(); ++r) out[c] += h.at(0, r) * w->at(r, c);
    }
    const auto sa = softmax_ref({out.begin(), out.begin() + m});
    const auto sb = softmax_ref({out.begin() + m, out.begin() + 2 * m});
    const double gate = 1.0 / (1.0 + std::exp(-out[width - 1]));
    Tensor want({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        want.at(i, j) = gate * (out[2 * m + i] * sa[j] * grad.at(i, j) + out[2 * m + n + i] * sb[j]);
      }
    }
    const Tensor grads[] = {grad};
    const auto got = edit::predict_shift(hn, h, grads);
    worst = std::max(worst, max_abs_diff(got.deltas[0], want));
    if (trial == 0) shut_ok = out[width - 1] == -20.0 && ad::max_abs(got.deltas[0]) < 1e-6;
  }
  const bool ok = worst <= 1e-12 && shut_ok;
  return {ok, "100 random targets up to 32x32 incl. eta=-20 and zero gradient, max |diff| " + sci(worst) +
                  " <= 1e-12"};
}

// ---- 3: transparency ---------------------------------------------------------------------------------

std::pair<bool, std::string> transparency() {
  auto model = testing::tiny_model(50, 6, 9);
  model->freeze();
  const auto patch = edit::FfnPatch::create(*model, 1, 32, 4, -1.0);
  Rng rng(303);
  std::vector<kg::QueryKey> keys;
  for (int i = 0; i < 1000; ++i) {
    keys.push_back({rng.below(2) ? kg::Direction::tail_query : kg::Direction::head_query,
                    static_cast<kg::EntityId>(rng.below(50)), static_cast<kg::RelationId>(rng.below(6))});
  }
  const Tensor base = model->entity_logits(keys).value();
  const bool empty_ok = ad::bitwise_equal(edit::patched_forward(*model, patch, {}, keys), base);
  const edit::WeightShift zero{{Tensor({8, 32}, 0.0), Tensor({32, 8}, 0.0)}};
  const bool zero_ok = ad::bitwise_equal(edit::patched_forward(*model, patch, zero, keys), base);
  return {empty_ok && zero_ok, std::string("1000 random queries, patched logits bit-identical: no shift ") +
                                   (empty_ok ? "yes" : "no") + ", zero shift " + (zero_ok ? "yes" : "no")};
}

// ---- 4: frozen base -------------------------------------------------------------------------------

std::pair<bool, std::string> frozen_base(const fs::path& run) {
  auto cfg = harness::load_config(run / "config.json", {});
  auto model = std::make_shared<model::BaseModel>(model::load_checkpoint(run / "model.ckpt"));
  model->freeze();
  const auto bundle = kg::load_bundle(run / "bundle");
  const auto pool = harness::locality_pool(*model, bundle, cfg);
  const auto before = model->param_hash();

  auto ec = cfg.editor;
  ec.epochs = 3;
  edit::KgEditor kge(model, ec);
  kge.train(bundle.train, pool);
  (void)kge.apply(std::span(bundle.test).first(4));
  const bool kge_ok = model->param_hash() == before;

  edit::CalinetEditor cal(model, cfg.editor, pool);
  (void)cal.apply(std::span(bundle.test).first(4));
  const bool cal_ok = model->param_hash() == before;
  return {kge_ok && cal_ok, "base hash " + io::hex64(before) + " unchanged after KGEditor training " +
                                (kge_ok ? "yes" : "no") + ", after CALINET fitting " + (cal_ok ? "yes" : "no")};
}

// ---- 5: metric oracle -----------------------------------------------------------------------------

std::pair<bool, std::string> metric_oracle() {
  using metrics::RankPair;
  constexpr std::size_t kEntities = 300;
  const auto graph = kg::synthesize_graph({kEntities, 8, 2000, 31});
  const auto probes = kg::all_probes(graph);
  Rng rng(505);
  const testing::HashScorer base(kEntities, 6, 0);
  std::vector<kg::EditRequest> edits;
  for (int i = 0; i < 30; ++i) {
    const auto& p = probes[rng.below(probes.size())];
    const auto key = p.key();
    edits.push_back({p.direction, key.known, key.relation, p.gold(), static_cast<kg::EntityId>(rng.below(kEntities))});
  }
  // L-Test golds placed at base ranks 1..5 and 20.
  std::vector<kg::Probe> ltest;
  const std::size_t wanted[] = {1, 2, 3, 4, 5, 20};
  for (int i = 0; i < 60; ++i) {
    const auto key = probes[rng.below(probes.size())].key();
    const auto row = base.row(key);
    std::vector<std::size_t> ids(kEntities);
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    ltest.push_back({key.complete(static_cast<kg::EntityId>(ids[wanted[i % 6] - 1])), key.direction});
  }

  bool all_equal = true;
  std::size_t compared = 0;
  for (std::size_t n : {1, 3, 7}) {
    std::size_t call = 0;
    const metrics::ApplyFn apply = [&](std::span<const kg::EditRequest>) -> std::shared_ptr<const kg::EntityScorer> {
      return std::make_shared<testing::HashScorer>(kEntities, 6, ++call);
    };
    metrics::EvalOptions opts;
    opts.n = n;
    opts.ks = {1, 3, 10};
    opts.record_time = false;
    const auto r = metrics::evaluate(base, edits, apply, ltest, opts);

    // Oracle: full sort of every query.
    const std::size_t groups = edits.size() / n;
    std::vector<std::size_t> bt, at, bl, al;
    std::vector<std::vector<std::size_t>> after_l(groups);
    for (std::size_t i = 0; i < groups * n; ++i) {
      const testing::HashScorer edited(kEntities, 6, i / n + 1);
      bt.push_back(testing::oracle_rank(base.row(edits[i].key()), edits[i].target));
      at.push_back(testing::oracle_rank(edited.row(edits[i].key()), edits[i].target));
    }
    for (const auto& p : ltest) bl.push_back(testing::oracle_rank(base.row(p.key()), p.gold()));
    for (std::size_t g = 0; g < groups; ++g) {
      const testing::HashScorer edited(kEntities, 6, g + 1);
      for (const auto& p : ltest) al.push_back(testing::oracle_rank(edited.row(p.key()), p.gold()));
    }
    auto mean = [](const std::vector<std::size_t>& v) {
      return static_cast<double>(std::accumulate(v.begin(), v.end(), std::size_t{0})) / static_cast<double>(v.size());
    };
    for (auto k : opts.ks) {
      const double succ = static_cast<double>(std::count_if(at.begin(), at.end(), [&](auto x) { return x <= k; })) /
                          static_cast<double>(at.size());
      std::size_t num = 0, den = 0;
      for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t i = 0; i < ltest.size(); ++i) {
          den += bl[i] <= k;
          num += al[g * ltest.size() + i] <= k;
        }
      }
      all_equal &= r.succ_at.at(k) == succ;
      all_equal &= r.rk_at.at(k) == static_cast<double>(num) / static_cast<double>(den);
      compared += 2;
    }
    const double ro = mean(bt), re = mean(at), so = mean(bl), se = mean(al);
    all_equal &= r.er_roc == std::abs(re - ro) / ro;
    all_equal &= r.rk_roc == std::abs(se - so) / se;
    compared += 2;
  }

  // Hand-worked fixtures, each against a count over the listed ranks.
  const std::vector<std::size_t> succ_ranks{1, 4, 2};
  const bool succ_fixture = metrics::succ_at_k(succ_ranks, 3) == 2.0 / 3.0;
  const std::vector<RankPair> pairs{{0, 1, 1}, {1, 2, 3}, {2, 5, 9}};
  // Ranked <= 3 before: ranks 1 and 2. Ranked <= 3 after: ranks 1 and 3.
  const double rk = metrics::rk_at_k(pairs, 3);
  const bool rk_fixture = rk == 2.0 / 2.0;
  const bool roc_fixture = metrics::roc_metrics({1.0, 1.0, 2.0, 4.0}).rk_roc == 0.5;

  const bool ok = all_equal && succ_fixture && rk_fixture && roc_fixture;
  return {ok, std::to_string(compared) + " values equal to full-sort oracle on |E|=300 (n=1,3,7; k=1,3,10): " +
                  (all_equal ? "yes" : "no") + "; Succ@3([1,4,2])=2/3 " + (succ_fixture ? "yes" : "no") +
                  "; RK@3([1,2,5]->[1,3,9])=" + fmt(rk, 4) + " (2 of 2 retained) " + (rk_fixture ? "yes" : "no") +
                  "; RK_roc(2->4)=0.5 " + (roc_fixture ? "yes" : "no")};
}

// ---- pipeline runs --------------------------------------------------------------------------------

struct PipelineRun {
  harness::EditEvalOutput out;
  double seconds = 0.0;
  json manifest;
};

const metrics::EvalReport* find_report(const std::vector<metrics::EvalReport>& reports, const std::string& variant) {
  for (const auto& r : reports) {
    if (r.meta.variant == variant) return &r;
  }
  return nullptr;
}

harness::ExperimentConfig edit_config() {
  return harness::load_config({}, {"eval.variants=[\"KGEditor\",\"KE\",\"CALINET\",\"ZSL\"]"});
}

PipelineRun run_edit(const fs::path& out) {
  fs::remove_all(out);
  PipelineRun r;
  const auto start = Clock::now();
  r.out = harness::cmd_edit_eval(edit_config(), out);
  r.seconds = seconds_since(start);
  r.manifest = json::parse(io::read_file(out / "run.manifest"));
  return r;
}

std::pair<bool, std::string> end_to_end_edit(const PipelineRun& run) {
  const auto& notes = run.manifest.at("notes");
  const double origin_hits = notes.at("origin_hits_at_1").get<double>();
  const auto& counts = notes.at("counts");
  const std::size_t requests = counts.at("train").get<std::size_t>() + counts.at("test").get<std::size_t>();
  const auto* kge = find_report(run.out.reports, "KGEditor");
  const auto* zsl = find_report(run.out.reports, "ZSL");
  if (!kge || !zsl) return {false, "missing KGEditor or ZSL report"};
  const double s1 = kge->succ_at.at(1), rk3 = kge->rk_at.at(3), z1 = zsl->succ_at.at(1);
  const bool ok = origin_hits >= 0.95 && requests == 100 && z1 == 0.0 && s1 >= 0.9 && rk3 >= 0.9 &&
                  run.seconds < 15 * 60;
  return {ok, "pretrain Hits@1 " + fmt(origin_hits) + " >= 0.95, " + std::to_string(requests) +
                  " requests, ZSL Succ@1 " + fmt(z1) + " == 0, KGEditor Succ@1 " + fmt(s1) + " >= 0.9, RK@3 " +
                  fmt(rk3) + " >= 0.9, pipeline " + fmt(run.seconds, 0) + " s < 900 s"};
}

std::pair<bool, std::string> end_to_end_add(const fs::path& out) {
  fs::remove_all(out);
  const auto cfg = harness::load_config({}, {"bundle.task=ADD", "eval.variants=[\"KGEditor\"]"});
  const auto r = harness::cmd_edit_eval(cfg, out);
  const auto* kge = find_report(r.reports, "KGEditor");
  if (!kge) return {false, "missing KGEditor report"};
  const double s1 = kge->succ_at.at(1), rk3 = kge->rk_at.at(3);
  const bool ok = kge->meta.split == "train" && cfg.bundle.holdout_fraction == 0.1 && s1 >= 0.85 && rk3 >= 0.85;
  return {ok, "10% held out, evaluated on the " + kge->meta.split + " split over " + std::to_string(kge->edits) +
                  " requests, KGEditor Succ@1 " + fmt(s1) + " >= 0.85, RK@3 " + fmt(rk3) + " >= 0.85"};
}

std::pair<bool, std::string> sweep_trend(const fs::path& run, const fs::path& out) {
  fs::remove_all(out);
  const auto cfg = harness::load_config(
      {}, {"bundle.dir=\"" + (run / "bundle").string() + "\"", "checkpoint=\"" + (run / "model.ckpt").string() + "\"",
           "sweep.n=[1,2,4,8,16,32]", "sweep.variants=[\"KGEditor\",\"FT\"]"});
  const auto r = harness::cmd_sweep(cfg, out);
  std::map<std::string, std::map<std::size_t, const metrics::EvalReport*>> by;
  for (const auto& rep : r.reports) by[rep.meta.variant][rep.meta.n] = &rep;
  const auto& kge = by["KGEditor"];
  const auto& ft = by["FT"];
  if (kge.size() != 6 || ft.size() != 6) return {false, "sweep did not cover n = 1..32 for both variants"};
  const bool kge_succ = kge.at(32)->succ_at.at(1) <= kge.at(1)->succ_at.at(1);
  const bool ft_succ = ft.at(32)->succ_at.at(1) <= ft.at(1)->succ_at.at(1);
  const double rk1 = kge.at(1)->rk_at.at(3);
  double spread = 0.0;
  std::string rk_list, succ_list;
  for (const auto& [n, rep] : kge) {
    spread = std::max(spread, std::abs(rep->rk_at.at(3) - rk1));
    rk_list += (rk_list.empty() ? "" : " ") + fmt(rep->rk_at.at(3), 3);
    succ_list += (succ_list.empty() ? "" : " ") + fmt(rep->succ_at.at(1), 3);
  }
  const bool ok = kge_succ && ft_succ && spread <= 0.15;
  return {ok, "KGEditor Succ@1(32) " + fmt(kge.at(32)->succ_at.at(1)) + " <= Succ@1(1) " +
                  fmt(kge.at(1)->succ_at.at(1)) + ", FT Succ@1(32) " + fmt(ft.at(32)->succ_at.at(1)) +
                  " <= Succ@1(1) " + fmt(ft.at(1)->succ_at.at(1)) + ", KGEditor RK@3 max drift " + fmt(spread) +
                  " <= 0.15 (Succ@1 by n: " + succ_list + "; RK@3 by n: " + rk_list + ")"};
}

std::pair<bool, std::string> efficiency(const PipelineRun& run) {
  const auto* kge = find_report(run.out.reports, "KGEditor");
  const auto* ke = find_report(run.out.reports, "KE");
  const auto* cal = find_report(run.out.reports, "CALINET");
  if (!kge || !ke || !cal) return {false, "missing report"};
  const bool ok = kge->params_tuned < ke->params_tuned && cal->params_tuned < kge->params_tuned;
  return {ok, "CALINET " + std::to_string(cal->params_tuned) + " < KGEditor " + std::to_string(kge->params_tuned) +
                  " < KE " + std::to_string(ke->params_tuned)};
}

std::pair<bool, std::string> determinism(const fs::path& a, const fs::path& b) {
  const auto ma = io::read_file(a / "run.manifest");
  const auto mb = io::read_file(b / "run.manifest");
  std::size_t compared = 1, checkpoints = 0;
  std::string differing;
  if (ma != mb) differing += " run.manifest";
  const json manifest = json::parse(ma);
  for (const auto& art : manifest.at("artifacts")) {
    const auto path = art.at("path").get<std::string>();
    if (!fs::exists(b / path) || io::read_file(a / path) != io::read_file(b / path)) differing += " " + path;
    ++compared;
    if (path.ends_with(".ckpt")) ++checkpoints;
  }
  const bool reports_present = fs::exists(a / "report.ndjson") && fs::exists(a / "report.tsv");
  const bool ok = differing.empty() && reports_present && checkpoints >= 3;
  return {ok, std::to_string(compared) + " files compared (" + std::to_string(checkpoints) +
                  " checkpoints, reports, bundle, manifest): " + (differing.empty() ? "all byte-identical" : "differ:" + differing)};
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  fs::create_directories(work);
  const auto start = Clock::now();

  criterion(1, "gradient correctness", gradient_correctness);
  criterion(2, "shift formula vs scalar reference", shift_oracle);
  criterion(3, "transparency at init", transparency);

  std::optional<PipelineRun> run1;
  std::string run1_error;
  try {
    run1 = run_edit(work / "run1");
  } catch (const std::exception& e) {
    run1_error = e.what();
  }
  auto needs_run1 = [&](int id, const std::string& title, const std::function<std::pair<bool, std::string>()>& f) {
    if (!run1) {
      report(id, title, false, "EDIT pipeline failed: " + run1_error);
      return;
    }
    criterion(id, title, f);
  };

  needs_run1(4, "frozen base", [&] { return frozen_base(work / "run1"); });
  criterion(5, "metric oracle", metric_oracle);
  needs_run1(6, "end-to-end EDIT", [&] { return end_to_end_edit(*run1); });
  criterion(7, "end-to-end ADD", [&] { return end_to_end_add(work / "add"); });
  needs_run1(8, "edits-count trend", [&] { return sweep_trend(work / "run1", work / "sweep"); });
  needs_run1(9, "efficiency ordering", [&] { return efficiency(*run1); });
  needs_run1(10, "determinism", [&] {
    run_edit(work / "run2");
    return determinism(work / "run1", work / "run2");
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << " in "
            << fmt(seconds_since(start), 0) << " s" << std::endl;
  return failures == 0 ? 0 : 1;
}
