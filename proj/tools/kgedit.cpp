// kgedit: command-line front end for pretraining, bundle construction,
// editor evaluation, the edits-count sweep and case probes.
//
// Exit codes: 0 success, 2 configuration error, 3 runtime error or
// divergence, 4 undefined metric.

#include <chrono>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/harness.hpp"

namespace {

using namespace kgedit;
namespace fs = std::filesystem;

struct CommonOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "run";
  bool print_config = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON experiment configuration");
  cmd->add_option("--set", o.overrides, "Override a config value, e.g. --set pretrain.epochs=10")
      ->allow_extra_args(false);
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_flag("--print-effective-config", o.print_config,
                "Print the configuration after defaults and overrides, then exit");
}

void print_reports(const std::vector<metrics::EvalReport>& reports) {
  std::cout << metrics::tsv_header() << '\n';
  for (const auto& r : reports) std::cout << metrics::tsv_row(r) << '\n';
}

int run(harness::Command command, const CommonOptions& o) {
  const auto config = harness::load_config(o.config, o.overrides);
  if (o.print_config) {
    std::cout << harness::to_json(config).dump(2) << '\n';
    return 0;
  }
  harness::validate(config, command);
  const auto start = std::chrono::steady_clock::now();
  switch (command) {
    case harness::Command::pretrain: {
      const auto r = harness::cmd_pretrain(config, o.out);
      std::cout << "epochs " << r.result.epochs_run << ", filtered Hits@1 " << r.result.final_hits_at_1
                << '\n';
      break;
    }
    case harness::Command::build: {
      const auto r = harness::cmd_build(config, o.out);
      std::cout << "pretrain " << r.bundle.pretrain.size() << ", train " << r.bundle.train.size()
                << ", test " << r.bundle.test.size() << ", L-Test " << r.bundle.ltest.size()
                << ", model Hits@1 " << r.hits_at_1 << '\n';
      break;
    }
    case harness::Command::edit_eval:
      print_reports(harness::cmd_edit_eval(config, o.out).reports);
      break;
    case harness::Command::sweep:
      print_reports(harness::cmd_sweep(config, o.out).reports);
      break;
    case harness::Command::case_probe: {
      const auto r = harness::cmd_case_probe(config, o.out);
      std::cout << "stage\trank\tentity\tprobability\n";
      for (const auto& row : r.rows) {
        std::cout << row.stage << '\t' << row.rank << '\t' << row.entity << '\t' << row.probability << '\n';
      }
      break;
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cerr << harness::to_string(command) << " finished in " << seconds << " s; outputs in " << o.out
            << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  harness::tune_allocator();
  CLI::App app{"Knowledge-graph embedding editing experiments"};
  app.require_subcommand(1);

  struct Entry {
    harness::Command command;
    const char* name;
    const char* help;
    CommonOptions options;
    CLI::App* app = nullptr;
  };
  std::vector<Entry> entries{
      {harness::Command::pretrain, "pretrain", "Pretrain a model on a triple file", {}},
      {harness::Command::build, "build", "Build an EDIT or ADD dataset bundle", {}},
      {harness::Command::edit_eval, "edit-eval", "Train editors and evaluate them on a bundle", {}},
      {harness::Command::sweep, "sweep", "Evaluate editors over several edit-group sizes", {}},
      {harness::Command::case_probe, "case-probe", "Top-k predictions before and after one edit", {}},
  };
  for (auto& e : entries) {
    e.app = app.add_subcommand(e.name, e.help);
    add_common(e.app, e.options);
  }

  kg::SyntheticSpec synth;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic triple file");
  synth_cmd->add_option("--entities", synth.entities)->capture_default_str();
  synth_cmd->add_option("--relations", synth.relations)->capture_default_str();
  synth_cmd->add_option("--triples", synth.triples)->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--out", synth_out, "Triple file to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth_cmd->parsed()) {
      io::write_file_atomic(synth_out, kg::format_triples(kg::synthesize_graph(synth)));
      return 0;
    }
    for (const auto& e : entries) {
      if (e.app->parsed()) return run(e.command, e.options);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IndexError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const MetricError& e) {
    std::cerr << "undefined metric: " << e.what() << '\n';
    return 4;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
