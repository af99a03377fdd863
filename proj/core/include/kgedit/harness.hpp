#pragma once

// Experiment orchestration: one JSON configuration drives pretraining, bundle
// construction, editor training, evaluation, the edits-count sweep and the
// before/after case probe. Every command writes its outputs atomically under
// an output directory and finishes with `run.manifest`, which lists each
// artifact with its size and FNV-1a checksum.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kgedit/editors.hpp"
#include "kgedit/kgdata.hpp"
#include "kgedit/kgemodel.hpp"
#include "kgedit/metrics.hpp"

namespace kgedit::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr std::string_view kToolVersion = "0.1.0";

struct DataSettings {
  std::string triples;       // triple file; empty = synthetic graph
  std::string descriptions;  // optional `name<TAB>text` file
  std::size_t max_description_words = 8;
  kg::SyntheticSpec synthetic;
};

struct BundleSettings {
  kg::Task task = kg::Task::edit;
  std::string dir;  // load this bundle instead of building one
  std::size_t n_corrupt = 100;
  double rank_threshold_fraction = 0.17;
  double train_fraction = 0.5;
  std::size_t ltest_k = 3;
  std::size_t ltest_size = 200;
  // ADD: held-out requests. EDIT: triples hidden from the origin model so
  // that it has facts it cannot answer.
  double holdout_fraction = 0.1;
  // EDIT: fine-tuning of the origin model on the corrupted facts.
  std::size_t retrain_epochs = 15;
  double retrain_lr = 0.05;
  std::uint64_t seed = 5;
};

struct EvalSettings {
  std::vector<std::size_t> ks{1, 3};
  std::size_t n = 1;
  std::vector<edit::Variant> variants{edit::Variant::kgeditor};
  // Wall-clock values make reports and manifests differ between runs.
  bool record_wall_time = false;
  std::size_t locality_pool_size = 512;
};

struct SweepSettings {
  std::vector<std::size_t> n{1, 2, 4, 8, 16, 32};
  std::vector<edit::Variant> variants{edit::Variant::kgeditor, edit::Variant::ft};
};

struct ProbeSettings {
  std::string split = "test";  // or "train"
  std::size_t index = 0;
  std::size_t k = 5;
  // Optional explicit request by name; used instead of split/index when set.
  std::string known, relation, target, direction = "tail";
};

struct ExperimentConfig {
  DataSettings data;
  model::ModelConfig model;
  std::string checkpoint;  // start from this model instead of pretraining
  model::PretrainConfig pretrain;
  BundleSettings bundle;
  edit::EditorConfig editor;
  EvalSettings eval;
  SweepSettings sweep;
  ProbeSettings probe;

  ExperimentConfig();
};

json to_json(const ExperimentConfig& config);
// Unknown keys and wrongly typed values raise ConfigError.
ExperimentConfig config_from_json(const json& j);
// `key=value` with a dotted key; the value is parsed as JSON when possible,
// otherwise taken as a string.
void apply_override(json& j, std::string_view assignment);
// Reads `path` (may be empty for all defaults) and applies the overrides.
ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides);

enum class Command { pretrain, build, edit_eval, sweep, case_probe };
std::string_view to_string(Command c);
// Checks values and referenced paths before anything is computed.
void validate(const ExperimentConfig& config, Command command);

std::uint64_t config_hash(const ExperimentConfig& config);

class RunManifest {
 public:
  RunManifest(Command command, const ExperimentConfig& config, fs::path out_dir);
  // Writes `bytes` atomically to out_dir/relative and records it.
  void write(const std::string& relative, std::string_view bytes);
  // Records a file that another writer already produced under out_dir.
  void record(const std::string& relative);
  void note(const std::string& key, json value) { notes_[key] = std::move(value); }
  const fs::path& out_dir() const { return out_dir_; }
  // Writes run.manifest; returns its contents.
  std::string finish();

 private:
  Command command_;
  std::uint64_t config_hash_;
  bool wall_clock_;
  std::string started_;
  fs::path out_dir_;
  json artifacts_ = json::array();
  json notes_ = json::object();
};

// ---- pipeline steps ----------------------------------------------------------------

kg::Graph load_graph(const ExperimentConfig& config);
model::Descriptions load_descriptions(const ExperimentConfig& config, const kg::Vocabulary& entities);
model::ModelConfig model_config_for(const ExperimentConfig& config, const kg::Vocabulary& entities,
                                    const kg::Vocabulary& relations,
                                    const model::Descriptions& descriptions);

struct PretrainOutput {
  std::shared_ptr<model::BaseModel> model;
  model::PretrainResult result;
};
PretrainOutput cmd_pretrain(const ExperimentConfig& config, const fs::path& out);

struct BuildOutput {
  kg::DatasetBundle bundle;
  std::shared_ptr<model::BaseModel> model;  // the model that gets edited (frozen)
  double hits_at_1 = -1.0;                  // its filtered Hits@1 on the bundle's pretrain facts
};
// Builds into `manifest` (bundle/, model.ckpt and loss curves).
BuildOutput build_into(const ExperimentConfig& config, RunManifest& manifest);
BuildOutput cmd_build(const ExperimentConfig& config, const fs::path& out);

// Pretrain facts the model ranks within ltest_k, minus edited queries and the
// L-Test; seeded sample of at most eval.locality_pool_size probes.
std::vector<kg::Probe> locality_pool(const model::BaseModel& model, const kg::DatasetBundle& bundle,
                                     const ExperimentConfig& config);

struct EditEvalOutput {
  std::vector<metrics::EvalReport> reports;
  double base_hits_at_1 = -1.0;
};
EditEvalOutput cmd_edit_eval(const ExperimentConfig& config, const fs::path& out);

struct SweepOutput {
  std::vector<metrics::EvalReport> reports;  // variant-major, n ascending
};
SweepOutput cmd_sweep(const ExperimentConfig& config, const fs::path& out);

struct ProbeRow {
  std::string stage;  // "before" or "after"
  std::size_t rank = 0;
  std::string entity;
  double probability = 0.0;
};
struct ProbeOutput {
  kg::EditRequest request;
  std::vector<ProbeRow> rows;
};
ProbeOutput cmd_case_probe(const ExperimentConfig& config, const fs::path& out);

// Raises glibc's trim / mmap thresholds so that the many short-lived tensor
// buffers are recycled instead of returned to the kernel. No-op elsewhere.
void tune_allocator();

}  // namespace kgedit::harness
