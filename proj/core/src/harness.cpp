#include "kgedit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <set>
#include <sstream>
#include <type_traits>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/rng.hpp"

namespace kgedit::harness {

namespace {

constexpr std::uint64_t kHoldoutSalt = 0x484f4c444f5554ULL;
constexpr std::uint64_t kPoolSalt = 0x504f4f4cULL;

// ---- strict JSON reading ----------------------------------------------------------------

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  Section child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, path_.empty() ? key : path_ + "." + key);
  }

  template <typename U>
    requires std::is_unsigned_v<U>
  void get(const char* key, U& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<U>();
    }
  }
  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "true or false");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of non-negative integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_unsigned()) fail(key, "an array of non-negative integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void get(const char* key, std::vector<edit::Variant>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "an array of editor names");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(key, "an array of editor names");
        out.push_back(edit::parse_variant(e.get<std::string>()));
      }
    }
  }
  template <typename Enum, typename Parse>
  void get_enum(const char* key, Enum& out, Parse parse) {
    std::string text;
    get(key, text);
    if (text.empty()) return;
    try {
      out = parse(text);
    } catch (const Error& e) {
      throw ConfigError(label(key) + ": " + e.what());
    }
  }

  // Every key must have been consumed.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + label(key.c_str()) + "'");
    }
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string label(const char* key = nullptr) const {
    std::string l = path_.empty() ? std::string("config") : path_;
    if (key) l = path_.empty() ? std::string(key) : path_ + "." + key;
    return l;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ConfigError("config key '" + label(key) + "' must be " + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json variants_json(const std::vector<edit::Variant>& vs) {
  json a = json::array();
  for (auto v : vs) a.push_back(std::string(edit::to_string(v)));
  return a;
}

std::string loss_curve_tsv(const model::PretrainResult& r) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch\tstep\tloss\n";
  for (const auto& p : r.curve) out << p.epoch << '\t' << p.step << '\t' << p.loss << '\n';
  return out.str();
}

std::string editor_loss_tsv(const edit::TrainLog& log) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch\tloss\n";
  for (std::size_t i = 0; i < log.epoch_loss.size(); ++i) out << i << '\t' << log.epoch_loss[i] << '\n';
  return out.str();
}

std::string iso_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string provenance(const ExperimentConfig& c) {
  if (!c.data.triples.empty()) return "file:" + fs::path(c.data.triples).filename().string();
  const auto& s = c.data.synthetic;
  return "synthetic:entities=" + std::to_string(s.entities) + ",relations=" +
         std::to_string(s.relations) + ",triples=" + std::to_string(s.triples) +
         ",seed=" + std::to_string(s.seed);
}

}  // namespace

// ---- configuration ------------------------------------------------------------------------

ExperimentConfig::ExperimentConfig() { pretrain.target_hits_at_1 = 0.95; }

json to_json(const ExperimentConfig& c) {
  json j;
  j["data"] = {{"triples", c.data.triples},
               {"descriptions", c.data.descriptions},
               {"max_description_words", c.data.max_description_words},
               {"synthetic",
                {{"entities", c.data.synthetic.entities},
                 {"relations", c.data.synthetic.relations},
                 {"triples", c.data.synthetic.triples},
                 {"seed", c.data.synthetic.seed}}}};
  j["model"] = {{"d_model", c.model.d_model},       {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},       {"d_ff", c.model.d_ff},
                {"max_seq_len", c.model.max_seq_len}, {"head", std::string(model::to_string(c.model.head))},
                {"seed", c.model.seed},             {"init_std", c.model.init_std}};
  j["checkpoint"] = c.checkpoint;
  const auto& p = c.pretrain;
  j["pretrain"] = {{"optimizer", std::string(model::to_string(p.optimizer))},
                   {"epochs", p.epochs},
                   {"batch_size", p.batch_size},
                   {"lr", p.lr},
                   {"momentum", p.momentum},
                   {"clip_norm", p.clip_norm},
                   {"warmup_steps", p.warmup_steps},
                   {"final_lr_fraction", p.final_lr_fraction},
                   {"target_hits_at_1", p.target_hits_at_1},
                   {"eval_every", p.eval_every},
                   {"negatives_per_positive", p.negatives_per_positive},
                   {"seed", p.seed}};
  const auto& b = c.bundle;
  j["bundle"] = {{"task", std::string(kg::to_string(b.task))},
                 {"dir", b.dir},
                 {"n_corrupt", b.n_corrupt},
                 {"rank_threshold_fraction", b.rank_threshold_fraction},
                 {"train_fraction", b.train_fraction},
                 {"ltest_k", b.ltest_k},
                 {"ltest_size", b.ltest_size},
                 {"holdout_fraction", b.holdout_fraction},
                 {"retrain_epochs", b.retrain_epochs},
                 {"retrain_lr", b.retrain_lr},
                 {"seed", b.seed}};
  const auto& e = c.editor;
  j["editor"] = {{"locality_weight", e.locality_weight},
                 {"locality_sample_size", e.locality_sample_size},
                 {"epochs", e.epochs},
                 {"batch_size", e.batch_size},
                 {"lr", e.lr},
                 {"clip_norm", e.clip_norm},
                 {"group_steps", e.group_steps},
                 {"group_lr", e.group_lr},
                 {"ft_lr", e.ft_lr},
                 {"patch_width", e.patch_width},
                 {"calinet_width", e.calinet_width},
                 {"patch_threshold", e.patch_threshold},
                 {"attach_layer", e.attach_layer},
                 {"joint_patch", e.joint_patch},
                 {"embed_dim", e.embed_dim},
                 {"lstm_hidden", e.lstm_hidden},
                 {"cond_dim", e.cond_dim},
                 {"initial_step", e.initial_step},
                 {"seed", e.seed}};
  j["eval"] = {{"ks", c.eval.ks},
               {"n", c.eval.n},
               {"variants", variants_json(c.eval.variants)},
               {"record_wall_time", c.eval.record_wall_time},
               {"locality_pool_size", c.eval.locality_pool_size}};
  j["sweep"] = {{"n", c.sweep.n}, {"variants", variants_json(c.sweep.variants)}};
  j["probe"] = {{"split", c.probe.split},       {"index", c.probe.index},
                {"k", c.probe.k},               {"known", c.probe.known},
                {"relation", c.probe.relation}, {"target", c.probe.target},
                {"direction", c.probe.direction}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section root(j, "");
  {
    Section s = root.child("data");
    s.get("triples", c.data.triples);
    s.get("descriptions", c.data.descriptions);
    s.get("max_description_words", c.data.max_description_words);
    Section syn = s.child("synthetic");
    syn.get("entities", c.data.synthetic.entities);
    syn.get("relations", c.data.synthetic.relations);
    syn.get("triples", c.data.synthetic.triples);
    syn.get("seed", c.data.synthetic.seed);
    syn.finish();
    s.finish();
  }
  {
    Section s = root.child("model");
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("d_ff", c.model.d_ff);
    s.get("max_seq_len", c.model.max_seq_len);
    s.get_enum("head", c.model.head, model::parse_head);
    s.get("seed", c.model.seed);
    s.get("init_std", c.model.init_std);
    s.finish();
  }
  root.get("checkpoint", c.checkpoint);
  {
    Section s = root.child("pretrain");
    auto& p = c.pretrain;
    s.get_enum("optimizer", p.optimizer, model::parse_optimizer);
    s.get("epochs", p.epochs);
    s.get("batch_size", p.batch_size);
    s.get("lr", p.lr);
    s.get("momentum", p.momentum);
    s.get("clip_norm", p.clip_norm);
    s.get("warmup_steps", p.warmup_steps);
    s.get("final_lr_fraction", p.final_lr_fraction);
    s.get("target_hits_at_1", p.target_hits_at_1);
    s.get("eval_every", p.eval_every);
    s.get("negatives_per_positive", p.negatives_per_positive);
    s.get("seed", p.seed);
    s.finish();
  }
  {
    Section s = root.child("bundle");
    auto& b = c.bundle;
    s.get_enum("task", b.task, kg::parse_task);
    s.get("dir", b.dir);
    s.get("n_corrupt", b.n_corrupt);
    s.get("rank_threshold_fraction", b.rank_threshold_fraction);
    s.get("train_fraction", b.train_fraction);
    s.get("ltest_k", b.ltest_k);
    s.get("ltest_size", b.ltest_size);
    s.get("holdout_fraction", b.holdout_fraction);
    s.get("retrain_epochs", b.retrain_epochs);
    s.get("retrain_lr", b.retrain_lr);
    s.get("seed", b.seed);
    s.finish();
  }
  {
    Section s = root.child("editor");
    auto& e = c.editor;
    s.get("locality_weight", e.locality_weight);
    s.get("locality_sample_size", e.locality_sample_size);
    s.get("epochs", e.epochs);
    s.get("batch_size", e.batch_size);
    s.get("lr", e.lr);
    s.get("clip_norm", e.clip_norm);
    s.get("group_steps", e.group_steps);
    s.get("group_lr", e.group_lr);
    s.get("ft_lr", e.ft_lr);
    s.get("patch_width", e.patch_width);
    s.get("calinet_width", e.calinet_width);
    s.get("patch_threshold", e.patch_threshold);
    s.get("attach_layer", e.attach_layer);
    s.get("joint_patch", e.joint_patch);
    s.get("embed_dim", e.embed_dim);
    s.get("lstm_hidden", e.lstm_hidden);
    s.get("cond_dim", e.cond_dim);
    s.get("initial_step", e.initial_step);
    s.get("seed", e.seed);
    s.finish();
  }
  {
    Section s = root.child("eval");
    s.get("ks", c.eval.ks);
    s.get("n", c.eval.n);
    s.get("variants", c.eval.variants);
    s.get("record_wall_time", c.eval.record_wall_time);
    s.get("locality_pool_size", c.eval.locality_pool_size);
    s.finish();
  }
  {
    Section s = root.child("sweep");
    s.get("n", c.sweep.n);
    s.get("variants", c.sweep.variants);
    s.finish();
  }
  {
    Section s = root.child("probe");
    s.get("split", c.probe.split);
    s.get("index", c.probe.index);
    s.get("k", c.probe.k);
    s.get("known", c.probe.known);
    s.get("relation", c.probe.relation);
    s.get("target", c.probe.target);
    s.get("direction", c.probe.direction);
    s.finish();
  }
  root.finish();
  c.editor.edit_batch_size = c.eval.n;
  return c;
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      json value = json::parse(text, nullptr, false);
      (*node)[part] = value.is_discarded() ? json(text) : value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
    j = json::parse(io::read_file(path), nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

std::string_view to_string(Command c) {
  switch (c) {
    case Command::pretrain:
      return "pretrain";
    case Command::build:
      return "build";
    case Command::edit_eval:
      return "edit-eval";
    case Command::sweep:
      return "sweep";
    case Command::case_probe:
      return "case-probe";
  }
  return "?";
}

void validate(const ExperimentConfig& c, Command command) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  auto must_exist = [&](const std::string& p, const char* what) {
    if (!p.empty() && !fs::exists(p)) fail(std::string(what) + " " + p + " does not exist");
  };
  must_exist(c.data.triples, "triple file");
  must_exist(c.data.descriptions, "description file");
  must_exist(c.checkpoint, "checkpoint");
  must_exist(c.bundle.dir, "bundle directory");
  if (c.data.triples.empty()) {
    const auto& s = c.data.synthetic;
    if (s.entities < 2 || s.relations == 0 || s.triples == 0) fail("synthetic graph sizes are too small");
  }

  const auto& m = c.model;
  if (m.d_model == 0 || m.n_layers == 0 || m.n_heads == 0 || m.d_ff == 0) fail("model sizes must be positive");
  if (m.d_model % m.n_heads != 0) fail("model.d_model must be divisible by model.n_heads");
  if (m.max_seq_len < 5) fail("model.max_seq_len must be at least 5");
  if (!(m.init_std > 0.0)) fail("model.init_std must be positive");

  const auto& p = c.pretrain;
  if (p.epochs == 0 || p.batch_size == 0) fail("pretrain.epochs and pretrain.batch_size must be positive");
  if (!(p.lr > 0.0)) fail("pretrain.lr must be positive");
  if (!(p.momentum >= 0.0 && p.momentum < 1.0)) fail("pretrain.momentum must be in [0, 1)");
  if (!(p.final_lr_fraction >= 0.0 && p.final_lr_fraction <= 1.0)) fail("pretrain.final_lr_fraction must be in [0, 1]");
  if (!(p.target_hits_at_1 <= 1.0)) fail("pretrain.target_hits_at_1 must be <= 1");
  if (p.eval_every == 0) fail("pretrain.eval_every must be positive");

  if (command == Command::pretrain) return;

  const auto& b = c.bundle;
  if (!(b.rank_threshold_fraction >= 0.0 && b.rank_threshold_fraction < 1.0)) {
    fail("bundle.rank_threshold_fraction must be in [0, 1)");
  }
  if (!(b.train_fraction >= 0.0 && b.train_fraction <= 1.0)) fail("bundle.train_fraction must be in [0, 1]");
  if (!(b.holdout_fraction >= 0.0 && b.holdout_fraction < 1.0)) fail("bundle.holdout_fraction must be in [0, 1)");
  if (b.ltest_k == 0) fail("bundle.ltest_k must be positive");
  if (b.task == kg::Task::edit && b.dir.empty() && !(b.retrain_lr > 0.0)) fail("bundle.retrain_lr must be positive");
  if (!b.dir.empty() && c.checkpoint.empty()) {
    fail("bundle.dir needs checkpoint: the model the bundle was built for");
  }
  if (b.dir.empty() && b.task == kg::Task::add && !c.checkpoint.empty()) {
    fail("ADD bundles train their own model; checkpoint is only valid together with bundle.dir");
  }

  if (command == Command::build) return;

  c.editor.validate();
  c.editor.resolved_layer(m.n_layers);
  if (c.eval.ks.empty()) fail("eval.ks must not be empty");
  for (auto k : c.eval.ks) {
    if (k == 0) fail("eval.ks values must be >= 1");
  }
  if (c.eval.n == 0) fail("eval.n must be >= 1");
  if (c.eval.variants.empty()) fail("eval.variants must not be empty");
  if (command == Command::sweep) {
    if (c.sweep.n.empty()) fail("sweep.n must not be empty");
    for (auto n : c.sweep.n) {
      if (n == 0) fail("sweep.n values must be >= 1");
    }
    if (c.sweep.variants.empty()) fail("sweep.variants must not be empty");
  }
  if (command == Command::case_probe) {
    if (c.probe.split != "train" && c.probe.split != "test") fail("probe.split must be train or test");
    if (c.probe.k == 0) fail("probe.k must be >= 1");
    const bool any = !c.probe.known.empty() || !c.probe.relation.empty() || !c.probe.target.empty();
    const bool all = !c.probe.known.empty() && !c.probe.relation.empty() && !c.probe.target.empty();
    if (any && !all) fail("probe.known, probe.relation and probe.target must be given together");
    if (c.probe.direction != "tail" && c.probe.direction != "head") fail("probe.direction must be tail or head");
  }
}

std::uint64_t config_hash(const ExperimentConfig& c) { return io::fnv1a64(to_json(c).dump()); }

// ---- manifest ----------------------------------------------------------------------------

RunManifest::RunManifest(Command command, const ExperimentConfig& config, fs::path out_dir)
    : command_(command),
      config_hash_(config_hash(config)),
      wall_clock_(config.eval.record_wall_time),
      out_dir_(std::move(out_dir)) {
  if (wall_clock_) started_ = iso_now();
  fs::create_directories(out_dir_);
  write("config.json", to_json(config).dump(2) + "\n");
}

void RunManifest::write(const std::string& relative, std::string_view bytes) {
  const fs::path path = out_dir_ / relative;
  fs::create_directories(path.parent_path());
  io::write_file_atomic(path, bytes);
  artifacts_.push_back({{"path", relative}, {"bytes", bytes.size()}, {"fnv1a64", io::hex64(io::fnv1a64(bytes))}});
}

void RunManifest::record(const std::string& relative) {
  const std::string bytes = io::read_file(out_dir_ / relative);
  artifacts_.push_back({{"path", relative}, {"bytes", bytes.size()}, {"fnv1a64", io::hex64(io::fnv1a64(bytes))}});
}

std::string RunManifest::finish() {
  json j;
  j["format"] = "kgedit-run";
  j["version"] = 1;
  j["tool_version"] = std::string(kToolVersion);
  j["command"] = std::string(to_string(command_));
  j["config_hash"] = io::hex64(config_hash_);
  if (wall_clock_) {
    j["started"] = started_;
    j["finished"] = iso_now();
  }
  j["artifacts"] = artifacts_;
  j["notes"] = notes_;
  const std::string text = j.dump(2) + "\n";
  io::write_file_atomic(out_dir_ / "run.manifest", text);
  return text;
}

// ---- pipeline ----------------------------------------------------------------------------------

kg::Graph load_graph(const ExperimentConfig& c) {
  if (!c.data.triples.empty()) return kg::load_triples(c.data.triples);
  return kg::synthesize_graph(c.data.synthetic);
}

model::Descriptions load_descriptions(const ExperimentConfig& c, const kg::Vocabulary& entities) {
  if (c.data.descriptions.empty()) return {};
  return model::Descriptions::build(entities, kg::load_descriptions(c.data.descriptions),
                                    c.data.max_description_words);
}

model::ModelConfig model_config_for(const ExperimentConfig& c, const kg::Vocabulary& entities,
                                    const kg::Vocabulary& relations,
                                    const model::Descriptions& descriptions) {
  model::ModelConfig m = c.model;
  m.entity_vocab_size = entities.size();
  m.relation_vocab_size = relations.size();
  m.word_vocab_size = descriptions.words.size();
  m.validate();
  return m;
}

PretrainOutput cmd_pretrain(const ExperimentConfig& c, const fs::path& out) {
  validate(c, Command::pretrain);
  RunManifest manifest(Command::pretrain, c, out);
  const kg::Graph graph = load_graph(c);
  const auto desc = load_descriptions(c, graph.entities);
  PretrainOutput o;
  o.model = std::make_shared<model::BaseModel>(model_config_for(c, graph.entities, graph.relations, desc), desc);
  o.result = model::pretrain(*o.model, graph, c.pretrain);
  o.model->freeze();
  manifest.write("model.ckpt", model::encode_checkpoint(*o.model));
  manifest.write("loss_curve.tsv", loss_curve_tsv(o.result));
  manifest.note("triples", graph.size());
  manifest.note("epochs_run", o.result.epochs_run);
  manifest.note("hits_at_1", o.result.final_hits_at_1);
  manifest.finish();
  return o;
}

namespace {

void record_dir(RunManifest& manifest, const std::string& relative) {
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(manifest.out_dir() / relative)) {
    if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (const auto& n : names) manifest.record(relative + "/" + n);
}

std::shared_ptr<model::BaseModel> load_frozen(const std::string& path) {
  auto m = std::make_shared<model::BaseModel>(model::load_checkpoint(path));
  m->freeze();
  return m;
}

std::string bundle_id(const fs::path& dir) {
  return io::hex64(io::fnv1a64(io::read_file(dir / "manifest.json")));
}

}  // namespace

BuildOutput build_into(const ExperimentConfig& c, RunManifest& manifest) {
  BuildOutput o;
  if (!c.bundle.dir.empty()) {
    o.bundle = kg::load_bundle(c.bundle.dir);
    o.model = load_frozen(c.checkpoint);
    if (o.model->config().entity_vocab_size != o.bundle.entities.size() ||
        o.model->config().relation_vocab_size != o.bundle.relations.size()) {
      throw ConfigError("checkpoint vocabulary does not match bundle " + c.bundle.dir);
    }
    manifest.note("bundle_id", bundle_id(c.bundle.dir));
    o.hits_at_1 = model::filtered_hits_at_k(*o.model, o.bundle.pretrain_graph(), 1);
    manifest.note("hits_at_1", o.hits_at_1);
    return o;
  }

  const kg::Graph graph = load_graph(c);
  const auto desc = load_descriptions(c, graph.entities);
  const auto mc = model_config_for(c, graph.entities, graph.relations, desc);
  const auto& b = c.bundle;

  if (b.task == kg::Task::edit) {
    std::shared_ptr<model::BaseModel> origin;
    if (!c.checkpoint.empty()) {
      origin = load_frozen(c.checkpoint);
      if (origin->config().entity_vocab_size != graph.entities.size()) {
        throw ConfigError("checkpoint vocabulary does not match the graph");
      }
    } else {
      // The origin model never sees a held-out slice of the facts, so that
      // there are facts it ranks poorly.
      std::vector<std::size_t> order(graph.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(b.seed ^ kHoldoutSalt);
      rng.shuffle(order);
      const std::size_t hold = static_cast<std::size_t>(std::floor(b.holdout_fraction * static_cast<double>(order.size())));
      std::vector<std::size_t> keep(order.begin() + static_cast<std::ptrdiff_t>(hold), order.end());
      std::sort(keep.begin(), keep.end());
      std::vector<kg::Triple> kept;
      for (auto i : keep) kept.push_back(graph.triples()[i]);
      origin = std::make_shared<model::BaseModel>(mc, desc);
      const auto r = model::pretrain(*origin, graph.with_triples(kept), c.pretrain);
      origin->freeze();
      manifest.write("origin.ckpt", model::encode_checkpoint(*origin));
      manifest.write("origin_loss.tsv", loss_curve_tsv(r));
      manifest.note("origin_hits_at_1", r.final_hits_at_1);
    }
    std::shared_ptr<model::BaseModel> edited;
    model::PretrainResult retrain;
    kg::RetrainHook hook = [&](const kg::Graph& corrupted) -> std::shared_ptr<const kg::EntityScorer> {
      auto m = std::make_shared<model::BaseModel>(origin->clone());
      model::PretrainConfig rc = c.pretrain;
      rc.epochs = b.retrain_epochs;
      rc.lr = b.retrain_lr;
      rc.warmup_steps = 0;
      rc.target_hits_at_1 = 0.0;
      if (rc.epochs > 0) retrain = model::pretrain(*m, corrupted, rc);
      m->freeze();
      edited = m;
      return std::make_shared<model::ModelScorer>(m);
    };
    const model::ModelScorer origin_scorer(origin);
    kg::EditBundleConfig ec;
    ec.n_corrupt = b.n_corrupt;
    ec.rank_threshold_fraction = b.rank_threshold_fraction;
    ec.train_fraction = b.train_fraction;
    ec.ltest_k = b.ltest_k;
    ec.ltest_size = b.ltest_size;
    ec.seed = b.seed;
    ec.provenance = provenance(c);
    o.bundle = kg::build_edit_bundle(graph, origin_scorer, ec, hook);
    o.model = edited ? edited : origin;
    if (!retrain.curve.empty()) manifest.write("retrain_loss.tsv", loss_curve_tsv(retrain));
  } else {
    model::PretrainResult trained;
    kg::RetrainHook hook = [&](const kg::Graph& rest) -> std::shared_ptr<const kg::EntityScorer> {
      auto m = std::make_shared<model::BaseModel>(mc, desc);
      trained = model::pretrain(*m, rest, c.pretrain);
      m->freeze();
      o.model = m;
      return std::make_shared<model::ModelScorer>(m);
    };
    kg::AddBundleConfig ac;
    ac.holdout_fraction = b.holdout_fraction;
    ac.ltest_k = b.ltest_k;
    ac.ltest_size = b.ltest_size;
    ac.seed = b.seed;
    ac.provenance = provenance(c);
    o.bundle = kg::build_add_bundle(graph, ac, hook);
    manifest.write("loss_curve.tsv", loss_curve_tsv(trained));
  }

  kg::save_bundle(o.bundle, manifest.out_dir() / "bundle");
  record_dir(manifest, "bundle");
  manifest.write("model.ckpt", model::encode_checkpoint(*o.model));
  manifest.note("bundle_id", bundle_id(manifest.out_dir() / "bundle"));
  manifest.note("counts", {{"pretrain", o.bundle.pretrain.size()},
                           {"train", o.bundle.train.size()},
                           {"test", o.bundle.test.size()},
                           {"ltest", o.bundle.ltest.size()}});
  o.hits_at_1 = model::filtered_hits_at_k(*o.model, o.bundle.pretrain_graph(), 1);
  manifest.note("hits_at_1", o.hits_at_1);
  return o;
}

BuildOutput cmd_build(const ExperimentConfig& c, const fs::path& out) {
  validate(c, Command::build);
  RunManifest manifest(Command::build, c, out);
  BuildOutput o = build_into(c, manifest);
  manifest.finish();
  return o;
}

std::vector<kg::Probe> locality_pool(const model::BaseModel& m, const kg::DatasetBundle& bundle,
                                     const ExperimentConfig& c) {
  kg::Exclusions ex;
  for (const auto& r : bundle.train) ex.add_request(r);
  for (const auto& r : bundle.test) ex.add_request(r);
  for (const auto& p : bundle.ltest) ex.add_probe(p);
  std::vector<kg::Probe> candidates;
  for (const auto& p : kg::all_probes(bundle.pretrain_graph())) {
    if (!ex.excludes(p)) candidates.push_back(p);
  }
  const auto ranks = kg::rank_probes(model::ModelScorer(std::shared_ptr<const model::BaseModel>(
                                         &m, [](const model::BaseModel*) {})),
                                     candidates);
  std::vector<kg::Probe> pool;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (ranks[i] <= bundle.meta.ltest_k) pool.push_back(candidates[i]);
  }
  Rng rng(c.bundle.seed ^ kPoolSalt);
  rng.shuffle(pool);
  if (pool.size() > c.eval.locality_pool_size) pool.resize(c.eval.locality_pool_size);
  return pool;
}

namespace {

struct Session {
  BuildOutput built;
  std::vector<kg::Probe> pool;
  std::string bundle_id;
};

Session open_session(const ExperimentConfig& c, RunManifest& manifest) {
  Session s;
  s.built = build_into(c, manifest);
  s.pool = locality_pool(*s.built.model, s.built.bundle, c);
  s.bundle_id = c.bundle.dir.empty() ? bundle_id(manifest.out_dir() / "bundle") : bundle_id(c.bundle.dir);
  manifest.note("locality_pool", s.pool.size());
  return s;
}

const std::vector<kg::EditRequest>& eval_split(const kg::DatasetBundle& b) {
  // EDIT evaluates on held-out requests; ADD on the training requests.
  return b.meta.task == kg::Task::edit ? b.test : b.train;
}

std::string variant_file(std::string_view v) {
  std::string s(v);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return s;
}

edit::BuiltEditor train_editor(const ExperimentConfig& c, const Session& s, edit::Variant v,
                               RunManifest& manifest) {
  edit::EditorConfig ec = c.editor;
  ec.variant = v;
  auto built = edit::build_editor(s.built.model, ec, s.built.bundle.train, s.pool);
  const std::string name = variant_file(edit::to_string(v));
  if (v == edit::Variant::kgeditor || v == edit::Variant::ke) {
    manifest.write("editor." + name + ".ckpt", edit::encode_editor_checkpoint(*built.editor));
    manifest.write("editor_loss." + name + ".tsv", editor_loss_tsv(built.log));
  }
  return built;
}

metrics::EvalReport run_eval(const ExperimentConfig& c, const Session& s, const edit::Editor& editor,
                             std::size_t n, std::vector<std::size_t> ks) {
  const model::ModelScorer base(s.built.model);
  metrics::EvalOptions opts;
  opts.n = n;
  opts.ks = std::move(ks);
  opts.record_time = c.eval.record_wall_time;
  const auto& split = eval_split(s.built.bundle);
  auto r = metrics::evaluate(
      base, split, [&](std::span<const kg::EditRequest> g) { return editor.apply(g); },
      s.built.bundle.ltest, opts);
  r.params_tuned = editor.params_tuned();
  r.meta.bundle_id = s.bundle_id;
  r.meta.variant = std::string(edit::to_string(editor.variant()));
  r.meta.task = std::string(kg::to_string(s.built.bundle.meta.task));
  r.meta.split = s.built.bundle.meta.task == kg::Task::edit ? "test" : "train";
  r.meta.seed = c.editor.seed;
  return r;
}

std::string reports_ndjson(const std::vector<metrics::EvalReport>& rs) {
  std::string out;
  for (const auto& r : rs) out += metrics::to_ndjson(r) + "\n";
  return out;
}

std::string reports_tsv(const std::vector<metrics::EvalReport>& rs) {
  std::string out = metrics::tsv_header() + "\n";
  for (const auto& r : rs) out += metrics::tsv_row(r) + "\n";
  return out;
}

std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

EditEvalOutput cmd_edit_eval(const ExperimentConfig& c, const fs::path& out) {
  validate(c, Command::edit_eval);
  RunManifest manifest(Command::edit_eval, c, out);
  const Session s = open_session(c, manifest);
  EditEvalOutput o;
  o.base_hits_at_1 = s.built.hits_at_1;
  for (auto v : c.eval.variants) {
    const auto built = train_editor(c, s, v, manifest);
    o.reports.push_back(run_eval(c, s, *built.editor, c.eval.n, c.eval.ks));
  }
  manifest.write("report.ndjson", reports_ndjson(o.reports));
  manifest.write("report.tsv", reports_tsv(o.reports));
  manifest.finish();
  return o;
}

SweepOutput cmd_sweep(const ExperimentConfig& c, const fs::path& out) {
  validate(c, Command::sweep);
  RunManifest manifest(Command::sweep, c, out);
  const Session s = open_session(c, manifest);
  std::vector<std::size_t> ks = c.eval.ks;
  for (std::size_t k : {1, 3}) {
    if (std::find(ks.begin(), ks.end(), k) == ks.end()) ks.push_back(k);
  }
  std::sort(ks.begin(), ks.end());
  std::vector<std::size_t> ns = c.sweep.n;
  std::sort(ns.begin(), ns.end());
  ns.erase(std::unique(ns.begin(), ns.end()), ns.end());
  SweepOutput o;
  for (auto v : c.sweep.variants) {
    const auto built = train_editor(c, s, v, manifest);
    std::string succ = "# n\tSucc@1\n", rk = "# n\tRK@3\n";
    for (auto n : ns) {
      auto r = run_eval(c, s, *built.editor, n, ks);
      succ += std::to_string(n) + "\t" + num(r.succ_at.at(1)) + "\n";
      rk += std::to_string(n) + "\t" + num(r.rk_at.at(3)) + "\n";
      o.reports.push_back(std::move(r));
    }
    const std::string name = variant_file(edit::to_string(v));
    manifest.write("plot_succ_at_1." + name + ".tsv", succ);
    manifest.write("plot_rk_at_3." + name + ".tsv", rk);
  }
  manifest.write("sweep.ndjson", reports_ndjson(o.reports));
  manifest.write("sweep.tsv", reports_tsv(o.reports));
  manifest.finish();
  return o;
}

namespace {

// Probabilities behind the ranking scores: softmax over entities for the PT
// head, per-triple sigmoid for the FT head.
std::vector<double> probabilities(const model::BaseModel& m, const std::vector<double>& scores) {
  std::vector<double> p(scores.size());
  if (m.config().head == model::HeadKind::ft) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = 1.0 / (1.0 + std::exp(-scores[i]));
    return p;
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(scores[i] - mx);
  for (auto& v : p) v /= z;
  return p;
}

void top_rows(const std::string& stage, const std::vector<double>& scores, const std::vector<double>& probs,
              const kg::Vocabulary& entities, std::size_t k, std::vector<ProbeRow>& rows) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
    rows.push_back({stage, i + 1, entities.name(static_cast<kg::EntityId>(order[i])), probs[order[i]]});
  }
}

}  // namespace

ProbeOutput cmd_case_probe(const ExperimentConfig& c, const fs::path& out) {
  validate(c, Command::case_probe);
  RunManifest manifest(Command::case_probe, c, out);
  const Session s = open_session(c, manifest);
  const auto& bundle = s.built.bundle;
  ProbeOutput o;
  if (!c.probe.known.empty()) {
    o.request.direction = c.probe.direction == "head" ? kg::Direction::head_query : kg::Direction::tail_query;
    o.request.known = bundle.entities.id(c.probe.known);
    o.request.relation = bundle.relations.id(c.probe.relation);
    o.request.target = bundle.entities.id(c.probe.target);
  } else {
    const auto& split = c.probe.split == "train" ? bundle.train : bundle.test;
    if (c.probe.index >= split.size()) {
      throw IndexError("probe.index " + std::to_string(c.probe.index) + " outside the " + c.probe.split +
                       " split of " + std::to_string(split.size()) + " requests");
    }
    o.request = split[c.probe.index];
  }
  const auto built = train_editor(c, s, c.eval.variants.front(), manifest);
  const kg::QueryKey key = o.request.key();
  const std::size_t k = std::min(c.probe.k, bundle.entities.size());
  const model::ModelScorer base(s.built.model);
  const auto before = base.score(std::span(&key, 1));
  const std::span<const kg::EditRequest> group(&o.request, 1);
  const auto edited = built.editor->apply(group);
  const auto after = edited->score(std::span(&key, 1));
  top_rows("before", before, probabilities(*s.built.model, before), bundle.entities, k, o.rows);
  top_rows("after", after, probabilities(*s.built.model, after), bundle.entities, k, o.rows);

  std::ostringstream tsv;
  tsv.precision(17);
  tsv << "stage\trank\tentity\tprobability\n";
  for (const auto& r : o.rows) tsv << r.stage << '\t' << r.rank << '\t' << r.entity << '\t' << r.probability << '\n';
  manifest.write("case_probe.tsv", tsv.str());
  manifest.note("request", {{"direction", std::string(kg::to_string(o.request.direction))},
                            {"known", bundle.entities.name(o.request.known)},
                            {"relation", bundle.relations.name(o.request.relation)},
                            {"target", bundle.entities.name(o.request.target)},
                            {"old", o.request.old ? json(bundle.entities.name(*o.request.old)) : json(nullptr)}});
  manifest.finish();
  return o;
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
#endif
}

}  // namespace kgedit::harness
