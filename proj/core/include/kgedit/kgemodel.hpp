#pragma once

// Tiny pre-LN transformer encoder used as a language-model-based KG
// embedding. Token ids are laid out as
//
//   [0, kNumSpecial)                 [PAD] [CLS] [SEP] [MASK]
//   then |R| relation tokens, then the description word tokens, then the |E|
//   entity tokens (the entity vocabulary is appended after the words).
//
// A link-prediction query is serialized as
//   [CLS] <head-or-MASK> <relation> <tail-or-MASK> [SEP]
// where the known entity token may be followed by its description words.
// The PT head scores every entity from the hidden state at the [MASK]
// position; the FT head classifies a full triple from the [CLS] state.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgedit/autodiff.hpp"
#include "kgedit/kgdata.hpp"

namespace kgedit::model {

using ad::Tensor;
using ad::Var;

enum class HeadKind : std::uint8_t { ft, pt };
std::string_view to_string(HeadKind h);
HeadKind parse_head(std::string_view text);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 16;
  std::size_t entity_vocab_size = 0;
  std::size_t relation_vocab_size = 0;
  std::size_t word_vocab_size = 0;
  HeadKind head = HeadKind::pt;
  std::uint64_t seed = 1;
  double init_std = 1.0;  // token / position embeddings

  // Throws ConfigError on an inconsistent configuration.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr std::size_t kPad = 0, kCls = 1, kSep = 2, kMask = 3, kNumSpecial = 4;

// Optional entity descriptions: the word vocabulary plus, per entity, the word
// ids appended after that entity's token.
struct Descriptions {
  std::vector<std::string> words;
  std::vector<std::vector<std::uint32_t>> entity_words;

  // Whitespace-tokenizes `text_by_name` (keyed by entity name).
  static Descriptions build(const kg::Vocabulary& entities,
                            const std::unordered_map<std::string, std::string>& text_by_name,
                            std::size_t max_words_per_entity);
  bool empty() const { return words.empty(); }
  friend bool operator==(const Descriptions&, const Descriptions&) = default;
};

struct Query {
  std::vector<std::size_t> tokens;
  std::size_t mask_position = 0;  // [MASK] for PT queries, 0 ([CLS]) for FT
};

// Trainable tensors of one FFN patch: out = relu(H up + b_up) down + b_down.
struct PatchWeights {
  Var up, b_up, down, b_down;
};

// Functional modification of one layer's FFN for a single forward pass. The
// base parameters are never touched: `patch` adds a parallel FFN's output and
// the deltas are added to the layer's own w1 / w2 on the fly.
struct FfnEdit {
  std::size_t layer = 0;
  std::optional<PatchWeights> patch;
  Var w1_delta;  // (d_model, d_ff) or empty
  Var w2_delta;  // (d_ff, d_model) or empty
};

struct LayerParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln1_g, ln1_b;
  Var w1, b1, w2, b2;
  Var ln2_g, ln2_b;
};

class BaseModel {
 public:
  BaseModel(ModelConfig config, Descriptions descriptions = {});
  // Copies would silently share parameter storage; use clone().
  BaseModel(const BaseModel&) = delete;
  BaseModel& operator=(const BaseModel&) = delete;
  BaseModel(BaseModel&&) = default;
  BaseModel& operator=(BaseModel&&) = default;

  const ModelConfig& config() const { return config_; }
  const Descriptions& descriptions() const { return descriptions_; }
  std::size_t vocab_size() const;
  std::size_t entity_token(kg::EntityId e) const;
  std::size_t relation_token(kg::RelationId r) const;

  // Parameters in a fixed order with stable names ("layer1.w1", "pt_head.w").
  const std::vector<std::pair<std::string, Var>>& named_params() const { return named_; }
  std::vector<Var> params() const;
  std::size_t param_count() const;
  const LayerParams& layer(std::size_t i) const { return layers_.at(i); }

  // A frozen model's weights stop requiring gradients, so forward passes
  // treat them as constants and no optimizer can reach them through backward.
  void freeze();
  void unfreeze();
  bool frozen() const { return frozen_; }

  // Deep copy with independent (unfrozen) parameter storage.
  BaseModel clone() const;

  Query make_query(const kg::QueryKey& key) const;
  Query make_triple_query(const kg::Triple& t) const;

  // Hidden states of a batch, packed (batch * seq_len, d_model); `seq_len` is
  // the longest query. Rows at padded positions carry no information. With
  // `readout_only` only each query's mask_position row is kept, (batch, d_model).
  struct Encoded {
    Var hidden;
    std::size_t seq_len = 0;
  };
  // `ffn_inputs`, when given, receives each layer's normalized FFN input.
  Encoded encode(std::span<const Query> queries, const FfnEdit* edit = nullptr,
                 bool readout_only = false, std::vector<Var>* ffn_inputs = nullptr) const;

  // FFN input of `layer` at each query's mask position, (keys.size(), d_model).
  Tensor ffn_input(std::span<const kg::QueryKey> keys, std::size_t layer) const;

  // Hidden state of one query, (seq_len, d_model).
  Tensor encode_one(const kg::QueryKey& key) const;

  // PT: (batch, |E|) logits at the mask positions.
  Var entity_logits(std::span<const kg::QueryKey> keys, const FfnEdit* edit = nullptr) const;
  // PT: probabilities over entities.
  std::vector<double> score_entities(const kg::QueryKey& key) const;

  // FT: (batch) classification logits of full triples.
  Var triple_logits(std::span<const kg::Triple> triples, const FfnEdit* edit = nullptr) const;
  double score_triple(const kg::Triple& t) const;

  // Rank of `gold` for `key` by entity logits (ties to the lower id). The FT
  // head ranks every candidate completion by its triple logit.
  std::size_t rank(const kg::QueryKey& key, kg::EntityId gold) const;

  // Row-major (keys.size(), |E|) scores used for ranking under either head.
  std::vector<double> ranking_scores(std::span<const kg::QueryKey> keys,
                                     const FfnEdit* edit = nullptr) const;

  // FNV-1a over every parameter's bytes, in named order.
  std::uint64_t param_hash() const;

 private:
  void register_params();

  ModelConfig config_;
  Descriptions descriptions_;
  Var token_embedding_, position_embedding_, final_ln_g_, final_ln_b_;
  std::vector<LayerParams> layers_;
  Var pt_w_, pt_b_;  // (d_model, |E|), (|E|)
  Var ft_w_, ft_b_;  // (d_model, 1), (1)
  std::vector<std::pair<std::string, Var>> named_;
  bool frozen_ = false;
};

// Adapter for kgdata's ranking and dataset construction.
class ModelScorer : public kg::EntityScorer {
 public:
  explicit ModelScorer(std::shared_ptr<const BaseModel> model, const FfnEdit* edit = nullptr)
      : model_(std::move(model)), edit_(edit) {}
  std::size_t num_entities() const override { return model_->config().entity_vocab_size; }
  std::vector<double> score(std::span<const kg::QueryKey> queries) const override {
    return model_->ranking_scores(queries, edit_);
  }
  const BaseModel& model() const { return *model_; }

 private:
  std::shared_ptr<const BaseModel> model_;
  const FfnEdit* edit_;
};

// ---- pretraining ---------------------------------------------------------------

enum class OptimizerKind : std::uint8_t { sgd_momentum, adam };
std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view text);

struct PretrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;  // SGD momentum, or Adam's beta1
  double clip_norm = 0.0;  // <= 0 disables clipping
  std::size_t warmup_steps = 100;
  // Cosine decay to lr * final_lr_fraction over the epoch budget.
  double final_lr_fraction = 0.05;
  // Stop once filtered train Hits@1 reaches this value (checked every
  // `eval_every` epochs); <= 0 disables the check.
  double target_hits_at_1 = 0.0;
  std::size_t eval_every = 5;
  // FT head: corrupted negatives per positive.
  std::size_t negatives_per_positive = 1;
  std::uint64_t seed = 11;
};

struct LossPoint {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct PretrainResult {
  std::vector<LossPoint> curve;  // one point per epoch (mean batch loss)
  double initial_loss = 0.0;     // loss of the first batch before any update
  double final_hits_at_1 = 0.0;  // filtered, PT head only; -1 when not computed
  std::size_t epochs_run = 0;
};

// Trains every parameter on `graph` (both query directions per triple for PT,
// positives plus corrupted negatives for FT). Throws DivergenceError when the
// loss stops being finite.
PretrainResult pretrain(BaseModel& model, const kg::Graph& graph, const PretrainConfig& config,
                        const std::function<void(const LossPoint&)>& on_epoch = {});

// Fraction of probes whose gold is ranked first once the other known answers
// of the same query are removed from the candidate list.
double filtered_hits_at_k(const BaseModel& model, const kg::Graph& graph, std::size_t k,
                          std::span<const kg::Probe> probes);
double filtered_hits_at_k(const BaseModel& model, const kg::Graph& graph, std::size_t k);

// ---- checkpoints -------------------------------------------------------------------

enum class Precision : std::uint8_t { f64, f32 };

std::string encode_checkpoint(const BaseModel& model, Precision precision = Precision::f64);
BaseModel decode_checkpoint(std::string_view bytes);
void save_checkpoint(const BaseModel& model, const std::filesystem::path& path,
                     Precision precision = Precision::f64);
BaseModel load_checkpoint(const std::filesystem::path& path);

}  // namespace kgedit::model
