#include "kgedit/kgemodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/optim.hpp"
#include "kgedit/rng.hpp"

namespace kgedit::model {

using ad::Shape;

std::string_view to_string(HeadKind h) { return h == HeadKind::pt ? "PT" : "FT"; }

HeadKind parse_head(std::string_view text) {
  if (text == "PT" || text == "pt") return HeadKind::pt;
  if (text == "FT" || text == "ft") return HeadKind::ft;
  throw ConfigError("unknown head kind '" + std::string(text) + "' (expected PT or FT)");
}

std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "sgd_momentum" || text == "sgd") return OptimizerKind::sgd_momentum;
  if (text == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected sgd_momentum or adam)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0) fail("sizes must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (max_seq_len < 5) fail("max_seq_len must be at least 5");
  if (entity_vocab_size < 2) fail("entity_vocab_size must be at least 2");
  if (relation_vocab_size == 0) fail("relation_vocab_size must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

Descriptions Descriptions::build(const kg::Vocabulary& entities,
                                 const std::unordered_map<std::string, std::string>& text_by_name,
                                 std::size_t max_words_per_entity) {
  Descriptions d;
  kg::Vocabulary words;
  d.entity_words.resize(entities.size());
  for (std::size_t e = 0; e < entities.size(); ++e) {
    auto it = text_by_name.find(entities.name(static_cast<std::uint32_t>(e)));
    if (it == text_by_name.end()) continue;
    std::istringstream in(it->second);
    std::string word;
    while (in >> word && d.entity_words[e].size() < max_words_per_entity) {
      d.entity_words[e].push_back(words.add(word));
    }
  }
  d.words = words.names();
  if (d.words.empty()) d.entity_words.clear();
  return d;
}

// ---- construction ----------------------------------------------------------------

BaseModel::BaseModel(ModelConfig config, Descriptions descriptions)
    : config_(std::move(config)), descriptions_(std::move(descriptions)) {
  if (descriptions_.empty()) {
    descriptions_ = {};
  } else if (descriptions_.entity_words.size() != config_.entity_vocab_size) {
    throw ConfigError("descriptions cover " + std::to_string(descriptions_.entity_words.size()) +
                      " entities, model has " + std::to_string(config_.entity_vocab_size));
  }
  config_.word_vocab_size = descriptions_.words.size();
  config_.validate();

  const std::size_t d = config_.d_model, f = config_.d_ff, e = config_.entity_vocab_size;
  Rng rng(config_.seed);
  auto weight = [&](std::size_t in, std::size_t out) {
    return ad::parameter(Tensor::normal({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
  };
  auto filled = [](std::size_t n, double v) { return ad::parameter(Tensor({n}, v)); };

  token_embedding_ = ad::parameter(Tensor::normal({vocab_size(), d}, rng, config_.init_std));
  position_embedding_ = ad::parameter(Tensor::normal({config_.max_seq_len, d}, rng, config_.init_std));
  final_ln_g_ = filled(d, 1.0);
  final_ln_b_ = filled(d, 0.0);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    LayerParams p;
    p.wq = weight(d, d);
    p.bq = filled(d, 0.0);
    p.wk = weight(d, d);
    p.bk = filled(d, 0.0);
    p.wv = weight(d, d);
    p.bv = filled(d, 0.0);
    p.wo = weight(d, d);
    p.bo = filled(d, 0.0);
    p.ln1_g = filled(d, 1.0);
    p.ln1_b = filled(d, 0.0);
    p.w1 = weight(d, f);
    p.b1 = filled(f, 0.0);
    p.w2 = weight(f, d);
    p.b2 = filled(d, 0.0);
    p.ln2_g = filled(d, 1.0);
    p.ln2_b = filled(d, 0.0);
    layers_.push_back(std::move(p));
  }
  pt_w_ = ad::parameter(Tensor({d, e}, 0.0));
  pt_b_ = filled(e, 0.0);
  ft_w_ = ad::parameter(Tensor({d, 1}, 0.0));
  ft_b_ = filled(1, 0.0);
  register_params();
}

void BaseModel::register_params() {
  named_.clear();
  named_.emplace_back("embedding.token", token_embedding_);
  named_.emplace_back("embedding.position", position_embedding_);
  named_.emplace_back("final_ln.g", final_ln_g_);
  named_.emplace_back("final_ln.b", final_ln_b_);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const auto& p = layers_[l];
    const std::pair<const char*, const Var*> entries[] = {
        {"wq", &p.wq},       {"bq", &p.bq},       {"wk", &p.wk}, {"bk", &p.bk},
        {"wv", &p.wv},       {"bv", &p.bv},       {"wo", &p.wo}, {"bo", &p.bo},
        {"ln1_g", &p.ln1_g}, {"ln1_b", &p.ln1_b}, {"w1", &p.w1}, {"b1", &p.b1},
        {"w2", &p.w2},       {"b2", &p.b2},       {"ln2_g", &p.ln2_g}, {"ln2_b", &p.ln2_b}};
    for (const auto& [name, var] : entries) named_.emplace_back(prefix + name, *var);
  }
  named_.emplace_back("pt_head.w", pt_w_);
  named_.emplace_back("pt_head.b", pt_b_);
  named_.emplace_back("ft_head.w", ft_w_);
  named_.emplace_back("ft_head.b", ft_b_);
}

std::size_t BaseModel::vocab_size() const {
  return kNumSpecial + config_.relation_vocab_size + config_.word_vocab_size +
         config_.entity_vocab_size;
}

std::size_t BaseModel::entity_token(kg::EntityId e) const {
  if (e >= config_.entity_vocab_size) {
    throw IndexError("entity id " + std::to_string(e) + " outside vocabulary of " +
                     std::to_string(config_.entity_vocab_size));
  }
  return kNumSpecial + config_.relation_vocab_size + config_.word_vocab_size + e;
}

std::size_t BaseModel::relation_token(kg::RelationId r) const {
  if (r >= config_.relation_vocab_size) {
    throw IndexError("relation id " + std::to_string(r) + " outside vocabulary of " +
                     std::to_string(config_.relation_vocab_size));
  }
  return kNumSpecial + r;
}

std::vector<Var> BaseModel::params() const {
  std::vector<Var> out;
  out.reserve(named_.size());
  for (const auto& [name, v] : named_) out.push_back(v);
  return out;
}

std::size_t BaseModel::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_) n += v.value().size();
  return n;
}

void BaseModel::freeze() {
  for (auto& [name, v] : named_) {
    Var copy = v;
    copy.set_requires_grad(false);
    copy.zero_grad();
  }
  frozen_ = true;
}

void BaseModel::unfreeze() {
  for (auto& [name, v] : named_) {
    Var copy = v;
    copy.set_requires_grad(true);
  }
  frozen_ = false;
}

BaseModel BaseModel::clone() const {
  BaseModel copy(config_, descriptions_);
  for (std::size_t i = 0; i < named_.size(); ++i) {
    copy.named_[i].second.mutable_value() = named_[i].second.value();
  }
  return copy;
}

// ---- queries --------------------------------------------------------------------------

namespace {

void append_entity(const BaseModel& m, std::vector<std::size_t>& tokens, kg::EntityId e) {
  tokens.push_back(m.entity_token(e));
  const auto& desc = m.descriptions();
  if (desc.empty()) return;
  const std::size_t word_base = kNumSpecial + m.config().relation_vocab_size;
  for (auto w : desc.entity_words[e]) tokens.push_back(word_base + w);
}

}  // namespace

Query BaseModel::make_query(const kg::QueryKey& key) const {
  Query q;
  q.tokens.push_back(kCls);
  if (key.direction == kg::Direction::tail_query) {
    append_entity(*this, q.tokens, key.known);
    q.tokens.push_back(relation_token(key.relation));
    q.mask_position = q.tokens.size();
    q.tokens.push_back(kMask);
  } else {
    q.mask_position = q.tokens.size();
    q.tokens.push_back(kMask);
    q.tokens.push_back(relation_token(key.relation));
    append_entity(*this, q.tokens, key.known);
  }
  q.tokens.push_back(kSep);
  if (q.tokens.size() > config_.max_seq_len) {
    throw DimensionError("query of " + std::to_string(q.tokens.size()) +
                         " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  return q;
}

Query BaseModel::make_triple_query(const kg::Triple& t) const {
  Query q;
  q.tokens.push_back(kCls);
  append_entity(*this, q.tokens, t.head);
  q.tokens.push_back(relation_token(t.relation));
  append_entity(*this, q.tokens, t.tail);
  q.tokens.push_back(kSep);
  if (q.tokens.size() > config_.max_seq_len) {
    throw DimensionError("triple of " + std::to_string(q.tokens.size()) +
                         " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  return q;
}

// ---- forward ----------------------------------------------------------------------------

BaseModel::Encoded BaseModel::encode(std::span<const Query> queries, const FfnEdit* edit,
                                     bool readout_only, std::vector<Var>* ffn_inputs) const {
  if (queries.empty()) throw DimensionError("encode: empty batch");
  if (edit && edit->layer >= layers_.size()) {
    throw ContractError("FFN edit targets layer " + std::to_string(edit->layer) + " of " +
                        std::to_string(layers_.size()));
  }
  const std::size_t batch = queries.size();
  std::size_t seq_len = 0;
  for (const auto& q : queries) seq_len = std::max(seq_len, q.tokens.size());
  if (seq_len > config_.max_seq_len) {
    throw DimensionError("sequence of " + std::to_string(seq_len) + " tokens exceeds max_seq_len " +
                         std::to_string(config_.max_seq_len));
  }
  std::vector<std::size_t> ids(batch * seq_len, kPad), positions(batch * seq_len);
  std::vector<std::size_t> lengths(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    lengths[b] = queries[b].tokens.size();
    for (std::size_t i = 0; i < seq_len; ++i) {
      positions[b * seq_len + i] = i;
      if (i < lengths[b]) ids[b * seq_len + i] = queries[b].tokens[i];
    }
  }

  Var x = ad::gather_rows(token_embedding_, ids) + ad::gather_rows(position_embedding_, positions);
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerParams& p = layers_[l];
    const Var h = ad::layer_norm(x, p.ln1_g, p.ln1_b);
    Var q = ad::matmul(h, p.wq) + p.bq;
    Var k = ad::matmul(h, p.wk) + p.bk;
    Var v = ad::matmul(h, p.wv) + p.bv;
    Var a = ad::attention(q, k, v, batch, seq_len, config_.n_heads, lengths);
    if (readout_only && l + 1 == layers_.size()) {
      // Everything after attention is row-wise, so the last layer only needs
      // the rows that are read out.
      std::vector<std::size_t> rows(batch);
      for (std::size_t b = 0; b < batch; ++b) rows[b] = b * seq_len + queries[b].mask_position;
      a = ad::gather_rows(a, rows);
      x = ad::gather_rows(x, rows);
    }
    x = x + (ad::matmul(a, p.wo) + p.bo);

    // FFN input; the patch sees the same normalized states as the FFN.
    const Var f = ad::layer_norm(x, p.ln2_g, p.ln2_b);
    if (ffn_inputs) ffn_inputs->push_back(f);
    const FfnEdit* here = edit && edit->layer == l ? edit : nullptr;
    Var w1 = here && here->w1_delta ? p.w1 + here->w1_delta : p.w1;
    Var w2 = here && here->w2_delta ? p.w2 + here->w2_delta : p.w2;
    Var ffn = ad::matmul(ad::relu(ad::matmul(f, w1) + p.b1), w2) + p.b2;
    if (here && here->patch) {
      const PatchWeights& w = *here->patch;
      ffn = ffn + (ad::matmul(ad::relu(ad::matmul(f, w.up) + w.b_up), w.down) + w.b_down);
    }
    x = x + ffn;
  }
  x = ad::layer_norm(x, final_ln_g_, final_ln_b_);
  return {x, seq_len};
}

Tensor BaseModel::ffn_input(std::span<const kg::QueryKey> keys, std::size_t layer) const {
  if (layer >= layers_.size()) throw ContractError("ffn_input: layer out of range");
  std::vector<Query> queries;
  for (const auto& k : keys) queries.push_back(make_query(k));
  std::vector<Var> inputs;
  const Encoded enc = encode(queries, nullptr, true, &inputs);
  if (layer + 1 == layers_.size()) return inputs[layer].value();
  std::vector<std::size_t> rows(queries.size());
  for (std::size_t b = 0; b < queries.size(); ++b) rows[b] = b * enc.seq_len + queries[b].mask_position;
  return ad::gather_rows(inputs[layer], rows).value();
}

Tensor BaseModel::encode_one(const kg::QueryKey& key) const {
  const Query q = make_query(key);
  return encode(std::span(&q, 1)).hidden.value();
}

namespace {

void require_head(const ModelConfig& c, HeadKind want, const char* op) {
  if (c.head != want) {
    throw ContractError(std::string(op) + " needs a " + std::string(to_string(want)) +
                        " head, model has " + std::string(to_string(c.head)));
  }
}

}  // namespace

Var BaseModel::entity_logits(std::span<const kg::QueryKey> keys, const FfnEdit* edit) const {
  require_head(config_, HeadKind::pt, "entity_logits");
  std::vector<Query> queries;
  queries.reserve(keys.size());
  for (const auto& k : keys) queries.push_back(make_query(k));
  const Encoded enc = encode(queries, edit, true);
  return ad::matmul(enc.hidden, pt_w_) + pt_b_;
}

std::vector<double> BaseModel::score_entities(const kg::QueryKey& key) const {
  const Var logits = entity_logits(std::span(&key, 1));
  const Tensor p = ad::softmax(logits, 1).value();
  return {p.values().begin(), p.values().end()};
}

Var BaseModel::triple_logits(std::span<const kg::Triple> triples, const FfnEdit* edit) const {
  require_head(config_, HeadKind::ft, "triple_logits");
  std::vector<Query> queries;
  queries.reserve(triples.size());
  for (const auto& t : triples) queries.push_back(make_triple_query(t));
  const Encoded enc = encode(queries, edit, true);
  Var logits = ad::matmul(enc.hidden, ft_w_) + ft_b_;
  return ad::reshape(logits, {triples.size()});
}

double BaseModel::score_triple(const kg::Triple& t) const {
  const double z = triple_logits(std::span(&t, 1)).value()[0];
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

std::vector<double> BaseModel::ranking_scores(std::span<const kg::QueryKey> keys,
                                              const FfnEdit* edit) const {
  const std::size_t n_ent = config_.entity_vocab_size;
  std::vector<double> out;
  out.reserve(keys.size() * n_ent);
  if (config_.head == HeadKind::pt) {
    constexpr std::size_t kBatch = 256;
    for (std::size_t s = 0; s < keys.size(); s += kBatch) {
      const auto chunk = keys.subspan(s, std::min(kBatch, keys.size() - s));
      const Var logits = entity_logits(chunk, edit);
      out.insert(out.end(), logits.value().values().begin(), logits.value().values().end());
    }
    return out;
  }
  std::vector<kg::Triple> candidates(n_ent);
  for (const auto& key : keys) {
    for (std::size_t e = 0; e < n_ent; ++e) {
      candidates[e] = key.complete(static_cast<kg::EntityId>(e));
    }
    const Var logits = triple_logits(candidates, edit);
    out.insert(out.end(), logits.value().values().begin(), logits.value().values().end());
  }
  return out;
}

std::size_t BaseModel::rank(const kg::QueryKey& key, kg::EntityId gold) const {
  if (gold >= config_.entity_vocab_size) {
    throw IndexError("gold entity " + std::to_string(gold) + " outside vocabulary");
  }
  const auto scores = ranking_scores(std::span(&key, 1));
  return kg::rank_of(scores, gold);
}

std::uint64_t BaseModel::param_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, v] : named_) {
    h = io::fnv1a64(name, h);
    const auto values = v.value().values();
    h = io::fnv1a64(std::string_view(reinterpret_cast<const char*>(values.data()),
                                     values.size() * sizeof(double)),
                    h);
  }
  return h;
}

// ---- pretraining --------------------------------------------------------------------------

namespace {

double schedule(const PretrainConfig& c, std::size_t step, std::size_t total) {
  if (c.warmup_steps > 0 && step < c.warmup_steps) {
    return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::size_t>(1, total - std::min(total, c.warmup_steps)));
  const double t = std::min(1.0, static_cast<double>(step - std::min(step, c.warmup_steps)) / span);
  const double floor = c.lr * c.final_lr_fraction;
  return floor + (c.lr - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace

PretrainResult pretrain(BaseModel& model, const kg::Graph& graph, const PretrainConfig& config,
                        const std::function<void(const LossPoint&)>& on_epoch) {
  if (graph.size() == 0) throw ContractError("pretrain: empty triple list");
  if (model.frozen()) throw ContractError("pretrain: model is frozen");
  if (config.batch_size == 0) throw ConfigError("pretrain: batch_size must be positive");
  const bool pt = model.config().head == HeadKind::pt;
  const auto probes = kg::all_probes(graph);
  const std::vector<kg::Triple>& triples = graph.triples();
  const std::size_t n_items = pt ? probes.size() : triples.size();
  const std::size_t per_epoch = (n_items + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  const std::size_t n_ent = model.config().entity_vocab_size;

  std::optional<ad::SgdMomentum> sgd;
  std::optional<ad::Adam> adam;
  if (config.optimizer == OptimizerKind::adam) {
    adam.emplace(model.params(), config.lr, config.momentum, 0.999, 1e-8, config.clip_norm);
  } else {
    sgd.emplace(model.params(), config.lr, config.momentum, config.clip_norm);
  }
  Rng rng(config.seed);
  std::vector<std::size_t> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = i;

  PretrainResult result;
  result.final_hits_at_1 = -1.0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n_items; start += config.batch_size) {
      const std::size_t end = std::min(n_items, start + config.batch_size);
      Var loss;
      try {
        if (pt) {
          std::vector<kg::QueryKey> keys;
          std::vector<std::size_t> golds;
          for (std::size_t i = start; i < end; ++i) {
            keys.push_back(probes[order[i]].key());
            golds.push_back(probes[order[i]].gold());
          }
          loss = ad::cross_entropy(model.entity_logits(keys), golds);
        } else {
          std::vector<kg::Triple> batch;
          std::vector<double> labels;
          for (std::size_t i = start; i < end; ++i) {
            const kg::Triple& t = triples[order[i]];
            batch.push_back(t);
            labels.push_back(1.0);
            for (std::size_t n = 0; n < config.negatives_per_positive; ++n) {
              // Resample until the corruption is not a known fact.
              for (std::size_t attempt = 0; attempt < 64; ++attempt) {
                kg::Triple neg = t;
                const auto e = static_cast<kg::EntityId>(rng.below(n_ent));
                if (rng.below(2) == 0) neg.head = e; else neg.tail = e;
                if (!graph.contains(neg)) {
                  batch.push_back(neg);
                  labels.push_back(0.0);
                  break;
                }
              }
            }
          }
          loss = ad::binary_cross_entropy(model.triple_logits(batch), labels);
        }
      } catch (const NonFiniteError& e) {
        throw DivergenceError("pretraining diverged at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + ": " + e.what());
      }
      const double value = loss.value().item();
      if (step == 0) result.initial_loss = value;
      epoch_loss += value * static_cast<double>(end - start);
      const double lr = schedule(config, step, total);
      if (adam) adam->set_lr(lr); else sgd->set_lr(lr);
      try {
        ad::backward(loss);
      } catch (const NonFiniteError& e) {
        throw DivergenceError("pretraining gradient diverged at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(ad::grad_norm(model.params()))) {
        throw DivergenceError("pretraining gradient norm is not finite at step " +
                              std::to_string(step));
      }
      if (adam) adam->step(); else sgd->step();
      ++step;
    }
    const LossPoint point{step, epoch, epoch_loss / static_cast<double>(n_items)};
    result.curve.push_back(point);
    result.epochs_run = epoch + 1;
    if (on_epoch) on_epoch(point);
    if (pt && config.target_hits_at_1 > 0.0 && config.eval_every > 0 &&
        (epoch + 1) % config.eval_every == 0) {
      result.final_hits_at_1 = filtered_hits_at_k(model, graph, 1, probes);
      if (result.final_hits_at_1 >= config.target_hits_at_1) break;
    }
  }
  if (pt) result.final_hits_at_1 = filtered_hits_at_k(model, graph, 1, probes);
  return result;
}

double filtered_hits_at_k(const BaseModel& model, const kg::Graph& graph, std::size_t k,
                          std::span<const kg::Probe> probes) {
  if (probes.empty()) throw MetricError("filtered Hits@k over an empty probe set");
  const std::size_t n_ent = model.config().entity_vocab_size;
  std::size_t hits = 0;
  constexpr std::size_t kBatch = 256;
  for (std::size_t s = 0; s < probes.size(); s += kBatch) {
    const std::size_t e = std::min(probes.size(), s + kBatch);
    std::vector<kg::QueryKey> keys;
    for (std::size_t i = s; i < e; ++i) keys.push_back(probes[i].key());
    const auto scores = model.ranking_scores(keys);
    for (std::size_t i = s; i < e; ++i) {
      const double* row = scores.data() + (i - s) * n_ent;
      const kg::EntityId gold = probes[i].gold();
      const auto others = graph.answers(keys[i - s]);
      std::size_t rank = 1;
      for (std::size_t c = 0; c < n_ent; ++c) {
        if (c == gold || std::binary_search(others.begin(), others.end(), c)) continue;
        if (row[c] > row[gold] || (row[c] == row[gold] && c < gold)) ++rank;
      }
      if (rank <= k) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

double filtered_hits_at_k(const BaseModel& model, const kg::Graph& graph, std::size_t k) {
  const auto probes = kg::all_probes(graph);
  return filtered_hits_at_k(model, graph, k, probes);
}

// ---- checkpoints ----------------------------------------------------------------------------

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json config_json(const ModelConfig& c) {
  return ordered_json{{"d_model", c.d_model},
                      {"n_layers", c.n_layers},
                      {"n_heads", c.n_heads},
                      {"d_ff", c.d_ff},
                      {"max_seq_len", c.max_seq_len},
                      {"entity_vocab_size", c.entity_vocab_size},
                      {"relation_vocab_size", c.relation_vocab_size},
                      {"word_vocab_size", c.word_vocab_size},
                      {"head", std::string(to_string(c.head))},
                      {"seed", c.seed},
                      {"init_std", c.init_std}};
}

ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.entity_vocab_size = j.at("entity_vocab_size").get<std::size_t>();
  c.relation_vocab_size = j.at("relation_vocab_size").get<std::size_t>();
  c.word_vocab_size = j.at("word_vocab_size").get<std::size_t>();
  c.head = parse_head(j.at("head").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

}  // namespace

std::string encode_checkpoint(const BaseModel& model, Precision precision) {
  ordered_json manifest;
  manifest["kind"] = "kgedit-model";
  manifest["config"] = config_json(model.config());
  manifest["descriptions"] = ordered_json{{"words", model.descriptions().words},
                                          {"entity_words", model.descriptions().entity_words}};
  io::Container c;
  c.manifest = manifest.dump();
  for (const auto& [name, v] : model.named_params()) {
    c.arrays.push_back({name, precision == Precision::f64 ? io::DType::f64 : io::DType::f32,
                        v.value()});
  }
  return io::encode_container(c);
}

BaseModel decode_checkpoint(std::string_view bytes) {
  const io::Container c = io::decode_container(bytes);
  ordered_json manifest;
  ModelConfig config;
  Descriptions desc;
  try {
    manifest = ordered_json::parse(c.manifest);
    if (manifest.at("kind") != "kgedit-model") throw FormatError("not a model checkpoint");
    config = config_from_json(manifest.at("config"));
    desc.words = manifest.at("descriptions").at("words").get<std::vector<std::string>>();
    desc.entity_words = manifest.at("descriptions")
                            .at("entity_words")
                            .get<std::vector<std::vector<std::uint32_t>>>();
  } catch (const ordered_json::exception& e) {
    throw FormatError("model checkpoint manifest malformed: " + std::string(e.what()));
  }
  if (config.word_vocab_size != desc.words.size()) {
    throw FormatError("checkpoint word vocabulary size disagrees with its descriptions");
  }
  BaseModel model(config, desc);
  const auto& named = model.named_params();
  if (c.arrays.size() != named.size()) {
    throw FormatError("checkpoint holds " + std::to_string(c.arrays.size()) + " arrays, config needs " +
                      std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& array = c.arrays[i];
    Var target = named[i].second;
    if (array.name != named[i].first || array.tensor.shape() != target.shape()) {
      throw FormatError("checkpoint array '" + array.name + "' " + ad::to_string(array.tensor.shape()) +
                        " does not match parameter '" + named[i].first + "' " +
                        ad::to_string(target.shape()));
    }
    target.mutable_value() = array.tensor;
  }
  return model;
}

void save_checkpoint(const BaseModel& model, const std::filesystem::path& path,
                     Precision precision) {
  io::write_file_atomic(path, encode_checkpoint(model, precision));
}

BaseModel load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace kgedit::model
