#include "kgedit/editors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include <json.hpp>

#include "kgedit/container.hpp"
#include "kgedit/error.hpp"
#include "kgedit/optim.hpp"
#include "kgedit/rng.hpp"

namespace kgedit::edit {

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::kgeditor:
      return "KGEditor";
    case Variant::ke:
      return "KE";
    case Variant::calinet:
      return "CALINET";
    case Variant::ft:
      return "FT";
    case Variant::zsl:
      return "ZSL";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "kgeditor") return Variant::kgeditor;
  if (t == "ke") return Variant::ke;
  if (t == "calinet") return Variant::calinet;
  if (t == "ft" || t == "finetune") return Variant::ft;
  if (t == "zsl" || t == "zeroshot") return Variant::zsl;
  throw ConfigError("unknown editor variant '" + std::string(text) +
                    "' (expected KGEditor, KE, CALINET, FT or ZSL)");
}

void EditorConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("editor config: " + m); };
  if (!(locality_weight >= 0.0)) fail("locality_weight must be >= 0");
  if (edit_batch_size == 0) fail("edit_batch_size must be >= 1");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (patch_width == 0 || calinet_width == 0) fail("patch widths must be positive");
  if (embed_dim == 0 || lstm_hidden == 0 || cond_dim == 0) fail("hypernetwork sizes must be positive");
  if (!(lr > 0.0) || !(group_lr > 0.0) || !(ft_lr > 0.0)) fail("learning rates must be positive");
}

std::size_t EditorConfig::resolved_layer(std::size_t n_layers) const {
  const long long l = attach_layer < 0 ? static_cast<long long>(n_layers) + attach_layer : attach_layer;
  if (l < 0 || l >= static_cast<long long>(n_layers)) {
    throw ConfigError("attach_layer " + std::to_string(attach_layer) + " invalid for " +
                      std::to_string(n_layers) + " layers");
  }
  return static_cast<std::size_t>(l);
}

// ---- patch --------------------------------------------------------------------------

FfnPatch FfnPatch::create(const model::BaseModel& model, std::size_t layer, std::size_t width,
                          std::uint64_t seed, double up_bias) {
  if (layer >= model.config().n_layers) throw ContractError("patch layer out of range");
  if (width == 0) throw ContractError("patch width must be positive");
  const std::size_t d = model.config().d_model;
  Rng rng(seed);
  FfnPatch p;
  p.attach_layer = layer;
  p.width = width;
  p.up = ad::parameter(Tensor::normal({d, width}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
  p.b_up = ad::parameter(Tensor({width}, up_bias));
  p.down = ad::parameter(Tensor({width, d}, 0.0));
  p.b_down = ad::parameter(Tensor({d}, 0.0));
  return p;
}

std::size_t FfnPatch::param_count() const {
  return up.value().size() + b_up.value().size() + down.value().size() + b_down.value().size();
}

void FfnPatch::calibrate(const Tensor& inputs, double threshold) {
  const std::size_t d = up.value().dim(0);
  if (inputs.rank() != 2 || inputs.dim(1) != d || inputs.dim(0) < 2) {
    throw ContractError("patch calibration needs at least two input rows of width " + std::to_string(d));
  }
  const Tensor z = ad::matmul(ad::constant(inputs), ad::constant(up.value())).value();
  const std::size_t n = z.rows();
  Tensor bias({width}, 0.0);
  for (std::size_t j = 0; j < width; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += z.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (z.at(i, j) - mean) * (z.at(i, j) - mean);
    bias[j] = -mean - threshold * std::sqrt(var / static_cast<double>(n - 1));
  }
  b_up.mutable_value() = bias;
}

FfnPatch FfnPatch::clone() const {
  FfnPatch p = *this;
  p.up = ad::parameter(up.value());
  p.b_up = ad::parameter(b_up.value());
  p.down = ad::parameter(down.value());
  p.b_down = ad::parameter(b_down.value());
  return p;
}

// ---- shift formula -------------------------------------------------------------------

Var shift_from_coefficients(const ShiftCoefficients& c, const Tensor& grad) {
  const std::size_t n = c.gamma.value().size(), m = c.alpha.value().size();
  if (grad.rank() != 2 || grad.dim(0) != n || grad.dim(1) != m) {
    throw ContractError("gradient " + ad::to_string(grad.shape()) + " does not match target (" +
                        std::to_string(n) + ", " + std::to_string(m) + ")");
  }
  const Var a_hat = ad::matmul(ad::transpose(c.gamma), ad::softmax(c.alpha, 1));
  const Var b_hat = ad::matmul(ad::transpose(c.delta), ad::softmax(c.beta, 1));
  return ad::mul(a_hat * ad::constant(grad) + b_hat, ad::sigmoid(c.eta));
}

// ---- hypernetwork ----------------------------------------------------------------------

namespace {

constexpr std::size_t kSepToken = 0, kNullToken = 1, kHeadQToken = 2, kTailQToken = 3,
                      kEditSpecials = 4;

Var lstm_pass(const Var& embedding, const std::vector<std::vector<std::size_t>>& tokens,
              const Var& w, const Var& b, std::size_t hidden, bool reverse) {
  const std::size_t batch = tokens.size(), steps = tokens.front().size();
  Var h = ad::constant(Tensor({batch, hidden}, 0.0));
  Var c = ad::constant(Tensor({batch, hidden}, 0.0));
  std::vector<std::size_t> column(batch);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    for (std::size_t i = 0; i < batch; ++i) column[i] = tokens[i][t];
    const Var x = ad::gather_rows(embedding, column);
    const Var gates = ad::matmul(ad::concat_cols(x, h), w) + b;
    const Var in = ad::sigmoid(ad::slice_cols(gates, 0, hidden));
    const Var forget = ad::sigmoid(ad::slice_cols(gates, hidden, 2 * hidden));
    const Var cell = ad::tanh(ad::slice_cols(gates, 2 * hidden, 3 * hidden));
    const Var out = ad::sigmoid(ad::slice_cols(gates, 3 * hidden, 4 * hidden));
    c = forget * c + in * cell;
    h = out * ad::tanh(c);
  }
  return h;
}

}  // namespace

HyperNetwork::HyperNetwork(std::size_t entities, std::size_t relations,
                           std::vector<TargetSpec> targets, const EditorConfig& config)
    : entities_(entities),
      relations_(relations),
      embed_dim_(config.embed_dim),
      hidden_(config.lstm_hidden),
      cond_dim_(config.cond_dim),
      targets_(std::move(targets)) {
  if (targets_.empty()) throw ContractError("hypernetwork needs at least one target");
  Rng rng(config.seed ^ 0x68797065724e4554ULL);
  const std::size_t vocab = kEditSpecials + relations_ + entities_;
  const double lstm_range = 1.0 / std::sqrt(static_cast<double>(hidden_));
  auto lstm_bias = [&]() {
    Tensor b({4 * hidden_}, 0.0);
    for (std::size_t i = hidden_; i < 2 * hidden_; ++i) b[i] = 1.0;  // forget gate
    return ad::parameter(std::move(b));
  };
  embedding_ = ad::parameter(
      Tensor::normal({vocab, embed_dim_}, rng, 1.0 / std::sqrt(static_cast<double>(embed_dim_))));
  fwd_w_ = ad::parameter(Tensor::uniform({embed_dim_ + hidden_, 4 * hidden_}, rng, -lstm_range, lstm_range));
  fwd_b_ = lstm_bias();
  bwd_w_ = ad::parameter(Tensor::uniform({embed_dim_ + hidden_, 4 * hidden_}, rng, -lstm_range, lstm_range));
  bwd_b_ = lstm_bias();
  proj_w_ = ad::parameter(
      Tensor::normal({2 * hidden_, cond_dim_}, rng, 1.0 / std::sqrt(static_cast<double>(2 * hidden_))));
  proj_b_ = ad::parameter(Tensor({cond_dim_}, 0.0));
  named_ = {{"hyper.embedding", embedding_}, {"hyper.fwd_w", fwd_w_}, {"hyper.fwd_b", fwd_b_},
            {"hyper.bwd_w", bwd_w_},         {"hyper.bwd_b", bwd_b_}, {"hyper.proj_w", proj_w_},
            {"hyper.proj_b", proj_b_}};
  for (const auto& t : targets_) {
    const std::size_t n = t.rows, m = t.cols;
    if (n == 0 || m == 0) throw ContractError("target " + t.name + " has an empty dimension");
    // Output layout: alpha (m) | beta (m) | gamma (n) | delta (n) | eta (1).
    const std::size_t width = 2 * m + 2 * n + 1;
    Tensor bias({width}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      bias[2 * m + i] = -2.0 * config.initial_step * static_cast<double>(m);
    }
    head_w_.push_back(ad::parameter(Tensor::normal({cond_dim_, width}, rng, 0.01)));
    head_b_.push_back(ad::parameter(std::move(bias)));
    named_.emplace_back("hyper.head." + t.name + ".w", head_w_.back());
    named_.emplace_back("hyper.head." + t.name + ".b", head_b_.back());
  }
}

std::vector<std::size_t> HyperNetwork::tokenize(const EditRequest& r) const {
  if (r.known >= entities_ || r.target >= entities_ || (r.old && *r.old >= entities_) ||
      r.relation >= relations_) {
    throw IndexError("edit request refers to an id outside the hypernetwork vocabulary");
  }
  const std::size_t ent = kEditSpecials + relations_;
  return {r.direction == kg::Direction::head_query ? kHeadQToken : kTailQToken,
          ent + r.known,
          kEditSpecials + r.relation,
          kSepToken,
          r.old ? ent + *r.old : kNullToken,
          kSepToken,
          ent + r.target};
}

Var HyperNetwork::encode(std::span<const EditRequest> requests) const {
  if (requests.empty()) throw ContractError("hypernetwork: empty request batch");
  std::vector<std::vector<std::size_t>> tokens;
  tokens.reserve(requests.size());
  for (const auto& r : requests) tokens.push_back(tokenize(r));
  const Var fwd = lstm_pass(embedding_, tokens, fwd_w_, fwd_b_, hidden_, false);
  const Var bwd = lstm_pass(embedding_, tokens, bwd_w_, bwd_b_, hidden_, true);
  return ad::tanh(ad::matmul(ad::concat_cols(fwd, bwd), proj_w_) + proj_b_);
}

ShiftCoefficients HyperNetwork::coefficients(const Var& encoded, std::size_t row,
                                             std::size_t t) const {
  const std::size_t n = targets_.at(t).rows, m = targets_[t].cols;
  const std::size_t index[] = {row};
  const Var h = ad::gather_rows(encoded, index);
  const Var out = ad::matmul(h, head_w_[t]) + head_b_[t];
  return {ad::slice_cols(out, 0, m), ad::slice_cols(out, m, 2 * m),
          ad::slice_cols(out, 2 * m, 2 * m + n), ad::slice_cols(out, 2 * m + n, 2 * m + 2 * n),
          ad::slice_cols(out, 2 * m + 2 * n, 2 * m + 2 * n + 1)};
}

std::vector<Var> HyperNetwork::shifts(const Var& encoded, std::size_t row,
                                      std::span<const Tensor> gradients) const {
  if (gradients.size() != targets_.size()) {
    throw ContractError("hypernetwork: " + std::to_string(gradients.size()) + " gradients for " +
                        std::to_string(targets_.size()) + " targets");
  }
  std::vector<Var> out;
  for (std::size_t t = 0; t < targets_.size(); ++t) {
    if (gradients[t].empty()) throw ContractError("missing gradient for target " + targets_[t].name);
    out.push_back(shift_from_coefficients(coefficients(encoded, row, t), gradients[t]));
  }
  return out;
}

std::vector<Var> HyperNetwork::params() const {
  std::vector<Var> out;
  for (const auto& [name, v] : named_) out.push_back(v);
  return out;
}

std::size_t HyperNetwork::param_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : named_) n += v.value().size();
  return n;
}

WeightShift predict_shift(const HyperNetwork& hypernet, const Tensor& h,
                          std::span<const Tensor> gradients) {
  if (h.rank() != 2 || h.dim(0) != 1 || h.dim(1) != hypernet.cond_dim()) {
    throw ContractError("predict_shift: conditioning vector must be (1, cond_dim)");
  }
  const auto vars = hypernet.shifts(ad::constant(h), 0, gradients);
  WeightShift s;
  for (const auto& v : vars) s.deltas.push_back(v.value());
  return s;
}

// ---- gradients ----------------------------------------------------------------------------

namespace {

void require_frozen(const model::BaseModel& m) {
  if (!m.frozen()) throw ContractError("editing requires a frozen base model");
}

Var edit_loss(const model::BaseModel& m, const model::FfnEdit& edit, const EditRequest& r) {
  const kg::QueryKey key = r.key();
  return ad::cross_entropy(m.entity_logits(std::span(&key, 1), &edit), r.target);
}

}  // namespace

std::vector<Tensor> edit_gradient(const model::BaseModel& model, const FfnPatch& patch,
                                  const EditRequest& request) {
  require_frozen(model);
  model::PatchWeights w{ad::parameter(patch.up.value()), ad::constant(patch.b_up.value()),
                        ad::parameter(patch.down.value()), ad::constant(patch.b_down.value())};
  const model::FfnEdit edit{patch.attach_layer, w, {}, {}};
  ad::backward(edit_loss(model, edit, request));
  return {w.up.grad(), w.down.grad()};
}

std::vector<Tensor> base_ffn_gradient(const model::BaseModel& model, std::size_t layer,
                                      const EditRequest& request) {
  require_frozen(model);
  const auto& p = model.layer(layer);
  const Var d1 = ad::parameter(Tensor(p.w1.shape(), 0.0));
  const Var d2 = ad::parameter(Tensor(p.w2.shape(), 0.0));
  const model::FfnEdit edit{layer, std::nullopt, d1, d2};
  ad::backward(edit_loss(model, edit, request));
  return {d1.grad(), d2.grad()};
}

Tensor patched_forward(const model::BaseModel& model, const FfnPatch& patch,
                       const WeightShift& shift, std::span<const kg::QueryKey> keys) {
  Tensor up = patch.up.value(), down = patch.down.value();
  if (!shift.deltas.empty()) {
    if (shift.deltas.size() != 2 || shift.deltas[0].shape() != up.shape() ||
        shift.deltas[1].shape() != down.shape()) {
      throw ContractError("weight shift does not match the patch's up/down shapes");
    }
    for (std::size_t i = 0; i < up.size(); ++i) up[i] += shift.deltas[0][i];
    for (std::size_t i = 0; i < down.size(); ++i) down[i] += shift.deltas[1][i];
  }
  model::PatchWeights w{ad::constant(std::move(up)), ad::constant(patch.b_up.value()),
                        ad::constant(std::move(down)), ad::constant(patch.b_down.value())};
  const model::FfnEdit edit{patch.attach_layer, w, {}, {}};
  return model.entity_logits(keys, &edit).value();
}

// ---- applied edits --------------------------------------------------------------------------

std::size_t AppliedEdit::num_entities() const { return model->config().entity_vocab_size; }

std::vector<double> AppliedEdit::score(std::span<const kg::QueryKey> queries) const {
  return model->ranking_scores(queries, edit ? &*edit : nullptr);
}

namespace {

Tensor averaged(const std::vector<Tensor>& parts) {
  Tensor out(parts.front().shape(), 0.0);
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
  }
  const double inv = 1.0 / static_cast<double>(parts.size());
  for (auto& v : out.values()) v *= inv;
  return out;
}

Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// Base-model log-probabilities of every locality probe, (pool, |E|).
Tensor base_log_probs(const model::BaseModel& m, std::span<const kg::Probe> pool) {
  const std::size_t n_ent = m.config().entity_vocab_size;
  Tensor out({std::max<std::size_t>(1, pool.size()), n_ent}, 0.0);
  constexpr std::size_t kBatch = 256;
  for (std::size_t s = 0; s < pool.size(); s += kBatch) {
    std::vector<kg::QueryKey> keys;
    for (std::size_t i = s; i < std::min(pool.size(), s + kBatch); ++i) keys.push_back(pool[i].key());
    const Tensor lp = ad::log_softmax(m.entity_logits(keys)).value();
    std::copy(lp.values().begin(), lp.values().end(), out.data() + s * n_ent);
  }
  return out;
}

// Rows of `table` picked by `index`, as a plain tensor.
Tensor rows_of(const Tensor& table, std::span<const std::size_t> index) {
  const std::size_t c = table.cols();
  Tensor out({index.size(), c});
  for (std::size_t i = 0; i < index.size(); ++i) {
    std::copy_n(table.data() + index[i] * c, c, out.data() + i * c);
  }
  return out;
}

// Edit cross-entropy over the first `n_edits` rows plus the weighted KL of the
// remaining rows against their base log-probabilities.
Var edit_objective(const Var& logits, std::span<const std::size_t> targets,
                   const Tensor& locality_ref, double weight) {
  const std::size_t n_edits = targets.size();
  const std::size_t rows = logits.value().dim(0);
  std::vector<std::size_t> edit_rows(n_edits), loc_rows;
  for (std::size_t i = 0; i < n_edits; ++i) edit_rows[i] = i;
  for (std::size_t i = n_edits; i < rows; ++i) loc_rows.push_back(i);
  Var loss = ad::cross_entropy(ad::gather_rows(logits, edit_rows), targets);
  if (!loc_rows.empty() && weight > 0.0) {
    loss = loss + ad::scale(ad::kl_divergence(ad::gather_rows(logits, loc_rows), locality_ref), weight);
  }
  return loss;
}

std::vector<std::size_t> sample_indices(Rng& rng, std::size_t pool, std::size_t count) {
  std::vector<std::size_t> out;
  if (pool == 0) return out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(rng.below(pool));
  return out;
}

// Shared training loop of the hypernetwork editors. `gradients` yields the
// detached per-target gradients of one request; `make_edit` turns shift values
// into the FFN modification used for the forward pass.
TrainLog train_hypernetwork(
    const model::BaseModel& model, const HyperNetwork& hypernet, std::vector<Var> trainable,
    const EditorConfig& config, std::span<const EditRequest> edits,
    std::span<const kg::Probe> pool,
    const std::function<std::vector<Tensor>(const EditRequest&)>& gradients,
    const std::function<model::FfnEdit(const std::vector<Var>&)>& make_edit) {
  require_frozen(model);
  if (edits.empty()) throw ContractError("editor training needs at least one edit");
  const auto start = std::chrono::steady_clock::now();
  const Tensor reference = base_log_probs(model, pool);
  ad::Adam opt(trainable, config.lr, 0.9, 0.999, 1e-8, config.clip_norm);
  Rng rng(config.seed ^ 0x747261696eULL);
  std::vector<std::size_t> order(edits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t s = 0; s < order.size(); s += config.batch_size) {
      const std::size_t e = std::min(order.size(), s + config.batch_size);
      std::vector<EditRequest> batch;
      for (std::size_t i = s; i < e; ++i) batch.push_back(edits[order[i]]);
      Var loss;
      try {
        const Var encoded = hypernet.encode(batch);
        std::vector<Var> parts;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const auto grads = gradients(batch[i]);
          const auto shift = hypernet.shifts(encoded, i, grads);
          const model::FfnEdit edit = make_edit(shift);
          const auto picks = sample_indices(rng, pool.size(), config.locality_sample_size);
          std::vector<kg::QueryKey> keys{batch[i].key()};
          for (auto p : picks) keys.push_back(pool[p].key());
          const std::size_t target[] = {batch[i].target};
          parts.push_back(edit_objective(model.entity_logits(keys, &edit), target,
                                         rows_of(reference, picks), config.locality_weight));
        }
        loss = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) loss = loss + parts[i];
        loss = ad::scale(loss, 1.0 / static_cast<double>(parts.size()));
        ad::backward(loss);
      } catch (const NonFiniteError& err) {
        throw DivergenceError("editor training diverged in epoch " + std::to_string(epoch) + ": " +
                              err.what());
      }
      total += loss.value().item() * static_cast<double>(batch.size());
      opt.step();
    }
    log.epoch_loss.push_back(total / static_cast<double>(edits.size()));
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace

// ---- KGEditor -------------------------------------------------------------------------------

namespace {

std::vector<TargetSpec> patch_targets(const model::BaseModel& m, std::size_t width) {
  const std::size_t d = m.config().d_model;
  return {{"patch.up", d, width}, {"patch.down", width, d}};
}

}  // namespace

KgEditor::KgEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config)
    : model_(std::move(model)),
      config_(config),
      patch_(FfnPatch::create(*model_, config.resolved_layer(model_->config().n_layers),
                              config.patch_width, config.seed, -config.patch_threshold)),
      hypernet_(model_->config().entity_vocab_size, model_->config().relation_vocab_size,
                patch_targets(*model_, config.patch_width), config) {
  config_.validate();
  require_frozen(*model_);
  if (!config_.joint_patch) {
    for (auto v : patch_.params()) v.set_requires_grad(false);
  }
}

std::size_t KgEditor::params_tuned() const {
  return hypernet_.param_count() + (config_.joint_patch ? patch_.param_count() : 0);
}

WeightShift KgEditor::shift_for(std::span<const EditRequest> group) const {
  if (group.empty()) throw ContractError("empty edit group");
  const Tensor encoded = hypernet_.encode(group).value();
  std::vector<Tensor> ups, downs;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto grads = edit_gradient(*model_, patch_, group[i]);
    const std::size_t row[] = {i};
    const auto s = predict_shift(hypernet_, rows_of(encoded, row), grads);
    ups.push_back(s.deltas[0]);
    downs.push_back(s.deltas[1]);
  }
  return {{averaged(ups), averaged(downs)}};
}

std::shared_ptr<const AppliedEdit> KgEditor::apply(std::span<const EditRequest> group) const {
  const WeightShift s = shift_for(group);
  auto out = std::make_shared<AppliedEdit>();
  out->model = model_;
  out->edit = model::FfnEdit{
      patch_.attach_layer,
      model::PatchWeights{ad::constant(plus(patch_.up.value(), s.deltas[0])),
                          ad::constant(patch_.b_up.value()),
                          ad::constant(plus(patch_.down.value(), s.deltas[1])),
                          ad::constant(patch_.b_down.value())},
      {},
      {}};
  return out;
}

TrainLog KgEditor::train(std::span<const EditRequest> edits, std::span<const kg::Probe> pool) {
  std::vector<kg::QueryKey> keys;
  for (const auto& e : edits) keys.push_back(e.key());
  for (const auto& p : pool) keys.push_back(p.key());
  if (keys.size() >= 2) {
    patch_.calibrate(model_->ffn_input(keys, patch_.attach_layer), config_.patch_threshold);
  }
  std::vector<Var> trainable = hypernet_.params();
  if (config_.joint_patch) {
    for (const auto& v : patch_.params()) trainable.push_back(v);
  }
  const FfnPatch& patch = patch_;
  return train_hypernetwork(
      *model_, hypernet_, trainable, config_, edits, pool,
      [&](const EditRequest& r) { return edit_gradient(*model_, patch, r); },
      [&](const std::vector<Var>& shift) {
        return model::FfnEdit{patch.attach_layer,
                              model::PatchWeights{patch.up + shift[0], patch.b_up,
                                                  patch.down + shift[1], patch.b_down},
                              {},
                              {}};
      });
}

// ---- KE-style ---------------------------------------------------------------------------------

namespace {

std::vector<TargetSpec> ffn_targets(const model::BaseModel& m, std::size_t layer) {
  const std::size_t d = m.config().d_model, f = m.config().d_ff;
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  return {{prefix + "w1", d, f}, {prefix + "w2", f, d}};
}

}  // namespace

KeEditor::KeEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config)
    : model_(std::move(model)),
      config_(config),
      layer_(config.resolved_layer(model_->config().n_layers)),
      hypernet_(model_->config().entity_vocab_size, model_->config().relation_vocab_size,
                ffn_targets(*model_, layer_), config) {
  config_.validate();
  require_frozen(*model_);
}

std::shared_ptr<const AppliedEdit> KeEditor::apply(std::span<const EditRequest> group) const {
  if (group.empty()) throw ContractError("empty edit group");
  const Tensor encoded = hypernet_.encode(group).value();
  std::vector<Tensor> d1, d2;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto grads = base_ffn_gradient(*model_, layer_, group[i]);
    const std::size_t row[] = {i};
    const auto s = predict_shift(hypernet_, rows_of(encoded, row), grads);
    d1.push_back(s.deltas[0]);
    d2.push_back(s.deltas[1]);
  }
  auto out = std::make_shared<AppliedEdit>();
  out->model = model_;
  out->edit = model::FfnEdit{layer_, std::nullopt, ad::constant(averaged(d1)),
                             ad::constant(averaged(d2))};
  return out;
}

TrainLog KeEditor::train(std::span<const EditRequest> edits, std::span<const kg::Probe> pool) {
  const std::size_t layer = layer_;
  return train_hypernetwork(
      *model_, hypernet_, hypernet_.params(), config_, edits, pool,
      [&](const EditRequest& r) { return base_ffn_gradient(*model_, layer, r); },
      [&](const std::vector<Var>& shift) {
        return model::FfnEdit{layer, std::nullopt, shift[0], shift[1]};
      });
}

// ---- CALINET-style -------------------------------------------------------------------------------

CalinetEditor::CalinetEditor(std::shared_ptr<const model::BaseModel> model,
                             const EditorConfig& config, std::vector<kg::Probe> locality_pool)
    : model_(std::move(model)), config_(config), pool_(std::move(locality_pool)) {
  config_.validate();
  require_frozen(*model_);
}

std::size_t CalinetEditor::params_tuned() const {
  const std::size_t d = model_->config().d_model, w = config_.calinet_width;
  return d * w + w + w * d + d;
}

FfnPatch CalinetEditor::fit(std::span<const EditRequest> group, std::size_t steps) const {
  if (group.empty()) throw ContractError("empty edit group");
  FfnPatch patch = FfnPatch::create(*model_, config_.resolved_layer(model_->config().n_layers),
                                    config_.calinet_width, config_.seed);
  if (steps == 0) return patch;
  ad::Adam opt(patch.params(), config_.group_lr, 0.9, 0.999, 1e-8, config_.clip_norm);
  Rng rng(config_.seed ^ 0x63616c69ULL);
  std::vector<std::size_t> targets;
  std::vector<kg::QueryKey> edit_keys;
  for (const auto& r : group) {
    targets.push_back(r.target);
    edit_keys.push_back(r.key());
  }
  for (std::size_t step = 0; step < steps; ++step) {
    const auto picks = sample_indices(rng, pool_.size(), config_.locality_sample_size);
    std::vector<kg::QueryKey> keys = edit_keys;
    std::vector<kg::Probe> sampled;
    for (auto p : picks) {
      keys.push_back(pool_[p].key());
      sampled.push_back(pool_[p]);
    }
    const Tensor reference = base_log_probs(*model_, sampled);
    const model::FfnEdit edit{patch.attach_layer, patch.weights(), {}, {}};
    try {
      ad::backward(edit_objective(model_->entity_logits(keys, &edit), targets, reference,
                                  config_.locality_weight));
    } catch (const NonFiniteError& err) {
      throw DivergenceError(std::string("CALINET-style fitting diverged: ") + err.what());
    }
    opt.step();
  }
  return patch;
}

std::shared_ptr<const AppliedEdit> CalinetEditor::apply(std::span<const EditRequest> group) const {
  const FfnPatch patch = fit(group, config_.group_steps);
  auto out = std::make_shared<AppliedEdit>();
  out->model = model_;
  out->edit = model::FfnEdit{patch.attach_layer,
                             model::PatchWeights{ad::constant(patch.up.value()),
                                                 ad::constant(patch.b_up.value()),
                                                 ad::constant(patch.down.value()),
                                                 ad::constant(patch.b_down.value())},
                             {},
                             {}};
  return out;
}

// ---- fine-tuning and zero-shot -------------------------------------------------------------------

FinetuneEditor::FinetuneEditor(std::shared_ptr<const model::BaseModel> model,
                               const EditorConfig& config)
    : model_(std::move(model)), config_(config) {
  config_.validate();
}

std::shared_ptr<const AppliedEdit> FinetuneEditor::apply(std::span<const EditRequest> group) const {
  if (group.empty()) throw ContractError("empty edit group");
  auto copy = std::make_shared<model::BaseModel>(model_->clone());
  ad::Adam opt(copy->params(), config_.ft_lr, 0.9, 0.999, 1e-8, config_.clip_norm);
  std::vector<kg::QueryKey> keys;
  std::vector<std::size_t> targets;
  for (const auto& r : group) {
    keys.push_back(r.key());
    targets.push_back(r.target);
  }
  for (std::size_t step = 0; step < config_.group_steps; ++step) {
    try {
      ad::backward(ad::cross_entropy(copy->entity_logits(keys), targets));
    } catch (const NonFiniteError& err) {
      throw DivergenceError(std::string("fine-tuning diverged: ") + err.what());
    }
    opt.step();
  }
  copy->freeze();
  auto out = std::make_shared<AppliedEdit>();
  out->model = std::move(copy);
  return out;
}

std::shared_ptr<const AppliedEdit> ZeroShotEditor::apply(std::span<const EditRequest>) const {
  auto out = std::make_shared<AppliedEdit>();
  out->model = model_;
  return out;
}

BuiltEditor build_editor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config,
                         std::span<const EditRequest> train_edits,
                         std::span<const kg::Probe> locality_pool) {
  config.validate();
  BuiltEditor built;
  switch (config.variant) {
    case Variant::kgeditor: {
      auto e = std::make_unique<KgEditor>(model, config);
      built.log = e->train(train_edits, locality_pool);
      built.editor = std::move(e);
      break;
    }
    case Variant::ke: {
      auto e = std::make_unique<KeEditor>(model, config);
      built.log = e->train(train_edits, locality_pool);
      built.editor = std::move(e);
      break;
    }
    case Variant::calinet:
      built.editor = std::make_unique<CalinetEditor>(
          model, config, std::vector<kg::Probe>(locality_pool.begin(), locality_pool.end()));
      break;
    case Variant::ft:
      built.editor = std::make_unique<FinetuneEditor>(model, config);
      break;
    case Variant::zsl:
      built.editor = std::make_unique<ZeroShotEditor>(model);
      break;
  }
  return built;
}

// ---- checkpoints ------------------------------------------------------------------------------------

std::string encode_editor_checkpoint(const Editor& editor) {
  using ordered_json = nlohmann::ordered_json;
  ordered_json manifest;
  manifest["kind"] = "kgedit-editor";
  manifest["variant"] = std::string(to_string(editor.variant()));
  manifest["params_tuned"] = editor.params_tuned();
  io::Container c;
  const HyperNetwork* hn = nullptr;
  if (const auto* kge = dynamic_cast<const KgEditor*>(&editor)) {
    hn = &kge->hypernet();
    const FfnPatch& p = kge->patch();
    manifest["attach_layer"] = p.attach_layer;
    manifest["patch_width"] = p.width;
    const std::pair<const char*, const Var*> arrays[] = {
        {"patch.up", &p.up}, {"patch.b_up", &p.b_up}, {"patch.down", &p.down}, {"patch.b_down", &p.b_down}};
    for (const auto& [name, v] : arrays) c.arrays.push_back({name, io::DType::f64, v->value()});
  } else if (const auto* ke = dynamic_cast<const KeEditor*>(&editor)) {
    hn = &ke->hypernet();
  }
  ordered_json targets = ordered_json::array();
  if (hn) {
    for (const auto& t : hn->targets()) {
      targets.push_back(ordered_json{{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    }
    for (const auto& [name, v] : hn->named_params()) c.arrays.push_back({name, io::DType::f64, v.value()});
  }
  manifest["targets"] = targets;
  c.manifest = manifest.dump();
  return io::encode_container(c);
}

void save_editor_checkpoint(const Editor& editor, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_editor_checkpoint(editor));
}

}  // namespace kgedit::edit
