#pragma once

// Editing algorithms for a frozen BaseModel.
//
// KGEditor keeps an additional FFN (the patch) next to one layer's FFN and
// lets a hypernetwork turn the gradient of an edit's loss with respect to the
// patch into a weight shift:
//
//   shift = sigmoid(eta) * (A (.) grad + B),   A = gamma softmax(alpha)^T,
//                                              B = delta softmax(beta)^T
//
// for a target matrix of shape (n, m), with alpha, beta in R^m, gamma, delta
// in R^n and the scalar eta all emitted by the hypernetwork. The outer
// products are oriented (n x 1)(1 x m) so that they match the gradient.
// KE-style editing uses the same hypernetwork on the layer's own FFN weights;
// the CALINET-style editor fits a narrow patch directly; FT fine-tunes a copy
// of the whole model; ZSL changes nothing.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kgedit/autodiff.hpp"
#include "kgedit/kgdata.hpp"
#include "kgedit/kgemodel.hpp"

namespace kgedit::edit {

using ad::Tensor;
using ad::Var;
using kg::EditRequest;

enum class Variant : std::uint8_t { kgeditor, ke, calinet, ft, zsl };
std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);

struct EditorConfig {
  Variant variant = Variant::kgeditor;
  double locality_weight = 0.1;
  std::size_t locality_sample_size = 16;
  // Hypernetwork training (KGEditor, KE): passes over the training edits.
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  double clip_norm = 1.0;
  // Per-group fitting (CALINET, FT): optimizer steps and learning rate.
  std::size_t group_steps = 40;
  double group_lr = 1e-2;
  double ft_lr = 1e-3;
  std::size_t edit_batch_size = 1;  // n edits applied together
  std::size_t patch_width = 255;
  std::size_t calinet_width = 16;
  // Patch units fire when their centered input exceeds this many standard
  // deviations (calibrated on the training queries).
  double patch_threshold = 1.0;
  int attach_layer = -1;            // negative counts from the last layer
  bool joint_patch = false;         // train the patch weights together with the hypernetwork
  std::size_t embed_dim = 32;
  std::size_t lstm_hidden = 32;
  std::size_t cond_dim = 32;
  double initial_step = 30.0;       // initial gradient multiplier of the shift
  std::uint64_t seed = 23;

  void validate() const;
  std::size_t resolved_layer(std::size_t n_layers) const;
};

// ---- patch ------------------------------------------------------------------------

struct FfnPatch {
  std::size_t attach_layer = 0;
  std::size_t width = 0;
  Var up, b_up, down, b_down;

  // Up-projection random, up-bias `up_bias`, down side zero: the patch adds
  // exactly 0. A negative up-bias makes the hidden units sparse.
  static FfnPatch create(const model::BaseModel& model, std::size_t layer, std::size_t width,
                         std::uint64_t seed, double up_bias = 0.0);
  std::size_t param_count() const;
  std::vector<Var> params() const { return {up, b_up, down, b_down}; }
  model::PatchWeights weights() const { return {up, b_up, down, b_down}; }
  FfnPatch clone() const;
  // Sets b_up so that unit j's pre-activation over `inputs` (rows of FFN
  // inputs) has mean -threshold * std_j.
  void calibrate(const Tensor& inputs, double threshold);
};

// One tensor per registered target, in registration order.
struct WeightShift {
  std::vector<Tensor> deltas;
};

struct TargetSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

// Per-target raw hypernetwork outputs for one edit.
struct ShiftCoefficients {
  Var alpha, beta;   // (1, m)
  Var gamma, delta;  // (1, n)
  Var eta;           // (1, 1)
};

// The shift formula on autodiff values; `grad` is a constant (n, m) tensor.
Var shift_from_coefficients(const ShiftCoefficients& c, const Tensor& grad);

class HyperNetwork {
 public:
  // `entities` and `relations` size the request vocabulary.
  HyperNetwork(std::size_t entities, std::size_t relations, std::vector<TargetSpec> targets,
               const EditorConfig& config);

  const std::vector<TargetSpec>& targets() const { return targets_; }
  std::size_t cond_dim() const { return cond_dim_; }

  // [dir] known relation [SEP] old-or-[NULL] [SEP] target
  std::vector<std::size_t> tokenize(const EditRequest& request) const;

  // Conditioning vectors, (requests.size(), cond_dim).
  Var encode(std::span<const EditRequest> requests) const;

  // Coefficients of row `row` of an encoded batch for target `t`.
  ShiftCoefficients coefficients(const Var& encoded, std::size_t row, std::size_t t) const;

  // Shifts for row `row` given one gradient per target (autodiff values).
  std::vector<Var> shifts(const Var& encoded, std::size_t row,
                          std::span<const Tensor> gradients) const;

  std::vector<Var> params() const;
  const std::vector<std::pair<std::string, Var>>& named_params() const { return named_; }
  std::size_t param_count() const;

 private:
  std::size_t entities_, relations_, embed_dim_, hidden_, cond_dim_;
  std::vector<TargetSpec> targets_;
  Var embedding_;
  Var fwd_w_, fwd_b_, bwd_w_, bwd_b_;
  Var proj_w_, proj_b_;
  std::vector<Var> head_w_, head_b_;
  std::vector<std::pair<std::string, Var>> named_;
};

// Plain-tensor shift for conditioning vector `h` (1, cond_dim).
WeightShift predict_shift(const HyperNetwork& hypernet, const Tensor& h,
                          std::span<const Tensor> gradients);

// ---- gradients and patched evaluation ------------------------------------------------

// Gradient of the edit cross-entropy (target under the patched model) with
// respect to the patch's up and down matrices, in that order.
std::vector<Tensor> edit_gradient(const model::BaseModel& model, const FfnPatch& patch,
                                  const EditRequest& request);

// Gradient of the edit cross-entropy with respect to layer `layer`'s own w1
// and w2, evaluated at the unmodified weights.
std::vector<Tensor> base_ffn_gradient(const model::BaseModel& model, std::size_t layer,
                                      const EditRequest& request);

// Entity logits with `patch` shifted by `shift` (empty shift = no shift).
Tensor patched_forward(const model::BaseModel& model, const FfnPatch& patch,
                       const WeightShift& shift, std::span<const kg::QueryKey> keys);

// ---- editors ---------------------------------------------------------------------------------

struct TrainLog {
  std::vector<double> epoch_loss;
  double seconds = 0.0;
};

// Read-only view of the model after one group of edits was applied.
class AppliedEdit : public kg::EntityScorer {
 public:
  std::size_t num_entities() const override;
  std::vector<double> score(std::span<const kg::QueryKey> queries) const override;

  std::shared_ptr<const model::BaseModel> model;
  std::optional<model::FfnEdit> edit;
};

class Editor {
 public:
  virtual ~Editor() = default;
  virtual Variant variant() const = 0;
  // Scalars that editing trains (hypernetwork plus patch, or patch, or the
  // whole model for FT).
  virtual std::size_t params_tuned() const = 0;
  // Applies a group of edits at once and returns the edited view.
  virtual std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const = 0;
};

// KGEditor: hypernetwork-generated shift of an additional FFN patch.
class KgEditor : public Editor {
 public:
  KgEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config);
  Variant variant() const override { return Variant::kgeditor; }
  std::size_t params_tuned() const override;
  std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const override;

  // Averaged per-edit shifts for a group.
  WeightShift shift_for(std::span<const EditRequest> group) const;

  TrainLog train(std::span<const EditRequest> edits, std::span<const kg::Probe> locality_pool);

  const FfnPatch& patch() const { return patch_; }
  FfnPatch& patch() { return patch_; }
  const HyperNetwork& hypernet() const { return hypernet_; }
  const EditorConfig& config() const { return config_; }

 private:
  std::shared_ptr<const model::BaseModel> model_;
  EditorConfig config_;
  FfnPatch patch_;
  HyperNetwork hypernet_;
};

// KE-style: the hypernetwork shifts the attach layer's own w1 / w2, overriding
// them only inside the edited forward pass.
class KeEditor : public Editor {
 public:
  KeEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config);
  Variant variant() const override { return Variant::ke; }
  std::size_t params_tuned() const override { return hypernet_.param_count(); }
  std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const override;
  TrainLog train(std::span<const EditRequest> edits, std::span<const kg::Probe> locality_pool);
  const HyperNetwork& hypernet() const { return hypernet_; }

 private:
  std::shared_ptr<const model::BaseModel> model_;
  EditorConfig config_;
  std::size_t layer_;
  HyperNetwork hypernet_;
};

// CALINET-style: a narrow patch optimized directly on each group's edits.
class CalinetEditor : public Editor {
 public:
  CalinetEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config,
                std::vector<kg::Probe> locality_pool);
  Variant variant() const override { return Variant::calinet; }
  std::size_t params_tuned() const override;
  std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const override;

  // Fits a fresh patch to `group`; zero steps leaves the patch transparent.
  FfnPatch fit(std::span<const EditRequest> group, std::size_t steps) const;

 private:
  std::shared_ptr<const model::BaseModel> model_;
  EditorConfig config_;
  std::vector<kg::Probe> pool_;
};

// KGE_FT: fine-tunes every parameter of a copy of the model on the group.
class FinetuneEditor : public Editor {
 public:
  FinetuneEditor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config);
  Variant variant() const override { return Variant::ft; }
  std::size_t params_tuned() const override { return model_->param_count(); }
  std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const override;

 private:
  std::shared_ptr<const model::BaseModel> model_;
  EditorConfig config_;
};

// KGE_ZSL: no parameter is changed.
class ZeroShotEditor : public Editor {
 public:
  explicit ZeroShotEditor(std::shared_ptr<const model::BaseModel> model)
      : model_(std::move(model)) {}
  Variant variant() const override { return Variant::zsl; }
  std::size_t params_tuned() const override { return 0; }
  std::shared_ptr<const AppliedEdit> apply(std::span<const EditRequest> group) const override;

 private:
  std::shared_ptr<const model::BaseModel> model_;
};

// Builds and (for hypernetwork variants) trains the configured editor.
struct BuiltEditor {
  std::unique_ptr<Editor> editor;
  TrainLog log;
};
BuiltEditor build_editor(std::shared_ptr<const model::BaseModel> model, const EditorConfig& config,
                         std::span<const EditRequest> train_edits,
                         std::span<const kg::Probe> locality_pool);

// Container checkpoint for the trained parts of KGEditor / KE editors.
std::string encode_editor_checkpoint(const Editor& editor);
void save_editor_checkpoint(const Editor& editor, const std::filesystem::path& path);

}  // namespace kgedit::edit
