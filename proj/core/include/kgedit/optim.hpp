#pragma once

#include <cstddef>
#include <vector>

#include "kgedit/autodiff.hpp"

namespace kgedit::ad {

// Plain SGD with heavy-ball momentum and optional global-norm clipping.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Var> params, double lr, double momentum, double clip_norm = 0.0);

  // Applies one update from the accumulated gradients, then clears them.
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> velocity_;
  double lr_;
  double momentum_;
  double clip_norm_;
};

class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double clip_norm = 0.0);

  void step();
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_, clip_norm_;
  std::size_t t_ = 0;
};

// Global L2 norm of the accumulated gradients.
double grad_norm(const std::vector<Var>& params);

}  // namespace kgedit::ad
