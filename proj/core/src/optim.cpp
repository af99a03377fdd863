#include "kgedit/optim.hpp"

#include <cmath>

namespace kgedit::ad {

double grad_norm(const std::vector<Var>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad.values()) total += g * g;
  }
  return std::sqrt(total);
}

namespace {

double clip_factor(const std::vector<Var>& params, double clip_norm) {
  if (clip_norm <= 0.0) return 1.0;
  const double norm = grad_norm(params);
  return norm > clip_norm ? clip_norm / norm : 1.0;
}

}  // namespace

SgdMomentum::SgdMomentum(std::vector<Var> params, double lr, double momentum, double clip_norm)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.shape(), 0.0);
}

void SgdMomentum::step() {
  const double factor = clip_factor(params_, clip_norm_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.has_grad()) continue;
    Tensor& v = velocity_[i];
    Tensor& w = p.mutable_value();
    const Tensor& g = p.node()->grad;
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + factor * g[j];
      w[j] -= lr_ * v[j];
    }
    p.zero_grad();
  }
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps,
           double clip_norm)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      clip_norm_(clip_norm) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double factor = clip_factor(params_, clip_norm_);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i];
    if (!p.has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.node()->grad;
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = factor * g[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
    p.zero_grad();
  }
}

}  // namespace kgedit::ad
