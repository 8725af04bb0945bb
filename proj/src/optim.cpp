#include "sugar/optim.hpp"

#include <cmath>

namespace sugar {

namespace {
void ensure_grad(ad::Parameter& p) {
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
}
}  // namespace

SgdMomentum::SgdMomentum(ad::ParameterRefs params, double lr, double momentum, double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  for (auto* p : params_) velocity_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
}

void SgdMomentum::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (!p.trainable) continue;
    ensure_grad(p);
    ad::Matrix g = p.grad;
    if (weight_decay_ != 0.0) g += weight_decay_ * p.value;
    velocity_[i] = momentum_ * velocity_[i] + g;
    p.value -= lr_ * velocity_[i];
  }
}

void SgdMomentum::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

Adam::Adam(ad::ParameterRefs params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (!p.trainable) continue;
    ensure_grad(p);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseAbs2();
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

double clip_grad_norm(const ad::ParameterRefs& params, double max_norm) {
  double total = 0.0;
  for (auto* p : params)
    if (p->grad.size() != 0) total += p->grad.squaredNorm();
  total = std::sqrt(total);
  if (total > max_norm && total > 0.0) {
    const double s = max_norm / total;
    for (auto* p : params)
      if (p->grad.size() != 0) p->grad *= s;
  }
  return total;
}

}  // namespace sugar
