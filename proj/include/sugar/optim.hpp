#pragma once

#include <vector>

#include "sugar/autograd.hpp"

namespace sugar {

/// Heavy-ball SGD (v <- mu v + g; p <- p - lr v).
class SgdMomentum {
 public:
  SgdMomentum(ad::ParameterRefs params, double lr, double momentum, double weight_decay = 0.0);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  ad::ParameterRefs params_;
  std::vector<ad::Matrix> velocity_;
  double lr_;
  double momentum_;
  double weight_decay_;
};

class Adam {
 public:
  Adam(ad::ParameterRefs params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  ad::ParameterRefs params_;
  std::vector<ad::Matrix> m_;
  std::vector<ad::Matrix> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long step_ = 0;
};

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(const ad::ParameterRefs& params, double max_norm);

}  // namespace sugar
