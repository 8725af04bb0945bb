#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>

#include "sugar/autograd.hpp"

namespace sugar::testing {

struct GradcheckResult {
  double max_relative_error = 0.0;  // over parameter tensors
  std::string worst;                // name of the worst tensor
  std::size_t scalars = 0;          // number of checked entries
};

/// Compares the reverse-mode gradient of `loss` (1x1) with central finite
/// differences for every entry of `params`. The error of a tensor is
/// ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, floor * G)
/// with G the norm of the whole numeric gradient; the floor covers tensors
/// whose true gradient is zero (e.g. attention key biases).
GradcheckResult gradcheck(const ad::ParameterRefs& params, const std::function<ad::Var()>& loss,
                          double step = 1e-5, double floor = 1e-6);

/// sum(out .* R) for a fixed Gaussian R, turning any output into a scalar
/// whose gradient reaches every output entry.
ad::Var random_projection_loss(const ad::Var& out, std::uint64_t seed);

/// Fixed-seed Gaussian matrix.
Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double sd = 1.0);

}  // namespace sugar::testing
