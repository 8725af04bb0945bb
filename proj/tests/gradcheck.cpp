#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sugar::testing {

GradcheckResult gradcheck(const ad::ParameterRefs& params, const std::function<ad::Var()>& loss, double step,
                          double floor) {
  for (auto* p : params) p->zero_grad();
  ad::backward(loss());
  std::vector<Eigen::MatrixXd> analytic;
  std::vector<Eigen::MatrixXd> numeric;
  double global = 0.0;
  for (auto* p : params) {
    analytic.push_back(p->grad);
    Eigen::MatrixXd num(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      ad::NoGradGuard guard;
      x = saved + step;
      const double up = loss().scalar();
      x = saved - step;
      const double down = loss().scalar();
      x = saved;
      num.data()[i] = (up - down) / (2.0 * step);
    }
    global += num.squaredNorm();
    numeric.push_back(std::move(num));
  }
  global = std::sqrt(global);
  GradcheckResult out;
  for (std::size_t t = 0; t < params.size(); ++t) {
    out.scalars += static_cast<std::size_t>(params[t]->value.size());
    const double denom = std::max({analytic[t].norm(), numeric[t].norm(), floor * global});
    const double err = denom > 0.0 ? (analytic[t] - numeric[t]).norm() / denom : 0.0;
    if (err >= out.max_relative_error) {
      out.max_relative_error = err;
      out.worst = params[t]->name;
    }
  }
  return out;
}

ad::Var random_projection_loss(const ad::Var& out, std::uint64_t seed) {
  return ad::sum(ad::mul(out, ad::constant(gaussian_matrix(out.rows(), out.cols(), seed))));
}

Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double sd) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace sugar::testing
