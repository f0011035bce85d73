#include "evt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace evt {

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
  return finite_diff_check([&f](const std::vector<Tensor>& in) { return f(in[0]); },
                           std::vector<Tensor>{x}, eps);
}

double finite_diff_check(const ScalarFnN& f, const std::vector<Tensor>& inputs, double eps) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) {
    if (in.dtype() != DType::f64) throw ContractError("finite_diff_check requires float64 inputs");
    leaves.push_back(in.detach().set_requires_grad(true));
  }
  Tensor y = f(leaves);
  if (y.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
  y.backward();

  double worst = 0.0;
  std::vector<Tensor> probe;
  for (const auto& in : inputs) probe.push_back(in.detach());
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    Tensor g_ad = leaves[t].grad();
    auto values = probe[t].mutable_data<double>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f(probe).item();
      values[i] = saved - eps;
      const double down = f(probe).item();
      values[i] = saved;
      const double fd = (up - down) / (2 * eps);
      const double ad = g_ad.at(static_cast<std::int64_t>(i));
      const double denom = std::max({1.0, std::abs(ad), std::abs(fd)});
      worst = std::max(worst, std::abs(ad - fd) / denom);
    }
  }
  return worst;
}

}  // namespace evt
