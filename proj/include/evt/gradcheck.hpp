#pragma once

#include <functional>
#include <vector>

#include "evt/tensor.hpp"

namespace evt {

using ScalarFn = std::function<Tensor(const Tensor&)>;
using ScalarFnN = std::function<Tensor(const std::vector<Tensor>&)>;

/// Max over coordinates of |g_ad − g_fd| / max(1, |g_ad|, |g_fd|), where g_fd
/// is the central difference (f(x+eps) − f(x−eps)) / 2eps. x must be float64
/// and f must return a single-element tensor.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

/// Same check over every coordinate of every input.
double finite_diff_check(const ScalarFnN& f, const std::vector<Tensor>& inputs, double eps = 1e-5);

}  // namespace evt
