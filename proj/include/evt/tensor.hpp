#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "evt/errors.hpp"

namespace evt {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);
std::string to_string(DType dtype);

/// Calls f with a value-initialized float or double matching dtype.
template <class F>
decltype(auto) visit_dtype(DType dtype, F&& f) {
  if (dtype == DType::f32) return f(float{});
  return f(double{});
}

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

using Storage = std::variant<std::vector<float>, std::vector<double>>;

namespace detail {

struct Node {
  Shape shape;
  DType dtype = DType::f32;
  Storage data;
  Storage grad;  // empty vector when no gradient has been accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(data);
  }
  bool has_grad() const;
  /// Gradient buffer, zero-allocated on first use.
  template <class T>
  std::vector<T>& grad_buffer() {
    auto& g = std::get<std::vector<T>>(grad);
    if (g.empty()) g.assign(std::get<std::vector<T>>(data).size(), T(0));
    return g;
  }
};

}  // namespace detail

/// Gradient recording is disabled on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled() noexcept;

/// Row-major dense tensor with reverse-mode autodiff.
///
/// Copies are shallow handles onto the same node; values produced by an op are
/// never modified afterwards except through the explicit mutable accessors
/// used by optimizers and pruning (which do not record on the tape).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor from_values(const Shape& shape, std::vector<double> values,
                            DType dtype = DType::f64);
  static Tensor from_floats(const Shape& shape, std::vector<float> values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(node().data);
  }
  /// In-place access for parameter updates; bypasses the tape.
  template <class T>
  std::span<T> mutable_data() {
    return std::get<std::vector<T>>(node().data);
  }
  const Storage& storage() const { return node().data; }
  Storage& mutable_storage() { return node().data; }

  std::vector<double> to_vector() const;
  double item() const;
  double at(std::int64_t flat_index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient as a detached tensor (zeros if none accumulated).
  Tensor grad() const;
  template <class T>
  std::span<const T> grad_data() const {
    return std::get<std::vector<T>>(node().grad);
  }
  void zero_grad();

  /// Shares no graph history; copies values.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  Tensor to(DType dtype) const;

  /// Reverse pass from a scalar. Leaves keep their accumulated gradients;
  /// intermediate gradients and recorded history are released afterwards.
  void backward() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  bool bit_equal(const Tensor& other) const;

  // Internal: op construction.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  detail::Node& node() const;

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered list of recorded operations reachable from a root;
/// every node appears after all of its inputs.
std::vector<detail::Node*> build_tape(const Tensor& root);

}  // namespace evt
