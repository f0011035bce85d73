#include "evt/tensor.hpp"

#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace evt {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(DType dtype) { return dtype == DType::f32 ? "float32" : "float64"; }

bool detail::Node::has_grad() const {
  return std::visit([](const auto& g) { return !g.empty(); }, grad);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

namespace {

void validate_shape(const Shape& shape) {
  for (auto d : shape)
    if (d < 1) throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
}

Storage make_storage(DType dtype, std::size_t n) {
  if (dtype == DType::f32) return std::vector<float>(n, 0.0f);
  return std::vector<double>(n, 0.0);
}

Storage empty_storage(DType dtype) {
  if (dtype == DType::f32) return std::vector<float>{};
  return std::vector<double>{};
}

std::shared_ptr<detail::Node> make_node(const Shape& shape, DType dtype) {
  validate_shape(shape);
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->dtype = dtype;
  node->data = make_storage(dtype, static_cast<std::size_t>(numel_of(shape)));
  node->grad = empty_storage(dtype);
  return node;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype) { return Tensor(make_node(shape, dtype)); }

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  auto node = make_node(shape, dtype);
  std::visit([&](auto& v) { std::fill(v.begin(), v.end(), static_cast<typename std::decay_t<decltype(v)>::value_type>(value)); },
             node->data);
  return Tensor(node);
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values, DType dtype) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
    throw DimensionError("value count " + std::to_string(values.size()) +
                         " does not match shape " + to_string(shape));
  auto node = make_node(shape, dtype);
  if (dtype == DType::f64) {
    node->data = std::move(values);
  } else {
    auto& dst = node->values<float>();
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<float>(values[i]);
  }
  return Tensor(node);
}

Tensor Tensor::from_floats(const Shape& shape, std::vector<float> values) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
    throw DimensionError("value count does not match shape " + to_string(shape));
  auto node = make_node(shape, DType::f32);
  node->data = std::move(values);
  return Tensor(node);
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw IndexError("axis " + std::to_string(axis) + " out of range");
  return s[axis];
}

std::int64_t Tensor::numel() const { return numel_of(shape()); }
DType Tensor::dtype() const { return node().dtype; }

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    node().data);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor");
  return at(0);
}

double Tensor::at(std::int64_t i) const {
  if (i < 0 || i >= numel()) throw IndexError("flat index out of range");
  return std::visit([i](const auto& v) { return static_cast<double>(v[static_cast<std::size_t>(i)]); },
                    node().data);
}

bool Tensor::requires_grad() const { return node().requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  node().requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return node().has_grad(); }

Tensor Tensor::grad() const {
  auto out = make_node(shape(), dtype());
  if (has_grad()) out->data = node().grad;
  return Tensor(out);
}

void Tensor::zero_grad() { node().grad = empty_storage(dtype()); }

Tensor Tensor::detach() const {
  auto out = make_node(shape(), dtype());
  out->data = node().data;
  return Tensor(out);
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  auto out = make_node(shape(), target);
  std::visit(
      [&](const auto& src) {
        std::visit(
            [&](auto& dst) {
              using D = typename std::decay_t<decltype(dst)>::value_type;
              for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
            },
            out->data);
      },
      node().data);
  return Tensor(out);
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (shape() != other.shape() || dtype() != other.dtype()) return false;
  return std::visit(
      [&](const auto& a) {
        using V = std::decay_t<decltype(a)>;
        const auto& b = std::get<V>(other.node().data);
        return std::memcmp(a.data(), b.data(), a.size() * sizeof(typename V::value_type)) == 0;
      },
      node().data);
}

std::vector<detail::Node*> build_tape(const Tensor& root) {
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  // Iterative post-order DFS: (node, next parent index).
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node_ptr().get(), 0);
  visited.insert(root.node_ptr().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() requires a scalar loss, got shape " + to_string(shape()));
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");
  auto tape = build_tape(*this);
  std::visit([](auto& g) { g.assign(1, typename std::decay_t<decltype(g)>::value_type(1)); },
             node().grad);
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
  for (detail::Node* n : tape) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad = empty_storage(n->dtype);
    }
  }
}

}  // namespace evt
