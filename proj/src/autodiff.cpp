#include "turbuforge/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace turbuforge::ad {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << "]";
  return os.str();
}

const std::vector<OpCapability>& capability_matrix() {
  static const std::vector<OpCapability> table = {
      {"add"},          {"sub"},
      {"mul"},          {"neg"},
      {"scale"},        {"add_scalar"},
      {"mul_scalar"},   {"square"},
      {"sqrt"},         {"pow_scalar"},
      {"exp"},          {"sigmoid"},
      {"leaky_relu"},   {"safe_reciprocal"},
      {"clamp_st"},     {"sum"},
      {"broadcast_scalar"},
      {"sum_per_sample"},
      {"broadcast_per_sample"},
      {"scale_per_sample"},
      {"frame_l2norm"}, {"broadcast_axis"},
      {"reduce_to_axis"},
      {"matmul"},       {"transpose"},
      {"reshape"},      {"concat_channels"},
      {"slice_channels"},
      {"embed_channels"},
      {"conv2d"},       {"conv2d_input_grad"},
      {"conv2d_weight_grad"},
      {"upsample2x"},   {"pool_sum2x"},
      // Rendering ops carry hand-written numeric adjoints only.
      {"render_tiled", true, false},
      {"render_circular", true, false},
      {"surrogate_psf", true, false},
  };
  return table;
}

bool supports_second_order(const std::string& op) {
  for (const auto& c : capability_matrix())
    if (c.name == op) return c.second_order;
  return false;
}

namespace {
thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::constant(Shape shape, std::vector<T> values) {
  if (numel_of(shape) != values.size()) {
    throw std::invalid_argument("Tensor: value count does not match shape " + shape_string(shape));
  }
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = numel_of(shape);
  return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = numel_of(shape);
  return constant(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return constant(node_->shape, node_->value);
}

template <typename T>
void Tensor<T>::assign(std::vector<T> values) {
  if (!node_->inputs.empty()) throw std::logic_error("assign: only leaf tensors may be overwritten");
  if (values.size() != node_->value.size()) throw std::invalid_argument("assign: size mismatch");
  node_->value = std::move(values);
}

template <typename T>
Tensor<T> make_op(const std::string& op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  BackwardFn<T> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  if (numel_of(n->shape) != n->value.size()) {
    throw std::logic_error(op + ": produced value count inconsistent with shape");
  }
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

// ---- backward -------------------------------------------------------------

namespace {

template <typename T>
std::vector<Node<T>*> topological_order(Node<T>* root, TraversalOrder order) {
  std::vector<Node<T>*> post;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const std::size_t i = order == TraversalOrder::kForward ? next : node->inputs.size() - 1 - next;
      ++next;
      Node<T>* child = node->inputs[i].node();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      post.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

template <typename T>
std::unordered_map<const Node<T>*, Tensor<T>> run_backward(const Tensor<T>& output, bool create_graph,
                                                           TraversalOrder order,
                                                           const std::unordered_set<const Node<T>*>& keep) {
  if (output.numel() != 1) {
    throw std::invalid_argument("backward: output must be scalar, got shape " + shape_string(output.shape()));
  }
  std::unordered_map<const Node<T>*, Tensor<T>> grads;
  if (!output.requires_grad()) return grads;
  const auto nodes = topological_order(output.node(), order);
  GradModeGuard guard(create_graph);
  grads[output.node()] = Tensor<T>::full(output.shape(), T(1));
  for (Node<T>* node : nodes) {
    auto it = grads.find(node);
    if (it == grads.end() || node->inputs.empty()) continue;
    if (create_graph && !supports_second_order(node->op)) throw CapabilityError(node->op);
    const Tensor<T> g = it->second;
    if (!keep.count(node)) grads.erase(it);
    auto input_grads = node->backward(g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const auto& in = node->inputs[i];
      if (!in.requires_grad() || i >= input_grads.size() || !input_grads[i].defined()) continue;
      if (input_grads[i].shape() != in.shape()) {
        throw std::logic_error(node->op + ": backward produced gradient of shape " +
                               shape_string(input_grads[i].shape()) + " for input " + shape_string(in.shape()));
      }
      auto slot = grads.find(in.node());
      if (slot == grads.end()) {
        grads.emplace(in.node(), input_grads[i]);
      } else {
        slot->second = add(slot->second, input_grads[i]);
      }
    }
  }
  return grads;
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs, bool create_graph,
                            TraversalOrder order) {
  std::unordered_set<const Node<T>*> keep;
  for (const auto& in : inputs) keep.insert(in.node());
  auto grads = run_backward(output, create_graph, order, keep);
  std::vector<Tensor<T>> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto it = grads.find(in.node());
    out.push_back(it != grads.end() ? it->second : Tensor<T>::zeros(in.shape()));
  }
  return out;
}

template <typename T>
Tensor<T> GradientMap<T>::of(const Tensor<T>& leaf) const {
  auto it = grads_.find(leaf.node());
  return it != grads_.end() ? it->second : Tensor<T>::zeros(leaf.shape());
}

template <typename T>
GradientMap<T> backward(const Tensor<T>& loss, TraversalOrder order) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
  }
  std::unordered_set<const Node<T>*> leaves;
  if (loss.requires_grad()) {
    for (Node<T>* n : topological_order(loss.node(), order))
      if (n->inputs.empty()) leaves.insert(n);
  }
  auto grads = run_backward(loss, false, order, leaves);
  GradientMap<T> map;
  for (const Node<T>* leaf : leaves) {
    auto it = grads.find(leaf);
    if (it != grads.end()) map.set(leaf, it->second);
  }
  return map;
}

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename T, typename F>
std::vector<T> map_values(const Tensor<T>& a, F f) {
  std::vector<T> out(a.numel());
  const auto& v = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(v[i]);
  return out;
}

template <typename T, typename F>
std::vector<T> zip_values(const Tensor<T>& a, const Tensor<T>& b, F f) {
  std::vector<T> out(a.numel());
  const auto& va = a.values();
  const auto& vb = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
  return out;
}

template <typename T>
void require_same(const std::string& op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a, b);
  return make_op<T>("add", a.shape(), zip_values(a, b, [](T x, T y) { return x + y; }), {a, b},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("sub", a, b);
  return make_op<T>("sub", a.shape(), zip_values(a, b, [](T x, T y) { return x - y; }), {a, b},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g, neg(g)}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a, b);
  return make_op<T>("mul", a.shape(), zip_values(a, b, [](T x, T y) { return x * y; }), {a, b},
                    [a, b](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, b), mul(g, a)}; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return make_op<T>("neg", a.shape(), map_values(a, [](T x) { return -x; }), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{neg(g)}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return make_op<T>("scale", a.shape(), map_values(a, [factor](T x) { return x * factor; }), {a},
                    [factor](const Tensor<T>& g) { return std::vector<Tensor<T>>{scale(g, factor)}; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return make_op<T>("add_scalar", a.shape(), map_values(a, [offset](T x) { return x + offset; }), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g}; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw std::invalid_argument("mul_scalar: factor must hold one element");
  const T f = s.values()[0];
  return make_op<T>("mul_scalar", a.shape(), map_values(a, [f](T x) { return x * f; }), {a, s},
                    [a, s](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{mul_scalar(g, s), reshape(sum(mul(g, a)), s.shape())};
                    });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return make_op<T>("square", a.shape(), map_values(a, [](T x) { return x * x; }), {a},
                    [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, scale(a, T(2)))}; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return make_op<T>("sqrt", a.shape(), map_values(a, [](T x) { return std::sqrt(x); }), {a},
                    [a](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{mul(g, scale(safe_reciprocal(sqrt(a)), T(0.5)))};
                    });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T exponent) {
  return make_op<T>("pow_scalar", a.shape(), map_values(a, [exponent](T x) { return std::pow(x, exponent); }),
                    {a}, [a, exponent](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{mul(g, scale(pow_scalar(a, exponent - T(1)), exponent))};
                    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return make_op<T>("exp", a.shape(), map_values(a, [](T x) { return std::exp(x); }), {a},
                    [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{mul(g, exp(a))}; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return make_op<T>("sigmoid", a.shape(), map_values(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }), {a},
                    [a](const Tensor<T>& g) {
                      const auto s = sigmoid(a);
                      return std::vector<Tensor<T>>{mul(g, mul(s, add_scalar(neg(s), T(1))))};
                    });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return make_op<T>("leaky_relu", a.shape(), map_values(a, [slope](T x) { return x > 0 ? x : slope * x; }), {a},
                    [a, slope](const Tensor<T>& g) {
                      // The local slope is piecewise constant, so it enters as a constant.
                      auto mask = Tensor<T>::constant(a.shape(), map_values(a, [slope](T x) { return x > 0 ? T(1) : slope; }));
                      return std::vector<Tensor<T>>{mul(g, mask)};
                    });
}

template <typename T>
Tensor<T> safe_reciprocal(const Tensor<T>& a) {
  return make_op<T>("safe_reciprocal", a.shape(), map_values(a, [](T x) { return x == T(0) ? T(0) : T(1) / x; }),
                    {a}, [a](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{neg(mul(g, square(safe_reciprocal(a))))};
                    });
}

template <typename T>
Tensor<T> clamp_st(const Tensor<T>& a, T lo, T hi) {
  return make_op<T>("clamp_st", a.shape(), map_values(a, [lo, hi](T x) { return std::clamp(x, lo, hi); }), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{g}; });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  return make_op<T>("sum", {}, {s}, {a},
                    [a](const Tensor<T>& g) { return std::vector<Tensor<T>>{broadcast_scalar(g, a.shape())}; });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape) {
  if (s.numel() != 1) throw std::invalid_argument("broadcast_scalar: input must hold one element");
  return make_op<T>("broadcast_scalar", shape, std::vector<T>(numel_of(shape), s.values()[0]), {s},
                    [s](const Tensor<T>& g) { return std::vector<Tensor<T>>{reshape(sum(g), s.shape())}; });
}

template <typename T>
Tensor<T> sum_per_sample(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("sum_per_sample: tensor needs a batch axis");
  const int b = a.dim(0);
  const std::size_t inner = a.numel() / static_cast<std::size_t>(b);
  std::vector<T> out(b, T(0));
  for (int i = 0; i < b; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i] += a.values()[i * inner + j];
  return make_op<T>("sum_per_sample", {b}, std::move(out), {a}, [a](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{broadcast_per_sample(g, a.shape())};
  });
}

template <typename T>
Tensor<T> broadcast_per_sample(const Tensor<T>& s, const Shape& shape) {
  if (s.rank() != 1 || shape.empty() || s.dim(0) != shape[0]) shape_error("broadcast_per_sample", s.shape(), shape);
  const std::size_t inner = numel_of(shape) / static_cast<std::size_t>(shape[0]);
  std::vector<T> out(numel_of(shape));
  for (int i = 0; i < shape[0]; ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = s.values()[i];
  return make_op<T>("broadcast_per_sample", shape, std::move(out), {s},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{sum_per_sample(g)}; });
}

template <typename T>
Tensor<T> scale_per_sample(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.rank() != 1 || a.rank() < 1 || s.dim(0) != a.dim(0)) shape_error("scale_per_sample", a.shape(), s.shape());
  const std::size_t inner = a.numel() / static_cast<std::size_t>(a.dim(0));
  std::vector<T> out(a.numel());
  for (int i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] = a.values()[i * inner + j] * s.values()[i];
  return make_op<T>("scale_per_sample", a.shape(), std::move(out), {a, s}, [a, s](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{scale_per_sample(g, s), sum_per_sample(mul(g, a))};
  });
}

template <typename T>
Tensor<T> frame_l2norm(const Tensor<T>& a) {
  if (a.rank() < 1) throw std::invalid_argument("frame_l2norm: tensor needs a batch axis");
  const int b = a.dim(0);
  const std::size_t inner = a.numel() / static_cast<std::size_t>(b);
  std::vector<T> out(b, T(0));
  for (int i = 0; i < b; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < inner; ++j) s += a.values()[i * inner + j] * a.values()[i * inner + j];
    out[i] = std::sqrt(s);
  }
  return make_op<T>("frame_l2norm", {b}, std::move(out), {a}, [a](const Tensor<T>& g) {
    const auto n = frame_l2norm(a);
    return std::vector<Tensor<T>>{scale_per_sample(a, mul(g, safe_reciprocal(n)))};
  });
}

namespace {
struct AxisSplit {
  std::size_t outer = 1, count = 1, inner = 1;
};
AxisSplit split_axis(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.count = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}
}  // namespace

template <typename T>
Tensor<T> broadcast_axis(const Tensor<T>& b, const Shape& shape, int axis) {
  const auto s = split_axis(shape, axis);
  if (b.numel() != s.count) shape_error("broadcast_axis", b.shape(), shape);
  std::vector<T> out(numel_of(shape));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.count; ++c)
      std::fill_n(out.begin() + (o * s.count + c) * s.inner, s.inner, b.values()[c]);
  return make_op<T>("broadcast_axis", shape, std::move(out), {b}, [b, axis](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{reshape(reduce_to_axis(g, axis), b.shape())};
  });
}

template <typename T>
Tensor<T> reduce_to_axis(const Tensor<T>& a, int axis) {
  const auto s = split_axis(a.shape(), axis);
  std::vector<T> out(s.count, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.count; ++c) {
      const T* p = a.values().data() + (o * s.count + c) * s.inner;
      T acc = T(0);
      for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
      out[c] += acc;
    }
  return make_op<T>("reduce_to_axis", {static_cast<int>(s.count)}, std::move(out), {a},
                    [a, axis](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{broadcast_axis(g, a.shape(), axis)};
                    });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias, int axis) {
  return add(a, broadcast_axis(bias, a.shape(), axis));
}

// ---- linear algebra -----------------------------------------------------------

namespace {
template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMatrix<T>>;
}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m) * n);
  MutMap<T>(out.data(), m, n).noalias() = ConstMap<T>(a.values().data(), m, k) * ConstMap<T>(b.values().data(), k, n);
  return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{matmul(g, transpose(b)), matmul(transpose(a), g)};
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: expects a matrix, got " + shape_string(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  MutMap<T>(out.data(), n, m) = ConstMap<T>(a.values().data(), m, n).transpose();
  return make_op<T>("transpose", {n, m}, std::move(out), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{transpose(g)}; });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel_of(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  return make_op<T>("reshape", shape, a.values(), {a}, [a](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{reshape(g, a.shape())};
  });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    shape_error("concat_channels", a.shape(), b.shape());
  }
  const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch) * (ca + cb) * plane);
  for (int i = 0; i < batch; ++i) {
    std::copy_n(a.values().begin() + i * ca * plane, ca * plane, out.begin() + i * (ca + cb) * plane);
    std::copy_n(b.values().begin() + i * cb * plane, cb * plane, out.begin() + (i * (ca + cb) + ca) * plane);
  }
  return make_op<T>("concat_channels", {batch, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                    [ca, cb](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{slice_channels(g, 0, ca), slice_channels(g, ca, cb)};
                    });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int start, int count) {
  if (a.rank() != 4 || start < 0 || count <= 0 || start + count > a.dim(1)) {
    throw std::invalid_argument("slice_channels: invalid range for " + shape_string(a.shape()));
  }
  const int batch = a.dim(0), c = a.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch) * count * plane);
  for (int i = 0; i < batch; ++i)
    std::copy_n(a.values().begin() + (i * c + start) * plane, count * plane, out.begin() + i * count * plane);
  return make_op<T>("slice_channels", {batch, count, a.dim(2), a.dim(3)}, std::move(out), {a},
                    [c, start](const Tensor<T>& g) { return std::vector<Tensor<T>>{embed_channels(g, c, start)}; });
}

template <typename T>
Tensor<T> embed_channels(const Tensor<T>& a, int total, int start) {
  if (a.rank() != 4 || start < 0 || start + a.dim(1) > total) {
    throw std::invalid_argument("embed_channels: invalid range for " + shape_string(a.shape()));
  }
  const int batch = a.dim(0), count = a.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(batch) * total * plane, T(0));
  for (int i = 0; i < batch; ++i)
    std::copy_n(a.values().begin() + i * count * plane, count * plane, out.begin() + (i * total + start) * plane);
  return make_op<T>("embed_channels", {batch, total, a.dim(2), a.dim(3)}, std::move(out), {a},
                    [start, count](const Tensor<T>& g) {
                      return std::vector<Tensor<T>>{slice_channels(g, start, count)};
                    });
}

// ---- convolution ----------------------------------------------------------------

namespace {

struct ConvDims {
  int batch, cin, h, w, cout, k, ho, wo;
};

ConvDims conv_dims(const Shape& x, const Shape& w, ConvGeometry geom) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || w[2] != w[3]) shape_error("conv2d", x, w);
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0};
  d.ho = (d.h + 2 * geom.pad - d.k) / geom.stride + 1;
  d.wo = (d.w + 2 * geom.pad - d.k) / geom.stride + 1;
  if (d.ho <= 0 || d.wo <= 0) shape_error("conv2d", x, w);
  return d;
}

// cols[(ci*k + ky)*k + kx][b*ho*wo + oy*wo + ox] = x[b][ci][oy*s - p + ky][ox*s - p + kx];
// every sample of the batch shares one column block so each layer is a single GEMM.
template <typename T>
void im2col(const T* x, const ConvDims& d, ConvGeometry g, T* cols) {
  const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
  const std::size_t ld = hw * d.batch;
  for (int b = 0; b < d.batch; ++b)
    for (int ci = 0; ci < d.cin; ++ci) {
      const T* src = x + (static_cast<std::size_t>(b) * d.cin + ci) * d.h * d.w;
      for (int ky = 0; ky < d.k; ++ky)
        for (int kx = 0; kx < d.k; ++kx) {
          T* row = cols + ((ci * d.k + ky) * d.k + kx) * ld + b * hw;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            T* dst = row + oy * d.wo;
            if (iy < 0 || iy >= d.h) {
              std::fill_n(dst, d.wo, T(0));
              continue;
            }
            const T* line = src + static_cast<std::size_t>(iy) * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              dst[ox] = (ix >= 0 && ix < d.w) ? line[ix] : T(0);
            }
          }
        }
    }
}

template <typename T>
void col2im(const T* cols, const ConvDims& d, ConvGeometry g, T* x) {
  const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
  const std::size_t ld = hw * d.batch;
  for (int b = 0; b < d.batch; ++b)
    for (int ci = 0; ci < d.cin; ++ci) {
      T* dstp = x + (static_cast<std::size_t>(b) * d.cin + ci) * d.h * d.w;
      for (int ky = 0; ky < d.k; ++ky)
        for (int kx = 0; kx < d.k; ++kx) {
          const T* row = cols + ((ci * d.k + ky) * d.k + kx) * ld + b * hw;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= d.h) continue;
            T* line = dstp + static_cast<std::size_t>(iy) * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < d.w) line[ix] += row[oy * d.wo + ox];
            }
          }
        }
    }
}

// [cout][b*hw + p] <-> [b][cout][p]
template <typename T>
void gather_batch(const T* src, const ConvDims& d, T* dst) {
  const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
  for (int b = 0; b < d.batch; ++b)
    for (int co = 0; co < d.cout; ++co)
      std::copy_n(src + (static_cast<std::size_t>(co) * d.batch + b) * hw, hw, dst + (static_cast<std::size_t>(b) * d.cout + co) * hw);
}

template <typename T>
void scatter_batch(const T* src, const ConvDims& d, T* dst) {
  const std::size_t hw = static_cast<std::size_t>(d.ho) * d.wo;
  for (int b = 0; b < d.batch; ++b)
    for (int co = 0; co < d.cout; ++co)
      std::copy_n(src + (static_cast<std::size_t>(b) * d.cout + co) * hw, hw, dst + (static_cast<std::size_t>(co) * d.batch + b) * hw);
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), geom);
  const int kk = d.cin * d.k * d.k;
  const std::size_t cols_n = static_cast<std::size_t>(d.ho) * d.wo * d.batch;
  std::vector<T> cols(kk * cols_n);
  std::vector<T> tmp(static_cast<std::size_t>(d.cout) * cols_n);
  std::vector<T> out(tmp.size());
  im2col(x.values().data(), d, geom, cols.data());
  MutMap<T>(tmp.data(), d.cout, cols_n).noalias() =
      ConstMap<T>(w.values().data(), d.cout, kk) * ConstMap<T>(cols.data(), kk, cols_n);
  gather_batch(tmp.data(), d, out.data());
  return make_op<T>("conv2d", {d.batch, d.cout, d.ho, d.wo}, std::move(out), {x, w}, [x, w, geom](const Tensor<T>& g) {
    return std::vector<Tensor<T>>{conv2d_input_grad(g, w, x.shape(), geom), conv2d_weight_grad(x, g, w.shape(), geom)};
  });
}

template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, const Shape& x_shape, ConvGeometry geom) {
  const ConvDims d = conv_dims(x_shape, w.shape(), geom);
  if (g.shape() != Shape{d.batch, d.cout, d.ho, d.wo}) shape_error("conv2d_input_grad", g.shape(), x_shape);
  const int kk = d.cin * d.k * d.k;
  const std::size_t cols_n = static_cast<std::size_t>(d.ho) * d.wo * d.batch;
  std::vector<T> gs(static_cast<std::size_t>(d.cout) * cols_n);
  scatter_batch(g.values().data(), d, gs.data());
  std::vector<T> cols(kk * cols_n);
  MutMap<T>(cols.data(), kk, cols_n).noalias() =
      ConstMap<T>(w.values().data(), d.cout, kk).transpose() * ConstMap<T>(gs.data(), d.cout, cols_n);
  std::vector<T> out(numel_of(x_shape), T(0));
  col2im(cols.data(), d, geom, out.data());
  return make_op<T>("conv2d_input_grad", x_shape, std::move(out), {g, w}, [g, w, geom](const Tensor<T>& gg) {
    return std::vector<Tensor<T>>{conv2d(gg, w, geom), conv2d_weight_grad(gg, g, w.shape(), geom)};
  });
}

template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& g, const Shape& w_shape, ConvGeometry geom) {
  const ConvDims d = conv_dims(x.shape(), w_shape, geom);
  if (g.shape() != Shape{d.batch, d.cout, d.ho, d.wo}) shape_error("conv2d_weight_grad", g.shape(), w_shape);
  const int kk = d.cin * d.k * d.k;
  const std::size_t cols_n = static_cast<std::size_t>(d.ho) * d.wo * d.batch;
  std::vector<T> gs(static_cast<std::size_t>(d.cout) * cols_n);
  scatter_batch(g.values().data(), d, gs.data());
  std::vector<T> cols(kk * cols_n);
  im2col(x.values().data(), d, geom, cols.data());
  std::vector<T> out(numel_of(w_shape));
  MutMap<T>(out.data(), d.cout, kk).noalias() =
      ConstMap<T>(gs.data(), d.cout, cols_n) * ConstMap<T>(cols.data(), kk, cols_n).transpose();
  return make_op<T>("conv2d_weight_grad", w_shape, std::move(out), {x, g}, [x, g, geom](const Tensor<T>& gw) {
    return std::vector<Tensor<T>>{conv2d_input_grad(g, gw, x.shape(), geom), conv2d(x, gw, geom)};
  });
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& a) {
  if (a.rank() != 4) throw std::invalid_argument("upsample2x: expects [B, C, H, W]");
  const int planes = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  std::vector<T> out(static_cast<std::size_t>(planes) * 4 * h * w);
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x)
        out[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + x] = a.values()[(static_cast<std::size_t>(p) * h + y / 2) * w + x / 2];
  return make_op<T>("upsample2x", {a.dim(0), a.dim(1), 2 * h, 2 * w}, std::move(out), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{pool_sum2x(g)}; });
}

template <typename T>
Tensor<T> pool_sum2x(const Tensor<T>& a) {
  if (a.rank() != 4 || a.dim(2) % 2 || a.dim(3) % 2) throw std::invalid_argument("pool_sum2x: expects even [B, C, H, W]");
  const int planes = a.dim(0) * a.dim(1), h = a.dim(2) / 2, w = a.dim(3) / 2;
  std::vector<T> out(static_cast<std::size_t>(planes) * h * w, T(0));
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int x = 0; x < 2 * w; ++x)
        out[(static_cast<std::size_t>(p) * h + y / 2) * w + x / 2] += a.values()[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + x];
  return make_op<T>("pool_sum2x", {a.dim(0), a.dim(1), h, w}, std::move(out), {a},
                    [](const Tensor<T>& g) { return std::vector<Tensor<T>>{upsample2x(g)}; });
}

// ---- instantiation --------------------------------------------------------------

template <typename T>
double grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
                  const std::vector<Tensor<T>>& params, const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  std::vector<Tensor<T>> leaves;
  for (const auto& p : params) leaves.push_back(Tensor<T>::parameter(p.shape(), p.values()));
  const auto grads = grad(fn(leaves), leaves);

  // (parameter, coordinate) pairs; a deterministic sample when there are too many.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < leaves.size(); ++i)
    for (std::size_t j = 0; j < leaves[i].numel(); ++j) coords.emplace_back(i, j);
  if (options.max_coords > 0 && coords.size() > static_cast<std::size_t>(options.max_coords)) {
    std::mt19937_64 rng(options.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(options.max_coords));
  }

  // Grad mode stays on: fn may itself differentiate (penalty terms).
  auto eval = [&](std::size_t i, std::size_t j, double offset) {
    std::vector<Tensor<T>> args;
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      std::vector<T> v = leaves[k].values();
      if (k == i) v[j] = static_cast<T>(static_cast<double>(v[j]) + offset);
      args.push_back(Tensor<T>::constant(leaves[k].shape(), std::move(v)));
    }
    return static_cast<double>(fn(args).item());
  };
  double worst = 0.0, scale = 0.0;
  for (const auto& [i, j] : coords) {
    const double numeric = (eval(i, j, options.step) - eval(i, j, -options.step)) / (2.0 * options.step);
    const double analytic = static_cast<double>(grads[i].values()[j]);
    worst = std::max(worst, std::abs(analytic - numeric));
    scale = std::max(scale, std::abs(numeric));
  }
  return scale > 0.0 ? worst / scale : worst;
}

#define TURBUFORGE_AD_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                                   \
  template class GradientMap<T>;                                                                              \
  template Tensor<T> make_op<T>(const std::string&, Shape, std::vector<T>, std::vector<Tensor<T>>, BackwardFn<T>); \
  template std::vector<Tensor<T>> grad<T>(const Tensor<T>&, const std::vector<Tensor<T>>&, bool, TraversalOrder); \
  template GradientMap<T> backward<T>(const Tensor<T>&, TraversalOrder);                                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> neg<T>(const Tensor<T>&);                                                                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                           \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                                      \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> square<T>(const Tensor<T>&);                                                             \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                                                               \
  template Tensor<T> pow_scalar<T>(const Tensor<T>&, T);                                                      \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                                \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                            \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                                      \
  template Tensor<T> safe_reciprocal<T>(const Tensor<T>&);                                                    \
  template Tensor<T> clamp_st<T>(const Tensor<T>&, T, T);                                                     \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                               \
  template Tensor<T> broadcast_scalar<T>(const Tensor<T>&, const Shape&);                                     \
  template Tensor<T> sum_per_sample<T>(const Tensor<T>&);                                                     \
  template Tensor<T> broadcast_per_sample<T>(const Tensor<T>&, const Shape&);                                 \
  template Tensor<T> scale_per_sample<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> frame_l2norm<T>(const Tensor<T>&);                                                       \
  template Tensor<T> broadcast_axis<T>(const Tensor<T>&, const Shape&, int);                                  \
  template Tensor<T> reduce_to_axis<T>(const Tensor<T>&, int);                                                \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&, int);                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                           \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                          \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                              \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, int, int);                                           \
  template Tensor<T> embed_channels<T>(const Tensor<T>&, int, int);                                           \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, ConvGeometry);                             \
  template Tensor<T> conv2d_input_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, ConvGeometry);    \
  template Tensor<T> conv2d_weight_grad<T>(const Tensor<T>&, const Tensor<T>&, const Shape&, ConvGeometry);   \
  template Tensor<T> upsample2x<T>(const Tensor<T>&);                                                         \
  template Tensor<T> pool_sum2x<T>(const Tensor<T>&);                                                        \
  template double grad_check<T>(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>&,               \
                                const std::vector<Tensor<T>>&, const GradCheckOptions&);

TURBUFORGE_AD_INSTANTIATE(float)
TURBUFORGE_AD_INSTANTIATE(double)

}  // namespace turbuforge::ad
