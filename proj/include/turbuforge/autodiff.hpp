#pragma once

// Reverse-mode differentiation over a dynamically recorded graph.
//
// Every backward rule is written in terms of graph ops, so running a backward
// pass with create_graph=true yields gradients that are themselves
// differentiable (double backward). Ops that only implement a numeric backward
// are flagged in the capability table; traversing one of them while building a
// graph raises CapabilityError naming the op.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace turbuforge::ad {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_string(const Shape& shape);

class CapabilityError : public std::logic_error {
 public:
  explicit CapabilityError(const std::string& op)
      : std::logic_error("op '" + op + "' has no second-derivative support"), op_(op) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

struct OpCapability {
  std::string name;
  bool first_order = true;
  bool second_order = true;
};

/// All registered ops with their derivative support.
const std::vector<OpCapability>& capability_matrix();
bool supports_second_order(const std::string& op);

/// Gradient recording is on by default; backward passes disable it unless a
/// graph of the gradient is requested.
bool grad_enabled();
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor;

template <typename T>
using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad)>;

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<Tensor<T>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(Shape shape, std::vector<T> values);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  /// Leaf that records gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }
  const std::vector<T>& values() const { return node_->value; }
  T item() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }
  const std::string& op() const { return node_->op; }
  Node<T>* node() const { return node_.get(); }

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Overwrite a leaf's values (optimizer updates). Throws for interior nodes.
  void assign(std::vector<T> values);

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The node records its inputs only when gradient
/// recording is enabled and some input requires gradients.
template <typename T>
Tensor<T> make_op(const std::string& op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  BackwardFn<T> backward);

enum class TraversalOrder { kForward, kReversed };

/// d output / d inputs. output must be a single-element tensor.
template <typename T>
std::vector<Tensor<T>> grad(const Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
                            bool create_graph = false, TraversalOrder order = TraversalOrder::kForward);

template <typename T>
class GradientMap {
 public:
  /// Gradient of a leaf; zeros if the loss does not depend on it.
  Tensor<T> of(const Tensor<T>& leaf) const;
  bool contains(const Tensor<T>& leaf) const { return grads_.count(leaf.node()) > 0; }
  std::size_t size() const { return grads_.size(); }
  void set(const Node<T>* leaf, Tensor<T> g) { grads_[leaf] = std::move(g); }

 private:
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

/// Gradients of a scalar loss with respect to every leaf that requires them.
template <typename T>
GradientMap<T> backward(const Tensor<T>& loss, TraversalOrder order = TraversalOrder::kForward);

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates compared per call; all of them when the parameters hold fewer.
  int max_coords = 64;
  std::uint64_t seed = 0;  // picks the sampled coordinates
};

/// Compares reverse-mode gradients of fn at `params` against central
/// differences. Returns max |analytic - numeric| / max |numeric| over the
/// checked coordinates. fn must be pure in its arguments.
template <typename T>
double grad_check(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& fn,
                  const std::vector<Tensor<T>>& params, const GradCheckOptions& options = {});

// ---- elementwise ---------------------------------------------------------
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);
/// a * s where s holds a single element.
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> sqrt(const Tensor<T>& a);
template <typename T> Tensor<T> pow_scalar(const Tensor<T>& a, T exponent);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& a, T slope);
/// 1/a, defined as 0 where a == 0.
template <typename T> Tensor<T> safe_reciprocal(const Tensor<T>& a);
/// Forward clamp, identity gradient.
template <typename T> Tensor<T> clamp_st(const Tensor<T>& a, T lo, T hi);

// ---- reductions and broadcasts ------------------------------------------
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> broadcast_scalar(const Tensor<T>& s, const Shape& shape);
/// [B, ...] -> [B]
template <typename T> Tensor<T> sum_per_sample(const Tensor<T>& a);
template <typename T> Tensor<T> broadcast_per_sample(const Tensor<T>& s, const Shape& shape);
/// Multiplies sample b of a [B, ...] tensor by s[b].
template <typename T> Tensor<T> scale_per_sample(const Tensor<T>& a, const Tensor<T>& s);
/// Euclidean norm of each sample of a [B, ...] tensor (gradient 0 at the origin).
template <typename T> Tensor<T> frame_l2norm(const Tensor<T>& a);
/// Broadcast b[C] along `axis` of `shape`.
template <typename T> Tensor<T> broadcast_axis(const Tensor<T>& b, const Shape& shape, int axis);
/// Sum over every axis except `axis`.
template <typename T> Tensor<T> reduce_to_axis(const Tensor<T>& a, int axis);
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias, int axis);

// ---- linear algebra and shape -------------------------------------------
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
/// Channel-axis concatenation of [B, Ca, H, W] and [B, Cb, H, W].
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice_channels(const Tensor<T>& a, int start, int count);
template <typename T> Tensor<T> embed_channels(const Tensor<T>& a, int total, int start);

// ---- convolution ---------------------------------------------------------
struct ConvGeometry {
  int stride = 1;
  int pad = 0;
};
/// x [B, Ci, H, W], w [Co, Ci, k, k] -> [B, Co, Ho, Wo], zero padding.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, ConvGeometry geom);
/// Adjoint of conv2d with respect to its input.
template <typename T>
Tensor<T> conv2d_input_grad(const Tensor<T>& g, const Tensor<T>& w, const Shape& x_shape, ConvGeometry geom);
/// Adjoint of conv2d with respect to its weights.
template <typename T>
Tensor<T> conv2d_weight_grad(const Tensor<T>& x, const Tensor<T>& g, const Shape& w_shape, ConvGeometry geom);
/// Nearest-neighbour 2x upsampling of [B, C, H, W].
template <typename T> Tensor<T> upsample2x(const Tensor<T>& a);
/// 2x2 block sums (adjoint of upsample2x).
template <typename T> Tensor<T> pool_sum2x(const Tensor<T>& a);

}  // namespace turbuforge::ad
