#pragma once

// Reverse-mode differentiation over the tensor kernels.
//
// Every op builds a Node holding its forward value. When at least one input
// requires a gradient, the node also keeps its inputs and a backward rule
// returning one vector-Jacobian product per input. Graphs that do not need
// gradients therefore retain nothing beyond the values themselves.

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ffnet/kernels.hpp"

namespace ffnet::ad {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Returns one gradient per input, in input order. An empty tensor means
/// "no contribution".
template <typename T>
using BackwardFn = std::function<std::vector<Tensor<T>>(const Node<T>& self, const Tensor<T>& grad_out)>;

template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  std::string op = "leaf";
  std::string name;
  std::vector<NodePtr<T>> inputs;
  BackwardFn<T> backward;

  bool is_leaf() const { return inputs.empty(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad, std::string name = {});
  static Var param(Tensor<T> value, std::string name = {}) { return leaf(std::move(value), true, std::move(name)); }
  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  /// Leaf values only: used by optimizers and finite-difference probes.
  Tensor<T>& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  const Node<T>* node() const { return node_.get(); }
  const NodePtr<T>& node_ptr() const { return node_; }

  /// Same value, cut from the graph.
  Var detach() const { return constant(node_->value); }

  /// Fresh leaf holding the converted value, same requires_grad flag.
  template <typename U>
  Var<U> cast() const {
    return Var<U>::leaf(node_->value.template cast<U>(), node_->requires_grad, node_->name);
  }

 private:
  NodePtr<T> node_;
};

/// Gradients of the leaves reached by a backward pass.
template <typename T>
class GradientMap {
 public:
  void accumulate(const Node<T>* leaf, Tensor<T> g);
  bool contains(const Var<T>& v) const { return grads_.count(v.node()) != 0; }
  /// Gradient for v; a zero tensor when v did not influence the output.
  Tensor<T> get(const Var<T>& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

/// Nodes reachable from a root in an order where inputs precede users.
template <typename T>
class Tape {
 public:
  static Tape record(const Var<T>& root);
  const std::vector<NodePtr<T>>& nodes() const { return order_; }
  const Var<T>& root() const { return root_; }
  GradientMap<T> backward(const Tensor<T>& seed) const;

 private:
  Var<T> root_;
  std::vector<NodePtr<T>> order_;
};

template <typename T>
GradientMap<T> backward(const Var<T>& root, const Tensor<T>& seed);

/// Seeds with ones.
template <typename T>
GradientMap<T> backward(const Var<T>& root);

/// While alive, ops on this thread record no graph (inference only).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

/// Creates an op node; drops the backward closure when no input needs grad.
template <typename T>
Var<T> make_op(std::string op, std::vector<Var<T>> inputs, Tensor<T> value, BackwardFn<T> backward);

// ---- differentiable ops --------------------------------------------------

/// Names of every op that ships with a backward rule.
inline constexpr std::array<std::string_view, 24> kDifferentiableOps = {
    "add",     "sub",      "mul",     "scale",          "bias_add",        "channel_scale",
    "matmul",  "conv1d",   "conv2d",  "gelu",           "relu",            "softmax",
    "batchnorm_infer",     "batchnorm_train",           "reshape",         "permute",
    "pad",     "flatten",  "sum",     "mean",           "mean_trailing",   "cross_entropy",
    "dropout", "mse"};

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T s);
/// x + b broadcast along `axis`.
template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& b, std::size_t axis);
/// x * g broadcast along `axis`.
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& g, std::size_t axis);
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// bias may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom);
template <typename T>
Var<T> conv1d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geom);
template <typename T>
Var<T> gelu(const Var<T>& x);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis);
/// Running statistics are constants.
template <typename T>
Var<T> batchnorm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                       const Tensor<T>& running_var, T epsilon);
/// Batch statistics; updates the running statistics in place.
template <typename T>
Var<T> batchnorm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, T epsilon, T momentum);
template <typename T>
Var<T> reshape(const Var<T>& x, const Shape& shape);
template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);
template <typename T>
Var<T> pad(const Var<T>& x, const std::vector<std::size_t>& before, const std::vector<std::size_t>& after);
template <typename T>
Var<T> flatten(const Var<T>& x, std::size_t start_axis);
/// Scalar [1].
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
/// Mean over axes [start_axis, rank).
template <typename T>
Var<T> mean_trailing(const Var<T>& x, std::size_t start_axis);
/// Mean softmax cross-entropy of logits [B,K] against class indices.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels);
/// Inverted dropout with a mask drawn from rng; p == 0 is the identity.
template <typename T>
Var<T> dropout(const Var<T>& x, T p, Rng& rng);
/// Mean squared error, scalar [1].
template <typename T>
Var<T> mse(const Var<T>& pred, const Var<T>& target);

// ---- verification harness ------------------------------------------------

/// Central differences in 64-bit: (f(x+h e_i) - f(x-h e_i)) / 2h.
Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f, const Tensor<double>& x,
                                double h = 1e-5);

struct GradCheckReport {
  double max_rel_err = 0;
  bool pass = false;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// |a-b| / max(|a|, |b|, floor, 1e-8).
double relative_error(double a, double b, double floor = 0);

/// The gradient checks use floor = kRelativeFloor * max|analytic| per
/// tensor, so coordinates whose true gradient is near zero are compared
/// against the tensor's scale instead of against rounding noise.
inline constexpr double kRelativeFloor = 1e-3;

/// Compares backward() of a scalar-valued f against finite differences.
GradCheckReport grad_check(const std::function<Var<double>(const Var<double>&)>& f, const Tensor<double>& x,
                           double tol, double h = 1e-5);

/// Same, over parameters perturbed in place. When max_coords_per_param is
/// nonzero, that many coordinates per parameter are sampled with `seed`.
GradCheckReport grad_check_params(const std::function<Var<double>()>& loss, const std::vector<Var<double>>& params,
                                  double tol, double h = 1e-5, std::size_t max_coords_per_param = 0,
                                  std::uint64_t seed = 0);

}  // namespace ffnet::ad
