#pragma once

// Reverse-mode automatic differentiation over eagerly evaluated graph nodes.
//
// Every node holds its value; backward_graph() produces gradients as *new
// nodes*, so gradients can be composed further and differentiated again.
// That second pass is what the gradient-penalty losses rely on: they build
// the critic's input gradient, penalize its norm, and backpropagate the
// penalty into the critic parameters.

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "voxelforge/tensor.hpp"

namespace vf {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  std::vector<NodePtr> inputs;
  bool requires_grad = false;

  virtual ~Node() = default;
  virtual std::string_view name() const = 0;

  /// Gradient nodes for each input, given the upstream gradient `g`
  /// (same shape as `value`). Entries may be null for non-differentiable
  /// or constant inputs.
  virtual std::vector<NodePtr> vjp(const NodePtr& self,
                                   const NodePtr& g) const = 0;

  const std::vector<int>& shape() const { return value.shape(); }
};

// --- leaves --------------------------------------------------------------

NodePtr constant(Tensor v);
NodePtr variable(Tensor v);  // leaf that participates in differentiation

// --- elementwise and scalar arithmetic ------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr divide(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double c);
NodePtr add_scalar(const NodePtr& a, double c);
NodePtr square(const NodePtr& a);
NodePtr sqrt_of(const NodePtr& a);

// --- reductions and shape manipulation -------------------------------------

NodePtr sum(const NodePtr& a);                              // -> scalar
NodePtr mean(const NodePtr& a);                             // -> scalar
NodePtr broadcast(const NodePtr& s, std::vector<int> shape);  // scalar -> shape
NodePtr reshape(const NodePtr& a, std::vector<int> shape);
NodePtr concat_channels(const NodePtr& a, const NodePtr& b);  // axis 1 of 5-D
NodePtr slice_channels(const NodePtr& a, int begin, int count);
NodePtr tile_spatial(const NodePtr& a, int side);  // [B,C] -> [B,C,side^3]
NodePtr sum_spatial(const NodePtr& a);             // [B,C,D,H,W] -> [B,C]

// --- linear layers ---------------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b);  // [B,N]x[N,M] -> [B,M]
NodePtr transpose2d(const NodePtr& a);

/// y = conv3d(x, w) with zero padding; x:[B,Ci,D,H,W], w:[Co,Ci,k,k,k].
/// Output spatial dims are floor((in + 2*pad - k)/stride) + 1.
NodePtr conv3d_raw(const NodePtr& x, const NodePtr& w, int stride, int pad);

/// Transposed convolution; x:[B,Ci,D,H,W], w:[Ci,Co,k,k,k].
/// Output spatial dims are (in - 1)*stride - 2*pad + k; the adjoint of
/// conv3d_raw under shared weights.
NodePtr deconv3d_raw(const NodePtr& x, const NodePtr& w, int stride, int pad);

/// Adds a per-channel bias. layout: 1 -> channel axis of [B,C,...];
/// exposed via the helpers below.
NodePtr bias_add_channel(const NodePtr& x, const NodePtr& b);  // b:[C]
NodePtr bias_add_row(const NodePtr& x, const NodePtr& b);      // x:[B,M], b:[M]

// --- activations ------------------------------------------------------------

NodePtr sigmoid(const NodePtr& a);
NodePtr leaky_relu(const NodePtr& a, double slope);

/// Mean cross-entropy of softmax(logits) against one-hot targets.
/// First-order differentiable only (its vjp treats softmax-target as
/// constant); never used on a gradient-penalty path.
NodePtr softmax_cross_entropy(const NodePtr& logits, const Tensor& onehot);

// --- layer-level ops (parameterized) ----------------------------------------

/// Memoizes one leaf node per Parameter within a single graph build, so
/// gradient accumulation sees each parameter exactly once.
class GraphContext {
 public:
  NodePtr leaf(Parameter& p, bool trainable = true);
  void accumulate(const std::unordered_map<const Node*, NodePtr>& grads);
  const std::unordered_map<Parameter*, NodePtr>& leaves() const {
    return leaves_;
  }

 private:
  std::unordered_map<Parameter*, NodePtr> leaves_;
};

NodePtr conv3d(GraphContext& ctx, const NodePtr& x, Parameter& w, Parameter& b,
               int stride, int pad, bool trainable = true);
NodePtr deconv3d(GraphContext& ctx, const NodePtr& x, Parameter& w,
                 Parameter& b, int stride, int pad, bool trainable = true);
NodePtr fully_connected(GraphContext& ctx, const NodePtr& x, Parameter& w,
                        Parameter& b, bool trainable = true);

// --- reverse pass ------------------------------------------------------------

using GradMap = std::unordered_map<const Node*, NodePtr>;

/// Reverse-mode sweep from a scalar output. Returns gradient nodes for every
/// reachable node with requires_grad set. The returned nodes are ordinary
/// graph nodes and may be differentiated again.
GradMap backward_graph(const NodePtr& output);

/// Runs backward_graph and adds the resulting parameter gradients into each
/// Parameter::grad registered in `ctx`.
void backward(const NodePtr& output, GraphContext& ctx);

/// Gradient of `output` with respect to `input`, as a node. Returns a zero
/// constant when `input` does not influence `output`.
NodePtr grad_of(const GradMap& grads, const NodePtr& input);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for the scalar function `f` built from a variable leaf at `x`.
double grad_check(const std::function<NodePtr(const NodePtr&)>& f,
                  const Tensor& x, double eps);

}  // namespace vf
