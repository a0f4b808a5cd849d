#include "voxelforge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace vf {

namespace {

// ---------------------------------------------------------------------------
// raw kernels (values only; nodes wrap these)
// ---------------------------------------------------------------------------

struct ConvDims {
  int batch, in_ch, out_ch, k;
  std::array<int, 3> in_sp, out_sp;
};

int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// x:[B,Ci,D,H,W] w:[Co,Ci,k,k,k] -> y:[B,Co,Do,Ho,Wo]
Tensor conv_forward(const Tensor& x, const Tensor& w, int stride, int pad) {
  const int B = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3),
            W = x.dim(4);
  const int Co = w.dim(0), k = w.dim(2);
  const int Do = conv_out_dim(D, k, stride, pad);
  const int Ho = conv_out_dim(H, k, stride, pad);
  const int Wo = conv_out_dim(W, k, stride, pad);
  Tensor y({B, Co, Do, Ho, Wo});

  const std::size_t xs_c = static_cast<std::size_t>(D) * H * W;
  const std::size_t ws_o = static_cast<std::size_t>(Ci) * k * k * k;
  float* out = y.data();
  for (int b = 0; b < B; ++b) {
    const float* xb = x.data() + static_cast<std::size_t>(b) * Ci * xs_c;
    for (int co = 0; co < Co; ++co) {
      const float* wc = w.data() + static_cast<std::size_t>(co) * ws_o;
      for (int od = 0; od < Do; ++od) {
        for (int oh = 0; oh < Ho; ++oh) {
          for (int ow = 0; ow < Wo; ++ow) {
            double acc = 0.0;
            for (int ci = 0; ci < Ci; ++ci) {
              const float* xc = xb + ci * xs_c;
              const float* wk = wc + static_cast<std::size_t>(ci) * k * k * k;
              for (int kd = 0; kd < k; ++kd) {
                const int d = od * stride - pad + kd;
                if (d < 0 || d >= D) continue;
                for (int kh = 0; kh < k; ++kh) {
                  const int h = oh * stride - pad + kh;
                  if (h < 0 || h >= H) continue;
                  const float* xrow =
                      xc + (static_cast<std::size_t>(d) * H + h) * W;
                  const float* wrow = wk + (kd * k + kh) * k;
                  for (int kw = 0; kw < k; ++kw) {
                    const int ww = ow * stride - pad + kw;
                    if (ww < 0 || ww >= W) continue;
                    acc += static_cast<double>(xrow[ww]) * wrow[kw];
                  }
                }
              }
            }
            *out++ = static_cast<float>(acc);
          }
        }
      }
    }
  }
  return y;
}

// Gradient of conv_forward w.r.t. the input (gather form so accumulation
// stays in 64-bit). g:[B,Co,Do,Ho,Wo], w:[Co,Ci,k,k,k] -> [B,Ci,D,H,W].
Tensor conv_input_grad(const Tensor& g, const Tensor& w, int stride, int pad,
                       std::array<int, 3> in_sp) {
  const int B = g.dim(0), Co = g.dim(1), Do = g.dim(2), Ho = g.dim(3),
            Wo = g.dim(4);
  const int Ci = w.dim(1), k = w.dim(2);
  const int D = in_sp[0], H = in_sp[1], W = in_sp[2];
  Tensor gi({B, Ci, D, H, W});

  const std::size_t gs_c = static_cast<std::size_t>(Do) * Ho * Wo;
  float* out = gi.data();
  for (int b = 0; b < B; ++b) {
    const float* gb = g.data() + static_cast<std::size_t>(b) * Co * gs_c;
    for (int ci = 0; ci < Ci; ++ci) {
      for (int d = 0; d < D; ++d) {
        for (int h = 0; h < H; ++h) {
          for (int ww = 0; ww < W; ++ww) {
            double acc = 0.0;
            for (int co = 0; co < Co; ++co) {
              const float* gc = gb + co * gs_c;
              const float* wk =
                  w.data() +
                  (static_cast<std::size_t>(co) * Ci + ci) * k * k * k;
              for (int kd = 0; kd < k; ++kd) {
                const int num_d = d + pad - kd;
                if (num_d < 0 || num_d % stride) continue;
                const int od = num_d / stride;
                if (od >= Do) continue;
                for (int kh = 0; kh < k; ++kh) {
                  const int num_h = h + pad - kh;
                  if (num_h < 0 || num_h % stride) continue;
                  const int oh = num_h / stride;
                  if (oh >= Ho) continue;
                  for (int kw = 0; kw < k; ++kw) {
                    const int num_w = ww + pad - kw;
                    if (num_w < 0 || num_w % stride) continue;
                    const int ow = num_w / stride;
                    if (ow >= Wo) continue;
                    acc += static_cast<double>(
                               gc[(static_cast<std::size_t>(od) * Ho + oh) *
                                      Wo +
                                  ow]) *
                           wk[(kd * k + kh) * k + kw];
                  }
                }
              }
            }
            *out++ = static_cast<float>(acc);
          }
        }
      }
    }
  }
  return gi;
}

// Gradient of conv_forward w.r.t. the weights.
// x:[B,Ci,D,H,W], g:[B,Co,Do,Ho,Wo] -> [Co,Ci,k,k,k].
Tensor conv_weight_grad(const Tensor& x, const Tensor& g, int stride, int pad,
                        int k) {
  const int B = x.dim(0), Ci = x.dim(1), D = x.dim(2), H = x.dim(3),
            W = x.dim(4);
  const int Co = g.dim(1), Do = g.dim(2), Ho = g.dim(3), Wo = g.dim(4);
  Tensor gw({Co, Ci, k, k, k});

  const std::size_t xs_c = static_cast<std::size_t>(D) * H * W;
  const std::size_t gs_c = static_cast<std::size_t>(Do) * Ho * Wo;
  float* out = gw.data();
  for (int co = 0; co < Co; ++co) {
    for (int ci = 0; ci < Ci; ++ci) {
      for (int kd = 0; kd < k; ++kd) {
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            double acc = 0.0;
            for (int b = 0; b < B; ++b) {
              const float* xc =
                  x.data() + (static_cast<std::size_t>(b) * Ci + ci) * xs_c;
              const float* gc =
                  g.data() + (static_cast<std::size_t>(b) * Co + co) * gs_c;
              for (int od = 0; od < Do; ++od) {
                const int d = od * stride - pad + kd;
                if (d < 0 || d >= D) continue;
                for (int oh = 0; oh < Ho; ++oh) {
                  const int h = oh * stride - pad + kh;
                  if (h < 0 || h >= H) continue;
                  for (int ow = 0; ow < Wo; ++ow) {
                    const int ww = ow * stride - pad + kw;
                    if (ww < 0 || ww >= W) continue;
                    acc += static_cast<double>(
                               xc[(static_cast<std::size_t>(d) * H + h) * W +
                                  ww]) *
                           gc[(static_cast<std::size_t>(od) * Ho + oh) * Wo +
                              ow];
                  }
                }
              }
            }
            *out++ = static_cast<float>(acc);
          }
        }
      }
    }
  }
  return gw;
}

Tensor matmul_values(const Tensor& a, const Tensor& b) {
  const int B = a.dim(0), N = a.dim(1), M = b.dim(1);
  Tensor y({B, M});
  for (int i = 0; i < B; ++i) {
    for (int j = 0; j < M; ++j) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        acc += static_cast<double>(a[static_cast<std::size_t>(i) * N + n]) *
               b[static_cast<std::size_t>(n) * M + j];
      }
      y[static_cast<std::size_t>(i) * M + j] = static_cast<float>(acc);
    }
  }
  return y;
}

void check_same_shape(const char* op, const NodePtr& a, const NodePtr& b) {
  if (!a->value.same_shape(b->value)) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     a->value.shape_str() + " vs " + b->value.shape_str());
  }
}

std::size_t spatial_size(const Tensor& t) {
  std::size_t n = 1;
  for (int i = 2; i < t.rank(); ++i) n *= static_cast<std::size_t>(t.dim(i));
  return n;
}

// ---------------------------------------------------------------------------
// node classes
// ---------------------------------------------------------------------------

template <typename T, typename... Args>
NodePtr finish(std::shared_ptr<T> n, Tensor value,
               std::vector<NodePtr> inputs) {
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  n->requires_grad = false;
  for (const auto& in : n->inputs) {
    if (in && in->requires_grad) n->requires_grad = true;
  }
  return n;
}

struct LeafNode final : Node {
  std::string_view name() const override { return "leaf"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr&) const override {
    return {};
  }
};

struct AddNode final : Node {
  std::string_view name() const override { return "add"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {g, g};
  }
};

struct SubNode final : Node {
  std::string_view name() const override { return "sub"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {g, scale(g, -1.0)};
  }
};

struct MulNode final : Node {
  std::string_view name() const override { return "mul"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {mul(g, inputs[1]), mul(g, inputs[0])};
  }
};

struct DivNode final : Node {
  std::string_view name() const override { return "div"; }
  std::vector<NodePtr> vjp(const NodePtr& self,
                           const NodePtr& g) const override {
    // d(a/b) = g/b, -g*(a/b)/b
    NodePtr ga = divide(g, inputs[1]);
    NodePtr gb = scale(mul(g, divide(self, inputs[1])), -1.0);
    return {ga, gb};
  }
};

struct ScaleNode final : Node {
  double c = 1.0;
  std::string_view name() const override { return "scale"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {scale(g, c)};
  }
};

struct AddScalarNode final : Node {
  std::string_view name() const override { return "add_scalar"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {g};
  }
};

struct SqrtNode final : Node {
  std::string_view name() const override { return "sqrt"; }
  std::vector<NodePtr> vjp(const NodePtr& self,
                           const NodePtr& g) const override {
    // 0.5 * g / sqrt(x); the max() keeps a zero-gradient critic input from
    // producing NaN when the penalty path is differentiated again.
    Tensor guard = self->value;
    for (std::size_t i = 0; i < guard.size(); ++i) {
      guard[i] = std::max(guard[i], 1e-20f);
    }
    return {divide(scale(g, 0.5), constant(std::move(guard)))};
  }
};

struct SumNode final : Node {
  std::string_view name() const override { return "sum"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {broadcast(g, inputs[0]->shape())};
  }
};

struct BroadcastNode final : Node {
  std::string_view name() const override { return "broadcast"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {sum(g)};
  }
};

struct ReshapeNode final : Node {
  std::string_view name() const override { return "reshape"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {reshape(g, inputs[0]->shape())};
  }
};

struct ConcatChannelsNode final : Node {
  std::string_view name() const override { return "concat_channels"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    const int c0 = inputs[0]->value.dim(1);
    const int c1 = inputs[1]->value.dim(1);
    return {slice_channels(g, 0, c0), slice_channels(g, c0, c1)};
  }
};

struct SliceChannelsNode final : Node {
  int begin = 0;
  std::string_view name() const override { return "slice_channels"; }
  std::vector<NodePtr> vjp(const NodePtr& self, const NodePtr& g) const override;
};

struct PadChannelsNode final : Node {
  int before = 0, after = 0;
  std::string_view name() const override { return "pad_channels"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {slice_channels(g, before, inputs[0]->value.dim(1))};
  }
};

NodePtr pad_channels(const NodePtr& a, int before, int after);

std::vector<NodePtr> SliceChannelsNode::vjp(const NodePtr& self,
                                            const NodePtr& g) const {
  const int total = inputs[0]->value.dim(1);
  const int count = self->value.dim(1);
  return {pad_channels(g, begin, total - begin - count)};
}

struct TileSpatialNode final : Node {
  std::string_view name() const override { return "tile_spatial"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {sum_spatial(g)};
  }
};

struct SumSpatialNode final : Node {
  std::string_view name() const override { return "sum_spatial"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {tile_spatial(g, inputs[0]->value.dim(2))};
  }
};

struct MatMulNode final : Node {
  std::string_view name() const override { return "matmul"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {matmul(g, transpose2d(inputs[1])),
            matmul(transpose2d(inputs[0]), g)};
  }
};

struct Transpose2DNode final : Node {
  std::string_view name() const override { return "transpose2d"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {transpose2d(g)};
  }
};

// Per-channel bias over axis 1; works for [B,M] and [B,C,D,H,W].
struct BiasAddNode final : Node {
  std::string_view name() const override { return "bias_add"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

struct BiasSumNode final : Node {
  std::string_view name() const override { return "bias_sum"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

struct BiasBroadcastNode final : Node {
  std::string_view name() const override { return "bias_broadcast"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

Tensor bias_sum_values(const Tensor& g) {
  const int B = g.dim(0), C = g.dim(1);
  const std::size_t sp = spatial_size(g);
  Tensor out({C});
  for (int c = 0; c < C; ++c) {
    double acc = 0.0;
    for (int b = 0; b < B; ++b) {
      const float* p = g.data() + (static_cast<std::size_t>(b) * C + c) * sp;
      for (std::size_t i = 0; i < sp; ++i) acc += p[i];
    }
    out[static_cast<std::size_t>(c)] = static_cast<float>(acc);
  }
  return out;
}

NodePtr bias_sum(const NodePtr& g) {
  auto n = std::make_shared<BiasSumNode>();
  return finish(n, bias_sum_values(g->value), {g});
}

NodePtr bias_broadcast(const NodePtr& b, const std::vector<int>& shape) {
  Tensor out(shape);
  const int B = shape[0], C = shape[1];
  std::size_t sp = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) {
    sp *= static_cast<std::size_t>(shape[i]);
  }
  for (int bi = 0; bi < B; ++bi) {
    for (int c = 0; c < C; ++c) {
      float* p = out.data() + (static_cast<std::size_t>(bi) * C + c) * sp;
      const float v = b->value[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < sp; ++i) p[i] = v;
    }
  }
  auto n = std::make_shared<BiasBroadcastNode>();
  return finish(n, std::move(out), {b});
}

std::vector<NodePtr> BiasAddNode::vjp(const NodePtr&, const NodePtr& g) const {
  return {g, bias_sum(g)};
}

std::vector<NodePtr> BiasSumNode::vjp(const NodePtr&, const NodePtr& g) const {
  return {bias_broadcast(g, inputs[0]->shape())};
}

std::vector<NodePtr> BiasBroadcastNode::vjp(const NodePtr&,
                                            const NodePtr& g) const {
  return {bias_sum(g)};
}

struct SigmoidNode final : Node {
  std::string_view name() const override { return "sigmoid"; }
  std::vector<NodePtr> vjp(const NodePtr& self,
                           const NodePtr& g) const override {
    // g * y * (1 - y), kept as graph nodes so the penalty can differentiate
    // through it a second time.
    return {mul(mul(g, self), add_scalar(scale(self, -1.0), 1.0))};
  }
};

// Elementwise multiply by a fixed tensor (no gradient into the mask).
struct MulMaskNode final : Node {
  Tensor mask;
  std::string_view name() const override { return "mul_mask"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

NodePtr mul_mask(const NodePtr& a, Tensor mask) {
  if (!a->value.same_shape(mask)) {
    throw ShapeError("mul_mask: shape mismatch");
  }
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto n = std::make_shared<MulMaskNode>();
  n->mask = std::move(mask);
  return finish(n, std::move(out), {a});
}

std::vector<NodePtr> MulMaskNode::vjp(const NodePtr&, const NodePtr& g) const {
  return {mul_mask(g, mask)};
}

struct LeakyReluNode final : Node {
  double slope = 0.0;
  std::string_view name() const override { return "leaky_relu"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    Tensor mask(inputs[0]->shape());
    const Tensor& x = inputs[0]->value;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = x[i] >= 0.0f ? 1.0f : static_cast<float>(slope);
    }
    return {mul_mask(g, std::move(mask))};
  }
};

struct SoftmaxCrossEntropyNode final : Node {
  Tensor grad_mask;  // (softmax - onehot) / B
  std::string_view name() const override { return "softmax_cross_entropy"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override {
    return {mul_mask(broadcast(g, grad_mask.shape()), grad_mask)};
  }
};

struct Conv3dNode final : Node {
  int stride = 1, pad = 0;
  std::string_view name() const override { return "conv3d"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

struct ConvInputGradNode final : Node {
  int stride = 1, pad = 0;
  std::array<int, 3> target_sp{};
  std::string_view name() const override { return "conv3d_input_grad"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

struct ConvWeightGradNode final : Node {
  int stride = 1, pad = 0;
  std::string_view name() const override { return "conv3d_weight_grad"; }
  std::vector<NodePtr> vjp(const NodePtr&, const NodePtr& g) const override;
};

NodePtr conv_input_grad_node(const NodePtr& g, const NodePtr& w, int stride,
                             int pad, std::array<int, 3> target_sp) {
  auto n = std::make_shared<ConvInputGradNode>();
  n->stride = stride;
  n->pad = pad;
  n->target_sp = target_sp;
  return finish(n, conv_input_grad(g->value, w->value, stride, pad, target_sp),
                {g, w});
}

NodePtr conv_weight_grad_node(const NodePtr& x, const NodePtr& g, int stride,
                              int pad, int k) {
  auto n = std::make_shared<ConvWeightGradNode>();
  n->stride = stride;
  n->pad = pad;
  return finish(n, conv_weight_grad(x->value, g->value, stride, pad, k),
                {x, g});
}

std::vector<NodePtr> Conv3dNode::vjp(const NodePtr&, const NodePtr& g) const {
  const NodePtr& x = inputs[0];
  const NodePtr& w = inputs[1];
  const auto& xs = x->shape();
  return {conv_input_grad_node(g, w, stride, pad, {xs[2], xs[3], xs[4]}),
          conv_weight_grad_node(x, g, stride, pad, w->value.dim(2))};
}

// The conv family is closed under differentiation: the gradient of each
// member is expressed with the other two, which is what makes the
// second-order gradient-penalty pass work.
std::vector<NodePtr> ConvInputGradNode::vjp(const NodePtr&,
                                            const NodePtr& g) const {
  const NodePtr& a = inputs[0];  // plays the output-gradient role
  const NodePtr& w = inputs[1];
  return {conv3d_raw(g, w, stride, pad),
          conv_weight_grad_node(g, a, stride, pad, w->value.dim(2))};
}

std::vector<NodePtr> ConvWeightGradNode::vjp(const NodePtr&,
                                             const NodePtr& g) const {
  const NodePtr& x = inputs[0];
  const NodePtr& go = inputs[1];
  const auto& xs = x->shape();
  return {conv_input_grad_node(go, g, stride, pad, {xs[2], xs[3], xs[4]}),
          conv3d_raw(x, g, stride, pad)};
}

}  // namespace

// ---------------------------------------------------------------------------
// factories
// ---------------------------------------------------------------------------

NodePtr constant(Tensor v) {
  auto n = std::make_shared<LeafNode>();
  return finish(n, std::move(v), {});
}

NodePtr variable(Tensor v) {
  auto n = constant(std::move(v));
  n->requires_grad = true;
  return n;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape("add", a, b);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  return finish(std::make_shared<AddNode>(), std::move(out), {a, b});
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape("sub", a, b);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  return finish(std::make_shared<SubNode>(), std::move(out), {a, b});
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape("mul", a, b);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  return finish(std::make_shared<MulNode>(), std::move(out), {a, b});
}

NodePtr divide(const NodePtr& a, const NodePtr& b) {
  check_same_shape("divide", a, b);
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b->value[i];
  return finish(std::make_shared<DivNode>(), std::move(out), {a, b});
}

NodePtr scale(const NodePtr& a, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(out[i] * c);
  }
  auto n = std::make_shared<ScaleNode>();
  n->c = c;
  return finish(n, std::move(out), {a});
}

NodePtr add_scalar(const NodePtr& a, double c) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(out[i] + c);
  }
  return finish(std::make_shared<AddScalarNode>(), std::move(out), {a});
}

NodePtr square(const NodePtr& a) { return mul(a, a); }

NodePtr sqrt_of(const NodePtr& a) {
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(out[i]);
  return finish(std::make_shared<SqrtNode>(), std::move(out), {a});
}

NodePtr sum(const NodePtr& a) {
  return finish(std::make_shared<SumNode>(),
                Tensor::scalar(static_cast<float>(a->value.sum())), {a});
}

NodePtr mean(const NodePtr& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a->value.size()));
}

NodePtr broadcast(const NodePtr& s, std::vector<int> shape) {
  if (!s->value.is_scalar()) {
    throw ShapeError("broadcast: expected scalar source");
  }
  return finish(std::make_shared<BroadcastNode>(),
                Tensor::full(std::move(shape), s->value.scalar_value()), {s});
}

NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
  Tensor out(std::move(shape),
             std::vector<float>(a->value.data(),
                                a->value.data() + a->value.size()));
  if (out.size() != a->value.size()) {
    throw ShapeError("reshape: element count mismatch");
  }
  return finish(std::make_shared<ReshapeNode>(), std::move(out), {a});
}

NodePtr concat_channels(const NodePtr& a, const NodePtr& b) {
  const Tensor& ta = a->value;
  const Tensor& tb = b->value;
  if (ta.rank() != 5 || tb.rank() != 5) {
    throw ShapeError("concat_channels: expected rank-5 tensors");
  }
  for (int axis : {0, 2, 3, 4}) {
    if (ta.dim(axis) != tb.dim(axis)) {
      throw ShapeError("concat_channels: mismatch on axis " +
                       std::to_string(axis) + ": " + ta.shape_str() + " vs " +
                       tb.shape_str());
    }
  }
  const int B = ta.dim(0), Ca = ta.dim(1), Cb = tb.dim(1);
  const std::size_t sp = spatial_size(ta);
  Tensor out({B, Ca + Cb, ta.dim(2), ta.dim(3), ta.dim(4)});
  for (int bi = 0; bi < B; ++bi) {
    float* dst = out.data() + static_cast<std::size_t>(bi) * (Ca + Cb) * sp;
    const float* pa = ta.data() + static_cast<std::size_t>(bi) * Ca * sp;
    const float* pb = tb.data() + static_cast<std::size_t>(bi) * Cb * sp;
    std::copy(pa, pa + static_cast<std::size_t>(Ca) * sp, dst);
    std::copy(pb, pb + static_cast<std::size_t>(Cb) * sp,
              dst + static_cast<std::size_t>(Ca) * sp);
  }
  return finish(std::make_shared<ConcatChannelsNode>(), std::move(out), {a, b});
}

NodePtr slice_channels(const NodePtr& a, int begin, int count) {
  const Tensor& t = a->value;
  if (t.rank() != 5) throw ShapeError("slice_channels: expected rank-5");
  if (begin < 0 || count <= 0 || begin + count > t.dim(1)) {
    throw ShapeError("slice_channels: bad channel range");
  }
  const int B = t.dim(0), C = t.dim(1);
  const std::size_t sp = spatial_size(t);
  Tensor out({B, count, t.dim(2), t.dim(3), t.dim(4)});
  for (int bi = 0; bi < B; ++bi) {
    const float* src =
        t.data() + (static_cast<std::size_t>(bi) * C + begin) * sp;
    float* dst = out.data() + static_cast<std::size_t>(bi) * count * sp;
    std::copy(src, src + static_cast<std::size_t>(count) * sp, dst);
  }
  auto n = std::make_shared<SliceChannelsNode>();
  n->begin = begin;
  return finish(n, std::move(out), {a});
}

namespace {
NodePtr pad_channels(const NodePtr& a, int before, int after) {
  const Tensor& t = a->value;
  const int B = t.dim(0), C = t.dim(1);
  const std::size_t sp = spatial_size(t);
  const int Cout = before + C + after;
  Tensor out({B, Cout, t.dim(2), t.dim(3), t.dim(4)});
  for (int bi = 0; bi < B; ++bi) {
    const float* src = t.data() + static_cast<std::size_t>(bi) * C * sp;
    float* dst =
        out.data() + (static_cast<std::size_t>(bi) * Cout + before) * sp;
    std::copy(src, src + static_cast<std::size_t>(C) * sp, dst);
  }
  auto n = std::make_shared<PadChannelsNode>();
  n->before = before;
  n->after = after;
  return finish(n, std::move(out), {a});
}
}  // namespace

NodePtr tile_spatial(const NodePtr& a, int side) {
  const Tensor& t = a->value;
  if (t.rank() != 2) throw ShapeError("tile_spatial: expected [B,C] input");
  if (side < 1) throw ShapeError("tile_spatial: side must be >= 1");
  const int B = t.dim(0), C = t.dim(1);
  const std::size_t sp = static_cast<std::size_t>(side) * side * side;
  Tensor out({B, C, side, side, side});
  for (int bi = 0; bi < B; ++bi) {
    for (int c = 0; c < C; ++c) {
      const float v = t[static_cast<std::size_t>(bi) * C + c];
      float* dst = out.data() + (static_cast<std::size_t>(bi) * C + c) * sp;
      std::fill(dst, dst + sp, v);
    }
  }
  return finish(std::make_shared<TileSpatialNode>(), std::move(out), {a});
}

NodePtr sum_spatial(const NodePtr& a) {
  const Tensor& t = a->value;
  if (t.rank() != 5) throw ShapeError("sum_spatial: expected rank-5");
  const int B = t.dim(0), C = t.dim(1);
  const std::size_t sp = spatial_size(t);
  Tensor out({B, C});
  for (int bi = 0; bi < B; ++bi) {
    for (int c = 0; c < C; ++c) {
      const float* src = t.data() + (static_cast<std::size_t>(bi) * C + c) * sp;
      double acc = 0.0;
      for (std::size_t i = 0; i < sp; ++i) acc += src[i];
      out[static_cast<std::size_t>(bi) * C + c] = static_cast<float>(acc);
    }
  }
  return finish(std::make_shared<SumSpatialNode>(), std::move(out), {a});
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2) {
    throw ShapeError("matmul: expected rank-2 operands");
  }
  if (a->value.dim(1) != b->value.dim(0)) {
    throw ShapeError("matmul: inner axis mismatch " + a->value.shape_str() +
                     " x " + b->value.shape_str());
  }
  return finish(std::make_shared<MatMulNode>(),
                matmul_values(a->value, b->value), {a, b});
}

NodePtr transpose2d(const NodePtr& a) {
  const Tensor& t = a->value;
  if (t.rank() != 2) throw ShapeError("transpose2d: expected rank-2");
  const int R = t.dim(0), C = t.dim(1);
  Tensor out({C, R});
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      out[static_cast<std::size_t>(c) * R + r] =
          t[static_cast<std::size_t>(r) * C + c];
    }
  }
  return finish(std::make_shared<Transpose2DNode>(), std::move(out), {a});
}

NodePtr conv3d_raw(const NodePtr& x, const NodePtr& w, int stride, int pad) {
  const Tensor& xt = x->value;
  const Tensor& wt = w->value;
  if (xt.rank() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W]");
  if (wt.rank() != 5) throw ShapeError("conv3d: weights must be [Co,Ci,k,k,k]");
  if (xt.dim(1) != wt.dim(1)) {
    throw ShapeError("conv3d: channel axis (1) mismatch: input has " +
                     std::to_string(xt.dim(1)) + ", weights expect " +
                     std::to_string(wt.dim(1)));
  }
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  const int k = wt.dim(2);
  for (int axis = 2; axis < 5; ++axis) {
    if (xt.dim(axis) + 2 * pad < k) {
      throw ShapeError("conv3d: kernel does not fit padded input on axis " +
                       std::to_string(axis));
    }
  }
  auto n = std::make_shared<Conv3dNode>();
  n->stride = stride;
  n->pad = pad;
  return finish(n, conv_forward(xt, wt, stride, pad), {x, w});
}

NodePtr deconv3d_raw(const NodePtr& x, const NodePtr& w, int stride, int pad) {
  const Tensor& xt = x->value;
  const Tensor& wt = w->value;
  if (xt.rank() != 5) throw ShapeError("deconv3d: input must be [B,C,D,H,W]");
  if (wt.rank() != 5) {
    throw ShapeError("deconv3d: weights must be [Ci,Co,k,k,k]");
  }
  if (xt.dim(1) != wt.dim(0)) {
    throw ShapeError("deconv3d: channel axis (1) mismatch: input has " +
                     std::to_string(xt.dim(1)) + ", weights expect " +
                     std::to_string(wt.dim(0)));
  }
  if (stride < 1) throw ShapeError("deconv3d: stride must be >= 1");
  const int k = wt.dim(2);
  std::array<int, 3> out_sp{};
  for (int axis = 0; axis < 3; ++axis) {
    out_sp[axis] = (xt.dim(axis + 2) - 1) * stride - 2 * pad + k;
    if (out_sp[axis] < 1) {
      throw ShapeError("deconv3d: non-positive output on axis " +
                       std::to_string(axis + 2));
    }
  }
  return conv_input_grad_node(x, w, stride, pad, out_sp);
}

NodePtr bias_add_channel(const NodePtr& x, const NodePtr& b) {
  const Tensor& xt = x->value;
  const Tensor& bt = b->value;
  if (xt.rank() < 2 || bt.rank() != 1 || bt.dim(0) != xt.dim(1)) {
    throw ShapeError("bias_add: bias " + bt.shape_str() +
                     " does not match channel axis of " + xt.shape_str());
  }
  const int B = xt.dim(0), C = xt.dim(1);
  const std::size_t sp = spatial_size(xt);
  Tensor out = xt;
  for (int bi = 0; bi < B; ++bi) {
    for (int c = 0; c < C; ++c) {
      float* p = out.data() + (static_cast<std::size_t>(bi) * C + c) * sp;
      const float v = bt[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < sp; ++i) p[i] += v;
    }
  }
  return finish(std::make_shared<BiasAddNode>(), std::move(out), {x, b});
}

NodePtr bias_add_row(const NodePtr& x, const NodePtr& b) {
  return bias_add_channel(x, b);
}

NodePtr sigmoid(const NodePtr& a) {
  // Clamped a hair inside (0,1): float rounding would otherwise let large
  // inputs land exactly on the endpoints.
  static const float kHi = std::nextafter(1.0f, 0.0f);
  static const float kLo = 1.0f - kHi;
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = out[i];
    const double y =
        x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out[i] = std::clamp(static_cast<float>(y), kLo, kHi);
  }
  return finish(std::make_shared<SigmoidNode>(), std::move(out), {a});
}

NodePtr leaky_relu(const NodePtr& a, double slope) {
  if (slope < 0.0 || slope >= 1.0) {
    throw std::invalid_argument("leaky_relu: slope must be in [0,1)");
  }
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] < 0.0f) out[i] = static_cast<float>(out[i] * slope);
  }
  auto n = std::make_shared<LeakyReluNode>();
  n->slope = slope;
  return finish(n, std::move(out), {a});
}

NodePtr softmax_cross_entropy(const NodePtr& logits, const Tensor& onehot) {
  const Tensor& lt = logits->value;
  if (lt.rank() != 2 || !lt.same_shape(onehot)) {
    throw ShapeError("softmax_cross_entropy: logits/targets mismatch");
  }
  const int B = lt.dim(0), K = lt.dim(1);
  Tensor soft(lt.shape());
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const float* row = lt.data() + static_cast<std::size_t>(b) * K;
    float m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(row[k]) - m);
    for (int k = 0; k < K; ++k) {
      const double p = std::exp(static_cast<double>(row[k]) - m) / z;
      soft[static_cast<std::size_t>(b) * K + k] = static_cast<float>(p);
      const float y = onehot[static_cast<std::size_t>(b) * K + k];
      if (y > 0.0f) loss -= y * std::log(std::max(p, 1e-30));
    }
  }
  auto n = std::make_shared<SoftmaxCrossEntropyNode>();
  n->grad_mask = Tensor(lt.shape());
  for (std::size_t i = 0; i < soft.size(); ++i) {
    n->grad_mask[i] = (soft[i] - onehot[i]) / static_cast<float>(B);
  }
  return finish(n, Tensor::scalar(static_cast<float>(loss / B)), {logits});
}

// ---------------------------------------------------------------------------
// parameterized layers
// ---------------------------------------------------------------------------

NodePtr GraphContext::leaf(Parameter& p, bool trainable) {
  auto it = leaves_.find(&p);
  if (it != leaves_.end()) return it->second;
  NodePtr n = trainable ? variable(p.value) : constant(p.value);
  leaves_.emplace(&p, n);
  return n;
}

void GraphContext::accumulate(const GradMap& grads) {
  for (auto& [param, leaf] : leaves_) {
    auto it = grads.find(leaf.get());
    if (it == grads.end()) continue;
    const Tensor& g = it->second->value;
    for (std::size_t i = 0; i < g.size(); ++i) param->grad[i] += g[i];
  }
}

NodePtr conv3d(GraphContext& ctx, const NodePtr& x, Parameter& w, Parameter& b,
               int stride, int pad, bool trainable) {
  return bias_add_channel(
      conv3d_raw(x, ctx.leaf(w, trainable), stride, pad), ctx.leaf(b, trainable));
}

NodePtr deconv3d(GraphContext& ctx, const NodePtr& x, Parameter& w,
                 Parameter& b, int stride, int pad, bool trainable) {
  return bias_add_channel(deconv3d_raw(x, ctx.leaf(w, trainable), stride, pad),
                          ctx.leaf(b, trainable));
}

NodePtr fully_connected(GraphContext& ctx, const NodePtr& x, Parameter& w,
                        Parameter& b, bool trainable) {
  return bias_add_row(matmul(x, ctx.leaf(w, trainable)),
                      ctx.leaf(b, trainable));
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

GradMap backward_graph(const NodePtr& output) {
  if (!output->value.is_scalar()) {
    throw ShapeError("backward: output must be scalar, got " +
                     output->value.shape_str());
  }
  GradMap grads;
  if (!output->requires_grad) return grads;

  // Iterative post-order over the requires_grad subgraph.
  std::vector<NodePtr> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(output, 0);
  visited.insert(output.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    bool descended = false;
    while (next < node->inputs.size()) {
      const NodePtr& in = node->inputs[next++];
      if (in && in->requires_grad && !visited.count(in.get())) {
        visited.insert(in.get());
        stack.emplace_back(in, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  grads[output.get()] = constant(Tensor::scalar(1.0f));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& node = *it;
    auto git = grads.find(node.get());
    if (git == grads.end()) continue;  // unreachable from the output
    if (node->inputs.empty()) continue;
    std::vector<NodePtr> contribs = node->vjp(node, git->second);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const NodePtr& in = node->inputs[i];
      if (!in || !in->requires_grad || i >= contribs.size() || !contribs[i]) {
        continue;
      }
      auto existing = grads.find(in.get());
      if (existing == grads.end()) {
        grads.emplace(in.get(), contribs[i]);
      } else {
        existing->second = add(existing->second, contribs[i]);
      }
    }
  }
  return grads;
}

void backward(const NodePtr& output, GraphContext& ctx) {
  ctx.accumulate(backward_graph(output));
}

NodePtr grad_of(const GradMap& grads, const NodePtr& input) {
  auto it = grads.find(input.get());
  if (it != grads.end()) return it->second;
  return constant(Tensor(input->shape()));
}

double grad_check(const std::function<NodePtr(const NodePtr&)>& f,
                  const Tensor& x, double eps) {
  NodePtr leaf = variable(x);
  NodePtr out = f(leaf);
  if (!out->value.is_scalar()) {
    throw ShapeError("grad_check: f must produce a scalar");
  }
  const Tensor analytic = grad_of(backward_graph(out), leaf)->value;

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += static_cast<float>(eps);
    xm[i] -= static_cast<float>(eps);
    const double fp = f(constant(xp))->value.scalar_value();
    const double fm = f(constant(xm))->value.scalar_value();
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace vf
