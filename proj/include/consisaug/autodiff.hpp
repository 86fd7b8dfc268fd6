#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "consisaug/errors.hpp"
#include "consisaug/tensor.hpp"

namespace consisaug {

/// Reverse-mode tape. Nodes are appended in evaluation order, so creation
/// order is already a topological order; backward() walks it once in
/// reverse. A tape is confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Register an external tensor as a leaf. After backward() its
  /// accumulated gradient is written into t.grad (zeros if the loss does
  /// not depend on it). The tensor must stay at this address until then.
  void watch(Tensor& t) {
    t.tape = this;
    t.node = emit(static_cast<int>(t.data.size()), nullptr);
    t.requires_grad = true;
    watched_.push_back({t.node, &t});
  }

  void backward(const Tensor& loss) {
    if (!loss.on_tape() || loss.tape != this)
      raise(ErrorCode::NoTape, "backward() on a tensor that is not on this tape");
    if (loss.size() != 1) raise(ErrorCode::NotScalar, "backward() requires a scalar loss");
    if (ran_) raise(ErrorCode::TapeReused, "backward() already ran on this tape; reset() first");
    ran_ = true;
    gbuf(loss.node)[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.pull) continue;
      n.pull(*this, n.grad);
    }
    for (auto& [node, t] : watched_) {
      Node& n = nodes_[static_cast<std::size_t>(node)];
      if (n.grad.empty())
        t->grad = std::vector<double>(static_cast<std::size_t>(n.len), 0.0);
      else
        t->grad = n.grad;
    }
  }

  /// Gradient buffer of a taped tensor after backward(); zeros if untouched.
  const std::vector<double>& grad(const Tensor& t) {
    if (!t.on_tape() || t.tape != this) raise(ErrorCode::NoTape, "grad() of an off-tape tensor");
    if (!ran_) raise(ErrorCode::NoTape, "grad() before backward()");
    return gbuf(t.node);
  }

  void reset() {
    for (Node& n : nodes_) n.grad.clear();
    ran_ = false;
  }

  std::size_t node_count() const { return nodes_.size(); }
  bool ran() const { return ran_; }

  // --- op construction interface (used by the free-function ops below) ---

  using Pull = std::function<void(Tape&, const std::vector<double>&)>;

  int emit(int len, Pull pull) {
    nodes_.push_back(Node{len, std::move(pull), {}});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<double>& gbuf(int node) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(n.len), 0.0);
    return n.grad;
  }

 private:
  struct Node {
    int len;
    Pull pull;
    std::vector<double> grad;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<int, Tensor*>> watched_;
  bool ran_ = false;
};

namespace detail {

inline Tape* result_tape(const Tensor& a) { return a.on_tape() ? a.tape : nullptr; }

inline Tape* result_tape(const Tensor& a, const Tensor& b) {
  Tape* ta = result_tape(a);
  Tape* tb = result_tape(b);
  if (ta && tb && ta != tb) raise(ErrorCode::NoTape, "operands live on different tapes");
  return ta ? ta : tb;
}

inline void attach(Tensor& out, Tape* tape, Tape::Pull pull) {
  if (!tape) return;
  out.tape = tape;
  out.node = tape->emit(static_cast<int>(out.data.size()), std::move(pull));
}

inline void axpy(std::vector<double>& dst, const std::vector<double>& g, double s) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations
// ---------------------------------------------------------------------------

enum class EwOp { Add, Sub, Mul, Div, Neg, Exp, Log, Relu, Sigmoid, Square, SmoothL1 };

namespace detail {

enum class BinShape { Same, ScalarLhs, ScalarRhs };

inline BinShape binary_shape(const Tensor& a, const Tensor& b) {
  if (a.shape == b.shape) return BinShape::Same;
  if (b.is_scalar()) return BinShape::ScalarRhs;
  if (a.is_scalar()) return BinShape::ScalarLhs;
  raise(ErrorCode::ShapeMismatch, "elementwise operands must match or one must be scalar");
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto bs = detail::binary_shape(a, b);
  Tensor out = Tensor::zeros(bs == detail::BinShape::ScalarLhs ? b.shape : a.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    double av = bs == detail::BinShape::ScalarLhs ? a.data[0] : a.data[i];
    double bv = bs == detail::BinShape::ScalarRhs ? b.data[0] : b.data[i];
    out.data[i] = av + bv;
  }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  detail::attach(out, tape, [pa = a.node, pb = b.node, bs](Tape& t, const std::vector<double>& g) {
    if (pa >= 0) {
      auto& ga = t.gbuf(pa);
      if (bs == detail::BinShape::ScalarLhs)
        for (double gi : g) ga[0] += gi;
      else
        detail::axpy(ga, g, 1.0);
    }
    if (pb >= 0) {
      auto& gb = t.gbuf(pb);
      if (bs == detail::BinShape::ScalarRhs)
        for (double gi : g) gb[0] += gi;
      else
        detail::axpy(gb, g, 1.0);
    }
  });
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto bs = detail::binary_shape(a, b);
  Tensor out = Tensor::zeros(bs == detail::BinShape::ScalarLhs ? b.shape : a.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    double av = bs == detail::BinShape::ScalarLhs ? a.data[0] : a.data[i];
    double bv = bs == detail::BinShape::ScalarRhs ? b.data[0] : b.data[i];
    out.data[i] = av - bv;
  }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  detail::attach(out, tape, [pa = a.node, pb = b.node, bs](Tape& t, const std::vector<double>& g) {
    if (pa >= 0) {
      auto& ga = t.gbuf(pa);
      if (bs == detail::BinShape::ScalarLhs)
        for (double gi : g) ga[0] += gi;
      else
        detail::axpy(ga, g, 1.0);
    }
    if (pb >= 0) {
      auto& gb = t.gbuf(pb);
      if (bs == detail::BinShape::ScalarRhs)
        for (double gi : g) gb[0] -= gi;
      else
        detail::axpy(gb, g, -1.0);
    }
  });
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto bs = detail::binary_shape(a, b);
  Tensor out = Tensor::zeros(bs == detail::BinShape::ScalarLhs ? b.shape : a.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    double av = bs == detail::BinShape::ScalarLhs ? a.data[0] : a.data[i];
    double bv = bs == detail::BinShape::ScalarRhs ? b.data[0] : b.data[i];
    out.data[i] = av * bv;
  }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node, pb = b.node, bs, av = a.data, bv = b.data](
                     Tape& t, const std::vector<double>& g) {
                   if (pa >= 0) {
                     auto& ga = t.gbuf(pa);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       double bvi = bs == detail::BinShape::ScalarRhs ? bv[0] : bv[i];
                       if (bs == detail::BinShape::ScalarLhs)
                         ga[0] += g[i] * bvi;
                       else
                         ga[i] += g[i] * bvi;
                     }
                   }
                   if (pb >= 0) {
                     auto& gb = t.gbuf(pb);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       double avi = bs == detail::BinShape::ScalarLhs ? av[0] : av[i];
                       if (bs == detail::BinShape::ScalarRhs)
                         gb[0] += g[i] * avi;
                       else
                         gb[i] += g[i] * avi;
                     }
                   }
                 });
  return out;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto bs = detail::binary_shape(a, b);
  Tensor out = Tensor::zeros(bs == detail::BinShape::ScalarLhs ? b.shape : a.shape);
  const std::size_t n = out.data.size();
  for (std::size_t i = 0; i < n; ++i) {
    double av = bs == detail::BinShape::ScalarLhs ? a.data[0] : a.data[i];
    double bv = bs == detail::BinShape::ScalarRhs ? b.data[0] : b.data[i];
    out.data[i] = av / bv;
  }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node, pb = b.node, bs, bv = b.data, y = out.data](
                     Tape& t, const std::vector<double>& g) {
                   if (pa >= 0) {
                     auto& ga = t.gbuf(pa);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       double bvi = bs == detail::BinShape::ScalarRhs ? bv[0] : bv[i];
                       if (bs == detail::BinShape::ScalarLhs)
                         ga[0] += g[i] / bvi;
                       else
                         ga[i] += g[i] / bvi;
                     }
                   }
                   if (pb >= 0) {
                     auto& gb = t.gbuf(pb);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       double bvi = bs == detail::BinShape::ScalarRhs ? bv[0] : bv[i];
                       double d = -g[i] * y[i] / bvi;
                       if (bs == detail::BinShape::ScalarRhs)
                         gb[0] += d;
                       else
                         gb[i] += d;
                     }
                   }
                 });
  return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd_factor_from_x_y) {
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = fwd(a.data[i]);
  Tape* tape = result_tape(a);
  if (!tape) return out;
  attach(out, tape,
         [pa = a.node, x = a.data, y = out.data, bwd = bwd_factor_from_x_y](
             Tape& t, const std::vector<double>& g) {
           if (pa < 0) return;
           auto& ga = t.gbuf(pa);
           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bwd(x[i], y[i]);
         });
  return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

/// Natural log. In strict mode a non-positive input raises DomainError;
/// otherwise IEEE semantics apply (-inf / NaN).
inline Tensor log(const Tensor& a, bool strict = true) {
  if (strict)
    for (double x : a.data)
      if (!(x > 0.0)) raise(ErrorCode::DomainError, "log of non-positive value");
  return detail::unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor relu(const Tensor& a) {
  // x * 0.0 instead of a literal zero so NaN propagates instead of being
  // silently squashed (non-finite losses must surface, not vanish)
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : x * 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

/// Huber-style smooth L1 with unit transition point:
/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise. Derivative clamp(x, -1, 1).
inline Tensor smooth_l1(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) {
        double ax = std::abs(x);
        return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
      },
      [](double x, double) { return std::clamp(x, -1.0, 1.0); });
}

/// Dispatcher form. Binary kinds require b; unary kinds forbid it.
inline Tensor elementwise(EwOp op, const Tensor& a, const Tensor* b = nullptr) {
  const bool is_binary = op == EwOp::Add || op == EwOp::Sub || op == EwOp::Mul || op == EwOp::Div;
  if (is_binary && b == nullptr)
    raise(ErrorCode::ShapeMismatch, "binary elementwise op requires two operands");
  if (!is_binary && b != nullptr)
    raise(ErrorCode::ShapeMismatch, "unary elementwise op takes one operand");
  switch (op) {
    case EwOp::Add: return add(a, *b);
    case EwOp::Sub: return sub(a, *b);
    case EwOp::Mul: return mul(a, *b);
    case EwOp::Div: return div(a, *b);
    case EwOp::Neg: return neg(a);
    case EwOp::Exp: return exp(a);
    case EwOp::Log: return log(a);
    case EwOp::Relu: return relu(a);
    case EwOp::Sigmoid: return sigmoid(a);
    case EwOp::Square: return square(a);
    case EwOp::SmoothL1: return smooth_l1(a);
  }
  raise(ErrorCode::ShapeMismatch, "unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) raise(ErrorCode::ShapeMismatch, "matmul expects rank-2");
  const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2) raise(ErrorCode::ShapeMismatch, "matmul inner dimensions disagree");
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = a.data[static_cast<std::size_t>(i * k + p)];
      for (int j = 0; j < n; ++j)
        out.data[static_cast<std::size_t>(i * n + j)] +=
            av * b.data[static_cast<std::size_t>(p * n + j)];
    }
  Tape* tape = detail::result_tape(a, b);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node, pb = b.node, av = a.data, bv = b.data, m, k, n](
                     Tape& t, const std::vector<double>& g) {
                   if (pa >= 0) {
                     auto& ga = t.gbuf(pa);  // dA = g . B^T
                     for (int i = 0; i < m; ++i)
                       for (int p = 0; p < k; ++p) {
                         double s = 0.0;
                         for (int j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
                         ga[i * k + p] += s;
                       }
                   }
                   if (pb >= 0) {
                     auto& gb = t.gbuf(pb);  // dB = A^T . g
                     for (int p = 0; p < k; ++p)
                       for (int j = 0; j < n; ++j) {
                         double s = 0.0;
                         for (int i = 0; i < m; ++i) s += av[i * k + p] * g[i * n + j];
                         gb[p * n + j] += s;
                       }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation convention)
// ---------------------------------------------------------------------------

namespace detail {

inline int div_ceil(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }

struct ConvDims {
  int cin, h, w, cout, kh, kw, oh, ow, stride, pad;
};

inline ConvDims conv_dims(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  if (input.rank() != 3) raise(ErrorCode::ShapeMismatch, "conv2d input must be CxHxW");
  if (kernel.rank() != 4) raise(ErrorCode::ShapeMismatch, "conv2d kernel must be CoutxCinxKhxKw");
  ConvDims d{};
  d.cin = input.shape[0];
  d.h = input.shape[1];
  d.w = input.shape[2];
  d.cout = kernel.shape[0];
  d.kh = kernel.shape[2];
  d.kw = kernel.shape[3];
  d.stride = stride;
  d.pad = pad;
  if (kernel.shape[1] != d.cin) raise(ErrorCode::ShapeMismatch, "conv2d channel mismatch");
  if (d.kh % 2 == 0 || d.kw % 2 == 0) raise(ErrorCode::ShapeMismatch, "conv2d kernel must be odd");
  if (stride < 1 || pad < 0) raise(ErrorCode::ShapeMismatch, "conv2d bad stride/padding");
  // floor output size (framework convention); the kernel must fit at least once
  const int hn = d.h + 2 * pad - d.kh;
  const int wn = d.w + 2 * pad - d.kw;
  if (hn < 0 || wn < 0)
    raise(ErrorCode::ShapeMismatch, "conv2d kernel does not fit the padded input");
  d.oh = hn / stride + 1;
  d.ow = wn / stride + 1;
  return d;
}

// Valid output range along one axis for a given kernel offset.
inline std::pair<int, int> conv_span(int kpos, int pad, int stride, int in_extent, int out_extent) {
  int lo = std::max(0, div_ceil(pad - kpos, stride));
  int hi = std::min(out_extent - 1, (in_extent - 1 - kpos + pad) / stride);
  return {lo, hi};
}

}  // namespace detail

/// conv2d without bias; see the overload below.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int pad) {
  const auto d = detail::conv_dims(input, kernel, stride, pad);
  Tensor out = Tensor::zeros({d.cout, d.oh, d.ow});
  const double* in = input.data.data();
  const double* kr = kernel.data.data();
  double* o = out.data.data();
  for (int co = 0; co < d.cout; ++co)
    for (int ci = 0; ci < d.cin; ++ci)
      for (int ky = 0; ky < d.kh; ++ky) {
        auto [oy_lo, oy_hi] = detail::conv_span(ky, d.pad, d.stride, d.h, d.oh);
        for (int kx = 0; kx < d.kw; ++kx) {
          auto [ox_lo, ox_hi] = detail::conv_span(kx, d.pad, d.stride, d.w, d.ow);
          const double kv = kr[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const int iy = oy * d.stride + ky - d.pad;
            const double* irow = in + (ci * d.h + iy) * d.w + (kx - d.pad);
            double* orow = o + (co * d.oh + oy) * d.ow;
            for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += kv * irow[ox * d.stride];
          }
        }
      }

  Tape* tape = detail::result_tape(input, kernel);
  if (!tape) return out;
  detail::attach(
      out, tape,
      [pi = input.node, pk = kernel.node, in_data = input.data, k_data = kernel.data, d](
          Tape& t, const std::vector<double>& g) {
        if (pi >= 0) {
          auto& gi = t.gbuf(pi);
          for (int co = 0; co < d.cout; ++co)
            for (int ci = 0; ci < d.cin; ++ci)
              for (int ky = 0; ky < d.kh; ++ky) {
                auto [oy_lo, oy_hi] = detail::conv_span(ky, d.pad, d.stride, d.h, d.oh);
                for (int kx = 0; kx < d.kw; ++kx) {
                  auto [ox_lo, ox_hi] = detail::conv_span(kx, d.pad, d.stride, d.w, d.ow);
                  const double kv = k_data[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                  for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    const int iy = oy * d.stride + ky - d.pad;
                    double* girow = gi.data() + (ci * d.h + iy) * d.w + (kx - d.pad);
                    const double* grow = g.data() + (co * d.oh + oy) * d.ow;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) girow[ox * d.stride] += kv * grow[ox];
                  }
                }
              }
        }
        if (pk >= 0) {
          auto& gk = t.gbuf(pk);
          for (int co = 0; co < d.cout; ++co)
            for (int ci = 0; ci < d.cin; ++ci)
              for (int ky = 0; ky < d.kh; ++ky) {
                auto [oy_lo, oy_hi] = detail::conv_span(ky, d.pad, d.stride, d.h, d.oh);
                for (int kx = 0; kx < d.kw; ++kx) {
                  auto [ox_lo, ox_hi] = detail::conv_span(kx, d.pad, d.stride, d.w, d.ow);
                  double s = 0.0;
                  for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    const int iy = oy * d.stride + ky - d.pad;
                    const double* irow = in_data.data() + (ci * d.h + iy) * d.w + (kx - d.pad);
                    const double* grow = g.data() + (co * d.oh + oy) * d.ow;
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) s += grow[ox] * irow[ox * d.stride];
                  }
                  gk[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] += s;
                }
              }
        }
      });
  return out;
}

/// conv2d with a per-output-channel bias; the bias gradient is the spatial
/// sum of the output gradient.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                     int pad) {
  if (bias.rank() != 1 || bias.shape[0] != kernel.shape[0])
    raise(ErrorCode::ShapeMismatch, "conv2d bias must have Cout entries");
  Tensor out = conv2d(input, kernel, stride, pad);
  const int cout = out.shape[0];
  const int plane = out.shape[1] * out.shape[2];
  for (int co = 0; co < cout; ++co)
    for (int p = 0; p < plane; ++p) out.data[static_cast<std::size_t>(co * plane + p)] += bias.data[static_cast<std::size_t>(co)];
  Tape* tape = detail::result_tape(out, bias);
  if (!tape) return out;
  Tensor biased = Tensor::zeros(out.shape);
  biased.data = out.data;
  detail::attach(biased, tape,
                 [po = out.node, pb = bias.node, cout, plane](Tape& t, const std::vector<double>& g) {
                   if (po >= 0) detail::axpy(t.gbuf(po), g, 1.0);
                   if (pb >= 0) {
                     auto& gb = t.gbuf(pb);
                     for (int co = 0; co < cout; ++co) {
                       double s = 0.0;
                       for (int p = 0; p < plane; ++p) s += g[co * plane + p];
                       gb[co] += s;
                     }
                   }
                 });
  return biased;
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
  std::int64_t outer, extent, inner;
};

inline AxisSplit axis_split(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    raise(ErrorCode::ShapeMismatch, "axis out of range");
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace detail

/// Numerically stable softmax along one axis (max subtraction).
inline Tensor softmax(const Tensor& a, int axis) {
  const auto sp = detail::axis_split(a.shape, axis);
  Tensor out = Tensor::zeros(a.shape);
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t in = 0; in < sp.inner; ++in) {
      double mx = -HUGE_VAL;
      for (std::int64_t k = 0; k < sp.extent; ++k)
        mx = std::max(mx, a.data[static_cast<std::size_t>((o * sp.extent + k) * sp.inner + in)]);
      double z = 0.0;
      for (std::int64_t k = 0; k < sp.extent; ++k) {
        auto idx = static_cast<std::size_t>((o * sp.extent + k) * sp.inner + in);
        out.data[idx] = std::exp(a.data[idx] - mx);
        z += out.data[idx];
      }
      for (std::int64_t k = 0; k < sp.extent; ++k)
        out.data[static_cast<std::size_t>((o * sp.extent + k) * sp.inner + in)] /= z;
    }
  Tape* tape = detail::result_tape(a);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node, y = out.data, sp](Tape& t, const std::vector<double>& g) {
                   if (pa < 0) return;
                   auto& ga = t.gbuf(pa);
                   for (std::int64_t o = 0; o < sp.outer; ++o)
                     for (std::int64_t in = 0; in < sp.inner; ++in) {
                       double dot = 0.0;
                       for (std::int64_t k = 0; k < sp.extent; ++k) {
                         auto idx = static_cast<std::size_t>((o * sp.extent + k) * sp.inner + in);
                         dot += g[idx] * y[idx];
                       }
                       for (std::int64_t k = 0; k < sp.extent; ++k) {
                         auto idx = static_cast<std::size_t>((o * sp.extent + k) * sp.inner + in);
                         ga[idx] += y[idx] * (g[idx] - dot);
                       }
                     }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceOp { Sum, Mean, Max };

namespace detail {

struct ReducePlan {
  Shape out_shape;          // reduced axes dropped
  std::vector<std::int64_t> out_index;  // input flat index -> output flat index
  std::int64_t count;       // elements folded into each output cell
};

inline ReducePlan reduce_plan(const Shape& shape, std::vector<int> axes) {
  const int rank = static_cast<int>(shape.size());
  if (axes.empty())
    for (int i = 0; i < rank; ++i) axes.push_back(i);
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] < 0 || axes[i] >= rank) raise(ErrorCode::ShapeMismatch, "reduce axis out of range");
    if (i > 0 && axes[i] == axes[i - 1]) raise(ErrorCode::ShapeMismatch, "duplicate reduce axis");
  }
  std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
  ReducePlan plan;
  plan.count = 1;
  for (int ax : axes) {
    reduced[static_cast<std::size_t>(ax)] = true;
    if (shape[static_cast<std::size_t>(ax)] == 0)
      raise(ErrorCode::EmptyReduction, "reduction over an axis of extent 0");
    plan.count *= shape[static_cast<std::size_t>(ax)];
  }
  for (int i = 0; i < rank; ++i)
    if (!reduced[static_cast<std::size_t>(i)]) plan.out_shape.push_back(shape[static_cast<std::size_t>(i)]);

  const std::int64_t n = shape_numel(shape);
  plan.out_index.resize(static_cast<std::size_t>(n));
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i)
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  for (std::int64_t flat = 0; flat < n; ++flat) {
    std::int64_t rem = flat, out = 0;
    for (int i = 0; i < rank; ++i) {
      std::int64_t coord = rem / in_stride[static_cast<std::size_t>(i)];
      rem %= in_stride[static_cast<std::size_t>(i)];
      if (!reduced[static_cast<std::size_t>(i)]) out = out * shape[static_cast<std::size_t>(i)] + coord;
    }
    plan.out_index[static_cast<std::size_t>(flat)] = out;
  }
  return plan;
}

}  // namespace detail

inline Tensor reduce(ReduceOp op, const Tensor& a, std::vector<int> axes = {}) {
  auto plan = detail::reduce_plan(a.shape, std::move(axes));
  Tensor out = Tensor::zeros(plan.out_shape);
  Tape* tape = detail::result_tape(a);
  if (op == ReduceOp::Sum || op == ReduceOp::Mean) {
    const double scale = op == ReduceOp::Mean ? 1.0 / static_cast<double>(plan.count) : 1.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
      out.data[static_cast<std::size_t>(plan.out_index[i])] += a.data[i];
    if (op == ReduceOp::Mean)
      for (double& v : out.data) v *= scale;
    if (!tape) return out;
    detail::attach(out, tape,
                   [pa = a.node, idx = std::make_shared<std::vector<std::int64_t>>(
                        std::move(plan.out_index)),
                    scale](Tape& t, const std::vector<double>& g) {
                     if (pa < 0) return;
                     auto& ga = t.gbuf(pa);
                     for (std::size_t i = 0; i < ga.size(); ++i)
                       ga[i] += scale * g[static_cast<std::size_t>((*idx)[i])];
                   });
    return out;
  }
  // Max: track first-argmax per output cell.
  std::vector<std::int64_t> argmax(out.data.size(), -1);
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    auto oi = static_cast<std::size_t>(plan.out_index[i]);
    if (argmax[oi] < 0 || a.data[i] > out.data[oi]) {
      out.data[oi] = a.data[i];
      argmax[oi] = static_cast<std::int64_t>(i);
    }
  }
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node, am = std::make_shared<std::vector<std::int64_t>>(std::move(argmax))](
                     Tape& t, const std::vector<double>& g) {
                   if (pa < 0) return;
                   auto& ga = t.gbuf(pa);
                   for (std::size_t o = 0; o < g.size(); ++o)
                     ga[static_cast<std::size_t>((*am)[o])] += g[o];
                 });
  return out;
}

inline Tensor reduce_sum(const Tensor& a, std::vector<int> axes = {}) {
  return reduce(ReduceOp::Sum, a, std::move(axes));
}
inline Tensor reduce_mean(const Tensor& a, std::vector<int> axes = {}) {
  return reduce(ReduceOp::Mean, a, std::move(axes));
}
inline Tensor reduce_max(const Tensor& a, std::vector<int> axes = {}) {
  return reduce(ReduceOp::Max, a, std::move(axes));
}

// ---------------------------------------------------------------------------
// Gather (flat index map); backward is scatter-add
// ---------------------------------------------------------------------------

inline Tensor gather(const Tensor& a, std::vector<std::int64_t> indices, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<std::int64_t>(indices.size()))
    raise(ErrorCode::ShapeMismatch, "gather output shape does not match index count");
  Tensor out = Tensor::zeros(std::move(out_shape));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = indices[i];
    if (src < 0 || src >= a.size()) raise(ErrorCode::ShapeMismatch, "gather index out of range");
    out.data[i] = a.data[static_cast<std::size_t>(src)];
  }
  Tape* tape = detail::result_tape(a);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pa = a.node,
                  idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices))](
                     Tape& t, const std::vector<double>& g) {
                   if (pa < 0) return;
                   auto& ga = t.gbuf(pa);
                   for (std::size_t i = 0; i < g.size(); ++i)
                     ga[static_cast<std::size_t>((*idx)[i])] += g[i];
                 });
  return out;
}

// ---------------------------------------------------------------------------
// KL integrand: p * ln(p/m) elementwise with the 0 * ln(0/m) := 0 convention
// ---------------------------------------------------------------------------

inline Tensor kl_term(const Tensor& p, const Tensor& m) {
  if (p.shape != m.shape) raise(ErrorCode::ShapeMismatch, "kl_term operands must match");
  Tensor out = Tensor::zeros(p.shape);
  for (std::size_t i = 0; i < p.data.size(); ++i)
    out.data[i] = p.data[i] > 0.0 ? p.data[i] * std::log(p.data[i] / m.data[i]) : 0.0;
  Tape* tape = detail::result_tape(p, m);
  if (!tape) return out;
  detail::attach(out, tape,
                 [pp = p.node, pm = m.node, pv = p.data, mv = m.data](
                     Tape& t, const std::vector<double>& g) {
                   if (pp >= 0) {
                     auto& gp = t.gbuf(pp);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (pv[i] > 0.0) gp[i] += g[i] * (std::log(pv[i] / mv[i]) + 1.0);
                   }
                   if (pm >= 0) {
                     auto& gm = t.gbuf(pm);
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (pv[i] > 0.0) gm[i] -= g[i] * pv[i] / mv[i];
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// Convenience
// ---------------------------------------------------------------------------

inline Tensor scale(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor sum_all(const Tensor& a) { return reduce_sum(a); }
inline Tensor mean_all(const Tensor& a) { return reduce_mean(a); }

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle
// ---------------------------------------------------------------------------

/// Compares the tape gradient of a scalar-valued function against central
/// differences. Returns max over coordinates of
/// |analytic - numeric| / max(1, |analytic|).
/// `f` must work for both taped and plain inputs (every op above does).
template <typename F>
double grad_check(F&& f, const Tensor& x0, double h = 1e-5) {
  Tape tape;
  Tensor x = detach(x0);
  tape.watch(x);
  Tensor y = f(x);
  tape.backward(y);
  const std::vector<double> analytic = *x.grad;

  double worst = 0.0;
  Tensor probe = detach(x0);  // perturbed in place, coordinate by coordinate
  for (std::size_t i = 0; i < x0.data.size(); ++i) {
    probe.data[i] = x0.data[i] + h;
    const double fp = f(probe).value();
    probe.data[i] = x0.data[i] - h;
    const double fm = f(probe).value();
    probe.data[i] = x0.data[i];
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace consisaug
