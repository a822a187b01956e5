#include "bamrl/autodiff.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace bamrl {

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.owned.requires_grad = false;
  n.owned.zero_grad();
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T>& tensor) {
  Node n;
  n.ref = &tensor;
  n.requires_grad = tensor.requires_grad;
  if (tensor.requires_grad) n.grad_sink = &tensor;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::leaf(const Tensor<T>& tensor) {
  Node n;
  n.ref = &tensor;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  Node n;
  n.owned = std::move(value);
  n.op = op;
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw UsageError(std::string(op) + ": operands on different tapes");
    if (nodes_[in.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.owned;
}

template <typename T>
std::vector<T>& Tape<T>::grad_accumulator(std::uint32_t id) {
  Node& n = nodes_[id];
  const std::size_t sz = value(id).size();
  if (n.grad.size() != sz) n.grad.assign(sz, T(0));
  return n.grad;
}

template <typename T>
BackwardResult Tape<T>::backward(Var<T> loss) {
  if (&loss.tape() != this) throw UsageError("backward: loss belongs to another tape");
  if (value(loss.id()).size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " +
                         shape_str(value(loss.id()).shape()));
  }
  BackwardResult result;
  if (!nodes_[loss.id()].requires_grad) {
    result.detached = true;
    for (auto& n : nodes_) {
      if (n.grad_sink) n.grad_sink->grad_buffer();
    }
    return result;
  }
  grad_accumulator(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    ++result.nodes_visited;
    if (n.backward) {
      n.backward(*this, static_cast<std::uint32_t>(i), n.grad);
    }
    for (T g : n.grad) {
      if (!std::isfinite(g)) {
        throw NumericError(std::string("non-finite gradient at ") + n.op);
      }
    }
    if (n.grad_sink) {
      auto& sink = n.grad_sink->grad_buffer();
      for (std::size_t k = 0; k < sink.size(); ++k) sink[k] += n.grad[k];
    }
    if (!n.grad_sink) std::vector<T>().swap(n.grad);
  }
  // Tracked leaves unreachable from the loss still get a (zero) buffer.
  for (auto& n : nodes_) {
    if (n.grad_sink) n.grad_sink->grad_buffer();
  }
  return result;
}

template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw UsageError(std::string(op) + ": operands on different tapes");
}

void gemm(bool ta, bool tb, long m, long n, long k, float alpha, const float* a, long lda,
          const float* b, long ldb, float beta, float* c, long ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

void gemm(bool ta, bool tb, long m, long n, long k, double alpha, const double* a, long lda,
          const double* b, long ldb, double beta, double* c, long ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

// Output-column range [lo, hi) for which ix = o*stride - pad + k*dil lies in [0, in).
struct Span1 {
  long lo;
  long hi;
};

Span1 valid_outputs(long in, long out, long k_offset, long stride) {
  long lo = 0;
  if (k_offset < 0) lo = (-k_offset + stride - 1) / stride;
  long hi = out;
  const long last = in - 1 - k_offset;
  if (last < 0) {
    hi = 0;
  } else {
    hi = std::min(out, last / stride + 1);
  }
  if (hi < lo) hi = lo;
  return {lo, hi};
}

// Grow-only per-thread buffers; avoids re-faulting multi-megabyte pages on every call.
template <typename T>
T* scratch(int slot, std::size_t n) {
  thread_local std::vector<T> buffers[4];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

// Column matrix layout: row (ci*KH + ky)*KW + kx, column n*Ho*Wo + oy*Wo + ox.
struct ConvPlan {
  long N, C, H, W, KH, KW, Ho, Wo, S, P, D;
  std::vector<Span1> xspan, yspan;

  void finish() {
    xspan.resize(static_cast<std::size_t>(KW));
    yspan.resize(static_cast<std::size_t>(KH));
    for (long kx = 0; kx < KW; ++kx) xspan[kx] = valid_outputs(W, Wo, kx * D - P, S);
    for (long ky = 0; ky < KH; ++ky) yspan[ky] = valid_outputs(H, Ho, ky * D - P, S);
  }
};

template <typename T>
void im2col(const ConvPlan& p, const T* x, T* col) {
  const long HoWo = p.Ho * p.Wo;
  const long NP = p.N * HoWo;
  for (long ci = 0; ci < p.C; ++ci) {
    for (long ky = 0; ky < p.KH; ++ky) {
      for (long kx = 0; kx < p.KW; ++kx) {
        T* row = col + ((ci * p.KH + ky) * p.KW + kx) * NP;
        const auto [xlo, xhi] = p.xspan[kx];
        const auto [ylo, yhi] = p.yspan[ky];
        for (long n = 0; n < p.N; ++n) {
          const T* plane = x + (n * p.C + ci) * p.H * p.W;
          T* dst = row + n * HoWo;
          std::fill(dst, dst + HoWo, T(0));
          for (long oy = ylo; oy < yhi; ++oy) {
            const T* irow = plane + (oy * p.S + ky * p.D - p.P) * p.W + kx * p.D - p.P;
            T* drow = dst + oy * p.Wo;
            if (p.S == 1) {
              for (long ox = xlo; ox < xhi; ++ox) drow[ox] = irow[ox];
            } else {
              for (long ox = xlo; ox < xhi; ++ox) drow[ox] = irow[ox * p.S];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvPlan& p, const T* col, T* gx) {
  const long HoWo = p.Ho * p.Wo;
  const long NP = p.N * HoWo;
  for (long ci = 0; ci < p.C; ++ci) {
    for (long ky = 0; ky < p.KH; ++ky) {
      for (long kx = 0; kx < p.KW; ++kx) {
        const T* row = col + ((ci * p.KH + ky) * p.KW + kx) * NP;
        const auto [xlo, xhi] = p.xspan[kx];
        const auto [ylo, yhi] = p.yspan[ky];
        for (long n = 0; n < p.N; ++n) {
          T* plane = gx + (n * p.C + ci) * p.H * p.W;
          const T* src = row + n * HoWo;
          for (long oy = ylo; oy < yhi; ++oy) {
            T* grow = plane + (oy * p.S + ky * p.D - p.P) * p.W + kx * p.D - p.P;
            const T* srow = src + oy * p.Wo;
            if (p.S == 1) {
              for (long ox = xlo; ox < xhi; ++ox) grow[ox] += srow[ox];
            } else {
              for (long ox = xlo; ox < xhi; ++ox) grow[ox * p.S] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// Strides of each operand over the broadcast output (0 along expanded axes).
struct Broadcast {
  Shape out;
  bool trivial = true;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
};

std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(in.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = in.size(); k-- > 0;) {
    strides[k] = (in[k] == 1 && out[k] != 1) ? 0 : s;
    s *= in[k];
  }
  return strides;
}

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  bc.out = broadcast_shape(a, b);
  if (a == b) return bc;
  bc.trivial = false;
  bc.sa = broadcast_strides(a, bc.out);
  bc.sb = broadcast_strides(b, bc.out);
  return bc;
}

// Calls f(i, ia, ib) for every output index i with its operand offsets.
template <typename F>
void visit_broadcast(const Broadcast& bc, F&& f) {
  const std::size_t rank = bc.out.size();
  const std::size_t inner = bc.out[rank - 1];
  const std::size_t isa = bc.sa[rank - 1];
  const std::size_t isb = bc.sb[rank - 1];
  const std::size_t outer = shape_numel(bc.out) / inner;
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0;
  std::size_t ob = 0;
  std::size_t i = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) f(i + j, oa + j * isa, ob + j * isb);
    i += inner;
    for (std::size_t k = rank - 1; k-- > 0;) {
      ++idx[k];
      oa += bc.sa[k];
      ob += bc.sb[k];
      if (idx[k] < bc.out[k]) break;
      oa -= bc.sa[k] * idx[k];
      ob -= bc.sb[k] * idx[k];
      idx[k] = 0;
    }
  }
}

template <typename T, typename Fwd, typename GradA, typename GradB>
Var<T> binary_op(const char* name, Var<T> a, Var<T> b, Fwd fwd, GradA grad_a, GradB grad_b) {
  same_tape(a, b, name);
  auto bc = std::make_shared<Broadcast>(make_broadcast(a.shape(), b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(bc->out);
  const std::size_t total = out.size();
  if (bc->trivial) {
    for (std::size_t i = 0; i < total; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    visit_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      out[i] = fwd(av[ia], bv[ib]);
    });
  }
  const auto ida = a.id();
  const auto idb = b.id();
  return a.tape().record(
      name, std::move(out), {a, b},
      [ida, idb, bc, grad_a, grad_b](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
        const auto& x = tape.value(ida);
        const auto& y = tape.value(idb);
        const std::size_t n = g.size();
        if (tape.requires_grad(ida)) {
          auto& ga = tape.grad_accumulator(ida);
          if (bc->trivial) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += grad_a(g[i], x[i], y[i]);
          } else {
            visit_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
              ga[ia] += grad_a(g[i], x[ia], y[ib]);
            });
          }
        }
        if (tape.requires_grad(idb)) {
          auto& gb = tape.grad_accumulator(idb);
          if (bc->trivial) {
            for (std::size_t i = 0; i < n; ++i) gb[i] += grad_b(g[i], x[i], y[i]);
          } else {
            visit_broadcast(*bc, [&](std::size_t i, std::size_t ia, std::size_t ib) {
              gb[ib] += grad_b(g[i], x[ia], y[ib]);
            });
          }
        }
      });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary_op(const char* name, Var<T> x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const auto idx = x.id();
  return x.tape().record(
      name, std::move(out), {x},
      [idx, deriv](Tape<T>& tape, std::uint32_t self, const std::vector<T>& g) {
        const auto& in = tape.value(idx);
        const auto& out = tape.value(self);
        auto& gx = tape.grad_accumulator(idx);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(in[i], out[i]);
      });
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for shape " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t k = 0; k < axis; ++k) s.outer *= shape[k];
  s.len = shape[axis];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) s.inner *= shape[k];
  return s;
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) {
    throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                         ": rank differs");
  }
  Shape out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (a[k] == b[k] || b[k] == 1) {
      out[k] = a[k];
    } else if (a[k] == 1) {
      out[k] = b[k];
    } else {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                           " along axis " + std::to_string(k));
    }
  }
  return out;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g,
                               const char* axis) {
  if (g.stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (g.dilation == 0) throw DimensionError("conv2d: dilation must be positive");
  const long span = static_cast<long>(g.dilation * (kernel - 1) + 1);
  const long padded = static_cast<long>(in + 2 * g.padding);
  if (padded < span) {
    throw DimensionError(std::string("conv2d: no kernel placement fits along ") + axis +
                         " (padded extent " + std::to_string(padded) + " < dilated kernel " +
                         std::to_string(span) + ")");
  }
  return static_cast<std::size_t>((padded - span) / static_cast<long>(g.stride)) + 1;
}

// ---------------------------------------------------------------------------
// Convolution and dense

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, const ConvGeometry& geom) {
  same_tape(input, kernel, "conv2d");
  same_tape(input, bias, "conv2d");
  const auto& x = input.value();
  const auto& w = kernel.value();
  const auto& b = bias.value();
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw DimensionError("conv2d: kernel must be [Co,C,kh,kw], got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: input channels (axis 1) " + std::to_string(x.dim(1)) +
                         " != kernel channels (axis 1) " + std::to_string(w.dim(1)));
  }
  if (b.size() != w.dim(0)) {
    throw DimensionError("conv2d: bias length " + std::to_string(b.size()) +
                         " != output channels (kernel axis 0) " + std::to_string(w.dim(0)));
  }
  ConvPlan plan;
  plan.N = static_cast<long>(x.dim(0));
  plan.C = static_cast<long>(x.dim(1));
  plan.H = static_cast<long>(x.dim(2));
  plan.W = static_cast<long>(x.dim(3));
  plan.KH = static_cast<long>(w.dim(2));
  plan.KW = static_cast<long>(w.dim(3));
  plan.Ho = static_cast<long>(conv_output_extent(x.dim(2), w.dim(2), geom, "height (axis 2)"));
  plan.Wo = static_cast<long>(conv_output_extent(x.dim(3), w.dim(3), geom, "width (axis 3)"));
  plan.S = static_cast<long>(geom.stride);
  plan.P = static_cast<long>(geom.padding);
  plan.D = static_cast<long>(geom.dilation);
  plan.finish();
  const long Co = static_cast<long>(w.dim(0));
  const long HoWo = plan.Ho * plan.Wo;
  const long NP = plan.N * HoWo;
  const long CKK = plan.C * plan.KH * plan.KW;

  T* col = scratch<T>(0, static_cast<std::size_t>(CKK * NP));
  im2col(plan, x.data().data(), col);
  T* tmp = scratch<T>(1, static_cast<std::size_t>(Co * NP));
  gemm(false, false, Co, NP, CKK, T(1), w.data().data(), CKK, col, NP, T(0), tmp, NP);

  Tensor<T> out(Shape{x.dim(0), w.dim(0), static_cast<std::size_t>(plan.Ho),
                      static_cast<std::size_t>(plan.Wo)});
  T* od = out.data().data();
  for (long n = 0; n < plan.N; ++n) {
    for (long co = 0; co < Co; ++co) {
      const T* src = tmp + co * NP + n * HoWo;
      T* dst = od + (n * Co + co) * HoWo;
      const T bv = b[static_cast<std::size_t>(co)];
      for (long p = 0; p < HoWo; ++p) dst[p] = src[p] + bv;
    }
  }

  const auto idx = input.id();
  const auto idw = kernel.id();
  const auto idb = bias.id();
  return input.tape().record(
      "conv2d", std::move(out), {input, kernel, bias},
      [=](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
        // Output gradient as [Co, N*Ho*Wo], matching the im2col column order.
        T* gt = scratch<T>(1, static_cast<std::size_t>(Co * NP));
        for (long n = 0; n < plan.N; ++n) {
          for (long co = 0; co < Co; ++co) {
            std::copy_n(g.data() + (n * Co + co) * HoWo, HoWo, gt + co * NP + n * HoWo);
          }
        }
        if (tape.requires_grad(idb)) {
          auto& gb = tape.grad_accumulator(idb);
          for (long co = 0; co < Co; ++co) {
            T acc = T(0);
            const T* row = gt + co * NP;
            for (long p = 0; p < NP; ++p) acc += row[p];
            gb[static_cast<std::size_t>(co)] += acc;
          }
        }
        if (tape.requires_grad(idw)) {
          T* cols = scratch<T>(0, static_cast<std::size_t>(CKK * NP));
          im2col(plan, tape.value(idx).data().data(), cols);
          gemm(false, true, Co, CKK, NP, T(1), gt, NP, cols, NP, T(1),
               tape.grad_accumulator(idw).data(), CKK);
        }
        if (tape.requires_grad(idx)) {
          T* dcol = scratch<T>(2, static_cast<std::size_t>(CKK * NP));
          gemm(true, false, CKK, NP, Co, T(1), tape.value(idw).data().data(), CKK, gt, NP, T(0),
               dcol, NP);
          col2im(plan, dcol, tape.grad_accumulator(idx).data());
        }
      });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  same_tape(input, weight, "dense");
  same_tape(input, bias, "dense");
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  if (x.rank() != 2) throw DimensionError("dense: input must be [N,Din], got " + shape_str(x.shape()));
  if (w.rank() != 2) throw DimensionError("dense: weight must be [Dout,Din], got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("dense: input features (axis 1) " + std::to_string(x.dim(1)) +
                         " != weight inputs (axis 1) " + std::to_string(w.dim(1)));
  }
  if (b.size() != w.dim(0)) {
    throw DimensionError("dense: bias length " + std::to_string(b.size()) +
                         " != weight outputs (axis 0) " + std::to_string(w.dim(0)));
  }
  const long N = static_cast<long>(x.dim(0));
  const long Din = static_cast<long>(x.dim(1));
  const long Dout = static_cast<long>(w.dim(0));
  Tensor<T> out(Shape{x.dim(0), w.dim(0)});
  gemm(false, true, N, Dout, Din, T(1), x.data().data(), Din, w.data().data(), Din, T(0),
       out.data().data(), Dout);
  for (long n = 0; n < N; ++n) {
    for (long o = 0; o < Dout; ++o) out[static_cast<std::size_t>(n * Dout + o)] += b[static_cast<std::size_t>(o)];
  }
  const auto idx = input.id();
  const auto idw = weight.id();
  const auto idb = bias.id();
  return input.tape().record(
      "dense", std::move(out), {input, weight, bias},
      [=](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
        if (tape.requires_grad(idb)) {
          auto& gb = tape.grad_accumulator(idb);
          for (long n = 0; n < N; ++n)
            for (long o = 0; o < Dout; ++o) gb[static_cast<std::size_t>(o)] += g[static_cast<std::size_t>(n * Dout + o)];
        }
        if (tape.requires_grad(idx)) {
          gemm(false, false, N, Din, Dout, T(1), g.data(), Dout, tape.value(idw).data().data(), Din,
               T(1), tape.grad_accumulator(idx).data(), Din);
        }
        if (tape.requires_grad(idw)) {
          gemm(true, false, Dout, Din, N, T(1), g.data(), Dout, tape.value(idx).data().data(), Din,
               T(1), tape.grad_accumulator(idw).data(), Din);
        }
      });
}

// ---------------------------------------------------------------------------
// Element-wise

template <typename T>
Var<T> relu(Var<T> x) {
  return unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T in, T) { return in > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary_op<T>(
      "sigmoid", x,
      [](T v) {
        // Kept strictly inside (0,1) even where the exact value rounds to 0 or 1.
        constexpr T kLo = std::numeric_limits<T>::min();
        constexpr T kHi = T(1) - std::numeric_limits<T>::epsilon() / 2;
        T y;
        if (v >= T(0)) {
          y = T(1) / (T(1) + std::exp(-v));
        } else {
          const T e = std::exp(v);
          y = e / (T(1) + e);
        }
        return std::min(std::max(y, kLo), kHi);
      },
      [](T, T out) { return out * (T(1) - out); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary_op<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T out) { return out; });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  return unary_op<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var<T> add_scalar(Var<T> x, T offset) {
  return unary_op<T>(
      "add_scalar", x, [offset](T v) { return v + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lower bound exceeds upper bound");
  return unary_op<T>(
      "clamp", x, [lo, hi](T v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](T in, T) { return (in >= lo && in <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "minimum", a, b, [](T x, T y) { return y < x ? y : x; },
      [](T g, T x, T y) { return y < x ? T(0) : g; },
      [](T g, T x, T y) { return y < x ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() != 4) {
    throw DimensionError("global_avg_pool: input must be [N,C,H,W], got " + shape_str(xv.shape()));
  }
  const std::size_t NC = xv.dim(0) * xv.dim(1);
  const std::size_t HW = xv.dim(2) * xv.dim(3);
  Tensor<T> out(Shape{xv.dim(0), xv.dim(1), 1, 1});
  const T inv = T(1) / static_cast<T>(HW);
  for (std::size_t i = 0; i < NC; ++i) {
    T acc = T(0);
    for (std::size_t k = 0; k < HW; ++k) acc += xv[i * HW + k];
    out[i] = acc * inv;
  }
  const auto idx = x.id();
  return x.tape().record("global_avg_pool", std::move(out), {x},
                         [=](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
                           auto& gx = tape.grad_accumulator(idx);
                           for (std::size_t i = 0; i < NC; ++i)
                             for (std::size_t k = 0; k < HW; ++k) gx[i * HW + k] += g[i] * inv;
                         });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value();
  T acc = T(0);
  for (T v : xv.data()) acc += v;
  const auto idx = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(acc), {x},
                         [idx](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
                           auto& gx = tape.grad_accumulator(idx);
                           for (auto& v : gx) v += g[0];
                         });
}

template <typename T>
Var<T> sum(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  const auto s = split_axis(xv.shape(), axis, "sum");
  Shape shape = xv.shape();
  shape[axis] = 1;
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.len; ++k)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += xv[(o * s.len + k) * s.inner + i];
  const auto idx = x.id();
  return x.tape().record("sum_axis", std::move(out), {x},
                         [idx, s](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
                           auto& gx = tape.grad_accumulator(idx);
                           for (std::size_t o = 0; o < s.outer; ++o)
                             for (std::size_t k = 0; k < s.len; ++k)
                               for (std::size_t i = 0; i < s.inner; ++i)
                                 gx[(o * s.len + k) * s.inner + i] += g[o * s.inner + i];
                         });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  const auto s = split_axis(xv.shape(), axis, "softmax");
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) {
        const T e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < s.len; ++k) {
        out[base + k * s.inner] =
            std::max(out[base + k * s.inner] / total, std::numeric_limits<T>::min());
      }
    }
  }
  const auto idx = x.id();
  return x.tape().record(
      "softmax", std::move(out), {x},
      [idx, s](Tape<T>& tape, std::uint32_t self, const std::vector<T>& g) {
        const auto& y = tape.value(self);
        auto& gx = tape.grad_accumulator(idx);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            T dotp = T(0);
            for (std::size_t k = 0; k < s.len; ++k)
              dotp += g[base + k * s.inner] * y[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t j = base + k * s.inner;
              gx[j] += y[j] * (g[j] - dotp);
            }
          }
        }
      });
}

template <typename T>
Var<T> log_softmax(Var<T> x, std::size_t axis) {
  const auto& xv = x.value();
  const auto s = split_axis(xv.shape(), axis, "log_softmax");
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = xv[base];
      for (std::size_t k = 1; k < s.len; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      T total = T(0);
      for (std::size_t k = 0; k < s.len; ++k) total += std::exp(xv[base + k * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] = xv[base + k * s.inner] - lse;
    }
  }
  const auto idx = x.id();
  return x.tape().record(
      "log_softmax", std::move(out), {x},
      [idx, s](Tape<T>& tape, std::uint32_t self, const std::vector<T>& g) {
        const auto& y = tape.value(self);
        auto& gx = tape.grad_accumulator(idx);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            T gsum = T(0);
            for (std::size_t k = 0; k < s.len; ++k) gsum += g[base + k * s.inner];
            for (std::size_t k = 0; k < s.len; ++k) {
              const std::size_t j = base + k * s.inner;
              gx[j] += g[j] - std::exp(y[j]) * gsum;
            }
          }
        }
      });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  const auto& xv = x.value();
  if (shape_numel(shape) != xv.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(xv.shape()) + " as " + shape_str(shape));
  }
  const auto idx = x.id();
  return x.tape().record("reshape", xv.reshaped(std::move(shape)), {x},
                         [idx](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
                           auto& gx = tape.grad_accumulator(idx);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         });
}

template <typename T>
Var<T> pick(Var<T> x, const std::vector<std::size_t>& index) {
  const auto& xv = x.value();
  if (xv.rank() != 2) throw DimensionError("pick: input must be [N,K], got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0);
  const std::size_t K = xv.dim(1);
  if (index.size() != N) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for batch of " +
                         std::to_string(N));
  }
  Tensor<T> out(Shape{N});
  for (std::size_t n = 0; n < N; ++n) {
    if (index[n] >= K) throw DimensionError("pick: index out of range on axis 1");
    out[n] = xv[n * K + index[n]];
  }
  const auto idx = x.id();
  return x.tape().record("pick", std::move(out), {x},
                         [idx, index, K](Tape<T>& tape, std::uint32_t, const std::vector<T>& g) {
                           auto& gx = tape.grad_accumulator(idx);
                           for (std::size_t n = 0; n < g.size(); ++n) gx[n * K + index[n]] += g[n];
                         });
}

#define BAMRL_INSTANTIATE(T)                                                        \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, const ConvGeometry&);             \
  template Var<T> dense(Var<T>, Var<T>, Var<T>);                                    \
  template Var<T> relu(Var<T>);                                                     \
  template Var<T> sigmoid(Var<T>);                                                  \
  template Var<T> exp(Var<T>);                                                      \
  template Var<T> scale(Var<T>, T);                                                 \
  template Var<T> add_scalar(Var<T>, T);                                            \
  template Var<T> clamp(Var<T>, T, T);                                              \
  template Var<T> add(Var<T>, Var<T>);                                              \
  template Var<T> sub(Var<T>, Var<T>);                                              \
  template Var<T> mul(Var<T>, Var<T>);                                              \
  template Var<T> minimum(Var<T>, Var<T>);                                          \
  template Var<T> global_avg_pool(Var<T>);                                          \
  template Var<T> sum(Var<T>);                                                      \
  template Var<T> sum(Var<T>, std::size_t);                                         \
  template Var<T> mean(Var<T>);                                                     \
  template Var<T> softmax(Var<T>, std::size_t);                                     \
  template Var<T> log_softmax(Var<T>, std::size_t);                                 \
  template Var<T> reshape(Var<T>, Shape);                                           \
  template Var<T> pick(Var<T>, const std::vector<std::size_t>&);

BAMRL_INSTANTIATE(float)
BAMRL_INSTANTIATE(double)

#undef BAMRL_INSTANTIATE

}  // namespace bamrl
