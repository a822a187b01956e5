#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <vector>

#include "bamrl/tensor.hpp"

namespace bamrl {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape is alive.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

struct BackwardResult {
  /// Loss had no path to any tracked leaf; all tracked leaves received zeros.
  bool detached = false;
  std::size_t nodes_visited = 0;
};

/// Define-by-run record of primitive operations. Nodes are appended in
/// execution order, so the record is topologically sorted and the reverse
/// sweep visits each node once.
template <typename T>
class Tape {
 public:
  using BackwardFn =
      std::function<void(Tape& tape, std::uint32_t self, const std::vector<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Owned value, never differentiated.
  Var<T> constant(Tensor<T> value);
  /// References `tensor` without copying. Tracked iff tensor.requires_grad;
  /// backward() accumulates into tensor.grad_buffer().
  Var<T> leaf(Tensor<T>& tensor);
  /// References `tensor` without copying; never tracked.
  Var<T> leaf(const Tensor<T>& tensor);

  /// Appends an operation result. Throws NumericError when `value` holds a
  /// non-finite entry. `fn` is dropped when no input is tracked.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn fn);

  const Tensor<T>& value(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  /// Gradient accumulator of a tracked node, zero-initialised on first use.
  std::vector<T>& grad_accumulator(std::uint32_t id);

  BackwardResult backward(Var<T> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    Tensor<T>* grad_sink = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    BackwardFn backward;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;
};

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

/// Output extent of a convolution along one axis; throws DimensionError when
/// no kernel placement fits.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, const ConvGeometry& g,
                               const char* axis);

// Primitives. All inputs must live on the same tape.

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, const ConvGeometry& geom);
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> exp(Var<T> x);
template <typename T>
Var<T> scale(Var<T> x, T factor);
template <typename T>
Var<T> add_scalar(Var<T> x, T offset);
/// Saturates to [lo, hi]; gradient is zero where the input lies outside.
template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi);

// Binary ops broadcast along axes where one operand has extent 1.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
/// Element-wise minimum; ties route the gradient to `a`.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b);

/// [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> global_avg_pool(Var<T> x);
/// Sum of all entries, shape [1].
template <typename T>
Var<T> sum(Var<T> x);
/// Sum along one axis, the axis is kept with extent 1.
template <typename T>
Var<T> sum(Var<T> x, std::size_t axis);
template <typename T>
Var<T> mean(Var<T> x);
template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis);
template <typename T>
Var<T> log_softmax(Var<T> x, std::size_t axis);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
/// out[n] = x[n, index[n]] for x of shape [N,K].
template <typename T>
Var<T> pick(Var<T> x, const std::vector<std::size_t>& index);

/// Shape of a broadcast between a and b (equal rank required).
Shape broadcast_shape(const Shape& a, const Shape& b);

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace bamrl
