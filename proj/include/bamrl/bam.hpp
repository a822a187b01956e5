#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bamrl/autodiff.hpp"
#include "bamrl/tensor.hpp"

namespace bamrl {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
struct ConstNamedParam {
  std::string name;
  const Tensor<T>* tensor;
};

/// Weights of a Bottleneck Attention Module hosted on a C-channel activation.
///
/// Channel branch:  global-avg-pool -> dense(C -> C/r) -> relu -> dense(C/r -> C)
/// Spatial branch:  1x1 conv(C -> C/r) -> relu -> 3x3 conv(dilation d) -> relu
///                  -> 3x3 conv(dilation d) -> relu -> 1x1 conv(C/r -> 1)
/// No batch normalisation.
template <typename T>
struct BamParams {
  std::size_t channels = 0;
  std::size_t reduction = 4;
  std::size_t dilation = 2;

  Tensor<T> channel_fc1_weight, channel_fc1_bias;
  Tensor<T> channel_fc2_weight, channel_fc2_bias;
  Tensor<T> spatial_reduce_weight, spatial_reduce_bias;
  Tensor<T> spatial_dilated1_weight, spatial_dilated1_bias;
  Tensor<T> spatial_dilated2_weight, spatial_dilated2_bias;
  Tensor<T> spatial_out_weight, spatial_out_bias;

  /// All weights and biases zero; throws ConfigError unless r divides C.
  static BamParams zeros(std::size_t channels, std::size_t reduction = 4,
                         std::size_t dilation = 2);

  std::size_t hidden() const { return channels / reduction; }
  std::size_t parameter_count() const;
  /// Stable ordering used by checkpoints and optimisers.
  std::vector<NamedParam<T>> named_parameters(const std::string& prefix);
};

/// Closed-form parameter total of one BAM block for C channels and reduction r.
std::size_t bam_parameter_count(std::size_t channels, std::size_t reduction);

/// Sigmoid attention values with every entry strictly inside (0,1).
template <typename T>
class AttentionMap {
 public:
  /// Throws std::domain_error when an entry falls outside (0,1).
  explicit AttentionMap(Tensor<T> values);
  const Tensor<T>& values() const { return values_; }
  const Shape& shape() const { return values_.shape(); }

 private:
  Tensor<T> values_;
};

/// Registers a parameter tensor on the tape, tracked only when `track` is set.
template <typename T>
Var<T> param_var(Tape<T>& tape, Tensor<T>& tensor, bool track) {
  return track ? tape.leaf(tensor) : tape.leaf(std::as_const(tensor));
}

template <typename T>
Var<T> param_var(Tape<T>& tape, const Tensor<T>& tensor, bool track) {
  if (track) throw UsageError("cannot track gradients of a const parameter");
  return tape.leaf(tensor);
}

namespace detail {
template <typename T>
void check_bam_host(const Tensor<T>& f, std::size_t channels) {
  if (f.rank() != 4) {
    throw DimensionError("BAM input must be [N,C,H,W], got " + shape_str(f.shape()));
  }
  if (f.dim(1) != channels) {
    throw DimensionError("BAM expects " + std::to_string(channels) +
                         " channels on axis 1, got " + std::to_string(f.dim(1)));
  }
}
}  // namespace detail

// `Params` is BamParams<T> (trainable) or const BamParams<T> (inference).

/// Channel-branch logits, shape [N,C,1,1].
template <typename T, typename Params>
Var<T> bam_channel_branch(Var<T> f, Params& p, bool track_params = false) {
  detail::check_bam_host(f.value(), p.channels);
  auto& tape = f.tape();
  const std::size_t n = f.value().dim(0);
  auto pooled = reshape(global_avg_pool(f), Shape{n, p.channels});
  auto h = relu(dense(pooled, param_var(tape, p.channel_fc1_weight, track_params),
                      param_var(tape, p.channel_fc1_bias, track_params)));
  auto c = dense(h, param_var(tape, p.channel_fc2_weight, track_params),
                 param_var(tape, p.channel_fc2_bias, track_params));
  return reshape(c, Shape{n, p.channels, 1, 1});
}

/// Spatial-branch logits, shape [N,1,H,W].
template <typename T, typename Params>
Var<T> bam_spatial_branch(Var<T> f, Params& p, bool track_params = false) {
  detail::check_bam_host(f.value(), p.channels);
  auto& tape = f.tape();
  const ConvGeometry pointwise{1, 0, 1};
  const ConvGeometry dilated{1, p.dilation, p.dilation};
  auto s = relu(conv2d(f, param_var(tape, p.spatial_reduce_weight, track_params),
                       param_var(tape, p.spatial_reduce_bias, track_params), pointwise));
  s = relu(conv2d(s, param_var(tape, p.spatial_dilated1_weight, track_params),
                  param_var(tape, p.spatial_dilated1_bias, track_params), dilated));
  s = relu(conv2d(s, param_var(tape, p.spatial_dilated2_weight, track_params),
                  param_var(tape, p.spatial_dilated2_bias, track_params), dilated));
  return conv2d(s, param_var(tape, p.spatial_out_weight, track_params),
                param_var(tape, p.spatial_out_bias, track_params), pointwise);
}

/// M(F) = sigmoid(channel + spatial), broadcast to [N,C,H,W].
template <typename T, typename Params>
Var<T> bam_attention(Var<T> f, Params& p, bool track_params = false) {
  return sigmoid(add(bam_channel_branch(f, p, track_params),
                     bam_spatial_branch(f, p, track_params)));
}

/// F + F * M(F).
template <typename T, typename Params>
Var<T> bam_forward(Var<T> f, Params& p, bool track_params = false) {
  return add(f, mul(f, bam_attention(f, p, track_params)));
}

template <typename T>
AttentionMap<T> bam_attention(const Tensor<T>& f, const BamParams<T>& params);
template <typename T>
Tensor<T> bam_forward(const Tensor<T>& f, const BamParams<T>& params);

/// Fraction of entries below `low` or above `high`.
template <typename T>
double attention_polarization(const AttentionMap<T>& map, double low = 0.1, double high = 0.9);

}  // namespace bamrl
