#include "bamrl/bam.hpp"

#include <stdexcept>

namespace bamrl {

std::size_t bam_parameter_count(std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("BAM reduction ratio " + std::to_string(reduction) +
                      " must divide channel count " + std::to_string(channels));
  }
  const std::size_t c = channels;
  const std::size_t h = channels / reduction;
  const std::size_t channel_branch = (c + 1) * h + (h + 1) * c;
  const std::size_t spatial_branch = (c + 1) * h + 2 * (9 * h + 1) * h + (h + 1);
  return channel_branch + spatial_branch;
}

template <typename T>
BamParams<T> BamParams<T>::zeros(std::size_t channels, std::size_t reduction,
                                 std::size_t dilation) {
  if (reduction == 0 || channels == 0 || channels % reduction != 0) {
    throw ConfigError("BAM reduction ratio " + std::to_string(reduction) +
                      " must divide channel count " + std::to_string(channels));
  }
  if (dilation == 0) throw ConfigError("BAM dilation must be positive");
  BamParams p;
  p.channels = channels;
  p.reduction = reduction;
  p.dilation = dilation;
  const std::size_t c = channels;
  const std::size_t h = channels / reduction;
  p.channel_fc1_weight = Tensor<T>(Shape{h, c});
  p.channel_fc1_bias = Tensor<T>(Shape{h});
  p.channel_fc2_weight = Tensor<T>(Shape{c, h});
  p.channel_fc2_bias = Tensor<T>(Shape{c});
  p.spatial_reduce_weight = Tensor<T>(Shape{h, c, 1, 1});
  p.spatial_reduce_bias = Tensor<T>(Shape{h});
  p.spatial_dilated1_weight = Tensor<T>(Shape{h, h, 3, 3});
  p.spatial_dilated1_bias = Tensor<T>(Shape{h});
  p.spatial_dilated2_weight = Tensor<T>(Shape{h, h, 3, 3});
  p.spatial_dilated2_bias = Tensor<T>(Shape{h});
  p.spatial_out_weight = Tensor<T>(Shape{1, h, 1, 1});
  p.spatial_out_bias = Tensor<T>(Shape{1});
  return p;
}

template <typename T>
std::size_t BamParams<T>::parameter_count() const {
  return bam_parameter_count(channels, reduction);
}

template <typename T>
std::vector<NamedParam<T>> BamParams<T>::named_parameters(const std::string& prefix) {
  return {
      {prefix + "channel.fc1.weight", &channel_fc1_weight},
      {prefix + "channel.fc1.bias", &channel_fc1_bias},
      {prefix + "channel.fc2.weight", &channel_fc2_weight},
      {prefix + "channel.fc2.bias", &channel_fc2_bias},
      {prefix + "spatial.reduce.weight", &spatial_reduce_weight},
      {prefix + "spatial.reduce.bias", &spatial_reduce_bias},
      {prefix + "spatial.dilated1.weight", &spatial_dilated1_weight},
      {prefix + "spatial.dilated1.bias", &spatial_dilated1_bias},
      {prefix + "spatial.dilated2.weight", &spatial_dilated2_weight},
      {prefix + "spatial.dilated2.bias", &spatial_dilated2_bias},
      {prefix + "spatial.out.weight", &spatial_out_weight},
      {prefix + "spatial.out.bias", &spatial_out_bias},
  };
}

template <typename T>
AttentionMap<T>::AttentionMap(Tensor<T> values) : values_(std::move(values)) {
  for (T v : values_.data()) {
    if (!(v > T(0) && v < T(1))) {
      throw std::domain_error("attention value outside the open interval (0,1)");
    }
  }
}

template <typename T>
AttentionMap<T> bam_attention(const Tensor<T>& f, const BamParams<T>& params) {
  Tape<T> tape;
  return AttentionMap<T>(bam_attention(tape.leaf(f), params).value());
}

template <typename T>
Tensor<T> bam_forward(const Tensor<T>& f, const BamParams<T>& params) {
  Tape<T> tape;
  return bam_forward(tape.leaf(f), params).value();
}

template <typename T>
double attention_polarization(const AttentionMap<T>& map, double low, double high) {
  if (!(low < high)) throw ConfigError("attention_polarization: low must be below high");
  const auto& v = map.values();
  std::size_t polarized = 0;
  for (T x : v.data()) {
    if (x < low || x > high) ++polarized;
  }
  return static_cast<double>(polarized) / static_cast<double>(v.size());
}

#define BAMRL_INSTANTIATE(T)                                                   \
  template struct BamParams<T>;                                                \
  template class AttentionMap<T>;                                              \
  template AttentionMap<T> bam_attention(const Tensor<T>&, const BamParams<T>&); \
  template Tensor<T> bam_forward(const Tensor<T>&, const BamParams<T>&);       \
  template double attention_polarization(const AttentionMap<T>&, double, double);

BAMRL_INSTANTIATE(float)
BAMRL_INSTANTIATE(double)

#undef BAMRL_INSTANTIATE

}  // namespace bamrl
