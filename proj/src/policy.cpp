#include "bamrl/policy.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace bamrl {

// ---------------------------------------------------------------------------
// ArchitectureConfig

ArchitectureConfig ArchitectureConfig::nature_lite(bool with_bam, std::size_t actions) {
  ArchitectureConfig c;
  c.stack = 4;
  c.height = 32;
  c.width = 32;
  c.convs = {{8, 5, 2, 2}, {16, 3, 2, 1}, {16, 3, 1, 1}};
  if (with_bam) c.bam_index = 2;
  c.bam_reduction = 4;
  c.bam_dilation = 2;
  c.hidden = 128;
  c.actions = actions;
  c.value_head = true;
  return c;
}

ArchitectureConfig ArchitectureConfig::nature_cnn(bool with_bam, std::size_t actions) {
  ArchitectureConfig c;
  c.stack = 4;
  c.height = 84;
  c.width = 84;
  c.convs = {{32, 8, 4, 0}, {64, 4, 2, 0}, {64, 3, 1, 0}};
  if (with_bam) c.bam_index = 2;
  c.bam_reduction = 4;
  c.bam_dilation = 4;
  c.hidden = 512;
  c.actions = actions;
  c.value_head = true;
  return c;
}

std::size_t ArchitectureConfig::num_layers() const {
  return convs.size() + (bam_index ? 1 : 0) + (hidden > 0 ? 1 : 0) + (actions > 0 ? 1 : 0);
}

namespace {

struct ConvChain {
  std::vector<Shape> conv_outputs;  // per-sample [C,H,W] after each conv
};

ConvChain chain_convs(const ArchitectureConfig& c) {
  if (c.stack == 0 || c.height == 0 || c.width == 0) {
    throw ConfigError("input shape (stack, height, width) must be positive");
  }
  ConvChain chain;
  Shape cur{c.stack, c.height, c.width};
  for (std::size_t i = 0; i < c.convs.size(); ++i) {
    const auto& s = c.convs[i];
    const std::string where = "conv" + std::to_string(i + 1);
    if (s.out_channels == 0) throw ConfigError(where + ": out_channels must be positive");
    if (s.kernel == 0) throw ConfigError(where + ": kernel must be positive");
    if (s.stride == 0) throw ConfigError(where + ": stride must be positive");
    const ConvGeometry g{s.stride, s.padding, 1};
    try {
      const auto h = conv_output_extent(cur[1], s.kernel, g, "height");
      const auto w = conv_output_extent(cur[2], s.kernel, g, "width");
      cur = Shape{s.out_channels, h, w};
    } catch (const DimensionError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    chain.conv_outputs.push_back(cur);
  }
  return chain;
}

}  // namespace

void ArchitectureConfig::validate() const {
  const auto chain = chain_convs(*this);
  if (bam_index) {
    const std::size_t l = *bam_index;
    if (l < 2 || l > convs.size()) {
      throw ConfigError("bam_index " + std::to_string(l) +
                        " must lie strictly between two conv layers (2.." +
                        std::to_string(convs.size()) + ")");
    }
    const std::size_t channels = chain.conv_outputs[l - 2][0];
    if (bam_reduction == 0 || channels % bam_reduction != 0) {
      throw ConfigError("bam_reduction " + std::to_string(bam_reduction) +
                        " must divide the " + std::to_string(channels) +
                        " channels of the host layer");
    }
    if (bam_dilation == 0) throw ConfigError("bam_dilation must be positive");
  }
}

void ArchitectureConfig::validate_runnable() const {
  validate();
  if (actions < 2) throw ConfigError("a policy needs at least 2 actions");
}

std::size_t conv_parameter_count(std::size_t in_channels, const ConvSpec& spec) {
  return (spec.kernel * spec.kernel * in_channels + 1) * spec.out_channels;
}

std::size_t dense_parameter_count(std::size_t in, std::size_t out) { return (in + 1) * out; }

std::size_t count_parameters(const ArchitectureConfig& config) {
  config.validate();
  const auto chain = chain_convs(config);
  std::size_t total = 0;
  std::size_t channels = config.stack;
  for (std::size_t i = 0; i < config.convs.size(); ++i) {
    total += conv_parameter_count(channels, config.convs[i]);
    channels = config.convs[i].out_channels;
  }
  if (config.bam_index) {
    total += bam_parameter_count(chain.conv_outputs[*config.bam_index - 2][0],
                                 config.bam_reduction);
  }
  std::size_t features = chain.conv_outputs.empty()
                             ? shape_numel(Shape{config.stack, config.height, config.width})
                             : shape_numel(chain.conv_outputs.back());
  if (config.hidden > 0) {
    total += dense_parameter_count(features, config.hidden);
    features = config.hidden;
  }
  if (config.actions > 0) total += dense_parameter_count(features, config.actions);
  if (config.value_head) total += dense_parameter_count(features, 1);
  return total;
}

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::bam: return "bam";
    case LayerKind::dense: return "dense";
    case LayerKind::policy_head: return "policy_head";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// ActionDistribution

std::size_t ActionDistribution::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

std::array<std::size_t, 2> ActionDistribution::top2() const {
  if (probs.size() < 2) throw DimensionError("top2 needs at least two actions");
  const std::size_t first = argmax();
  std::size_t second = first == 0 ? 1 : 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (i != first && probs[i] > probs[second]) second = i;
  }
  return {first, second};
}

bool ActionDistribution::valid(double tol) const {
  if (probs.empty()) return false;
  double total = 0.0;
  for (double p : probs) {
    if (!(p > 0.0) || !std::isfinite(p)) return false;
    total += p;
  }
  return std::abs(total - 1.0) <= tol;
}

template <typename T>
ActionDistribution distribution_from_logits(const Tensor<T>& logits, std::size_t row) {
  const std::size_t a = logits.dim(1);
  if (row >= logits.dim(0)) throw DimensionError("distribution row out of range");
  Tape<T> tape;
  const auto probs = softmax(tape.leaf(logits), 1).value();
  ActionDistribution d;
  for (std::size_t i = 0; i < a; ++i) {
    d.logits.push_back(static_cast<double>(logits[row * a + i]));
    d.probs.push_back(static_cast<double>(probs[row * a + i]));
  }
  return d;
}

template <typename T>
ActionDistribution PolicyOutput<T>::distribution(std::size_t row) const {
  const std::size_t a = logits.dim(1);
  if (row >= logits.dim(0)) throw DimensionError("distribution row out of range");
  ActionDistribution d;
  for (std::size_t i = 0; i < a; ++i) {
    d.logits.push_back(static_cast<double>(logits[row * a + i]));
    d.probs.push_back(static_cast<double>(probs[row * a + i]));
  }
  return d;
}

// ---------------------------------------------------------------------------
// PolicyNetwork

template <typename T>
PolicyNetwork<T>::PolicyNetwork(ArchitectureConfig config) : config_(std::move(config)) {
  config_.validate_runnable();
  const auto chain = chain_convs(config_);
  Shape cur{config_.stack, config_.height, config_.width};
  for (std::size_t i = 0; i < config_.convs.size(); ++i) {
    if (config_.bam_index && *config_.bam_index == layers_.size() + 1) {
      Layer<T> bam;
      bam.kind = LayerKind::bam;
      bam.name = "bam";
      bam.bam = BamParams<T>::zeros(cur[0], config_.bam_reduction, config_.bam_dilation);
      bam.input_shape = cur;
      bam.output_shape = cur;
      layers_.push_back(std::move(bam));
    }
    const auto& s = config_.convs[i];
    Layer<T> conv;
    conv.kind = LayerKind::conv;
    conv.name = "conv" + std::to_string(i + 1);
    conv.geometry = ConvGeometry{s.stride, s.padding, 1};
    conv.weight = Tensor<T>(Shape{s.out_channels, cur[0], s.kernel, s.kernel});
    conv.bias = Tensor<T>(Shape{s.out_channels});
    conv.input_shape = cur;
    conv.output_shape = chain.conv_outputs[i];
    cur = conv.output_shape;
    layers_.push_back(std::move(conv));
  }
  std::size_t features = shape_numel(cur);
  if (config_.hidden > 0) {
    Layer<T> fc;
    fc.kind = LayerKind::dense;
    fc.name = "fc";
    fc.weight = Tensor<T>(Shape{config_.hidden, features});
    fc.bias = Tensor<T>(Shape{config_.hidden});
    fc.input_shape = cur;
    fc.output_shape = Shape{config_.hidden};
    cur = fc.output_shape;
    features = config_.hidden;
    layers_.push_back(std::move(fc));
  }
  Layer<T> head;
  head.kind = LayerKind::policy_head;
  head.name = "policy";
  head.weight = Tensor<T>(Shape{config_.actions, features});
  head.bias = Tensor<T>(Shape{config_.actions});
  head.input_shape = cur;
  head.output_shape = Shape{config_.actions};
  layers_.push_back(std::move(head));

  value_head_.kind = LayerKind::dense;
  value_head_.name = "value";
  value_head_.input_shape = cur;
  value_head_.output_shape = Shape{1};
  if (config_.value_head) {
    value_head_.weight = Tensor<T>(Shape{1, features});
    value_head_.bias = Tensor<T>(Shape{1});
  }
}

namespace {

// Orthogonal rows (rows <= cols) or columns (rows > cols) scaled by `gain`,
// via modified Gram-Schmidt on a Gaussian draw.
template <typename T>
void orthogonal_fill(Tensor<T>& w, double gain, std::mt19937_64& rng) {
  const std::size_t rows = w.dim(0);
  const std::size_t cols = w.size() / rows;
  const bool by_rows = rows <= cols;
  const std::size_t count = by_rows ? rows : cols;
  const std::size_t len = by_rows ? cols : rows;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> vecs(count, std::vector<double>(len));
  for (auto& v : vecs)
    for (auto& x : v) x = normal(rng);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < len; ++k) d += vecs[i][k] * vecs[j][k];
      for (std::size_t k = 0; k < len; ++k) vecs[i][k] -= d * vecs[j][k];
    }
    double norm = 0.0;
    for (double x : vecs[i]) norm += x * x;
    norm = std::sqrt(norm);
    for (auto& x : vecs[i]) x /= norm;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = by_rows ? vecs[r][c] : vecs[c][r];
      w[r * cols + c] = static_cast<T>(gain * v);
    }
  }
}

}  // namespace

template <typename T>
void PolicyNetwork<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double relu_gain = std::sqrt(2.0);
  for (auto& layer : layers_) {
    switch (layer.kind) {
      case LayerKind::conv:
      case LayerKind::dense:
        orthogonal_fill(layer.weight, relu_gain, rng);
        std::fill(layer.bias.storage().begin(), layer.bias.storage().end(), T(0));
        break;
      case LayerKind::bam:
        for (auto& p : layer.bam.named_parameters("")) {
          if (p.tensor->rank() >= 2) {
            orthogonal_fill(*p.tensor, 1.0, rng);
          } else {
            std::fill(p.tensor->storage().begin(), p.tensor->storage().end(), T(0));
          }
        }
        break;
      case LayerKind::policy_head:
        std::fill(layer.weight.storage().begin(), layer.weight.storage().end(), T(0));
        std::fill(layer.bias.storage().begin(), layer.bias.storage().end(), T(0));
        break;
    }
  }
  if (config_.value_head) {
    orthogonal_fill(value_head_.weight, 1.0, rng);
    std::fill(value_head_.bias.storage().begin(), value_head_.bias.storage().end(), T(0));
  }
}

template <typename T>
const Layer<T>& PolicyNetwork<T>::layer(std::size_t index) const {
  if (index < 1 || index > layers_.size()) {
    throw std::out_of_range("layer index " + std::to_string(index) + " outside 1.." +
                            std::to_string(layers_.size()));
  }
  return layers_[index - 1];
}

template <typename T>
Layer<T>& PolicyNetwork<T>::layer(std::size_t index) {
  return const_cast<Layer<T>&>(std::as_const(*this).layer(index));
}

template <typename T>
const BamParams<T>& PolicyNetwork<T>::bam_params() const {
  if (!config_.bam_index) throw ConfigError("network has no BAM layer");
  return layer(*config_.bam_index).bam;
}

template <typename T>
BamParams<T>& PolicyNetwork<T>::bam_params() {
  if (!config_.bam_index) throw ConfigError("network has no BAM layer");
  return layer(*config_.bam_index).bam;
}

namespace {

template <typename Param, typename Layers, typename Head>
std::vector<Param> collect_parameters(Layers& layers, Head& value_head, bool with_value) {
  std::vector<Param> out;
  for (auto& layer : layers) {
    if (layer.kind == LayerKind::bam) {
      auto& b = layer.bam;
      const std::string pre = layer.name + ".";
      out.push_back({pre + "channel.fc1.weight", &b.channel_fc1_weight});
      out.push_back({pre + "channel.fc1.bias", &b.channel_fc1_bias});
      out.push_back({pre + "channel.fc2.weight", &b.channel_fc2_weight});
      out.push_back({pre + "channel.fc2.bias", &b.channel_fc2_bias});
      out.push_back({pre + "spatial.reduce.weight", &b.spatial_reduce_weight});
      out.push_back({pre + "spatial.reduce.bias", &b.spatial_reduce_bias});
      out.push_back({pre + "spatial.dilated1.weight", &b.spatial_dilated1_weight});
      out.push_back({pre + "spatial.dilated1.bias", &b.spatial_dilated1_bias});
      out.push_back({pre + "spatial.dilated2.weight", &b.spatial_dilated2_weight});
      out.push_back({pre + "spatial.dilated2.bias", &b.spatial_dilated2_bias});
      out.push_back({pre + "spatial.out.weight", &b.spatial_out_weight});
      out.push_back({pre + "spatial.out.bias", &b.spatial_out_bias});
    } else {
      out.push_back({layer.name + ".weight", &layer.weight});
      out.push_back({layer.name + ".bias", &layer.bias});
    }
  }
  if (with_value) {
    out.push_back({"value.weight", &value_head.weight});
    out.push_back({"value.bias", &value_head.bias});
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<NamedParam<T>> PolicyNetwork<T>::named_parameters() {
  return collect_parameters<NamedParam<T>>(layers_, value_head_, config_.value_head);
}

template <typename T>
std::vector<ConstNamedParam<T>> PolicyNetwork<T>::named_parameters() const {
  return collect_parameters<ConstNamedParam<T>>(layers_, value_head_, config_.value_head);
}

template <typename T>
std::size_t PolicyNetwork<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : named_parameters()) total += p.tensor->size();
  return total;
}

template <typename T>
Shape PolicyNetwork<T>::layer_input_shape(std::size_t index, std::size_t batch) const {
  Shape s{batch};
  for (auto d : layer(index).input_shape) s.push_back(d);
  return s;
}

template <typename T>
template <typename Self>
Var<T> PolicyNetwork<T>::run_layers_impl(Self& self, Var<T> x, std::size_t from,
                                         std::size_t to, bool track) {
  const std::size_t n_layers = self.layers_.size();
  if (from < 1 || from > to || to > n_layers) {
    throw std::out_of_range("layer slice [" + std::to_string(from) + "," + std::to_string(to) +
                            "] outside 1.." + std::to_string(n_layers));
  }
  const std::size_t batch = x.value().dim(0);
  const Shape expected = self.layer_input_shape(from, batch);
  if (x.shape() != expected) {
    throw DimensionError("layer " + std::to_string(from) + " (" + self.layers_[from - 1].name +
                         ") expects input " + shape_str(expected) + ", got " +
                         shape_str(x.shape()));
  }
  auto& tape = x.tape();
  for (std::size_t i = from; i <= to; ++i) {
    auto& layer = self.layers_[i - 1];
    switch (layer.kind) {
      case LayerKind::conv:
        x = relu(conv2d(x, param_var(tape, layer.weight, track), param_var(tape, layer.bias, track),
                        layer.geometry));
        break;
      case LayerKind::bam:
        x = bam_forward(x, layer.bam, track);
        break;
      case LayerKind::dense:
        x = relu(dense(reshape(x, Shape{batch, shape_numel(layer.input_shape)}),
                       param_var(tape, layer.weight, track), param_var(tape, layer.bias, track)));
        break;
      case LayerKind::policy_head:
        x = dense(reshape(x, Shape{batch, shape_numel(layer.input_shape)}),
                  param_var(tape, layer.weight, track), param_var(tape, layer.bias, track));
        break;
    }
  }
  return x;
}

template <typename T>
Var<T> PolicyNetwork<T>::run_layers(Var<T> x, std::size_t from, std::size_t to) const {
  return run_layers_impl(*this, x, from, to, false);
}

template <typename T>
Var<T> PolicyNetwork<T>::run_layers(Var<T> x, std::size_t from, std::size_t to, bool track) {
  return run_layers_impl(*this, x, from, to, track);
}

namespace {

template <typename T, typename HeadLayer>
Var<T> value_head_impl(const ArchitectureConfig& config, HeadLayer& head, Var<T> trunk,
                       bool track) {
  const std::size_t batch = trunk.value().dim(0);
  if (!config.value_head) return trunk.tape().constant(Tensor<T>(Shape{batch}));
  const std::size_t features = shape_numel(head.input_shape);
  if (trunk.value().size() != batch * features) {
    throw DimensionError("value head expects " + std::to_string(features) +
                         " features per sample, got shape " + shape_str(trunk.shape()));
  }
  auto& tape = trunk.tape();
  auto v = dense(reshape(trunk, Shape{batch, features}), param_var(tape, head.weight, track),
                 param_var(tape, head.bias, track));
  return reshape(v, Shape{batch});
}

}  // namespace

template <typename T>
Var<T> PolicyNetwork<T>::run_value_head(Var<T> trunk) const {
  return value_head_impl(config_, value_head_, trunk, false);
}

template <typename T>
Var<T> PolicyNetwork<T>::run_value_head(Var<T> trunk, bool track) {
  return value_head_impl(config_, value_head_, trunk, track);
}

template <typename T>
Var<T> PolicyNetwork<T>::run_bam_attention(Var<T> f) const {
  return bam_attention(f, bam_params());
}

template <typename T>
template <typename Self>
typename PolicyNetwork<T>::Heads PolicyNetwork<T>::run_impl(Self& self, Var<T> obs, bool track) {
  const std::size_t n = self.layers_.size();
  Var<T> trunk = n > 1 ? run_layers_impl(self, obs, 1, n - 1, track) : obs;
  Heads h;
  h.logits = run_layers_impl(self, trunk, n, n, track);
  h.values = value_head_impl(self.config_, self.value_head_, trunk, track);
  return h;
}

template <typename T>
typename PolicyNetwork<T>::Heads PolicyNetwork<T>::run(Var<T> obs) const {
  return run_impl(*this, obs, false);
}

template <typename T>
typename PolicyNetwork<T>::Heads PolicyNetwork<T>::run(Var<T> obs, bool track) {
  return run_impl(*this, obs, track);
}

// ---------------------------------------------------------------------------
// Free functions

template <typename T>
Tensor<T> as_batch(const Tensor<T>& obs) {
  if (obs.rank() == 4) return obs;
  if (obs.rank() == 3) {
    Shape s{1};
    for (auto d : obs.shape()) s.push_back(d);
    return obs.reshaped(s);
  }
  throw DimensionError("observation must be [k,H,W] or [N,k,H,W], got " + shape_str(obs.shape()));
}

template <typename T>
void check_observation(const ArchitectureConfig& config, const Tensor<T>& batch) {
  const Shape expected{batch.rank() == 4 ? batch.dim(0) : 0, config.stack, config.height,
                       config.width};
  if (batch.shape() != expected) {
    throw DimensionError("observation batch must be [N," + std::to_string(config.stack) + "," +
                         std::to_string(config.height) + "," + std::to_string(config.width) +
                         "], got " + shape_str(batch.shape()));
  }
  // NaN fails both comparisons, so one branch-free pass flags every bad entry.
  bool bad = false;
  for (T v : batch.data()) bad |= !(v >= T(0) && v <= T(1));
  if (!bad) return;
  for (T v : batch.data()) {
    if (!std::isfinite(v)) throw NumericError("observation holds a non-finite value");
    if (v < T(0) || v > T(1)) throw std::domain_error("observation value outside [0,1]");
  }
}

template <typename T>
PolicyOutput<T> forward(const PolicyNetwork<T>& net, const Tensor<T>& obs) {
  const Tensor<T> batch = as_batch(obs);
  check_observation(net.config(), batch);
  Tape<T> tape;
  const auto heads = net.run(tape.leaf(batch));
  PolicyOutput<T> out;
  out.logits = heads.logits.value();
  out.probs = softmax(heads.logits, 1).value();
  out.values = heads.values.value();
  return out;
}

template <typename T>
Tensor<T> forward_prefix(const PolicyNetwork<T>& net, const Tensor<T>& obs, std::size_t from,
                         std::size_t to, const Tensor<T>* inject) {
  if (from < 1 || from > to || to > net.num_layers()) {
    throw std::out_of_range("layer slice [" + std::to_string(from) + "," + std::to_string(to) +
                            "] outside 1.." + std::to_string(net.num_layers()));
  }
  Tape<T> tape;
  if (inject) return net.run_layers(tape.leaf(*inject), from, to).value();
  const Tensor<T> batch = as_batch(obs);
  if (from == 1) check_observation(net.config(), batch);
  return net.run_layers(tape.leaf(batch), from, to).value();
}

#define BAMRL_INSTANTIATE(T)                                                              \
  template struct PolicyOutput<T>;                                                        \
  template class PolicyNetwork<T>;                                                        \
  template ActionDistribution distribution_from_logits(const Tensor<T>&, std::size_t);    \
  template Tensor<T> as_batch(const Tensor<T>&);                                          \
  template void check_observation(const ArchitectureConfig&, const Tensor<T>&);           \
  template PolicyOutput<T> forward(const PolicyNetwork<T>&, const Tensor<T>&);            \
  template Tensor<T> forward_prefix(const PolicyNetwork<T>&, const Tensor<T>&, std::size_t, \
                                    std::size_t, const Tensor<T>*);

BAMRL_INSTANTIATE(float)
BAMRL_INSTANTIATE(double)

#undef BAMRL_INSTANTIATE

}  // namespace bamrl
