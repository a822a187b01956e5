#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bamrl/autodiff.hpp"
#include "bamrl/bam.hpp"
#include "bamrl/tensor.hpp"

namespace bamrl {

struct ConvSpec {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Topology of a policy: conv stack (each conv followed by relu), optional
/// BAM block, optional hidden dense layer, policy head and optional value head.
///
/// Layer list, 1-based: the convs in order with the BAM block inserted at
/// `bam_index`, then the hidden dense layer (when hidden > 0), then the
/// policy head (when actions > 0). The value head reads the output of the
/// layer just before the policy head and is not part of the list.
struct ArchitectureConfig {
  std::size_t stack = 4;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<ConvSpec> convs;
  std::optional<std::size_t> bam_index;
  std::size_t bam_reduction = 4;
  std::size_t bam_dilation = 2;
  std::size_t hidden = 128;
  std::size_t actions = 3;
  bool value_head = true;

  /// Desk-scale default: 4x32x32 input, conv 5x5/8 s2, [BAM], conv 3x3/16 s2,
  /// conv 3x3/16 s1, dense 128, |A| = 3, value head.
  static ArchitectureConfig nature_lite(bool with_bam, std::size_t actions = 3);
  /// Full-size Atari layout (84x84x4, 32/64/64 convs, dense 512).
  static ArchitectureConfig nature_cnn(bool with_bam, std::size_t actions = 4);

  /// Checks that every layer chains; ConfigError otherwise. Accepts
  /// accounting-only layouts (no convs, no heads).
  void validate() const;
  /// validate() plus the requirements of a runnable policy (>= 2 actions).
  void validate_runnable() const;

  std::size_t num_layers() const;

  friend bool operator==(const ArchitectureConfig&, const ArchitectureConfig&) = default;
};

std::size_t conv_parameter_count(std::size_t in_channels, const ConvSpec& spec);
std::size_t dense_parameter_count(std::size_t in, std::size_t out);
/// Total trainable parameters implied by `config` (validated first).
std::size_t count_parameters(const ArchitectureConfig& config);

enum class LayerKind { conv, bam, dense, policy_head };
const char* to_string(LayerKind kind);

/// Probabilities over the action set. Ties in argmax/top2 go to the lowest index.
struct ActionDistribution {
  std::vector<double> logits;
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  std::size_t argmax() const;
  std::array<std::size_t, 2> top2() const;
  /// Positive probabilities summing to 1 within `tol`.
  bool valid(double tol = 1e-6) const;

  friend bool operator==(const ActionDistribution&, const ActionDistribution&) = default;
};

template <typename T>
struct PolicyOutput {
  Tensor<T> logits;  // [N,A]
  Tensor<T> probs;   // [N,A]
  Tensor<T> values;  // [N]

  std::size_t batch() const { return logits.dim(0); }
  ActionDistribution distribution(std::size_t row) const;
};

template <typename T>
struct Layer {
  LayerKind kind;
  std::string name;
  ConvGeometry geometry;
  Tensor<T> weight;
  Tensor<T> bias;
  BamParams<T> bam;
  Shape input_shape;   // per sample
  Shape output_shape;  // per sample
};

/// The layered policy network. Parameters are zero after construction; use
/// initialize() for training-ready weights.
template <typename T>
class PolicyNetwork {
 public:
  explicit PolicyNetwork(ArchitectureConfig config);

  /// Orthogonal init (gain sqrt 2) for trunk layers, gain 1 for BAM and value
  /// head, zero policy head, zero biases.
  void initialize(std::uint64_t seed);

  const ArchitectureConfig& config() const { return config_; }
  std::size_t num_layers() const { return layers_.size(); }
  std::optional<std::size_t> bam_index() const { return config_.bam_index; }
  const Layer<T>& layer(std::size_t index) const;
  Layer<T>& layer(std::size_t index);
  const Layer<T>& value_head() const { return value_head_; }
  const BamParams<T>& bam_params() const;
  BamParams<T>& bam_params();

  /// Deterministic ordering shared by checkpoints and the optimiser.
  std::vector<NamedParam<T>> named_parameters();
  std::vector<ConstNamedParam<T>> named_parameters() const;
  std::size_t parameter_count() const;

  /// Batched input shape [N, ...] expected by layer `index`.
  Shape layer_input_shape(std::size_t index, std::size_t batch) const;

  /// Runs layers [from, to] on `x` (1-based, inclusive). The const overload
  /// never tracks parameters; the mutable one tracks them when `track` is set.
  Var<T> run_layers(Var<T> x, std::size_t from, std::size_t to) const;
  Var<T> run_layers(Var<T> x, std::size_t from, std::size_t to, bool track);
  /// Value estimates [N] from the trunk output (output of layer N-1).
  Var<T> run_value_head(Var<T> trunk) const;
  Var<T> run_value_head(Var<T> trunk, bool track);
  /// The BAM block's attention map on its input activation.
  Var<T> run_bam_attention(Var<T> f) const;

  struct Heads {
    Var<T> logits;
    Var<T> values;
  };
  /// Full pass from a batched observation [N,k,H,W].
  Heads run(Var<T> obs) const;
  Heads run(Var<T> obs, bool track);

 private:
  template <typename Self>
  static Var<T> run_layers_impl(Self& self, Var<T> x, std::size_t from, std::size_t to,
                                bool track);
  template <typename Self>
  static Heads run_impl(Self& self, Var<T> obs, bool track);

  ArchitectureConfig config_;
  std::vector<Layer<T>> layers_;
  Layer<T> value_head_;
};

/// Adds a leading batch axis to a single [k,H,W] observation; batched
/// [N,k,H,W] inputs pass through.
template <typename T>
Tensor<T> as_batch(const Tensor<T>& obs);

/// Throws DimensionError on a shape mismatch, NumericError on non-finite
/// entries and std::domain_error on values outside [0,1].
template <typename T>
void check_observation(const ArchitectureConfig& config, const Tensor<T>& batch);

template <typename T>
PolicyOutput<T> forward(const PolicyNetwork<T>& net, const Tensor<T>& obs);

/// Output of layers [from, to] on `obs`, or on `inject` (which then must
/// match the batched input shape of `from`) when given.
template <typename T>
Tensor<T> forward_prefix(const PolicyNetwork<T>& net, const Tensor<T>& obs, std::size_t from,
                         std::size_t to, const Tensor<T>* inject = nullptr);

template <typename T>
ActionDistribution distribution_from_logits(const Tensor<T>& logits, std::size_t row);

}  // namespace bamrl
