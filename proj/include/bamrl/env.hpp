#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <random>
#include <vector>

#include "bamrl/tensor.hpp"

namespace bamrl {

enum class CatchAction : std::size_t { left = 0, stay = 1, right = 2 };
inline constexpr std::size_t kCatchActions = 3;

struct PixelCatchConfig {
  std::size_t size = 32;
  std::size_t paddle_width = 3;
  std::size_t drops_per_episode = 8;
  /// Columns the paddle moves per left/right action, clamped at the walls.
  std::size_t paddle_speed = 2;

  void validate() const;
  /// Env steps in one episode: each drop falls from row 0 to the bottom row.
  std::size_t episode_length() const { return drops_per_episode * (size - 1); }
};

struct PixelCatchState {
  std::size_t ball_col = 0;
  std::size_t ball_row = 0;
  std::size_t paddle_center = 0;
  std::size_t drops_done = 0;
  bool done = false;

  friend bool operator==(const PixelCatchState&, const PixelCatchState&) = default;
};

/// A ball falls one row per step from row 0; the paddle on the bottom row
/// moves one column per step. A drop scores +1 when the ball reaches the
/// bottom row within the paddle's span. Frames are [1,size,size] in {0,1}.
class PixelCatchEnv {
 public:
  struct Step {
    Tensor<float> frame;
    double reward = 0.0;
    bool done = false;
  };

  explicit PixelCatchEnv(PixelCatchConfig config = {});

  Tensor<float> reset(std::uint64_t seed);
  /// Places the env in an explicit state; the rng keeps its current stream.
  Tensor<float> reset_with(const PixelCatchState& state, std::uint64_t seed = 0);
  /// UsageError after the episode ended or before reset; ConfigError on an
  /// out-of-range action.
  Step step(std::size_t action);

  Tensor<float> render() const;
  const PixelCatchState& state() const { return state_; }
  const PixelCatchConfig& config() const { return config_; }
  bool done() const { return state_.done; }

  /// Action moving the paddle toward the ball column.
  std::size_t optimal_action() const;

 private:
  std::size_t spawn_column();

  PixelCatchConfig config_;
  PixelCatchState state_;
  std::mt19937_64 rng_;
  bool started_ = false;
};

/// Grayscale, area resize, frame-skip max pooling and frame stacking.
struct ObservationConfig {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t stack = 4;
  std::size_t frame_skip = 1;

  void validate() const;
};

/// Mean over the channel axis of a [C,H,W] frame, giving [1,H,W].
Tensor<float> to_grayscale(const Tensor<float>& frame);
/// Area-weighted resampling of a [1,H,W] frame to [1,height,width].
Tensor<float> area_resize(const Tensor<float>& frame, std::size_t height, std::size_t width);

/// Streaming preprocessor. Frame i of the raw stream is kept when
/// i % frame_skip == 0, as the pixelwise max of frames i-frame_skip+1..i.
/// The observation stacks the last `stack` kept frames, newest in the last
/// channel, zero-padded until enough frames exist.
class FramePipeline {
 public:
  explicit FramePipeline(ObservationConfig config = {});

  void reset();
  /// Feeds one raw [C,H,W] frame; returns true when it produced a kept frame.
  bool push(const Tensor<float>& raw);
  /// [stack,height,width]; UsageError before the first push.
  Tensor<float> observation() const;
  const ObservationConfig& config() const { return config_; }

 private:
  ObservationConfig config_;
  std::deque<Tensor<float>> kept_;
  std::optional<Tensor<float>> pooled_;
  std::size_t seen_ = 0;
};

/// Runs `raw_frames` through a fresh pipeline; std::invalid_argument when empty.
Tensor<float> preprocess(const std::vector<Tensor<float>>& raw_frames,
                         const ObservationConfig& config = {});

/// PixelCatch plus pipeline. Each agent step repeats the action frame_skip
/// times and sums the rewards.
class CatchTask {
 public:
  struct Step {
    Tensor<float> observation;
    double reward = 0.0;
    bool done = false;
  };

  CatchTask(PixelCatchConfig env = {}, ObservationConfig obs = {});

  Tensor<float> reset(std::uint64_t seed);
  Step step(std::size_t action);

  const PixelCatchEnv& env() const { return env_; }
  PixelCatchEnv& env() { return env_; }
  const ObservationConfig& observation_config() const { return pipeline_.config(); }
  std::size_t num_actions() const { return kCatchActions; }
  /// Upper bound on the episode return.
  double max_episode_reward() const {
    return static_cast<double>(env_.config().drops_per_episode);
  }

 private:
  PixelCatchEnv env_;
  FramePipeline pipeline_;
};

/// Binary 8-bit PGM (P5). `pixels` is [H,W] or [1,H,W] in [0,1] and is
/// scaled by 255 and rounded; values are clamped into range first.
void write_pgm(const std::filesystem::path& path, const Tensor<float>& pixels);
/// Reads a P5 file back into [1,H,W] with values in [0,1].
Tensor<float> read_pgm(const std::filesystem::path& path);

}  // namespace bamrl
