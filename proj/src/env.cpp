#include "bamrl/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bamrl {

void PixelCatchConfig::validate() const {
  if (size < 4) throw ConfigError("PixelCatch size must be at least 4");
  if (paddle_width == 0 || paddle_width % 2 == 0 || paddle_width > size) {
    throw ConfigError("PixelCatch paddle width must be odd and fit the grid");
  }
  if (drops_per_episode == 0) throw ConfigError("PixelCatch needs at least one drop per episode");
  if (paddle_speed == 0 || paddle_speed >= size) throw ConfigError("PixelCatch paddle speed must lie in [1, size)");
}

PixelCatchEnv::PixelCatchEnv(PixelCatchConfig config) : config_(config) { config_.validate(); }

std::size_t PixelCatchEnv::spawn_column() {
  std::uniform_int_distribution<std::size_t> col(0, config_.size - 1);
  return col(rng_);
}

Tensor<float> PixelCatchEnv::reset(std::uint64_t seed) {
  rng_.seed(seed);
  state_ = PixelCatchState{};
  state_.paddle_center = config_.size / 2;
  state_.ball_col = spawn_column();
  started_ = true;
  return render();
}

Tensor<float> PixelCatchEnv::reset_with(const PixelCatchState& state, std::uint64_t seed) {
  const std::size_t half = config_.paddle_width / 2;
  if (state.ball_col >= config_.size || state.ball_row + 1 >= config_.size ||
      state.paddle_center < half || state.paddle_center + half >= config_.size ||
      state.drops_done >= config_.drops_per_episode || state.done) {
    throw ConfigError("PixelCatch state out of range");
  }
  rng_.seed(seed);
  state_ = state;
  started_ = true;
  return render();
}

PixelCatchEnv::Step PixelCatchEnv::step(std::size_t action) {
  if (!started_) throw UsageError("PixelCatch: step before reset");
  if (state_.done) throw UsageError("PixelCatch: step after the episode ended");
  if (action >= kCatchActions) {
    throw ConfigError("PixelCatch action " + std::to_string(action) + " outside 0..2");
  }
  const std::size_t half = config_.paddle_width / 2;
  const std::size_t speed = config_.paddle_speed;
  if (action == static_cast<std::size_t>(CatchAction::left)) {
    state_.paddle_center = std::max(half, state_.paddle_center - std::min(speed, state_.paddle_center));
  } else if (action == static_cast<std::size_t>(CatchAction::right)) {
    state_.paddle_center = std::min(config_.size - 1 - half, state_.paddle_center + speed);
  }
  ++state_.ball_row;

  Step out;
  if (state_.ball_row == config_.size - 1) {
    const std::size_t lo = state_.paddle_center - half;
    const std::size_t hi = state_.paddle_center + half;
    out.reward = (state_.ball_col >= lo && state_.ball_col <= hi) ? 1.0 : 0.0;
    ++state_.drops_done;
    if (state_.drops_done == config_.drops_per_episode) {
      state_.done = true;
    } else {
      state_.ball_row = 0;
      state_.ball_col = spawn_column();
    }
  }
  out.done = state_.done;
  out.frame = render();
  return out;
}

Tensor<float> PixelCatchEnv::render() const {
  const std::size_t n = config_.size;
  Tensor<float> frame(Shape{1, n, n});
  const std::size_t half = config_.paddle_width / 2;
  for (std::size_t c = state_.paddle_center - half; c <= state_.paddle_center + half; ++c) {
    frame[(n - 1) * n + c] = 1.0f;
  }
  frame[state_.ball_row * n + state_.ball_col] = 1.0f;
  return frame;
}

std::size_t PixelCatchEnv::optimal_action() const {
  if (state_.ball_col < state_.paddle_center) return static_cast<std::size_t>(CatchAction::left);
  if (state_.ball_col > state_.paddle_center) return static_cast<std::size_t>(CatchAction::right);
  return static_cast<std::size_t>(CatchAction::stay);
}

// ---------------------------------------------------------------------------

void ObservationConfig::validate() const {
  if (height == 0 || width == 0) throw ConfigError("observation size must be positive");
  if (stack == 0) throw ConfigError("frame stack must be at least 1");
  if (frame_skip == 0) throw ConfigError("frame skip must be at least 1");
}

Tensor<float> to_grayscale(const Tensor<float>& frame) {
  if (frame.rank() != 3) throw DimensionError("frame must be [C,H,W], got " + shape_str(frame.shape()));
  const std::size_t c = frame.dim(0);
  if (c == 1) return frame;
  const std::size_t hw = frame.dim(1) * frame.dim(2);
  Tensor<float> out(Shape{1, frame.dim(1), frame.dim(2)});
  for (std::size_t i = 0; i < hw; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += frame[k * hw + i];
    out[i] = static_cast<float>(s / static_cast<double>(c));
  }
  return out;
}

namespace {

// Row-stochastic overlap weights: out[i] = sum_j w[i][j] * in[j].
std::vector<std::vector<double>> area_weights(std::size_t src, std::size_t dst) {
  std::vector<std::vector<double>> w(dst, std::vector<double>(src, 0.0));
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double a = static_cast<double>(i) * scale;
    const double b = static_cast<double>(i + 1) * scale;
    for (std::size_t j = static_cast<std::size_t>(std::floor(a)); j < src && static_cast<double>(j) < b; ++j) {
      const double overlap = std::min(b, static_cast<double>(j + 1)) - std::max(a, static_cast<double>(j));
      if (overlap > 0.0) w[i][j] = overlap / scale;
    }
  }
  return w;
}

}  // namespace

Tensor<float> area_resize(const Tensor<float>& frame, std::size_t height, std::size_t width) {
  if (frame.rank() != 3 || frame.dim(0) != 1) {
    throw DimensionError("area_resize expects [1,H,W], got " + shape_str(frame.shape()));
  }
  if (height == 0 || width == 0) throw ConfigError("resize target must be positive");
  const std::size_t sh = frame.dim(1);
  const std::size_t sw = frame.dim(2);
  if (sh == height && sw == width) return frame;
  const auto wy = area_weights(sh, height);
  const auto wx = area_weights(sw, width);
  std::vector<double> rows(height * sw, 0.0);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t y = 0; y < sh; ++y) {
      if (wy[i][y] == 0.0) continue;
      for (std::size_t x = 0; x < sw; ++x) rows[i * sw + x] += wy[i][y] * frame[y * sw + x];
    }
  }
  Tensor<float> out(Shape{1, height, width});
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      double s = 0.0;
      for (std::size_t x = 0; x < sw; ++x) s += wx[j][x] * rows[i * sw + x];
      out[i * width + j] = std::clamp(static_cast<float>(s), 0.0f, 1.0f);
    }
  }
  return out;
}

FramePipeline::FramePipeline(ObservationConfig config) : config_(config) { config_.validate(); }

void FramePipeline::reset() {
  kept_.clear();
  pooled_.reset();
  seen_ = 0;
}

bool FramePipeline::push(const Tensor<float>& raw) {
  Tensor<float> frame = area_resize(to_grayscale(raw), config_.height, config_.width);
  if (pooled_) {
    for (std::size_t i = 0; i < frame.size(); ++i) (*pooled_)[i] = std::max((*pooled_)[i], frame[i]);
  } else {
    pooled_ = std::move(frame);
  }
  const bool keep = seen_ % config_.frame_skip == 0;
  ++seen_;
  if (!keep) return false;
  kept_.push_back(std::move(*pooled_));
  pooled_.reset();
  if (kept_.size() > config_.stack) kept_.pop_front();
  return true;
}

Tensor<float> FramePipeline::observation() const {
  if (kept_.empty()) throw UsageError("FramePipeline: observation before the first frame");
  const std::size_t plane = config_.height * config_.width;
  Tensor<float> obs(Shape{config_.stack, config_.height, config_.width});
  const std::size_t offset = config_.stack - kept_.size();
  for (std::size_t k = 0; k < kept_.size(); ++k) {
    std::copy(kept_[k].data().begin(), kept_[k].data().end(),
              obs.storage().begin() + static_cast<std::ptrdiff_t>((offset + k) * plane));
  }
  return obs;
}

Tensor<float> preprocess(const std::vector<Tensor<float>>& raw_frames, const ObservationConfig& config) {
  if (raw_frames.empty()) throw std::invalid_argument("preprocess: no frames");
  FramePipeline pipe(config);
  for (const auto& f : raw_frames) {
    if (f.shape() != raw_frames.front().shape()) {
      throw DimensionError("preprocess: raw frames differ in shape");
    }
    pipe.push(f);
  }
  return pipe.observation();
}

CatchTask::CatchTask(PixelCatchConfig env, ObservationConfig obs) : env_(env), pipeline_(obs) {}

Tensor<float> CatchTask::reset(std::uint64_t seed) {
  pipeline_.reset();
  pipeline_.push(env_.reset(seed));
  return pipeline_.observation();
}

CatchTask::Step CatchTask::step(std::size_t action) {
  Step out;
  for (std::size_t i = 0; i < pipeline_.config().frame_skip && !out.done; ++i) {
    auto s = env_.step(action);
    out.reward += s.reward;
    out.done = s.done;
    pipeline_.push(s.frame);
  }
  out.observation = pipeline_.observation();
  return out;
}

// ---------------------------------------------------------------------------

void write_pgm(const std::filesystem::path& path, const Tensor<float>& pixels) {
  std::size_t h = 0;
  std::size_t w = 0;
  if (pixels.rank() == 2) {
    h = pixels.dim(0);
    w = pixels.dim(1);
  } else if (pixels.rank() == 3 && pixels.dim(0) == 1) {
    h = pixels.dim(1);
    w = pixels.dim(2);
  } else {
    throw DimensionError("write_pgm expects [H,W] or [1,H,W], got " + shape_str(pixels.shape()));
  }
  std::string body;
  body.reserve(h * w);
  for (float v : pixels.data()) {
    const float c = std::isfinite(v) ? std::clamp(v, 0.0f, 1.0f) : 0.0f;
    body.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor<float> read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0;
  std::size_t h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w == 0 || h == 0 || maxval != 255) {
    throw FormatError(path.string() + ": not an 8-bit binary PGM");
  }
  in.get();
  std::string body(w * h, '\0');
  in.read(body.data(), static_cast<std::streamsize>(body.size()));
  if (in.gcount() != static_cast<std::streamsize>(body.size())) {
    throw FormatError(path.string() + ": truncated PGM payload");
  }
  Tensor<float> out(Shape{1, h, w});
  for (std::size_t i = 0; i < body.size(); ++i) {
    out[i] = static_cast<float>(static_cast<unsigned char>(body[i])) / 255.0f;
  }
  return out;
}

}  // namespace bamrl
