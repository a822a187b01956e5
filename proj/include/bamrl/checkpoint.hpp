#pragma once

#include <cstdint>
#include <filesystem>

#include "bamrl/errors.hpp"
#include "bamrl/policy.hpp"

namespace bamrl {

/// Checkpoint layout (all integers little-endian):
///   "BARL" | u32 version | u32 metadata length | UTF-8 JSON metadata |
///   raw IEEE-754 payloads concatenated in manifest order.
/// Metadata: {"config": {...}, "tensors": [{"name", "shape", "dtype"}, ...]}.
inline constexpr char kCheckpointMagic[4] = {'B', 'A', 'R', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A checkpoint whose architecture differs from the one the caller expects.
class CheckpointMismatch : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

template <typename T>
void save_checkpoint(const PolicyNetwork<T>& net, const std::filesystem::path& path);

/// Throws FormatError on bad magic, unsupported version, truncation or a
/// manifest that disagrees with the stored config.
template <typename T>
PolicyNetwork<T> load_checkpoint(const std::filesystem::path& path);

/// As above, plus CheckpointMismatch when the stored config differs from `expected`.
template <typename T>
PolicyNetwork<T> load_checkpoint(const std::filesystem::path& path,
                                 const ArchitectureConfig& expected);

}  // namespace bamrl
