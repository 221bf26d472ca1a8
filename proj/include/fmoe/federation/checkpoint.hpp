// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fmoe/expert/expert.hpp"

namespace fmoe::federation {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const CheckpointEntry&) const = default;
};

// Ordered named tensors. An expert checkpoint holds exactly the encoder
// parameters; the same container and file format store full client states.
struct ExpertCheckpoint {
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(std::string_view name) const;
  std::size_t parameter_count() const noexcept { return entries.size(); }
  bool operator==(const ExpertCheckpoint&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "FMCK" magic, u32 version, u32 parameter count, then per parameter
//   u32 name length, name bytes, u32 rank, rank x u32 dims, f32 values.
std::string serialize(const ExpertCheckpoint& checkpoint);
ExpertCheckpoint deserialize(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path, const ExpertCheckpoint& checkpoint);
ExpertCheckpoint read_checkpoint(const std::filesystem::path& path);

// FNV-1a of the serialized bytes.
std::uint64_t fingerprint(const ExpertCheckpoint& checkpoint);

template <typename T>
ExpertCheckpoint make_checkpoint(const expert::ExpertEncoderParams<T>& encoder);

// Copies values into `encoder`; names and shapes must match exactly.
template <typename T>
void load_checkpoint(const ExpertCheckpoint& checkpoint, expert::ExpertEncoderParams<T>& encoder);

// Elementwise mean with pairwise summation in double precision.
ExpertCheckpoint fedavg_aggregate(std::span<const ExpertCheckpoint> checkpoints);

}  // namespace fmoe::federation
