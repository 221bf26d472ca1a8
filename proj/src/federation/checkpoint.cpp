// SPDX-License-Identifier: Apache-2.0
#include "fmoe/federation/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fmoe/errors.hpp"
#include "fmoe/random.hpp"

namespace fmoe::federation {
namespace {

constexpr char kMagic[4] = {'F', 'M', 'C', 'K'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const auto half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

}  // namespace

const CheckpointEntry* ExpertCheckpoint::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::string serialize(const ExpertCheckpoint& checkpoint) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(checkpoint.entries.size()));
  for (const auto& e : checkpoint.entries) {
    if (shape_size(e.shape) != e.values.size()) {
      throw FormatError("checkpoint entry '" + e.name + "' has inconsistent shape");
    }
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

ExpertCheckpoint deserialize(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string_view(kMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = in.u32();
  ExpertCheckpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = std::string(in.take(in.u32()));
    const auto rank = in.u32();
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(in.u32());
    const auto n = shape_size(e.shape);
    e.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) e.values[k] = std::bit_cast<float>(in.u32());
    ck.entries.push_back(std::move(e));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const ExpertCheckpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto bytes = serialize(checkpoint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ExpertCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::uint64_t fingerprint(const ExpertCheckpoint& checkpoint) {
  return stable_hash(serialize(checkpoint));
}

template <typename T>
ExpertCheckpoint make_checkpoint(const expert::ExpertEncoderParams<T>& encoder) {
  ExpertCheckpoint ck;
  encoder.for_each([&](const Parameter<T>& p) {
    const auto v = p.tensor.values();
    ck.entries.push_back({p.name, p.tensor.shape(), std::vector<float>(v.begin(), v.end())});
  });
  return ck;
}

template <typename T>
void load_checkpoint(const ExpertCheckpoint& checkpoint, expert::ExpertEncoderParams<T>& encoder) {
  std::size_t i = 0;
  encoder.for_each([&](Parameter<T>& p) {
    if (i >= checkpoint.entries.size()) {
      throw FormatError("checkpoint is missing parameter '" + p.name + "'");
    }
    const auto& e = checkpoint.entries[i++];
    if (e.name != p.name || e.shape != p.tensor.shape()) {
      throw FormatError("checkpoint entry '" + e.name + "' " + shape_string(e.shape) +
                        " does not match parameter '" + p.name + "' " +
                        shape_string(p.tensor.shape()));
    }
    auto dst = p.tensor.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(e.values[k]);
  });
  if (i != checkpoint.entries.size()) throw FormatError("checkpoint has extra parameters");
}

template ExpertCheckpoint make_checkpoint<float>(const expert::ExpertEncoderParams<float>&);
template ExpertCheckpoint make_checkpoint<double>(const expert::ExpertEncoderParams<double>&);
template void load_checkpoint<float>(const ExpertCheckpoint&, expert::ExpertEncoderParams<float>&);
template void load_checkpoint<double>(const ExpertCheckpoint&, expert::ExpertEncoderParams<double>&);

ExpertCheckpoint fedavg_aggregate(std::span<const ExpertCheckpoint> checkpoints) {
  if (checkpoints.empty()) throw AggregationError("fedavg_aggregate: no checkpoints");
  const auto& first = checkpoints.front();
  for (const auto& ck : checkpoints) {
    if (ck.entries.size() != first.entries.size()) {
      throw AggregationError("fedavg_aggregate: parameter counts differ");
    }
    for (std::size_t i = 0; i < ck.entries.size(); ++i) {
      if (ck.entries[i].name != first.entries[i].name ||
          ck.entries[i].shape != first.entries[i].shape) {
        throw AggregationError("fedavg_aggregate: parameter '" + ck.entries[i].name +
                               "' does not match '" + first.entries[i].name + "'");
      }
    }
  }
  ExpertCheckpoint out = first;
  const double k = static_cast<double>(checkpoints.size());
  std::vector<double> column(checkpoints.size());
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    auto& dst = out.entries[i].values;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      for (std::size_t c = 0; c < checkpoints.size(); ++c) {
        column[c] = static_cast<double>(checkpoints[c].entries[i].values[j]);
      }
      dst[j] = static_cast<float>(pairwise_sum(column) / k);
    }
  }
  return out;
}

}  // namespace fmoe::federation
