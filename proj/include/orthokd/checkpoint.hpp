#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "orthokd/model.hpp"
#include "orthokd/optim.hpp"

namespace orthokd {

// Binary container, little-endian throughout (layout in docs/checkpoint-format.md):
//
//   magic      8 bytes  "OKDCKPT1"
//   step       u64
//   meta_count u32, then per entry: key (u32 length + bytes), value (u64 length + bytes)
//   arr_count  u32, then per array:
//     name  u32 length + bytes
//     role  u8   (0 parameter, 1 buffer, 2 momentum, 3 mask)
//     rank  u32, dims u64[rank]
//     data  f64[prod(dims)], IEEE-754 bit patterns
enum class ArrayRole : std::uint8_t { Parameter = 0, Buffer = 1, Momentum = 2, Mask = 3 };

struct NamedArray {
  std::string name;
  ArrayRole role = ArrayRole::Parameter;
  Tensor value;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError naming the byte offset on truncated or malformed input.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

/// Packs model parameters, BN statistics and (optionally) optimizer momentum
/// and a weight mask; the layer list travels in the metadata.
Checkpoint make_checkpoint(const ModelGraph& model, const Sgd* optimizer = nullptr,
                           const WeightMask* mask = nullptr);
ModelGraph model_from_checkpoint(const Checkpoint& ckpt);
WeightMask mask_from_checkpoint(const Checkpoint& ckpt);
/// Restores momentum buffers and the step counter into `optimizer`.
void restore_optimizer(const Checkpoint& ckpt, Sgd& optimizer);

/// FNV-1a digest over the encoded parameter and buffer arrays of a model.
std::uint64_t model_digest(const ModelGraph& model);
std::string hex_digest(std::uint64_t d);

}  // namespace orthokd
