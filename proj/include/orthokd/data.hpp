#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "orthokd/tensor.hpp"

namespace orthokd {

/// Images NCHW with raw pixel values in [0, 1], plus integer labels.
struct Split {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

struct DatasetHandle {
  Split train;
  Split test;
  std::size_t classes = 0;
  std::vector<double> mean;    // per channel, over the training split
  std::vector<double> stddev;  // per channel, over the training split

  std::size_t channels() const { return train.images.dim(1); }
  std::size_t image_size() const { return train.images.dim(2); }

  /// Stores per-channel statistics of the training split.
  void compute_normalization();
  /// (x - mean) / stddev per channel. Raw pixels stay untouched in the
  /// splits; this is the single place normalisation happens.
  Tensor normalize(const Tensor& raw) const;
  /// Raw pixels of the listed samples, NCHW.
  Tensor gather(const Split& split, std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(const Split& split, std::span<const std::size_t> indices) const;
  void validate() const;
};

// ---------------------------------------------------------- CIFAR binary

/// Each record: `label_bytes` label bytes (1, or 2 for the coarse+fine
/// variant, where the second byte is used) then 3072 bytes of 32x32 pixels,
/// channel-planar R, G, B.
struct CifarOptions {
  std::size_t label_bytes = 1;
  std::size_t classes = 10;
  bool downscale = false;  // 2x2 average pooling to 16x16
  std::size_t limit = 0;   // keep only the first `limit` records (0 = all)
};

/// Throws FormatError naming the byte offset of a truncated record and
/// ConfigError for a label outside [0, classes).
Split parse_cifar(const std::vector<std::uint8_t>& bytes, const CifarOptions& opts);
Split read_cifar(const std::string& path, const CifarOptions& opts);
/// Pixels are quantised to round(255 * v); 32x32x3 images only.
std::vector<std::uint8_t> encode_cifar(const Split& split, std::size_t label_bytes = 1);
void write_cifar(const std::string& path, const Split& split, std::size_t label_bytes = 1);

// ------------------------------------------------------------ synthetic

/// Class-structured images: each class owns a prototype built from two
/// coloured sinusoidal gratings. A sample is its class prototype at a random
/// phase, blended with a random other class by up to `mix`, plus Gaussian
/// pixel noise. A fraction `label_noise` of training labels is resampled
/// uniformly.
struct SyntheticSpec {
  std::size_t classes = 10;
  std::size_t train = 2000;
  std::size_t test = 1000;
  std::size_t size = 16;
  std::size_t channels = 3;
  double noise = 0.15;
  double mix = 0.45;
  double label_noise = 0.1;
  std::uint64_t seed = 1;
};

DatasetHandle synthetic_dataset(const SyntheticSpec& spec);

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | cifar
  std::string train_path;
  std::string test_path;
  CifarOptions cifar;
  std::size_t test_limit = 0;
  SyntheticSpec synthetic;
};

DatasetHandle ingest_dataset(const DatasetSpec& spec);

}  // namespace orthokd
