#include "orthokd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "orthokd/errors.hpp"

namespace orthokd {

void DatasetHandle::compute_normalization() {
  const std::size_t c = channels(), n = train.size();
  const std::size_t plane = image_size() * image_size();
  mean.assign(c, 0.0);
  stddev.assign(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = train.images.data() + (i * c + k) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        s += p[j];
        ss += p[j] * p[j];
      }
    }
    const double cnt = static_cast<double>(n * plane);
    mean[k] = s / cnt;
    stddev[k] = std::sqrt(std::max(ss / cnt - mean[k] * mean[k], 0.0));
    if (stddev[k] < 1e-8) stddev[k] = 1.0;
  }
}

Tensor DatasetHandle::normalize(const Tensor& raw) const {
  if (raw.rank() != 4 || raw.dim(1) != mean.size()) {
    throw ShapeError("normalize: expected NCHW with " + std::to_string(mean.size()) + " channels");
  }
  Tensor out = raw;
  const std::size_t c = raw.dim(1), plane = raw.dim(2) * raw.dim(3);
  for (std::size_t i = 0; i < raw.dim(0); ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double* p = out.data() + (i * c + k) * plane;
      for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - mean[k]) / stddev[k];
    }
  return out;
}

Tensor DatasetHandle::gather(const Split& split, std::span<const std::size_t> indices) const {
  Shape s = split.images.shape();
  const std::size_t per = split.images.numel() / s[0];
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = split.images.data() + indices[i] * per;
    std::copy(src, src + per, out.data() + i * per);
  }
  return out;
}

std::vector<int> DatasetHandle::gather_labels(const Split& split,
                                              std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = split.labels.at(indices[i]);
  return out;
}

void DatasetHandle::validate() const {
  for (const Split* s : {&train, &test}) {
    if (s->images.rank() != 4 || s->images.dim(0) != s->labels.size()) {
      throw ShapeError("dataset split: images and labels disagree");
    }
    for (int y : s->labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= classes) {
        throw ConfigError("dataset label " + std::to_string(y) + " outside [0, " +
                          std::to_string(classes) + ")");
      }
    }
  }
  if (train.images.shape().size() == 4 && test.images.shape().size() == 4 &&
      (train.images.dim(1) != test.images.dim(1) || train.images.dim(2) != test.images.dim(2))) {
    throw ShapeError("dataset: train and test image shapes differ");
  }
}

// ---------------------------------------------------------- CIFAR binary

namespace {
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
}  // namespace

Split parse_cifar(const std::vector<std::uint8_t>& bytes, const CifarOptions& opts) {
  if (opts.label_bytes != 1 && opts.label_bytes != 2) {
    throw ConfigError("CIFAR label_bytes must be 1 or 2");
  }
  const std::size_t rec = opts.label_bytes + kCifarPixels;
  std::size_t count = bytes.size() / rec;
  if (bytes.size() % rec != 0) {
    throw FormatError("CIFAR file truncated: record " + std::to_string(count) +
                      " starts at byte offset " + std::to_string(count * rec) + " but only " +
                      std::to_string(bytes.size() - count * rec) + " of " + std::to_string(rec) +
                      " bytes remain");
  }
  if (opts.limit > 0) count = std::min(count, opts.limit);
  const std::size_t side = opts.downscale ? kCifarSide / 2 : kCifarSide;
  Split s;
  s.images = Tensor({count, 3, side, side});
  s.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* r = bytes.data() + i * rec;
    const int label = r[opts.label_bytes - 1];
    if (static_cast<std::size_t>(label) >= opts.classes) {
      throw ConfigError("CIFAR label " + std::to_string(label) + " at byte offset " +
                        std::to_string(i * rec + opts.label_bytes - 1) + " outside [0, " +
                        std::to_string(opts.classes) + ")");
    }
    s.labels[i] = label;
    const std::uint8_t* px = r + opts.label_bytes;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const std::uint8_t* plane = px + k * kCifarSide * kCifarSide;
          double v;
          if (opts.downscale) {
            const std::size_t y2 = 2 * y, x2 = 2 * x;
            v = (plane[y2 * kCifarSide + x2] + plane[y2 * kCifarSide + x2 + 1] +
                 plane[(y2 + 1) * kCifarSide + x2] + plane[(y2 + 1) * kCifarSide + x2 + 1]) /
                (4.0 * 255.0);
          } else {
            v = plane[y * kCifarSide + x] / 255.0;
          }
          s.images.at(i, k, y, x) = v;
        }
  }
  return s;
}

Split read_cifar(const std::string& path, const CifarOptions& opts) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open dataset file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return parse_cifar(bytes, opts);
}

std::vector<std::uint8_t> encode_cifar(const Split& split, std::size_t label_bytes) {
  const Shape& s = split.images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != kCifarSide || s[3] != kCifarSide) {
    throw ShapeError("encode_cifar: images must be [N, 3, 32, 32]");
  }
  if (label_bytes != 1 && label_bytes != 2) throw ConfigError("CIFAR label_bytes must be 1 or 2");
  std::vector<std::uint8_t> out;
  out.reserve(split.size() * (label_bytes + kCifarPixels));
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto y = static_cast<std::uint8_t>(split.labels[i]);
    if (label_bytes == 2) out.push_back(0);
    out.push_back(y);
    for (std::size_t j = 0; j < kCifarPixels; ++j) {
      const double v = std::clamp(split.images[i * kCifarPixels + j], 0.0, 1.0);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  }
  return out;
}

void write_cifar(const std::string& path, const Split& split, std::size_t label_bytes) {
  const auto bytes = encode_cifar(split, label_bytes);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ------------------------------------------------------------ synthetic

namespace {

struct Grating {
  double fx, fy, phase;
  std::vector<double> colour;  // per channel
};

Split synth_split(const std::vector<std::vector<Grating>>& protos, std::size_t n,
                  const SyntheticSpec& spec, double label_noise, std::mt19937_64& rng) {
  const std::size_t c = spec.channels, side = spec.size;
  std::uniform_int_distribution<std::size_t> cls(0, spec.classes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  Split s;
  s.images = Tensor({n, c, side, side});
  s.labels.resize(n);
  auto render = [&](std::size_t k, double tx, double ty, std::size_t ch, std::size_t y,
                    std::size_t x) {
    double v = 0.0;
    for (const auto& g : protos[k]) {
      const double arg = two_pi * (g.fx * (static_cast<double>(x) + tx) +
                                   g.fy * (static_cast<double>(y) + ty)) /
                             static_cast<double>(side) +
                         g.phase;
      v += g.colour[ch] * std::sin(arg);
    }
    return v;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y0 = cls(rng);
    std::size_t other = cls(rng);
    if (other == y0) other = (other + 1) % spec.classes;
    const double m = spec.mix * unit(rng);
    const double amp = 0.8 + 0.4 * unit(rng);
    const double tx = side * unit(rng), ty = side * unit(rng);
    const double tx2 = side * unit(rng), ty2 = side * unit(rng);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) {
          const double v = (1.0 - m) * render(y0, tx, ty, ch, y, x) +
                           m * render(other, tx2, ty2, ch, y, x);
          s.images.at(i, ch, y, x) =
              std::clamp(0.5 + 0.18 * amp * v + spec.noise * gauss(rng), 0.0, 1.0);
        }
    int label = static_cast<int>(y0);
    if (unit(rng) < label_noise) label = static_cast<int>(cls(rng));
    s.labels[i] = label;
  }
  return s;
}

}  // namespace

DatasetHandle synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.classes < 2 || spec.train == 0 || spec.test == 0 || spec.size < 4 || spec.channels == 0) {
    throw ConfigError("synthetic dataset: need >= 2 classes, non-empty splits, size >= 4");
  }
  if (spec.mix < 0.0 || spec.mix > 0.5 || spec.label_noise < 0.0 || spec.label_noise > 1.0 ||
      spec.noise < 0.0) {
    throw ConfigError("synthetic dataset: mix must lie in [0,0.5], label_noise in [0,1], noise >= 0");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> freq(-3, 3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<Grating>> protos(spec.classes);
  for (auto& p : protos) {
    for (int j = 0; j < 2; ++j) {
      Grating g;
      do {
        g.fx = freq(rng);
        g.fy = freq(rng);
      } while (g.fx == 0 && g.fy == 0);
      g.phase = 2.0 * std::numbers::pi * unit(rng);
      g.colour.resize(spec.channels);
      for (auto& w : g.colour) w = 2.0 * unit(rng) - 1.0;
      p.push_back(std::move(g));
    }
  }
  DatasetHandle d;
  d.classes = spec.classes;
  d.train = synth_split(protos, spec.train, spec, spec.label_noise, rng);
  d.test = synth_split(protos, spec.test, spec, 0.0, rng);
  d.compute_normalization();
  d.validate();
  return d;
}

DatasetHandle ingest_dataset(const DatasetSpec& spec) {
  if (spec.source == "synthetic") return synthetic_dataset(spec.synthetic);
  if (spec.source != "cifar") {
    throw ConfigError("data.source must be synthetic or cifar (got '" + spec.source + "')");
  }
  if (spec.train_path.empty() || spec.test_path.empty()) {
    throw ConfigError("data.train_path and data.test_path are required for CIFAR input");
  }
  DatasetHandle d;
  d.classes = spec.cifar.classes;
  d.train = read_cifar(spec.train_path, spec.cifar);
  CifarOptions test_opts = spec.cifar;
  test_opts.limit = spec.test_limit;
  d.test = read_cifar(spec.test_path, test_opts);
  if (d.train.size() == 0 || d.test.size() == 0) throw ConfigError("CIFAR input has an empty split");
  d.compute_normalization();
  d.validate();
  return d;
}

}  // namespace orthokd
