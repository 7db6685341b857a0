#include "orthokd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "orthokd/errors.hpp"

namespace orthokd {

namespace {

constexpr char kMagic[8] = {'O', 'K', 'D', 'C', 'K', 'P', 'T', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_unsigned_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void str64(const std::string& s) {
    le(static_cast<std::uint64_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(pos_) +
                        " while reading " + what);
    }
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }
  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

void encode_array(Writer& w, const NamedArray& a) {
  w.str32(a.name);
  w.le(static_cast<std::uint8_t>(a.role));
  w.le(static_cast<std::uint32_t>(a.value.rank()));
  for (auto d : a.value.shape()) w.le(static_cast<std::uint64_t>(d));
  for (double v : a.value.values()) w.f64(v);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.le(ckpt.step);
  w.le(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.str32(k);
    w.str64(v);
  }
  w.le(static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) encode_array(w, a);
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(sizeof(kMagic), "magic");
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint: bad magic at byte offset 0");
  }
  r.str(sizeof(kMagic), "magic");
  Checkpoint ckpt;
  ckpt.step = r.le<std::uint64_t>("step");
  const auto meta_count = r.le<std::uint32_t>("metadata count");
  for (std::uint32_t i = 0; i < meta_count; ++i) {
    std::string key = r.str(r.le<std::uint32_t>("metadata key length"), "metadata key");
    std::string value = r.str(r.le<std::uint64_t>("metadata value length"), "metadata value");
    ckpt.meta.emplace(std::move(key), std::move(value));
  }
  const auto count = r.le<std::uint32_t>("array count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str(r.le<std::uint32_t>("array name length"), "array name");
    const auto role = r.le<std::uint8_t>("array role");
    if (role > 3) {
      throw FormatError("invalid array role " + std::to_string(role) + " before byte offset " +
                        std::to_string(r.pos()));
    }
    a.role = static_cast<ArrayRole>(role);
    const auto rank = r.le<std::uint32_t>("array rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.le<std::uint64_t>("array dims"));
      numel *= d;
    }
    r.need(numel * 8, "array data");
    std::vector<double> values(numel);
    for (auto& v : values) v = r.f64("array data");
    a.value = Tensor(std::move(shape), std::move(values));
    ckpt.arrays.push_back(std::move(a));
  }
  if (!r.done()) {
    throw FormatError("trailing bytes after checkpoint at byte offset " + std::to_string(r.pos()));
  }
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError("failed writing '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Checkpoint make_checkpoint(const ModelGraph& model, const Sgd* optimizer, const WeightMask* mask) {
  Checkpoint c;
  c.meta["arch"] = model.arch;
  c.meta["classes"] = std::to_string(model.num_classes);
  c.meta["input_channels"] = std::to_string(model.input_channels);
  c.meta["input_size"] = std::to_string(model.input_size);
  c.meta["layers"] = serialize_layers(model.layers);
  for (const auto& p : model.params) c.arrays.push_back({p.name(), ArrayRole::Parameter, p.value()});
  for (const auto& [name, st] : model.bn_state) {
    c.arrays.push_back({name + ".running_mean", ArrayRole::Buffer, st.running_mean});
    c.arrays.push_back({name + ".running_var", ArrayRole::Buffer, st.running_var});
  }
  if (optimizer) {
    c.step = optimizer->step_index();
    for (const auto& [name, v] : optimizer->momentum_buffers()) {
      if (!v.empty()) c.arrays.push_back({name, ArrayRole::Momentum, v});
    }
  }
  if (mask) {
    for (const auto& [name, keep] : *mask) {
      Tensor t({keep.size()});
      for (std::size_t i = 0; i < keep.size(); ++i) t[i] = keep[i] ? 1.0 : 0.0;
      c.arrays.push_back({name, ArrayRole::Mask, std::move(t)});
    }
  }
  return c;
}

ModelGraph model_from_checkpoint(const Checkpoint& ckpt) {
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = ckpt.meta.find(k);
    if (it == ckpt.meta.end()) throw FormatError("checkpoint metadata lacks '" + k + "'");
    return it->second;
  };
  ModelGraph m;
  m.arch = get("arch");
  m.num_classes = std::stoul(get("classes"));
  m.input_channels = std::stoul(get("input_channels"));
  m.input_size = std::stoul(get("input_size"));
  m.layers = parse_layers(get("layers"));
  for (const auto& a : ckpt.arrays) {
    if (a.role == ArrayRole::Parameter) m.params.emplace_back(a.value, true, a.name);
  }
  for (const auto& l : m.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    BatchNormState st;
    for (const auto& a : ckpt.arrays) {
      if (a.role != ArrayRole::Buffer) continue;
      if (a.name == l.name + ".running_mean") st.running_mean = a.value;
      if (a.name == l.name + ".running_var") st.running_var = a.value;
    }
    m.bn_state.emplace(l.name, std::move(st));
  }
  m.validate();
  return m;
}

WeightMask mask_from_checkpoint(const Checkpoint& ckpt) {
  WeightMask mask;
  for (const auto& a : ckpt.arrays) {
    if (a.role != ArrayRole::Mask) continue;
    std::vector<bool> keep(a.value.numel());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = a.value[i] != 0.0;
    mask.emplace(a.name, std::move(keep));
  }
  return mask;
}

void restore_optimizer(const Checkpoint& ckpt, Sgd& optimizer) {
  optimizer.set_step_index(ckpt.step);
  auto& buffers = optimizer.momentum_buffers();
  buffers.clear();
  for (const auto& a : ckpt.arrays) {
    if (a.role == ArrayRole::Momentum) buffers[a.name] = a.value;
  }
}

std::uint64_t model_digest(const ModelGraph& model) {
  Checkpoint c = make_checkpoint(model);
  c.meta.clear();
  const auto bytes = encode_checkpoint(c);
  std::uint64_t h = 14695981039346656037ull;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex_digest(std::uint64_t d) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << d;
  return os.str();
}

}  // namespace orthokd
