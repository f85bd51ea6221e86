#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

// Layout (little-endian):
//   "ZAPCKPT1" | u32 tensor count | per tensor: u16 name length, name,
//   u8 rank, u32 dims..., f32 payload
//   [ "OPTSTAT1" | u8 kind | f64 lr, momentum, beta1, beta2, eps | u8 keep_state | u64 t |
//     u32 buffer count | per buffer: u32 length, f32 payload ]
//   [ "CFGJSON1" | u32 length | UTF-8 JSON ]
// For SGD the buffers are the momentum buffers; for Adam all m buffers
// followed by all v buffers (u32 buffer count covers both).
inline constexpr std::array<char, 8> kCheckpointMagic{'Z', 'A', 'P', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::array<char, 8> kOptStateMagic{'O', 'P', 'T', 'S', 'T', 'A', 'T', '1'};
inline constexpr std::array<char, 8> kConfigMagic{'C', 'F', 'G', 'J', 'S', 'O', 'N', '1'};

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct OptimizerSnapshot {
  OptimizerSpec spec;
  std::uint64_t t = 0;
  std::vector<std::vector<float>> buffers;
  friend bool operator==(const OptimizerSnapshot&, const OptimizerSnapshot&) = default;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::optional<OptimizerSnapshot> optimizer;
  std::optional<std::string> config_json;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
inline void put_u16(std::string& out, std::uint16_t v) {
  put_u8(out, static_cast<std::uint8_t>(v & 0xff));
  put_u8(out, static_cast<std::uint8_t>(v >> 8));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : s_(bytes) {}
  bool done() const { return pos_ == s_.size(); }
  std::size_t remaining() const { return s_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw FormatError(std::string("truncated checkpoint: ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(s_[pos_++]);
  }
  std::uint16_t u16(const char* what) {
    const auto lo = u8(what);
    return static_cast<std::uint16_t>(lo | (u8(what) << 8));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    return get_u32(s_, pos_);
  }
  std::uint64_t u64(const char* what) {
    const std::uint64_t lo = u32(what);
    return lo | (static_cast<std::uint64_t>(u32(what)) << 32);
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool peek_magic(const std::array<char, 8>& m) const {
    return remaining() >= 8 && std::memcmp(s_.data() + pos_, m.data(), 8) == 0;
  }
  std::vector<float> floats(std::size_t n, const char* what) {
    if (n > remaining() / 4) throw FormatError(std::string("truncated checkpoint: ") + what);
    std::vector<float> out(n);
    for (auto& v : out) v = f32(what);
    return out;
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

inline void put_floats(std::string& out, std::span<const float> v) {
  for (float x : v) put_f32(out, x);
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw FormatError("tensor name too long: " + name.substr(0, 32));
    if (t.rank() > 0xff) throw FormatError("tensor rank too large");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_u8(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_floats(out, t.data());
  }
  if (ck.optimizer) {
    const auto& o = *ck.optimizer;
    out.append(kOptStateMagic.begin(), kOptStateMagic.end());
    detail::put_u8(out, o.spec.kind == OptimizerKind::sgd ? 0 : 1);
    detail::put_f64(out, o.spec.lr);
    detail::put_f64(out, o.spec.momentum);
    detail::put_f64(out, o.spec.beta1);
    detail::put_f64(out, o.spec.beta2);
    detail::put_f64(out, o.spec.eps);
    detail::put_u8(out, o.spec.keep_state ? 1 : 0);
    detail::put_u64(out, o.t);
    detail::put_u32(out, static_cast<std::uint32_t>(o.buffers.size()));
    for (const auto& b : o.buffers) {
      detail::put_u32(out, static_cast<std::uint32_t>(b.size()));
      detail::put_floats(out, b);
    }
  }
  if (ck.config_json) {
    out.append(kConfigMagic.begin(), kConfigMagic.end());
    detail::put_u32(out, static_cast<std::uint32_t>(ck.config_json->size()));
    out += *ck.config_json;
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  const std::string magic = r.bytes(std::min<std::size_t>(8, r.remaining()), "magic");
  if (magic.size() < 8 || magic.compare(0, 7, "ZAPCKPT") != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  if (magic[7] != kCheckpointMagic[7]) {
    throw FormatError(std::string("unsupported checkpoint version '") + magic[7] + "'");
  }
  Checkpoint ck;
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    nt.name = r.bytes(r.u16("name length"), "name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32("dims");
      if (d == 0) throw FormatError("tensor '" + nt.name + "' has a zero dimension");
    }
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d > r.remaining() / 4 / n) throw FormatError("truncated checkpoint: payload of " + nt.name);
      n *= d;
    }
    auto payload = r.floats(n, "payload");
    nt.tensor = Tensor<float>(std::move(shape), std::move(payload));
    ck.tensors.push_back(std::move(nt));
  }
  if (r.peek_magic(kOptStateMagic)) {
    r.bytes(8, "state magic");
    OptimizerSnapshot o;
    const std::uint8_t kind = r.u8("optimizer kind");
    if (kind > 1) throw FormatError("unknown optimizer kind " + std::to_string(kind));
    o.spec.kind = kind == 0 ? OptimizerKind::sgd : OptimizerKind::adam;
    o.spec.lr = r.f64("lr");
    o.spec.momentum = r.f64("momentum");
    o.spec.beta1 = r.f64("beta1");
    o.spec.beta2 = r.f64("beta2");
    o.spec.eps = r.f64("eps");
    const std::uint8_t keep = r.u8("keep_state");
    if (keep > 1) throw FormatError("bad keep_state flag");
    o.spec.keep_state = keep == 1;
    o.t = r.u64("step count");
    const std::uint32_t nbuf = r.u32("buffer count");
    for (std::uint32_t i = 0; i < nbuf; ++i) o.buffers.push_back(r.floats(r.u32("buffer length"), "buffer"));
    ck.optimizer = std::move(o);
  }
  if (r.peek_magic(kConfigMagic)) {
    r.bytes(8, "config magic");
    ck.config_json = r.bytes(r.u32("config length"), "config");
  }
  if (!r.done()) throw FormatError("unexpected trailing bytes in checkpoint");
  return ck;
}

/// Writes atomically, creating missing parent directories.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

/// Parameters in registry order plus optional optimizer state and config.
inline Checkpoint make_checkpoint(const ConvNet<float>& model, const Optimizer<float>* opt = nullptr,
                                  std::optional<std::string> config_json = std::nullopt) {
  Checkpoint ck;
  const auto names = ConvNet<float>::parameter_names();
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> t(params[i]->shape(), params[i]->storage());
    ck.tensors.push_back({names[i], std::move(t)});
  }
  if (opt) {
    OptimizerSnapshot o;
    o.spec = opt->spec();
    std::visit(
        [&](const auto& s) {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, SgdState<float>>) {
            o.buffers = s.b;
          } else {
            o.t = s.t;
            o.buffers = s.m;
            o.buffers.resize(params.size());
            auto v = s.v;
            v.resize(params.size());
            o.buffers.insert(o.buffers.end(), v.begin(), v.end());
          }
        },
        opt->state());
    if (opt->spec().kind == OptimizerKind::sgd) o.buffers.resize(params.size());
    ck.optimizer = std::move(o);
  }
  ck.config_json = std::move(config_json);
  return ck;
}

/// Rebuilds a model of the given architecture from checkpoint tensors; every
/// parameter must be present with the expected shape.
inline ConvNet<float> model_from_checkpoint(const Checkpoint& ck, ModelDims dims, InitSpec init = {}) {
  const NamedTensor* fc = nullptr;
  for (const auto& t : ck.tensors)
    if (t.name == "fc.weight") fc = &t;
  if (!fc || fc->tensor.rank() != 2) throw FormatError("checkpoint has no 2-D fc.weight");
  dims.n_classes = fc->tensor.dim(0);
  ConvNet<float> model(dims, init, 0);
  const auto names = ConvNet<float>::parameter_names();
  auto params = model.parameters();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const NamedTensor* found = nullptr;
    for (const auto& t : ck.tensors)
      if (t.name == names[i]) found = &t;
    if (!found) throw FormatError("checkpoint is missing " + names[i]);
    if (found->tensor.shape() != params[i]->shape()) {
      throw FormatError(names[i] + " has shape " + shape_str(found->tensor.shape()) +
                        ", model expects " + shape_str(params[i]->shape()));
    }
    std::copy(found->tensor.data().begin(), found->tensor.data().end(), params[i]->data().begin());
  }
  return model;
}

/// Optimizer restored from a snapshot taken for `n_params` parameters.
inline Optimizer<float> optimizer_from_snapshot(const OptimizerSnapshot& o, std::size_t n_params) {
  if (o.spec.kind == OptimizerKind::sgd) {
    SgdState<float> s{o.spec.lr, o.spec.momentum, o.buffers};
    s.b.resize(n_params);
    return Optimizer<float>(o.spec, std::move(s));
  }
  if (o.buffers.size() != 2 * n_params) {
    throw FormatError("optimizer snapshot has " + std::to_string(o.buffers.size()) +
                      " buffers, expected " + std::to_string(2 * n_params));
  }
  AdamState<float> s;
  s.lr = o.spec.lr;
  s.beta1 = o.spec.beta1;
  s.beta2 = o.spec.beta2;
  s.eps = o.spec.eps;
  s.t = o.t;
  s.m.assign(o.buffers.begin(), o.buffers.begin() + static_cast<std::ptrdiff_t>(n_params));
  s.v.assign(o.buffers.begin() + static_cast<std::ptrdiff_t>(n_params), o.buffers.end());
  return Optimizer<float>(o.spec, std::move(s));
}

}  // namespace zapnet
