#pragma once

// Checkpoint container:
//   "MHFC" | u32 version | u64 header length | JSON header | tensor blobs
// Integers and tensor elements are little-endian. The header lists every
// tensor as {name, dtype, shape, offset, length}, offsets relative to the
// first blob byte and contiguous in directory order.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mhformer/config.hpp"
#include "mhformer/params.hpp"
#include "mhformer/training.hpp"

namespace mhf {

inline constexpr char kCheckpointMagic[4] = {'M', 'H', 'F', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  DType dtype = DType::float32;
  Shape shape;
  std::vector<std::uint8_t> bytes;  // little-endian elements
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;   // optimizer steps taken
  double loss = std::nan("");
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(p[i]) << (8 * i);
  return v;
}

template <typename T>
using bits_t = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
std::vector<std::uint8_t> encode(std::span<const T> data) {
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * sizeof(T));
  for (T v : data) {
    bits_t<T> b;
    std::memcpy(&b, &v, sizeof(T));
    put_le(out, b);
  }
  return out;
}

template <typename T>
std::vector<T> decode(const std::vector<std::uint8_t>& bytes) {
  std::vector<T> out(bytes.size() / sizeof(T));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto b = get_le<bits_t<T>>(bytes.data() + i * sizeof(T));
    std::memcpy(&out[i], &b, sizeof(T));
  }
  return out;
}

inline std::size_t dtype_size(DType d) { return d == DType::float32 ? 4 : 8; }

}  // namespace detail

template <typename T>
CheckpointTensor to_checkpoint_tensor(const std::string& name, const Tensor<T>& t) {
  return {name, dtype_of<T>(), t.shape(), detail::encode<T>(t.data())};
}

template <typename T>
Tensor<T> from_checkpoint_tensor(const CheckpointTensor& c) {
  if (c.dtype != dtype_of<T>())
    throw ValidationError("checkpoint tensor '" + c.name + "' is " + std::string(dtype_name(c.dtype)) +
                          ", expected " + std::string(dtype_name(dtype_of<T>())));
  return Tensor<T>(c.shape, detail::decode<T>(c.bytes));
}

/// Parameters followed by optimizer moments (optim.m.*, optim.v.*, optim.vmax.*).
template <typename T>
Checkpoint make_checkpoint(const TrainState<T>& st, const ModelConfig& cfg,
                           const TrainConfig& tc) {
  Checkpoint ck;
  ck.model = cfg;
  ck.train = tc;
  ck.epoch = st.epoch;
  ck.step = st.optim.steps();
  ck.loss = st.last_loss;
  for (const auto& [name, t] : st.params.entries())
    ck.tensors.push_back(to_checkpoint_tensor(name, t));
  for (const char* kind : {"m", "v", "vmax"})
    for (const auto& [name, mo] : st.optim.moments()) {
      const std::string k(kind);
      const Tensor<T>& t = k == "m" ? mo.m : k == "v" ? mo.v : mo.vmax;
      ck.tensors.push_back(to_checkpoint_tensor("optim." + k + "." + name, t));
    }
  return ck;
}

template <typename T>
TrainState<T> restore_state(const Checkpoint& ck) {
  if (ck.model.dtype != dtype_of<T>())
    throw ValidationError("checkpoint model dtype is " + std::string(dtype_name(ck.model.dtype)));
  TrainState<T> st;
  for (const auto& spec : parameter_layout(ck.model)) {
    const CheckpointTensor* c = ck.find(spec.name);
    if (!c) throw ValidationError("checkpoint is missing parameter '" + spec.name + "'");
    Tensor<T> t = from_checkpoint_tensor<T>(*c);
    if (t.shape() != spec.shape)
      throw ShapeError("checkpoint parameter '" + spec.name + "' has shape " +
                       shape_str(t.shape()) + ", config expects " + shape_str(spec.shape));
    st.params.add(spec.name, std::move(t));
  }
  auto& mom = st.optim.moments();
  for (const auto& c : ck.tensors) {
    if (c.name.rfind("optim.", 0) != 0) continue;
    const auto dot = c.name.find('.', 6);
    const std::string kind = c.name.substr(6, dot - 6), name = c.name.substr(dot + 1);
    if (!st.params.contains(name))
      throw ValidationError("optimizer state for unknown parameter '" + name + "'");
    Moments<T>& m = mom[name];
    Tensor<T> t = from_checkpoint_tensor<T>(c);
    if (t.shape() != st.params.at(name).shape())
      throw ShapeError("optimizer state '" + c.name + "' has the wrong shape");
    if (kind == "m") m.m = t;
    else if (kind == "v") m.v = t;
    else if (kind == "vmax") m.vmax = t;
    else throw ValidationError("unknown optimizer tensor '" + c.name + "'");
  }
  for (const auto& [name, m] : mom)
    if (!m.m.defined() || !m.v.defined() || !m.vmax.defined())
      throw ValidationError("incomplete optimizer state for '" + name + "'");
  st.optim.configure(ck.train.beta1, ck.train.beta2, ck.train.adam_eps);
  st.optim.set_steps(ck.step);
  st.epoch = ck.epoch;
  st.last_loss = ck.loss;
  return st;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
  json dir = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (t.bytes.size() != shape_numel(t.shape) * detail::dtype_size(t.dtype))
      throw ShapeError("checkpoint tensor '" + t.name + "' byte length does not match its shape");
    dir.push_back({{"name", t.name},
                   {"dtype", std::string(dtype_name(t.dtype))},
                   {"shape", t.shape},
                   {"offset", offset},
                   {"length", t.bytes.size()}});
    offset += t.bytes.size();
  }
  json header = {{"format", "MHFC"},
                 {"model", ck.model},
                 {"train", ck.train},
                 {"epoch", ck.epoch},
                 {"step", ck.step},
                 {"loss", std::isfinite(ck.loss) ? json(ck.loss) : json(nullptr)},
                 {"tensors", std::move(dir)}};
  const std::string h = header.dump();
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_le(out, kCheckpointVersion);
  detail::put_le(out, std::uint64_t(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& t : ck.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& buf) {
  auto bad = [](const std::string& m) { throw ParseError("checkpoint: " + m); };
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    bad("missing MHFC magic");
  const auto version = detail::get_le<std::uint32_t>(buf.data() + 4);
  if (version != kCheckpointVersion) bad("unsupported version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(buf.data() + 8);
  if (hlen > buf.size() - 16) bad("header length exceeds file size");
  json header;
  try {
    header = json::parse(buf.begin() + 16, buf.begin() + 16 + std::ptrdiff_t(hlen));
  } catch (const json::exception& e) {
    bad(std::string("malformed header: ") + e.what());
  }
  Checkpoint ck;
  try {
    header.at("model").get_to(ck.model);
    header.at("train").get_to(ck.train);
    ck.epoch = header.at("epoch").get<std::uint64_t>();
    ck.step = header.at("step").get<std::uint64_t>();
    const json& loss = header.at("loss");
    ck.loss = loss.is_null() ? std::nan("") : loss.get<double>();
    const std::size_t base = 16 + hlen;
    std::uint64_t expect = 0;
    for (const auto& e : header.at("tensors")) {
      CheckpointTensor t;
      t.name = e.at("name").get<std::string>();
      t.dtype = parse_dtype(e.at("dtype").get<std::string>());
      t.shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("length").get<std::uint64_t>();
      if (off != expect) bad("tensor '" + t.name + "' is not contiguous");
      if (len != shape_numel(t.shape) * detail::dtype_size(t.dtype))
        bad("tensor '" + t.name + "' length does not match its shape");
      if (base + off + len > buf.size()) bad("tensor '" + t.name + "' runs past end of file");
      t.bytes.assign(buf.begin() + std::ptrdiff_t(base + off),
                     buf.begin() + std::ptrdiff_t(base + off + len));
      expect = off + len;
      ck.tensors.push_back(std::move(t));
    }
    if (base + expect != buf.size()) bad("file size does not match the tensor directory");
  } catch (const json::exception& e) {
    bad(std::string("bad header field: ") + e.what());
  }
  ck.model.validate();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = serialize_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

}  // namespace mhf
