#pragma once

// QQQ1 tensor container.
//
//   bytes 0..3    "QQQ1"
//   bytes 4..11   header length L, unsigned 64-bit little-endian
//   bytes 12..    L bytes of UTF-8 JSON: {"metadata": {...}, "tensors": [...]}
//   data          starts at the first 64-byte boundary after the header;
//                 every tensor offset is relative to it and 64-byte aligned
//
// Tensor entries are {"name", "dtype", "shape", "offset", "nbytes"}. dtype is
// one of f32, f16, i8, i4p, all little-endian. i4p is the nibble layout of
// PackedInt4 and always has a 2-D shape [K, N] with the true (unpadded) K.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qqq/binary16.hpp"
#include "qqq/error.hpp"
#include "qqq/matrix.hpp"
#include "qqq/quantizer.hpp"

namespace qqq {

using Json = nlohmann::json;

inline constexpr std::string_view kCheckpointMagic = "QQQ1";
inline constexpr std::size_t kCheckpointAlign = 64;

enum class DType { F32, F16, I8, I4P };

inline std::string_view to_string(DType d) noexcept {
  switch (d) {
    case DType::F32: return "f32";
    case DType::F16: return "f16";
    case DType::I8: return "i8";
    case DType::I4P: return "i4p";
  }
  return "?";
}

inline DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::F32;
  if (s == "f16") return DType::F16;
  if (s == "i8") return DType::I8;
  if (s == "i4p") return DType::I4P;
  throw ParseError(ParseError::Kind::UnknownDtype, "unknown dtype '" + std::string(s) + "'");
}

struct Tensor {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;

  [[nodiscard]] std::uint64_t elements() const noexcept {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Payload size implied by dtype and shape.
inline std::uint64_t expected_nbytes(DType d, const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto v : shape) n *= v;
  switch (d) {
    case DType::F32: return 4 * n;
    case DType::F16: return 2 * n;
    case DType::I8: return n;
    case DType::I4P:
      if (shape.size() != 2) throw ParseError(ParseError::Kind::Malformed, "i4p tensors must be 2-D");
      return ((shape[0] + 1) / 2) * shape[1];
  }
  return 0;
}

namespace detail {

inline std::uint64_t align_up(std::uint64_t v) { return (v + kCheckpointAlign - 1) / kCheckpointAlign * kCheckpointAlign; }

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

inline std::uint16_t get_u16(const std::uint8_t* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

}  // namespace detail

class Checkpoint {
 public:
  Json metadata = Json::object();

  [[nodiscard]] const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

  [[nodiscard]] bool contains(std::string_view name) const { return find(name) != nullptr; }

  [[nodiscard]] const Tensor* find(std::string_view name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }

  [[nodiscard]] const Tensor& at(std::string_view name) const {
    if (const Tensor* t = find(name)) return *t;
    throw DataError("checkpoint has no tensor '" + std::string(name) + "'");
  }

  void add(Tensor t) {
    if (contains(t.name)) throw DataError("duplicate tensor '" + t.name + "'");
    if (t.bytes.size() != expected_nbytes(t.dtype, t.shape)) {
      throw DimensionError("tensor '" + t.name + "': payload size does not match its shape");
    }
    tensors_.push_back(std::move(t));
  }

  // Typed writers. Values are narrowed to the tensor dtype.

  void add_f32(const std::string& name, const DenseMatrix& m) { add(make_f32(name, {m.rows(), m.cols()}, m.storage())); }
  void add_f32(const std::string& name, const std::vector<double>& v) { add(make_f32(name, {v.size()}, v)); }

  void add_f16(const std::string& name, const Matrix<Binary16>& m) {
    Tensor t{name, DType::F16, {m.rows(), m.cols()}, {}};
    for (auto h : m.data()) detail::put_u16(t.bytes, h.bits);
    add(std::move(t));
  }

  void add_i8(const std::string& name, const Matrix<std::int8_t>& m) {
    Tensor t{name, DType::I8, {m.rows(), m.cols()}, {}};
    for (auto v : m.data()) t.bytes.push_back(std::uint8_t(v));
    add(std::move(t));
  }

  void add_i4p(const std::string& name, const PackedInt4& p) {
    check_packed(p);
    add({name, DType::I4P, {p.rows, p.cols}, p.bytes});
  }

  // Typed readers.

  [[nodiscard]] std::vector<double> f32_vector(std::string_view name) const {
    const Tensor& t = typed(name, DType::F32, 1);
    std::vector<double> out(t.shape[0]);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::bit_cast<float>(detail::get_u32(&t.bytes[4 * i]));
    return out;
  }

  [[nodiscard]] DenseMatrix f32_matrix(std::string_view name) const {
    const Tensor& t = typed(name, DType::F32, 2);
    DenseMatrix out(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < out.size(); ++i)
      out.data()[i] = std::bit_cast<float>(detail::get_u32(&t.bytes[4 * i]));
    return out;
  }

  [[nodiscard]] Matrix<Binary16> f16_matrix(std::string_view name) const {
    const Tensor& t = typed(name, DType::F16, 2);
    Matrix<Binary16> out(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = Binary16::from_bits(detail::get_u16(&t.bytes[2 * i]));
    return out;
  }

  [[nodiscard]] Matrix<std::int8_t> i8_matrix(std::string_view name) const {
    const Tensor& t = typed(name, DType::I8, 2);
    Matrix<std::int8_t> out(t.shape[0], t.shape[1]);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = static_cast<std::int8_t>(t.bytes[i]);
    return out;
  }

  [[nodiscard]] PackedInt4 i4p(std::string_view name) const {
    const Tensor& t = typed(name, DType::I4P, 2);
    PackedInt4 p{t.shape[0], t.shape[1], t.bytes};
    check_packed(p);
    return p;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

 private:
  static Tensor make_f32(const std::string& name, std::vector<std::uint64_t> shape, std::span<const double> v) {
    Tensor t{name, DType::F32, std::move(shape), {}};
    t.bytes.reserve(4 * v.size());
    for (double d : v) detail::put_u32(t.bytes, std::bit_cast<std::uint32_t>(static_cast<float>(d)));
    return t;
  }

  const Tensor& typed(std::string_view name, DType d, std::size_t rank) const {
    const Tensor& t = at(name);
    if (t.dtype != d || t.shape.size() != rank) {
      throw DataError("tensor '" + std::string(name) + "' is not a rank-" + std::to_string(rank) + " " +
                      std::string(to_string(d)) + " tensor");
    }
    return t;
  }

  std::vector<Tensor> tensors_;
};

/// Serialize. Output depends only on the checkpoint contents.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Json index = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors()) {
    index.push_back({{"name", t.name},
                     {"dtype", to_string(t.dtype)},
                     {"shape", t.shape},
                     {"offset", offset},
                     {"nbytes", t.bytes.size()}});
    offset = detail::align_up(offset + t.bytes.size());
  }
  const std::string header = Json{{"metadata", ck.metadata}, {"tensors", index}}.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(len >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  const std::uint64_t data_start = detail::align_up(out.size());
  out.resize(data_start, 0);
  for (const auto& t : ck.tensors()) {
    out.resize(detail::align_up(out.size()), 0);
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  }
  return out;
}

/// Checks the magic and length prefix and parses the JSON header. No tensor data is read.
inline Json checkpoint_header(std::span<const std::uint8_t> buf) {
  using K = ParseError::Kind;
  if (buf.size() < 4 || std::memcmp(buf.data(), kCheckpointMagic.data(), 4) != 0) {
    throw ParseError(K::BadMagic, "not a QQQ1 checkpoint (bad magic)");
  }
  if (buf.size() < 12) throw ParseError(K::Truncated, "file ends inside the header length");
  const std::uint64_t len = detail::get_u64(buf.data() + 4);
  if (len > buf.size() - 12) throw ParseError(K::Truncated, "header length exceeds file size");

  Json header;
  try {
    header = Json::parse(buf.begin() + 12, buf.begin() + 12 + std::ptrdiff_t(len));
  } catch (const Json::exception& e) {
    throw ParseError(K::Malformed, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw ParseError(K::Malformed, "header lacks a tensor index");
  }
  return header;
}

/// Parse. The whole header is validated before any tensor payload is copied.
inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> buf) {
  using K = ParseError::Kind;
  Json header = checkpoint_header(buf);
  const std::uint64_t len = detail::get_u64(buf.data() + 4);
  const std::uint64_t data_start = detail::align_up(12 + len);
  const std::uint64_t data_size = buf.size() > data_start ? buf.size() - data_start : 0;

  struct Entry {
    std::string name;
    DType dtype;
    std::vector<std::uint64_t> shape;
    std::uint64_t offset, nbytes;
  };
  std::vector<Entry> entries;
  try {
    for (const auto& j : header["tensors"]) {
      Entry e{j.at("name").get<std::string>(), parse_dtype(j.at("dtype").get<std::string>()),
              j.at("shape").get<std::vector<std::uint64_t>>(), j.at("offset").get<std::uint64_t>(),
              j.at("nbytes").get<std::uint64_t>()};
      if (e.nbytes != expected_nbytes(e.dtype, e.shape)) {
        throw ParseError(K::Malformed, "tensor '" + e.name + "': nbytes does not match shape");
      }
      if (e.offset % kCheckpointAlign != 0) {
        throw ParseError(K::Misaligned, "tensor '" + e.name + "' offset is not 64-byte aligned");
      }
      if (e.offset > data_size || e.nbytes > data_size - e.offset) {
        throw ParseError(K::Truncated, "tensor '" + e.name + "' extends past the end of the file");
      }
      entries.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    throw ParseError(K::Malformed, std::string("bad tensor entry: ") + e.what());
  }

  std::vector<const Entry*> order;
  for (const auto& e : entries) order.push_back(&e);
  std::sort(order.begin(), order.end(), [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i - 1]->offset + order[i - 1]->nbytes > order[i]->offset && order[i - 1]->nbytes > 0) {
      throw ParseError(K::Overlap, "tensors '" + order[i - 1]->name + "' and '" + order[i]->name + "' overlap");
    }
  }

  Checkpoint ck;
  ck.metadata = header.value("metadata", Json::object());
  for (const auto& e : entries) {
    const auto* p = buf.data() + data_start + e.offset;
    try {
      ck.add({e.name, e.dtype, e.shape, std::vector<std::uint8_t>(p, p + e.nbytes)});
    } catch (const Error& err) {
      throw ParseError(K::Malformed, err.what());
    }
  }
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw ParseError(ParseError::Kind::Io, "write to '" + path + "' failed");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError(ParseError::Kind::Io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace qqq
