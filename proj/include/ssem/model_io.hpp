#pragma once

// Binary model container (.ssem). Layout, all integers little-endian:
//
//   "SSEM" | u16 version | u16 reserved | u32 body_size | body | u32 crc32(body)
//
// The body is described byte by byte in docs/container_format.md. Writing is
// canonical: the same model always produces the same bytes.

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssem/model.hpp"

namespace ssem {

inline constexpr std::array<char, 4> kContainerMagic = {'S', 'S', 'E', 'M'};
inline constexpr std::uint16_t kContainerVersion = 1;

enum class LoadErrorKind { Io, Truncated, BadMagic, UnknownVersion, CrcMismatch, Malformed, ShapeChain };

inline std::string_view to_string(LoadErrorKind k) {
  switch (k) {
    case LoadErrorKind::Io: return "io";
    case LoadErrorKind::Truncated: return "truncated";
    case LoadErrorKind::BadMagic: return "bad-magic";
    case LoadErrorKind::UnknownVersion: return "unknown-version";
    case LoadErrorKind::CrcMismatch: return "crc-mismatch";
    case LoadErrorKind::Malformed: return "malformed";
    case LoadErrorKind::ShapeChain: return "shape-chain";
  }
  return "?";
}

class ModelIoError : public std::runtime_error {
 public:
  ModelIoError(LoadErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}
  LoadErrorKind kind() const { return kind_; }

 private:
  LoadErrorKind kind_;
};

namespace detail {

enum class MatrixEncoding : std::uint8_t { Dense = 0, Weight = 1, Block = 2, Unit = 3 };
enum class LayerRecordKind : std::uint8_t { Lstm = 0, Dense = 1 };

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v); }
  void u32(std::uint32_t v) { le(v); }
  void i16(std::int16_t v) { le(static_cast<std::uint16_t>(v)); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }

  /// Value at the width of `fmt` (8 or 16 bits).
  void code(std::int16_t v, QuantFormat fmt) {
    if (fmt.bits == 8) {
      u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(v)));
    } else {
      i16(v);
    }
  }
  void u16_list(const std::vector<std::uint16_t>& v) {
    for (auto x : v) u16(x);
  }

  std::size_t size() const { return buf_.size(); }
  void patch_u32(std::size_t at, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::int16_t code(QuantFormat fmt) {
    return fmt.bits == 8 ? static_cast<std::int16_t>(static_cast<std::int8_t>(u8())) : i16();
  }
  std::vector<std::uint16_t> u16_list(std::size_t n) {
    need(2 * n);
    std::vector<std::uint16_t> v(n);
    for (auto& x : v) x = u16();
    return v;
  }
  std::vector<std::int16_t> codes(std::size_t n, QuantFormat fmt) {
    need(n * (fmt.bits / 8));
    std::vector<std::int16_t> v(n);
    for (auto& x : v) x = code(fmt);
    return v;
  }

  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    if (p > data_.size()) throw ModelIoError(LoadErrorKind::Malformed, "offset beyond body");
    pos_ = p;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  void need(std::size_t n) const {
    if (n > remaining()) throw ModelIoError(LoadErrorKind::Malformed, "record runs past end of body");
  }

 private:
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t le(std::size_t n) {
    auto s = take(n);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < b.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(b.size() - off, 1u << 30));
    crc = ::crc32(crc, b.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::uint8_t format_code(QuantFormat f) { return static_cast<std::uint8_t>(f.bits); }

inline QuantFormat parse_format(std::uint8_t bits) {
  if (bits == 8) return kQ8;
  if (bits == 16) return kQ16;
  throw ModelIoError(LoadErrorKind::Malformed, "unsupported quantization width " + std::to_string(bits));
}

inline void write_matrix(ByteWriter& w, const Matrix& m) {
  const QuantFormat fmt = format_of(m);
  if (const auto* d = std::get_if<DenseMatrix>(&m)) {
    w.u8(static_cast<std::uint8_t>(MatrixEncoding::Dense));
    w.u8(0);
    w.u16(static_cast<std::uint16_t>(d->rows));
    w.u16(static_cast<std::uint16_t>(d->cols));
    for (auto v : d->values) w.code(v, fmt);
    return;
  }
  const auto& s = std::get<SparseMatrix>(m);
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        MatrixEncoding enc = MatrixEncoding::Weight;
        if constexpr (std::is_same_v<P, BlockPayload>) enc = MatrixEncoding::Block;
        if constexpr (std::is_same_v<P, UnitPayload>) enc = MatrixEncoding::Unit;
        w.u8(static_cast<std::uint8_t>(enc));
        w.u8(enc == MatrixEncoding::Block ? static_cast<std::uint8_t>(s.structure().block_w) : 0);
        w.u16(static_cast<std::uint16_t>(s.rows()));
        w.u16(static_cast<std::uint16_t>(s.cols()));
        if constexpr (std::is_same_v<P, WeightPayload>) {
          w.u32(static_cast<std::uint32_t>(p.values.size()));
          for (auto r : p.row_ptr) w.u32(r);
          w.u16_list(p.col_index);
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          w.u32(static_cast<std::uint32_t>(p.block_col.size()));
          for (auto r : p.row_ptr) w.u32(r);
          w.u16_list(p.block_col);
          w.u32(static_cast<std::uint32_t>(p.values.size()));
        } else {
          w.u16(static_cast<std::uint16_t>(p.kept_rows.size()));
          w.u16_list(p.kept_rows);
          w.u16(static_cast<std::uint16_t>(p.kept_cols.size()));
          w.u16_list(p.kept_cols);
        }
        for (auto v : p.values) w.code(v, fmt);
      },
      s.payload());
}

inline Matrix read_matrix(ByteReader& r, QuantFormat fmt) {
  const auto enc = r.u8();
  const auto block_w = r.u8();
  const std::size_t rows = r.u16();
  const std::size_t cols = r.u16();
  auto bad = [](const std::string& what) { return ModelIoError(LoadErrorKind::Malformed, what); };
  try {
    switch (static_cast<MatrixEncoding>(enc)) {
      case MatrixEncoding::Dense: {
        DenseMatrix d(rows, cols, fmt);
        d.values = r.codes(rows * cols, fmt);
        return d;
      }
      case MatrixEncoding::Weight: {
        WeightPayload p;
        const std::size_t nnz = r.u32();
        r.need(4 * (rows + 1) + 2 * nnz);
        p.row_ptr.resize(rows + 1);
        for (auto& x : p.row_ptr) x = r.u32();
        p.col_index = r.u16_list(nnz);
        p.values = r.codes(nnz, fmt);
        return SparseMatrix(rows, cols, fmt, SparsityStructure::weight(), std::move(p));
      }
      case MatrixEncoding::Block: {
        BlockPayload p;
        const std::size_t nblocks = r.u32();
        r.need(4 * (rows + 1) + 2 * nblocks);
        p.row_ptr.resize(rows + 1);
        for (auto& x : p.row_ptr) x = r.u32();
        p.block_col = r.u16_list(nblocks);
        const std::size_t nvals = r.u32();
        p.values = r.codes(nvals, fmt);
        if (block_w == 0) throw bad("block width of zero");
        return SparseMatrix(rows, cols, fmt, SparsityStructure::block(block_w), std::move(p));
      }
      case MatrixEncoding::Unit: {
        UnitPayload p;
        p.kept_rows = r.u16_list(r.u16());
        p.kept_cols = r.u16_list(r.u16());
        p.values = r.codes(p.kept_rows.size() * p.kept_cols.size(), fmt);
        return SparseMatrix(rows, cols, fmt, SparsityStructure::unit(), std::move(p));
      }
    }
  } catch (const ModelIoError&) {
    throw;
  } catch (const std::exception& e) {
    throw bad(std::string("invalid sparse payload: ") + e.what());
  }
  throw bad("unknown matrix encoding " + std::to_string(enc));
}

inline void write_kept(ByteWriter& w, const std::vector<std::uint16_t>& kept, std::size_t n) {
  const bool reduced = !kept.empty() && kept.size() != n;
  w.u16(static_cast<std::uint16_t>(reduced ? kept.size() : n));
  if (reduced) w.u16_list(kept);
}

inline std::vector<std::uint16_t> read_kept(ByteReader& r, std::size_t n) {
  const std::size_t count = r.u16();
  if (count == n) return {};
  if (count > n) throw ModelIoError(LoadErrorKind::Malformed, "kept count exceeds layer width");
  return r.u16_list(count);
}

inline void write_layer_header(ByteWriter& w, LayerRecordKind kind, Activation act, QuantFormat fmt, std::size_t inputs,
                               std::size_t units) {
  w.u8(static_cast<std::uint8_t>(kind));
  w.u8(static_cast<std::uint8_t>(act));
  w.u8(format_code(fmt));
  w.u8(0);
  w.u16(static_cast<std::uint16_t>(inputs));
  w.u16(static_cast<std::uint16_t>(units));
}

inline void write_lstm(ByteWriter& w, const LstmLayer& l) {
  write_layer_header(w, LayerRecordKind::Lstm, Activation::Tanh, l.format, l.inputs, l.units);
  write_kept(w, l.kept, l.units);
  for (const auto& g : l.gates) {
    for (auto b : g.bias) w.code(b, l.format);
  }
  for (std::size_t k = 0; k < 8; ++k) write_matrix(w, l.matrix(k));
}

inline void write_dense(ByteWriter& w, const DenseLayer& d) {
  write_layer_header(w, LayerRecordKind::Dense, d.activation, d.format, d.inputs, d.outputs);
  write_kept(w, d.kept, d.outputs);
  for (auto b : d.bias) w.code(b, d.format);
  write_matrix(w, d.weight);
}

struct LayerHeader {
  LayerRecordKind kind;
  Activation activation;
  QuantFormat format;
  std::size_t inputs;
  std::size_t units;
};

inline LayerHeader read_layer_header(ByteReader& r) {
  LayerHeader h{};
  const auto kind = r.u8();
  const auto act = r.u8();
  if (kind > 1) throw ModelIoError(LoadErrorKind::Malformed, "unknown layer kind " + std::to_string(kind));
  if (act > 1) throw ModelIoError(LoadErrorKind::Malformed, "unknown activation " + std::to_string(act));
  h.kind = static_cast<LayerRecordKind>(kind);
  h.activation = static_cast<Activation>(act);
  h.format = parse_format(r.u8());
  r.u8();
  h.inputs = r.u16();
  h.units = r.u16();
  return h;
}

inline LstmLayer read_lstm(ByteReader& r) {
  const LayerHeader h = read_layer_header(r);
  if (h.kind != LayerRecordKind::Lstm) throw ModelIoError(LoadErrorKind::ShapeChain, "expected an LSTM layer");
  LstmLayer l;
  l.inputs = h.inputs;
  l.units = h.units;
  l.format = h.format;
  l.kept = read_kept(r, l.units);
  for (auto& g : l.gates) g.bias = r.codes(l.units, l.format);
  for (std::size_t k = 0; k < 8; ++k) l.matrix(k) = read_matrix(r, l.format);
  return l;
}

inline DenseLayer read_dense(ByteReader& r) {
  const LayerHeader h = read_layer_header(r);
  if (h.kind != LayerRecordKind::Dense) throw ModelIoError(LoadErrorKind::ShapeChain, "expected a dense layer");
  DenseLayer d;
  d.inputs = h.inputs;
  d.outputs = h.units;
  d.format = h.format;
  d.activation = h.activation;
  d.kept = read_kept(r, d.outputs);
  d.bias = r.codes(d.outputs, d.format);
  d.weight = read_matrix(r, d.format);
  return d;
}

inline void write_filterbank(ByteWriter& w, const MelFilterbank& fb) {
  w.u16(static_cast<std::uint16_t>(fb.mel_bins));
  w.u16(static_cast<std::uint16_t>(fb.fft_bins));
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    std::size_t first = fb.fft_bins, last = 0;
    for (std::size_t k = 0; k < fb.fft_bins; ++k) {
      if (fb.at(m, k) != 0.0f) {
        first = std::min(first, k);
        last = k;
      }
    }
    if (first == fb.fft_bins) first = last = 0;
    const std::size_t count = fb.at(m, first) == 0.0f ? 0 : last - first + 1;
    w.u16(static_cast<std::uint16_t>(first));
    w.u16(static_cast<std::uint16_t>(count));
    for (std::size_t k = first; k < first + count; ++k) w.f32(fb.at(m, k));
  }
}

inline MelFilterbank read_filterbank(ByteReader& r) {
  MelFilterbank fb;
  fb.mel_bins = r.u16();
  fb.fft_bins = r.u16();
  fb.weights.assign(fb.mel_bins * fb.fft_bins, 0.0f);
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    const std::size_t first = r.u16();
    const std::size_t count = r.u16();
    if (first + count > fb.fft_bins) throw ModelIoError(LoadErrorKind::Malformed, "filterbank row out of range");
    r.need(4 * count);
    for (std::size_t k = 0; k < count; ++k) fb.weights[m * fb.fft_bins + first + k] = r.f32();
  }
  return fb;
}

}  // namespace detail

/// Serializes a validated model.
inline std::vector<std::uint8_t> save(const SeModel& model) {
  model.validate();
  detail::ByteWriter body;
  const DspConfig& c = model.dsp;
  body.u32(c.sample_rate);
  body.u16(static_cast<std::uint16_t>(c.frame_size));
  body.u16(static_cast<std::uint16_t>(c.hop_size));
  body.u16(static_cast<std::uint16_t>(c.mel_bins));
  body.u16(static_cast<std::uint16_t>(c.window));
  body.f64(c.power_exponent);
  detail::write_filterbank(body, model.filterbank);
  body.u16(static_cast<std::uint16_t>(model.qeq.gain.size()));
  for (float g : model.qeq.gain) body.f32(g);
  for (float b : model.qeq.bias) body.f32(b);

  body.u16(4);
  const std::size_t table = body.size();
  for (int i = 0; i < 4; ++i) body.u32(0);
  for (std::size_t i = 0; i < 4; ++i) {
    body.patch_u32(table + 4 * i, static_cast<std::uint32_t>(body.size()));
    if (i == 0) detail::write_lstm(body, model.lstm1);
    if (i == 1) detail::write_lstm(body, model.lstm2);
    if (i == 2) detail::write_dense(body, model.dense1);
    if (i == 3) detail::write_dense(body, model.dense2);
  }

  detail::ByteWriter out;
  for (char ch : kContainerMagic) out.u8(static_cast<std::uint8_t>(ch));
  out.u16(kContainerVersion);
  out.u16(0);
  out.u32(static_cast<std::uint32_t>(body.size()));
  out.bytes(body.buffer());
  out.u32(detail::crc32_of(body.buffer()));
  return std::move(out.buffer());
}

/// Parses and validates a container. Every failure is a ModelIoError whose
/// kind identifies the class of defect.
inline SeModel load(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 12;
  if (bytes.size() < 4) throw ModelIoError(LoadErrorKind::Truncated, "file shorter than the magic");
  if (!std::equal(kContainerMagic.begin(), kContainerMagic.end(), bytes.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw ModelIoError(LoadErrorKind::BadMagic, "not an SSEM container");
  }
  if (bytes.size() < kHeader) throw ModelIoError(LoadErrorKind::Truncated, "header incomplete");
  detail::ByteReader head(bytes.first(kHeader));
  head.seek(4);
  const std::uint16_t version = head.u16();
  head.u16();
  const std::size_t body_size = head.u32();
  if (version != kContainerVersion) {
    throw ModelIoError(LoadErrorKind::UnknownVersion, "container version " + std::to_string(version));
  }
  if (bytes.size() < kHeader + body_size + 4) {
    throw ModelIoError(LoadErrorKind::Truncated, "expected " + std::to_string(kHeader + body_size + 4) +
                                                     " bytes, got " + std::to_string(bytes.size()));
  }
  if (bytes.size() > kHeader + body_size + 4) throw ModelIoError(LoadErrorKind::Malformed, "trailing bytes after CRC");
  const auto body = bytes.subspan(kHeader, body_size);
  detail::ByteReader tail(bytes.subspan(kHeader + body_size, 4));
  if (tail.u32() != detail::crc32_of(body)) throw ModelIoError(LoadErrorKind::CrcMismatch, "body checksum mismatch");

  SeModel m;
  try {
    detail::ByteReader r(body);
    m.dsp.sample_rate = r.u32();
    m.dsp.frame_size = r.u16();
    m.dsp.hop_size = r.u16();
    m.dsp.mel_bins = r.u16();
    const auto window = r.u16();
    if (window != static_cast<std::uint16_t>(WindowKind::SqrtHann)) {
      throw ModelIoError(LoadErrorKind::Malformed, "unknown window kind " + std::to_string(window));
    }
    m.dsp.window = static_cast<WindowKind>(window);
    m.dsp.power_exponent = r.f64();
    m.filterbank = detail::read_filterbank(r);
    const std::size_t n = r.u16();
    r.need(8 * n);
    m.qeq.gain.resize(n);
    m.qeq.bias.resize(n);
    for (auto& g : m.qeq.gain) g = r.f32();
    for (auto& b : m.qeq.bias) b = r.f32();

    const std::size_t layers = r.u16();
    if (layers != 4) throw ModelIoError(LoadErrorKind::ShapeChain, "expected 4 layers, found " + std::to_string(layers));
    std::array<std::uint32_t, 4> offsets{};
    for (auto& o : offsets) o = r.u32();
    for (std::size_t i = 0; i < 4; ++i) {
      if (offsets[i] != r.pos()) throw ModelIoError(LoadErrorKind::Malformed, "layer offset table inconsistent");
      if (i == 0) m.lstm1 = detail::read_lstm(r);
      if (i == 1) m.lstm2 = detail::read_lstm(r);
      if (i == 2) m.dense1 = detail::read_dense(r);
      if (i == 3) m.dense2 = detail::read_dense(r);
    }
    if (r.remaining() != 0) throw ModelIoError(LoadErrorKind::Malformed, "unused bytes at end of body");
  } catch (const ModelIoError&) {
    throw;
  } catch (const std::exception& e) {
    throw ModelIoError(LoadErrorKind::Malformed, e.what());
  }
  try {
    m.validate();
  } catch (const std::exception& e) {
    throw ModelIoError(LoadErrorKind::ShapeChain, e.what());
  }
  return m;
}

inline void save_file(const SeModel& model, const std::string& path) {
  const auto bytes = save(model);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ModelIoError(LoadErrorKind::Io, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ModelIoError(LoadErrorKind::Io, "write failed: " + path);
}

inline SeModel load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ModelIoError(LoadErrorKind::Io, "cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load(bytes);
}

/// SHA-256 (hex) over every weight and bias as decoded int16 little-endian,
/// in container layer order; independent of sparse encoding.
inline std::string weight_digest(const SeModel& model) {
  detail::ByteWriter w;
  auto matrix = [&](const Matrix& m) {
    for (auto v : to_dense(m).values) w.i16(v);
  };
  auto bias = [&](const std::vector<std::int16_t>& b) {
    for (auto v : b) w.i16(v);
  };
  for (const LstmLayer* l : {&model.lstm1, &model.lstm2}) {
    for (const auto& g : l->gates) bias(g.bias);
    for (std::size_t k = 0; k < 8; ++k) matrix(l->matrix(k));
  }
  for (const DenseLayer* d : {&model.dense1, &model.dense2}) {
    bias(d->bias);
    matrix(d->weight);
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(w.buffer().data(), w.buffer().size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned i = 0; i < len; ++i) {
    hex += kHex[md[i] >> 4];
    hex += kHex[md[i] & 15];
  }
  return hex;
}

}  // namespace ssem
