#pragma once

// In-memory encodings for pruned weight matrices and their integer matvec
// kernels. Three structures are supported:
//
//   Weight  row-pointer + 16-bit column index per stored scalar
//   Block   row-pointer + 16-bit block-column index per stored 1 x block_w run
//   Unit    dense sub-matrix over the kept rows and kept input columns
//
// All kernels accumulate exactly in 32 bits through mac() and are required to
// be bit-identical to a dense matvec over the decoded matrix.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ssem/quant.hpp"

namespace ssem {

enum class StructureKind : std::uint8_t { Weight = 0, Block = 1, Unit = 2 };

inline std::string_view to_string(StructureKind k) {
  switch (k) {
    case StructureKind::Weight: return "weight";
    case StructureKind::Block: return "block";
    case StructureKind::Unit: return "unit";
  }
  return "?";
}

inline StructureKind parse_structure_kind(std::string_view s) {
  if (s == "weight") return StructureKind::Weight;
  if (s == "block") return StructureKind::Block;
  if (s == "unit") return StructureKind::Unit;
  throw std::invalid_argument("unknown sparsity structure: " + std::string(s));
}

struct SparsityStructure {
  StructureKind kind = StructureKind::Weight;
  int block_w = 1;  // 0 for Unit means "full row width"
  int block_h = 1;

  static constexpr SparsityStructure weight() { return {StructureKind::Weight, 1, 1}; }
  static constexpr SparsityStructure block(int width = 8) { return {StructureKind::Block, width, 1}; }
  static constexpr SparsityStructure unit() { return {StructureKind::Unit, 0, 1}; }

  friend constexpr bool operator==(const SparsityStructure&, const SparsityStructure&) = default;
};

struct PruneMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;  // row-major, 1 = kept

  static PruneMask filled(std::size_t rows, std::size_t cols, bool kept) {
    return PruneMask{rows, cols, std::vector<std::uint8_t>(rows * cols, kept ? 1 : 0)};
  }
  bool kept(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool k) { bits[r * cols + c] = k ? 1 : 0; }
  std::size_t kept_count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  QuantFormat format = kQ8;
  std::vector<std::int16_t> values;  // row-major

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, QuantFormat fmt)
      : rows(r), cols(c), format(fmt), values(r * c, 0) {}
  DenseMatrix(std::size_t r, std::size_t c, QuantFormat fmt, std::vector<std::int16_t> v)
      : rows(r), cols(c), format(fmt), values(std::move(v)) {
    if (values.size() != r * c) throw std::invalid_argument("DenseMatrix: value count does not match shape");
  }

  std::int16_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::int16_t& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;
};

/// Counts work done by the kernels; one group is one hardware MAC issue
/// (a whole block for Block, a single product otherwise).
struct KernelCounter {
  std::uint64_t mac_groups = 0;
  std::uint64_t macs = 0;
};

struct WeightPayload {
  std::vector<std::uint32_t> row_ptr;  // rows + 1
  std::vector<std::uint16_t> col_index;
  std::vector<std::int16_t> values;
  friend bool operator==(const WeightPayload&, const WeightPayload&) = default;
};

struct BlockPayload {
  std::vector<std::uint32_t> row_ptr;    // rows + 1, counts blocks
  std::vector<std::uint16_t> block_col;  // block-column index
  std::vector<std::int16_t> values;      // only the in-range lanes of each block
  friend bool operator==(const BlockPayload&, const BlockPayload&) = default;
};

struct UnitPayload {
  std::vector<std::uint16_t> kept_rows;  // strictly increasing
  std::vector<std::uint16_t> kept_cols;  // strictly increasing
  std::vector<std::int16_t> values;      // kept_rows x kept_cols, row-major
  friend bool operator==(const UnitPayload&, const UnitPayload&) = default;
};

class SparseMatrix {
 public:
  using Payload = std::variant<WeightPayload, BlockPayload, UnitPayload>;

  SparseMatrix() = default;

  /// Builds from parts; validates index ordering and sizes.
  SparseMatrix(std::size_t rows, std::size_t cols, QuantFormat fmt, SparsityStructure st, Payload payload)
      : rows_(rows), cols_(cols), format_(fmt), structure_(st), payload_(std::move(payload)) {
    validate();
  }

  static SparseMatrix encode(const DenseMatrix& dense, const PruneMask& mask, SparsityStructure st);

  /// Unit encoding from explicit kept row/column sets.
  static SparseMatrix encode_unit(const DenseMatrix& dense, std::vector<std::uint16_t> kept_rows,
                                  std::vector<std::uint16_t> kept_cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  QuantFormat format() const { return format_; }
  SparsityStructure structure() const { return structure_; }
  const Payload& payload() const { return payload_; }

  /// Length of the input vector the compact kernel expects.
  std::size_t in_dim() const {
    if (auto* u = std::get_if<UnitPayload>(&payload_)) return u->kept_cols.size();
    return cols_;
  }
  /// Length of the output the compact kernel produces.
  std::size_t out_dim() const {
    if (auto* u = std::get_if<UnitPayload>(&payload_)) return u->kept_rows.size();
    return rows_;
  }

  std::size_t stored_values() const {
    return std::visit([](const auto& p) { return p.values.size(); }, payload_);
  }
  std::size_t stored_blocks() const {
    if (auto* b = std::get_if<BlockPayload>(&payload_)) return b->block_col.size();
    return 0;
  }

  DenseMatrix decode() const;
  PruneMask stored_mask() const;

  /// Adds W·x into acc over compact dimensions (see in_dim/out_dim).
  void accumulate(std::span<const std::int16_t> x, std::span<std::int32_t> acc,
                  KernelCounter* counter = nullptr) const;

  friend bool operator==(const SparseMatrix&, const SparseMatrix&) = default;

 private:
  void validate() const;
  std::size_t lanes_in_block(std::size_t block_col) const {
    const std::size_t bw = static_cast<std::size_t>(structure_.block_w);
    return std::min(bw, cols_ - block_col * bw);
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  QuantFormat format_ = kQ8;
  SparsityStructure structure_{};
  Payload payload_;
};

using Matrix = std::variant<DenseMatrix, SparseMatrix>;

namespace detail {

inline void check_index_range(std::size_t rows, std::size_t cols) {
  constexpr std::size_t kMax = std::numeric_limits<std::uint16_t>::max();
  if (rows > kMax || cols > kMax) throw std::invalid_argument("matrix dimension exceeds 16-bit index range");
}

template <class T>
void check_strictly_increasing(const std::vector<T>& v, std::size_t bound, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] >= bound || (i > 0 && v[i] <= v[i - 1])) {
      throw std::invalid_argument(std::string("SparseMatrix: ") + what + " not strictly increasing / in range");
    }
  }
}

}  // namespace detail

inline void SparseMatrix::validate() const {
  detail::check_index_range(rows_, cols_);
  if (!format_.valid()) throw std::invalid_argument("SparseMatrix: invalid quant format");
  if (structure_.block_h != 1) throw std::invalid_argument("SparseMatrix: only block_h = 1 is supported");
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, WeightPayload>) {
          if (structure_.kind != StructureKind::Weight) throw std::invalid_argument("payload/structure mismatch");
          if (p.row_ptr.size() != rows_ + 1 || p.row_ptr.front() != 0 || p.row_ptr.back() != p.values.size() ||
              p.col_index.size() != p.values.size()) {
            throw std::invalid_argument("SparseMatrix: malformed weight payload");
          }
          for (std::size_t r = 0; r < rows_; ++r) {
            if (p.row_ptr[r] > p.row_ptr[r + 1]) throw std::invalid_argument("SparseMatrix: row_ptr decreasing");
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) {
              if (p.col_index[k] >= cols_ || (k > p.row_ptr[r] && p.col_index[k] <= p.col_index[k - 1])) {
                throw std::invalid_argument("SparseMatrix: column indices not strictly increasing");
              }
            }
          }
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          if (structure_.kind != StructureKind::Block || structure_.block_w < 1) {
            throw std::invalid_argument("payload/structure mismatch");
          }
          const std::size_t bw = static_cast<std::size_t>(structure_.block_w);
          const std::size_t block_cols = (cols_ + bw - 1) / bw;
          if (p.row_ptr.size() != rows_ + 1 || p.row_ptr.front() != 0 || p.row_ptr.back() != p.block_col.size()) {
            throw std::invalid_argument("SparseMatrix: malformed block payload");
          }
          std::size_t lanes = 0;
          for (std::size_t r = 0; r < rows_; ++r) {
            if (p.row_ptr[r] > p.row_ptr[r + 1]) throw std::invalid_argument("SparseMatrix: row_ptr decreasing");
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) {
              if (p.block_col[k] >= block_cols || (k > p.row_ptr[r] && p.block_col[k] <= p.block_col[k - 1])) {
                throw std::invalid_argument("SparseMatrix: block indices not strictly increasing");
              }
              lanes += lanes_in_block(p.block_col[k]);
            }
          }
          if (lanes != p.values.size()) throw std::invalid_argument("SparseMatrix: block value count mismatch");
        } else {
          if (structure_.kind != StructureKind::Unit) throw std::invalid_argument("payload/structure mismatch");
          detail::check_strictly_increasing(p.kept_rows, rows_, "kept rows");
          detail::check_strictly_increasing(p.kept_cols, cols_, "kept cols");
          if (p.values.size() != p.kept_rows.size() * p.kept_cols.size()) {
            throw std::invalid_argument("SparseMatrix: unit value count mismatch");
          }
        }
      },
      payload_);
}

inline SparseMatrix SparseMatrix::encode(const DenseMatrix& dense, const PruneMask& mask, SparsityStructure st) {
  if (mask.rows != dense.rows || mask.cols != dense.cols || mask.bits.size() != dense.rows * dense.cols) {
    throw std::invalid_argument("encode: mask shape does not match matrix");
  }
  detail::check_index_range(dense.rows, dense.cols);
  const std::size_t rows = dense.rows;
  const std::size_t cols = dense.cols;

  switch (st.kind) {
    case StructureKind::Weight: {
      WeightPayload p;
      p.row_ptr.reserve(rows + 1);
      p.row_ptr.push_back(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const std::int16_t v = dense.at(r, c);
          if (mask.kept(r, c) && v != 0) {
            p.col_index.push_back(static_cast<std::uint16_t>(c));
            p.values.push_back(v);
          }
        }
        p.row_ptr.push_back(static_cast<std::uint32_t>(p.values.size()));
      }
      return SparseMatrix(rows, cols, dense.format, SparsityStructure::weight(), std::move(p));
    }
    case StructureKind::Block: {
      if (st.block_w < 1) throw std::invalid_argument("encode: block width must be positive");
      const std::size_t bw = static_cast<std::size_t>(st.block_w);
      const std::size_t block_cols = (cols + bw - 1) / bw;
      BlockPayload p;
      p.row_ptr.reserve(rows + 1);
      p.row_ptr.push_back(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t b = 0; b < block_cols; ++b) {
          const std::size_t c0 = b * bw;
          const std::size_t c1 = std::min(cols, c0 + bw);
          const bool keep = mask.kept(r, c0);
          bool any_nonzero = false;
          for (std::size_t c = c0; c < c1; ++c) {
            if (mask.kept(r, c) != keep) {
              throw std::invalid_argument("encode: mask is not constant within block (row " + std::to_string(r) +
                                          ", block " + std::to_string(b) + ")");
            }
            any_nonzero = any_nonzero || dense.at(r, c) != 0;
          }
          if (!keep || !any_nonzero) continue;
          p.block_col.push_back(static_cast<std::uint16_t>(b));
          for (std::size_t c = c0; c < c1; ++c) p.values.push_back(dense.at(r, c));
        }
        p.row_ptr.push_back(static_cast<std::uint32_t>(p.block_col.size()));
      }
      return SparseMatrix(rows, cols, dense.format, SparsityStructure::block(st.block_w), std::move(p));
    }
    case StructureKind::Unit: {
      std::vector<std::uint16_t> kept_rows;
      std::vector<std::uint8_t> col_any(cols, 0);
      for (std::size_t r = 0; r < rows; ++r) {
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
          if (mask.kept(r, c)) {
            any = true;
            col_any[c] = 1;
          }
        }
        if (any) kept_rows.push_back(static_cast<std::uint16_t>(r));
      }
      std::vector<std::uint16_t> kept_cols;
      for (std::size_t c = 0; c < cols; ++c) {
        if (col_any[c] || kept_rows.empty()) kept_cols.push_back(static_cast<std::uint16_t>(c));
      }
      // The mask must be the outer product of the kept row and column sets.
      std::size_t ri = 0;
      for (std::size_t r = 0; r < rows; ++r) {
        const bool row_kept = ri < kept_rows.size() && kept_rows[ri] == r;
        if (row_kept) ++ri;
        for (std::size_t c = 0; c < cols; ++c) {
          const bool expect = row_kept && col_any[c];
          if (mask.kept(r, c) != expect) {
            throw std::invalid_argument("encode: mask is not unit-structured at (" + std::to_string(r) + ", " +
                                        std::to_string(c) + ")");
          }
        }
      }
      return encode_unit(dense, std::move(kept_rows), std::move(kept_cols));
    }
  }
  throw std::invalid_argument("encode: unknown structure");
}

inline SparseMatrix SparseMatrix::encode_unit(const DenseMatrix& dense, std::vector<std::uint16_t> kept_rows,
                                              std::vector<std::uint16_t> kept_cols) {
  detail::check_index_range(dense.rows, dense.cols);
  detail::check_strictly_increasing(kept_rows, dense.rows, "kept rows");
  detail::check_strictly_increasing(kept_cols, dense.cols, "kept cols");
  UnitPayload p;
  p.values.reserve(kept_rows.size() * kept_cols.size());
  for (std::uint16_t r : kept_rows) {
    for (std::uint16_t c : kept_cols) p.values.push_back(dense.at(r, c));
  }
  p.kept_rows = std::move(kept_rows);
  p.kept_cols = std::move(kept_cols);
  return SparseMatrix(dense.rows, dense.cols, dense.format, SparsityStructure::unit(), std::move(p));
}

inline DenseMatrix SparseMatrix::decode() const {
  DenseMatrix out(rows_, cols_, format_);
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, WeightPayload>) {
          for (std::size_t r = 0; r < rows_; ++r) {
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) out.at(r, p.col_index[k]) = p.values[k];
          }
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          const std::size_t bw = static_cast<std::size_t>(structure_.block_w);
          std::size_t v = 0;
          for (std::size_t r = 0; r < rows_; ++r) {
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) {
              const std::size_t c0 = p.block_col[k] * bw;
              const std::size_t n = lanes_in_block(p.block_col[k]);
              for (std::size_t j = 0; j < n; ++j) out.at(r, c0 + j) = p.values[v++];
            }
          }
        } else {
          const std::size_t nc = p.kept_cols.size();
          for (std::size_t i = 0; i < p.kept_rows.size(); ++i) {
            for (std::size_t j = 0; j < nc; ++j) out.at(p.kept_rows[i], p.kept_cols[j]) = p.values[i * nc + j];
          }
        }
      },
      payload_);
  return out;
}

inline PruneMask SparseMatrix::stored_mask() const {
  PruneMask m = PruneMask::filled(rows_, cols_, false);
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, WeightPayload>) {
          for (std::size_t r = 0; r < rows_; ++r) {
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) m.set(r, p.col_index[k], true);
          }
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          const std::size_t bw = static_cast<std::size_t>(structure_.block_w);
          for (std::size_t r = 0; r < rows_; ++r) {
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) {
              const std::size_t n = lanes_in_block(p.block_col[k]);
              for (std::size_t j = 0; j < n; ++j) m.set(r, p.block_col[k] * bw + j, true);
            }
          }
        } else {
          for (std::uint16_t r : p.kept_rows) {
            for (std::uint16_t c : p.kept_cols) m.set(r, c, true);
          }
        }
      },
      payload_);
  return m;
}

inline void SparseMatrix::accumulate(std::span<const std::int16_t> x, std::span<std::int32_t> acc,
                                     KernelCounter* counter) const {
  if (x.size() != in_dim() || acc.size() != out_dim()) {
    throw std::invalid_argument("spmv: dimension mismatch (x " + std::to_string(x.size()) + " vs " +
                                std::to_string(in_dim()) + ", out " + std::to_string(acc.size()) + " vs " +
                                std::to_string(out_dim()) + ")");
  }
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, WeightPayload>) {
          for (std::size_t r = 0; r < rows_; ++r) {
            Accumulator a{acc[r]};
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) a = mac(a, p.values[k], x[p.col_index[k]]);
            acc[r] = a.value;
          }
          if (counter) {
            counter->mac_groups += p.values.size();
            counter->macs += p.values.size();
          }
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          const std::size_t bw = static_cast<std::size_t>(structure_.block_w);
          std::size_t v = 0;
          for (std::size_t r = 0; r < rows_; ++r) {
            Accumulator a{acc[r]};
            for (std::uint32_t k = p.row_ptr[r]; k < p.row_ptr[r + 1]; ++k) {
              const std::size_t c0 = p.block_col[k] * bw;
              const std::size_t n = lanes_in_block(p.block_col[k]);
              for (std::size_t j = 0; j < n; ++j) a = mac(a, p.values[v++], x[c0 + j]);
              if (counter) {
                counter->mac_groups += 1;
                counter->macs += n;
              }
            }
            acc[r] = a.value;
          }
        } else {
          const std::size_t nc = p.kept_cols.size();
          for (std::size_t i = 0; i < p.kept_rows.size(); ++i) {
            Accumulator a{acc[i]};
            const std::int16_t* w = p.values.data() + i * nc;
            for (std::size_t j = 0; j < nc; ++j) a = mac(a, w[j], x[j]);
            acc[i] = a.value;
          }
          if (counter) {
            counter->mac_groups += p.values.size();
            counter->macs += p.values.size();
          }
        }
      },
      payload_);
}

/// Fraction of the logical rows x cols weights that are not stored.
inline double sparsity(const SparseMatrix& m) {
  const double total = static_cast<double>(m.rows() * m.cols());
  if (total == 0.0) return 0.0;
  return 1.0 - static_cast<double>(m.stored_values()) / total;
}

// --- Matrix (dense or sparse) helpers -------------------------------------

inline std::size_t rows(const Matrix& m) {
  return std::visit([](const auto& v) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, DenseMatrix>) return v.rows; else return v.rows();
  }, m);
}

inline std::size_t cols(const Matrix& m) {
  return std::visit([](const auto& v) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, DenseMatrix>) return v.cols; else return v.cols();
  }, m);
}

inline std::size_t in_dim(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->in_dim();
  return std::get<DenseMatrix>(m).cols;
}

inline std::size_t out_dim(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->out_dim();
  return std::get<DenseMatrix>(m).rows;
}

inline QuantFormat format_of(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->format();
  return std::get<DenseMatrix>(m).format;
}

inline DenseMatrix to_dense(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->decode();
  return std::get<DenseMatrix>(m);
}

/// Stored-entry mask; a dense matrix stores everything.
inline PruneMask stored_mask(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->stored_mask();
  const auto& d = std::get<DenseMatrix>(m);
  return PruneMask::filled(d.rows, d.cols, true);
}

inline std::size_t stored_values(const Matrix& m) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) return s->stored_values();
  return std::get<DenseMatrix>(m).values.size();
}

/// Reference dense kernel: acc[r] += sum_c W[r,c] * x[c].
inline void dense_accumulate(const DenseMatrix& w, std::span<const std::int16_t> x, std::span<std::int32_t> acc,
                             KernelCounter* counter = nullptr) {
  if (x.size() != w.cols || acc.size() != w.rows) throw std::invalid_argument("matvec: dimension mismatch");
  for (std::size_t r = 0; r < w.rows; ++r) {
    Accumulator a{acc[r]};
    const std::int16_t* row = w.values.data() + r * w.cols;
    for (std::size_t c = 0; c < w.cols; ++c) a = mac(a, row[c], x[c]);
    acc[r] = a.value;
  }
  if (counter) {
    counter->mac_groups += w.values.size();
    counter->macs += w.values.size();
  }
}

inline void accumulate(const Matrix& m, std::span<const std::int16_t> x, std::span<std::int32_t> acc,
                       KernelCounter* counter = nullptr) {
  if (auto* s = std::get_if<SparseMatrix>(&m)) {
    s->accumulate(x, acc, counter);
  } else {
    dense_accumulate(std::get<DenseMatrix>(m), x, acc, counter);
  }
}

/// Dense matvec with requantization into `out_fmt`.
inline QuantTensor matvec(const DenseMatrix& w, const QuantTensor& x, QuantFormat out_fmt) {
  std::vector<std::int32_t> acc(w.rows, 0);
  dense_accumulate(w, x.data(), acc);
  const int acc_frac = w.format.frac_bits + x.format().frac_bits;
  std::vector<std::int16_t> out(w.rows);
  for (std::size_t r = 0; r < w.rows; ++r) out[r] = static_cast<std::int16_t>(requantize(acc[r], acc_frac, out_fmt));
  return QuantTensor(std::move(out), {w.rows}, out_fmt);
}

/// Sparse matvec over the full logical row space. For Unit matrices `x` may
/// be either the full input (length cols) or the compact kept-input vector;
/// pruned rows produce zero.
inline QuantTensor spmv(const SparseMatrix& m, const QuantTensor& x, QuantFormat out_fmt,
                        KernelCounter* counter = nullptr) {
  std::vector<std::int16_t> gathered;
  std::span<const std::int16_t> xin = x.data();
  if (auto* u = std::get_if<UnitPayload>(&m.payload())) {
    if (x.size() == m.cols() && m.cols() != u->kept_cols.size()) {
      gathered.reserve(u->kept_cols.size());
      for (std::uint16_t c : u->kept_cols) gathered.push_back(x[c]);
      xin = gathered;
    }
  }
  std::vector<std::int32_t> acc(m.out_dim(), 0);
  m.accumulate(xin, acc, counter);

  const int acc_frac = m.format().frac_bits + x.format().frac_bits;
  std::vector<std::int16_t> out(m.rows(), 0);
  if (auto* u = std::get_if<UnitPayload>(&m.payload())) {
    for (std::size_t i = 0; i < u->kept_rows.size(); ++i) {
      out[u->kept_rows[i]] = static_cast<std::int16_t>(requantize(acc[i], acc_frac, out_fmt));
    }
  } else {
    for (std::size_t r = 0; r < m.rows(); ++r) {
      out[r] = static_cast<std::int16_t>(requantize(acc[r], acc_frac, out_fmt));
    }
  }
  return QuantTensor(std::move(out), {m.rows()}, out_fmt);
}

}  // namespace ssem
