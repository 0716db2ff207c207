#pragma once

// Post-training magnitude pruning for the three sparsity structures, the
// per-layer sparsity combination search, and plan evaluation.
//
// Groups per structure:
//   Weight  one scalar of any weight matrix
//   Block   one 1 x block_w run within a matrix row
//   Unit    dense layers: one output row plus its bias entry;
//           LSTM layers: unit k = row k of all eight matrices plus the four
//           bias entries at k. Removing unit k also removes column k of the
//           recurrent matrices and column k of the next layer's inputs; those
//           entries are scored with the rows that own them.
//
// Sparsity values in plans are integer percentages so that the number of
// pruned groups, floor(percent * groups / 100), is exact.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <exception>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ssem/analysis.hpp"
#include "ssem/engine.hpp"
#include "ssem/model.hpp"
#include "ssem/sparse.hpp"

namespace ssem {

struct InfeasiblePlan : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kLayerCount = 4;
inline constexpr std::size_t kFinalLayer = 3;

enum class LayerKind { Lstm, Dense };

/// Logical shape of one prunable layer.
struct LayerShape {
  LayerKind kind = LayerKind::Dense;
  std::size_t inputs = 0;
  std::size_t units = 0;

  std::size_t weight_count() const {
    return kind == LayerKind::Lstm ? 4 * (units * inputs + units * units) : units * inputs;
  }
  std::size_t bias_count() const { return kind == LayerKind::Lstm ? 4 * units : units; }
};

inline std::vector<LayerShape> layer_shapes(const SeModel& m) {
  return {{LayerKind::Lstm, m.lstm1.inputs, m.lstm1.units},
          {LayerKind::Lstm, m.lstm2.inputs, m.lstm2.units},
          {LayerKind::Dense, m.dense1.inputs, m.dense1.outputs},
          {LayerKind::Dense, m.dense2.inputs, m.dense2.outputs}};
}

/// Number of groups in a layer and the number of parameters they cover.
struct GroupCount {
  std::size_t groups = 0;
  std::size_t params = 0;
};

inline GroupCount group_count(const LayerShape& s, SparsityStructure st) {
  switch (st.kind) {
    case StructureKind::Weight: return {s.weight_count(), s.weight_count()};
    case StructureKind::Block: {
      const std::size_t bw = static_cast<std::size_t>(st.block_w);
      auto blocks = [&](std::size_t rows, std::size_t cols) { return rows * ((cols + bw - 1) / bw); };
      const std::size_t g = s.kind == LayerKind::Lstm ? 4 * (blocks(s.units, s.inputs) + blocks(s.units, s.units))
                                                       : blocks(s.units, s.inputs);
      return {g, s.weight_count()};
    }
    case StructureKind::Unit: return {s.units, s.weight_count() + s.bias_count()};
  }
  return {};
}

// --- Group scoring ------------------------------------------------------------

/// One prunable group. `matrix` indexes the layer's matrices (LSTM: W_xi,
/// W_hi, ... order; dense: 0); for Unit groups `row` is the unit and the other
/// coordinates are zero. `col` is a column (Weight) or block column (Block).
struct GroupScore {
  std::size_t id = 0;  // ordinal in coordinate order
  std::size_t matrix = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 0;  // parameters in the group
  double l1 = 0.0;       // sum of |dequantized value|
};

namespace detail {

inline std::vector<const Matrix*> layer_matrices(const SeModel& m, std::size_t layer) {
  switch (layer) {
    case 0:
    case 1: {
      const LstmLayer& l = layer == 0 ? m.lstm1 : m.lstm2;
      std::vector<const Matrix*> v;
      for (std::size_t k = 0; k < 8; ++k) v.push_back(&l.matrix(k));
      return v;
    }
    case 2: return {&m.dense1.weight};
    case 3: return {&m.dense2.weight};
  }
  throw std::out_of_range("layer index out of range");
}

inline std::vector<const std::vector<std::int16_t>*> layer_biases(const SeModel& m, std::size_t layer) {
  switch (layer) {
    case 0:
    case 1: {
      const LstmLayer& l = layer == 0 ? m.lstm1 : m.lstm2;
      return {&l.gates[0].bias, &l.gates[1].bias, &l.gates[2].bias, &l.gates[3].bias};
    }
    case 2: return {&m.dense1.bias};
    case 3: return {&m.dense2.bias};
  }
  throw std::out_of_range("layer index out of range");
}

inline QuantFormat layer_format(const SeModel& m, std::size_t layer) {
  switch (layer) {
    case 0: return m.lstm1.format;
    case 1: return m.lstm2.format;
    case 2: return m.dense1.format;
    default: return m.dense2.format;
  }
}

}  // namespace detail

inline std::vector<GroupScore> group_layer(const SeModel& model, std::size_t layer, SparsityStructure st) {
  const auto mats = detail::layer_matrices(model, layer);
  std::vector<DenseMatrix> dense;
  dense.reserve(mats.size());
  for (const Matrix* m : mats) dense.push_back(to_dense(*m));
  std::vector<GroupScore> out;
  auto mag = [](std::int16_t v, QuantFormat f) { return std::fabs(dequantize(v, f)); };

  switch (st.kind) {
    case StructureKind::Weight:
      for (std::size_t k = 0; k < dense.size(); ++k) {
        const DenseMatrix& d = dense[k];
        for (std::size_t r = 0; r < d.rows; ++r) {
          for (std::size_t c = 0; c < d.cols; ++c) {
            out.push_back({out.size(), k, r, c, 1, mag(d.at(r, c), d.format)});
          }
        }
      }
      break;
    case StructureKind::Block: {
      if (st.block_w < 1) throw std::invalid_argument("block width must be positive");
      const std::size_t bw = static_cast<std::size_t>(st.block_w);
      for (std::size_t k = 0; k < dense.size(); ++k) {
        const DenseMatrix& d = dense[k];
        for (std::size_t r = 0; r < d.rows; ++r) {
          for (std::size_t b = 0; b * bw < d.cols; ++b) {
            GroupScore g{out.size(), k, r, b, 0, 0.0};
            for (std::size_t c = b * bw; c < std::min(d.cols, (b + 1) * bw); ++c) {
              g.l1 += mag(d.at(r, c), d.format);
              ++g.size;
            }
            out.push_back(g);
          }
        }
      }
      break;
    }
    case StructureKind::Unit: {
      const auto biases = detail::layer_biases(model, layer);
      const QuantFormat fmt = detail::layer_format(model, layer);
      const std::size_t units = dense.front().rows;
      for (std::size_t u = 0; u < units; ++u) {
        GroupScore g{u, 0, u, 0, 0, 0.0};
        for (const DenseMatrix& d : dense) {
          for (std::size_t c = 0; c < d.cols; ++c) g.l1 += mag(d.at(u, c), d.format);
          g.size += d.cols;
        }
        for (const auto* b : biases) g.l1 += mag((*b)[u], fmt);
        g.size += biases.size();
        out.push_back(g);
      }
      break;
    }
  }
  return out;
}

/// Group scores for all four layers.
inline std::vector<std::vector<GroupScore>> group_weights(const SeModel& model, SparsityStructure st) {
  std::vector<std::vector<GroupScore>> out;
  for (std::size_t l = 0; l < kLayerCount; ++l) out.push_back(group_layer(model, l, st));
  return out;
}

/// Marks the `count` lowest-L1 groups as pruned; ties go to the lower id.
inline std::vector<std::uint8_t> select_pruned(std::span<const GroupScore> groups, std::size_t count) {
  if (count > groups.size()) throw std::invalid_argument("cannot prune more groups than exist");
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (groups[a].l1 != groups[b].l1) return groups[a].l1 < groups[b].l1;
    return groups[a].id < groups[b].id;
  });
  std::vector<std::uint8_t> pruned(groups.size(), 0);
  for (std::size_t i = 0; i < count; ++i) pruned[order[i]] = 1;
  return pruned;
}

inline std::size_t pruned_group_count(std::size_t groups, int percent) {
  return static_cast<std::size_t>(percent) * groups / 100;
}

struct LayerPruning {
  std::vector<PruneMask> masks;        // one per layer matrix
  std::vector<std::uint16_t> kept;     // Unit: surviving units, increasing
  std::size_t pruned_groups = 0;
  std::size_t total_groups = 0;
};

/// Prunes `count` groups of one layer by magnitude. The masks cover only this
/// layer; for Unit structure they also clear the recurrent columns of pruned
/// units.
inline LayerPruning prune_layer_groups(const SeModel& model, std::size_t layer, SparsityStructure st,
                                       std::size_t count) {
  if (st.kind == StructureKind::Unit && layer == kFinalLayer && count > 0) {
    throw InfeasiblePlan("unit pruning of the output layer is not allowed");
  }
  const auto groups = group_layer(model, layer, st);
  const auto pruned = select_pruned(groups, count);
  const auto mats = detail::layer_matrices(model, layer);

  LayerPruning res;
  res.pruned_groups = count;
  res.total_groups = groups.size();
  for (const Matrix* m : mats) res.masks.push_back(PruneMask::filled(rows(*m), cols(*m), true));

  switch (st.kind) {
    case StructureKind::Weight:
      for (const GroupScore& g : groups) {
        if (pruned[g.id]) res.masks[g.matrix].set(g.row, g.col, false);
      }
      break;
    case StructureKind::Block: {
      const std::size_t bw = static_cast<std::size_t>(st.block_w);
      for (const GroupScore& g : groups) {
        if (!pruned[g.id]) continue;
        PruneMask& mk = res.masks[g.matrix];
        for (std::size_t c = g.col * bw; c < std::min(mk.cols, (g.col + 1) * bw); ++c) mk.set(g.row, c, false);
      }
      break;
    }
    case StructureKind::Unit: {
      const bool lstm = layer < 2;
      for (const GroupScore& g : groups) {
        if (!pruned[g.id]) {
          res.kept.push_back(static_cast<std::uint16_t>(g.row));
          continue;
        }
        for (std::size_t k = 0; k < res.masks.size(); ++k) {
          PruneMask& mk = res.masks[k];
          for (std::size_t c = 0; c < mk.cols; ++c) mk.set(g.row, c, false);
          if (lstm && k % 2 == 1) {
            for (std::size_t r = 0; r < mk.rows; ++r) mk.set(r, g.row, false);
          }
        }
      }
      break;
    }
  }
  return res;
}

/// Prunes floor(sparsity * groups) groups of `layer` (0..3).
inline LayerPruning prune_layer(const SeModel& model, std::size_t layer, SparsityStructure st, double sparsity) {
  if (!(sparsity >= 0.0 && sparsity < 1.0)) throw std::invalid_argument("sparsity must be in [0, 1)");
  const std::size_t groups = group_layer(model, layer, st).size();
  const auto count = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(groups) + 1e-9));
  return prune_layer_groups(model, layer, st, count);
}

// --- Plans --------------------------------------------------------------------

struct SparsityPlan {
  std::vector<int> percent;  // per layer
  double overall = 0.0;      // achieved parameter-weighted sparsity

  std::string id() const {
    std::string s;
    for (std::size_t i = 0; i < percent.size(); ++i) s += (i ? "-" : "") + std::to_string(percent[i]);
    return s;
  }
  friend bool operator==(const SparsityPlan& a, const SparsityPlan& b) { return a.percent == b.percent; }
};

/// Achieved pruned / total parameter counts of a plan, exactly.
struct PlanAccounting {
  std::uint64_t pruned = 0;
  std::uint64_t total = 0;
  double fraction() const { return total ? static_cast<double>(pruned) / static_cast<double>(total) : 0.0; }
};

inline PlanAccounting plan_accounting(std::span<const LayerShape> layers, SparsityStructure st,
                                      std::span<const int> percent) {
  if (layers.size() != percent.size()) throw std::invalid_argument("plan length does not match layer count");
  PlanAccounting acc;
  if (st.kind != StructureKind::Unit) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const GroupCount gc = group_count(layers[l], st);
      const std::size_t pg = pruned_group_count(gc.groups, percent[l]);
      acc.total += gc.params;
      acc.pruned += gc.params % gc.groups == 0 ? pg * (gc.params / gc.groups) : pg * gc.params / gc.groups;
    }
    return acc;
  }
  // Unit: physical removal, including columns fed by pruned upstream units.
  std::size_t upstream_kept = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const LayerShape& s = layers[l];
    const std::size_t kept = s.units - pruned_group_count(s.units, percent[l]);
    const std::size_t in_kept = l == 0 ? s.inputs : upstream_kept;
    const std::size_t total = s.weight_count() + s.bias_count();
    const std::size_t remaining = s.kind == LayerKind::Lstm ? 4 * (kept * in_kept + kept * kept + kept)
                                                            : kept * in_kept + kept;
    acc.total += total;
    acc.pruned += total - remaining;
    upstream_kept = kept;
  }
  return acc;
}

/// Largest per-layer percentage allowed for a target.
inline int layer_cap_percent(int target_percent) { return target_percent >= 80 ? 95 : target_percent + 20; }

namespace detail {

inline std::vector<int> grid_values(int target, int step) {
  const int cap = layer_cap_percent(target);
  std::vector<int> v;
  for (int p = 0; p <= cap && p < 100; p += step) v.push_back(p);
  if (v.back() != cap && cap < 100) v.push_back(cap);
  return v;
}

template <class Fn>
void for_each_combination(std::size_t layers, const std::vector<int>& grid, const std::vector<bool>& frozen, Fn&& fn) {
  std::vector<std::size_t> idx(layers, 0);
  std::vector<int> plan(layers, 0);
  while (true) {
    for (std::size_t l = 0; l < layers; ++l) plan[l] = frozen[l] ? 0 : grid[idx[l]];
    fn(plan);
    std::size_t l = layers;
    while (l > 0) {
      --l;
      if (frozen[l]) continue;
      if (++idx[l] < grid.size()) break;
      idx[l] = 0;
      if (l == 0) return;
    }
    if (l == 0 && (frozen[0] || idx[0] == 0)) {
      bool all_zero = true;
      for (std::size_t i = 0; i < layers; ++i) all_zero = all_zero && (frozen[i] || idx[i] == 0);
      if (all_zero) return;
    }
  }
}

}  // namespace detail

/// All per-layer grids whose achieved overall sparsity lies in
/// [target, target + step). Target 0 yields only the unpruned plan. Unit
/// structure keeps the output layer at 0.
inline std::vector<SparsityPlan> enumerate_plans(std::span<const LayerShape> layers, SparsityStructure st,
                                                 int target_percent, int step_percent = 10) {
  if (target_percent < 0 || target_percent >= 100 || step_percent <= 0) {
    throw std::invalid_argument("target must be in [0, 100) percent");
  }
  if (target_percent == 0) {
    std::vector<int> zero(layers.size(), 0);
    return {SparsityPlan{zero, 0.0}};
  }
  const auto grid = detail::grid_values(target_percent, step_percent);
  std::vector<bool> frozen(layers.size(), false);
  if (st.kind == StructureKind::Unit && !frozen.empty()) frozen.back() = true;

  std::vector<SparsityPlan> plans;
  detail::for_each_combination(layers.size(), grid, frozen, [&](const std::vector<int>& p) {
    const PlanAccounting a = plan_accounting(layers, st, p);
    const std::uint64_t lo = static_cast<std::uint64_t>(target_percent) * a.total;
    const std::uint64_t hi = static_cast<std::uint64_t>(target_percent + step_percent) * a.total;
    if (100 * a.pruned >= lo && 100 * a.pruned < hi) plans.push_back({p, a.fraction()});
  });
  return plans;
}

/// Same search over bare parameter counts, every layer prunable per scalar.
inline std::vector<SparsityPlan> enumerate_plans(std::span<const std::size_t> param_counts, int target_percent,
                                                 int step_percent = 10) {
  std::vector<LayerShape> layers;
  for (std::size_t n : param_counts) layers.push_back({LayerKind::Dense, n, 1});
  return enumerate_plans(layers, SparsityStructure::weight(), target_percent, step_percent);
}

/// Plan closest to uniform sparsity: minimal largest deviation from the
/// target over prunable layers, then lowest overall, then lexicographic.
inline const SparsityPlan& most_uniform_plan(std::span<const SparsityPlan> plans, int target_percent,
                                             SparsityStructure st) {
  if (plans.empty()) throw InfeasiblePlan("no plan meets the target sparsity");
  auto dev = [&](const SparsityPlan& p) {
    int d = 0;
    const std::size_t n = st.kind == StructureKind::Unit ? p.percent.size() - 1 : p.percent.size();
    for (std::size_t i = 0; i < n; ++i) d = std::max(d, std::abs(p.percent[i] - target_percent));
    return d;
  };
  const SparsityPlan* best = &plans.front();
  for (const SparsityPlan& p : plans) {
    const int dp = dev(p), db = dev(*best);
    if (dp < db || (dp == db && p.overall < best->overall)) best = &p;
  }
  return *best;
}

// --- Applying a plan ------------------------------------------------------------

/// Prunes a dense model per plan and re-encodes every matrix. Unit plans
/// shrink layers physically and chain the kept sets downstream.
inline SeModel prune_model(const SeModel& base, const SparsityPlan& plan, SparsityStructure st) {
  if (plan.percent.size() != kLayerCount) throw InfeasiblePlan("plan must have one entry per layer");
  for (int p : plan.percent) {
    if (p < 0 || p >= 100) throw InfeasiblePlan("per-layer sparsity must be in [0, 100) percent");
  }
  if (st.kind == StructureKind::Unit && plan.percent[kFinalLayer] != 0) {
    throw InfeasiblePlan("unit pruning of the output layer is not allowed");
  }

  std::array<LayerPruning, kLayerCount> pr;
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    const std::size_t groups = group_layer(base, l, st).size();
    pr[l] = prune_layer_groups(base, l, st, pruned_group_count(groups, plan.percent[l]));
  }

  SeModel out = base;
  if (st.kind != StructureKind::Unit) {
    auto encode = [&](Matrix& m, const PruneMask& mask) { m = SparseMatrix::encode(to_dense(m), mask, st); };
    for (std::size_t k = 0; k < 8; ++k) {
      encode(out.lstm1.matrix(k), pr[0].masks[k]);
      encode(out.lstm2.matrix(k), pr[1].masks[k]);
    }
    encode(out.dense1.weight, pr[2].masks[0]);
    encode(out.dense2.weight, pr[3].masks[0]);
    out.validate();
    return out;
  }

  auto kept_or_all = [](const std::vector<std::uint16_t>& kept, std::size_t n) {
    return kept.size() == n ? std::vector<std::uint16_t>{} : kept;
  };
  auto zero_pruned_bias = [](std::vector<std::int16_t>& bias, const std::vector<std::uint16_t>& kept) {
    std::vector<std::int16_t> b(bias.size(), 0);
    for (std::uint16_t k : kept) b[k] = bias[k];
    bias = std::move(b);
  };
  auto shrink_lstm = [&](LstmLayer& l, const std::vector<std::uint16_t>& kept, const std::vector<std::uint16_t>& in) {
    for (auto& g : l.gates) {
      g.input = SparseMatrix::encode_unit(to_dense(g.input), kept, in);
      g.recurrent = SparseMatrix::encode_unit(to_dense(g.recurrent), kept, kept);
      zero_pruned_bias(g.bias, kept);
    }
    l.kept = kept_or_all(kept, l.units);
  };
  auto shrink_dense = [&](DenseLayer& d, const std::vector<std::uint16_t>& kept, const std::vector<std::uint16_t>& in) {
    d.weight = SparseMatrix::encode_unit(to_dense(d.weight), kept, in);
    zero_pruned_bias(d.bias, kept);
    d.kept = kept_or_all(kept, d.outputs);
  };
  shrink_lstm(out.lstm1, pr[0].kept, iota_u16(base.lstm1.inputs));
  shrink_lstm(out.lstm2, pr[1].kept, pr[0].kept);
  shrink_dense(out.dense1, pr[2].kept, pr[1].kept);
  shrink_dense(out.dense2, iota_u16(base.dense2.outputs), pr[2].kept);
  out.validate();
  return out;
}

struct SparsityMeasurement {
  std::array<double, kLayerCount> per_layer{};
  double overall = 0.0;
};

/// Recounts sparsity from what the model actually stores. Weight/Block count
/// weight-matrix entries; Unit counts pruned units per layer and physically
/// removed parameters (weights and biases) overall.
inline SparsityMeasurement measure_sparsity(const SeModel& m, StructureKind kind) {
  SparsityMeasurement res;
  std::uint64_t total = 0, kept = 0;
  const auto shapes = layer_shapes(m);
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    std::uint64_t lt = 0, lk = 0;
    for (const Matrix* mat : detail::layer_matrices(m, l)) {
      lt += rows(*mat) * cols(*mat);
      lk += stored_values(*mat);
    }
    if (kind == StructureKind::Unit) {
      const std::size_t active = l == 0 ? m.lstm1.active_units()
                                 : l == 1 ? m.lstm2.active_units()
                                 : l == 2 ? m.dense1.active_outputs()
                                          : m.dense2.active_outputs();
      const std::size_t per_unit_biases = shapes[l].kind == LayerKind::Lstm ? 4 : 1;
      lt += shapes[l].bias_count();
      lk += active * per_unit_biases;
      res.per_layer[l] = 1.0 - static_cast<double>(active) / static_cast<double>(shapes[l].units);
    } else {
      res.per_layer[l] = lt ? 1.0 - static_cast<double>(lk) / static_cast<double>(lt) : 0.0;
    }
    total += lt;
    kept += lk;
  }
  res.overall = total ? 1.0 - static_cast<double>(kept) / static_cast<double>(total) : 0.0;
  return res;
}

// --- Search -----------------------------------------------------------------------

struct MetricTriple {
  double stoi = 0.0;
  double pesq = 0.0;
  double si_sdr = 0.0;
  bool external = false;  // STOI/PESQ were supplied
};

struct PlanEvaluation {
  SparsityPlan plan;
  MetricTriple metrics;
  double q = 0.0;
  double measured_sparsity = 0.0;
  Footprint footprint;
  double speedup = 1.0;
};

struct SearchReport {
  SparsityStructure structure;
  int target_percent = 0;
  bool q_si_sdr_only = false;  // Q reduced to 0.6 * SI-SDR for lack of STOI/PESQ
  std::vector<PlanEvaluation> evaluations;
  std::size_t winner = 0;

  const PlanEvaluation& best() const { return evaluations.at(winner); }
};

/// Scores a pruned model; called concurrently from several threads.
using PlanEvaluator = std::function<MetricTriple(const SeModel& pruned, const SparsityPlan& plan)>;

inline double q_of(const MetricTriple& m) {
  return m.external ? q_score(m.stoi, m.pesq, m.si_sdr) : kSiSdrWeight * m.si_sdr;
}

/// Index of the best evaluation: max Q, then smaller footprint, then plan order.
inline std::size_t select_winner(std::span<const PlanEvaluation> evals) {
  if (evals.empty()) throw InfeasiblePlan("no plan to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < evals.size(); ++i) {
    const auto& a = evals[i];
    const auto& b = evals[best];
    if (a.q > b.q || (a.q == b.q && a.footprint.total() < b.footprint.total())) best = i;
  }
  return best;
}

inline SearchReport search(const SeModel& base, int target_percent, SparsityStructure st,
                           const PlanEvaluator& evaluate, unsigned threads = 1,
                           const SpeedupModel& speedup = SpeedupModel::defaults()) {
  const auto shapes = layer_shapes(base);
  const auto plans = enumerate_plans(shapes, st, target_percent);
  if (plans.empty()) throw InfeasiblePlan("no per-layer combination meets target " + std::to_string(target_percent) + "%");

  SearchReport report;
  report.structure = st;
  report.target_percent = target_percent;
  report.evaluations.resize(plans.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) {
      try {
        const SeModel pruned = prune_model(base, plans[i], st);
        PlanEvaluation ev;
        ev.plan = plans[i];
        ev.metrics = evaluate(pruned, plans[i]);
        ev.q = q_of(ev.metrics);
        ev.measured_sparsity = measure_sparsity(pruned, st.kind).overall;
        ev.footprint = estimate_footprint(pruned);
        ev.speedup = speedup.estimate(st.kind, ev.measured_sparsity);
        report.evaluations[i] = std::move(ev);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(plans.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  report.q_si_sdr_only = std::any_of(report.evaluations.begin(), report.evaluations.end(),
                                     [](const PlanEvaluation& e) { return !e.metrics.external; });
  report.winner = select_winner(report.evaluations);
  return report;
}

// --- Evaluation on audio ----------------------------------------------------------

struct Utterance {
  std::string id;
  std::vector<double> noisy;
  std::vector<double> clean;
};

/// Externally computed STOI/PESQ, keyed by (plan id, utterance id). An empty
/// plan id applies to every plan.
class MetricTable {
 public:
  void add(std::string plan, std::string utterance, double stoi, double pesq) {
    rows_[{std::move(plan), std::move(utterance)}] = {stoi, pesq};
  }
  bool empty() const { return rows_.empty(); }

  std::optional<std::pair<double, double>> lookup(const std::string& plan, const std::string& utterance) const {
    if (auto it = rows_.find({plan, utterance}); it != rows_.end()) return it->second;
    if (auto it = rows_.find({std::string(), utterance}); it != rows_.end()) return it->second;
    return std::nullopt;
  }

  /// CSV with "utterance,stoi,pesq" or "plan,utterance,stoi,pesq" rows; a
  /// header line is skipped.
  static MetricTable parse_csv(std::istream& in) {
    MetricTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() != 3 && f.size() != 4) {
        throw std::invalid_argument("metrics CSV line " + std::to_string(lineno) + ": expected 3 or 4 fields");
      }
      const std::size_t off = f.size() - 3;
      double stoi = 0, pesq = 0;
      try {
        stoi = std::stod(f[off + 1]);
        pesq = std::stod(f[off + 2]);
      } catch (const std::exception&) {
        if (lineno == 1) continue;  // header
        throw std::invalid_argument("metrics CSV line " + std::to_string(lineno) + ": non-numeric metric");
      }
      t.add(off ? f[0] : std::string(), f[off], stoi, pesq);
    }
    return t;
  }

 private:
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> rows_;
};

/// Evaluator that enhances every utterance, averages SI-SDR against the clean
/// reference, and averages STOI/PESQ from `table` when every row is present.
inline PlanEvaluator make_audio_evaluator(std::vector<Utterance> eval_set, MetricTable table) {
  if (eval_set.empty()) throw std::invalid_argument("evaluation set is empty");
  auto set = std::make_shared<const std::vector<Utterance>>(std::move(eval_set));
  auto tbl = std::make_shared<const MetricTable>(std::move(table));
  return [set, tbl](const SeModel& pruned, const SparsityPlan& plan) {
    MetricTriple m;
    double stoi = 0, pesq = 0;
    bool external = !tbl->empty();
    for (const Utterance& u : *set) {
      const auto enhanced = enhance(pruned, u.noisy, pruned.dsp.sample_rate);
      m.si_sdr += si_sdr(u.clean, enhanced);
      if (external) {
        if (auto v = tbl->lookup(plan.id(), u.id)) {
          stoi += v->first;
          pesq += v->second;
        } else {
          external = false;
        }
      }
    }
    const double n = static_cast<double>(set->size());
    m.si_sdr /= n;
    if (external) {
      m.stoi = stoi / n;
      m.pesq = pesq / n;
      m.external = true;
    }
    return m;
  };
}

}  // namespace ssem
