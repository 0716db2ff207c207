#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "ssem/compression.hpp"
#include "ssem/toy_model.hpp"
#include "support/oracles.hpp"

using namespace ssem;

namespace {

const SparsityStructure kAll[] = {SparsityStructure::weight(), SparsityStructure::block(8), SparsityStructure::unit()};

/// Brute-force recount of pruned parameters from the per-layer percentages.
double brute_overall(const std::vector<LayerShape>& shapes, SparsityStructure st, const std::vector<int>& p) {
  double pruned = 0, total = 0;
  std::size_t upstream = 0;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& s = shapes[l];
    const auto gc = group_count(s, st);
    const std::size_t pg = static_cast<std::size_t>(p[l]) * gc.groups / 100;
    if (st.kind == StructureKind::Unit) {
      const std::size_t kept = s.units - pg;
      const std::size_t in = l == 0 ? s.inputs : upstream;
      const double all = static_cast<double>(s.weight_count() + s.bias_count());
      const double rem = s.kind == LayerKind::Lstm ? 4.0 * (kept * in + kept * kept + kept) : 1.0 * (kept * in + kept);
      pruned += all - rem;
      total += all;
      upstream = kept;
    } else {
      pruned += static_cast<double>(pg) * gc.params / gc.groups;
      total += gc.params;
    }
  }
  return pruned / total;
}

}  // namespace

TEST(Groups, CountsPerStructure) {
  const auto m = make_toy_model(1, ModelDims::toy());
  const auto shapes = layer_shapes(m);
  EXPECT_EQ(group_count(shapes[0], SparsityStructure::weight()).groups, 4u * (16 * 16 + 16 * 16));
  EXPECT_EQ(group_count(shapes[0], SparsityStructure::block(8)).groups, 4u * (16 * 2 + 16 * 2));
  EXPECT_EQ(group_count(shapes[0], SparsityStructure::unit()).groups, 16u);
  EXPECT_EQ(group_count(shapes[3], SparsityStructure::block(3)).groups, 16u * 6);
  for (auto st : kAll) {
    const auto g = group_weights(m, st);
    ASSERT_EQ(g.size(), 4u);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(g[l].size(), group_count(shapes[l], st).groups);
  }
}

TEST(Groups, FullSizeLstmHas256UnitGroupsCoveringEveryParameterOnce) {
  const auto m = make_zero_model(ModelDims::full());
  const auto g = group_layer(m, 1, SparsityStructure::unit());
  ASSERT_EQ(g.size(), 256u);
  std::size_t covered = 0;
  for (const auto& grp : g) covered += grp.size;
  EXPECT_EQ(covered, 4u * (256 * 256 + 256 * 256 + 256));
}

TEST(Groups, L1IsSumOfDequantizedMagnitudes) {
  const auto m = make_toy_model(3, ModelDims::toy());
  const auto g = group_layer(m, 2, SparsityStructure::unit());
  const auto w = to_dense(m.dense1.weight);
  for (std::size_t r = 0; r < 16; ++r) {
    double l1 = std::fabs(dequantize(m.dense1.bias[r], kQ8));
    for (std::size_t c = 0; c < 16; ++c) l1 += std::fabs(dequantize(w.at(r, c), kQ8));
    EXPECT_NEAR(g[r].l1, l1, 1e-12);
  }
}

TEST(SelectPruned, LowestL1FirstTiesByOrder) {
  std::vector<GroupScore> g = {{0, 0, 0, 0, 1, 3.0}, {1, 0, 1, 0, 1, 1.0}, {2, 0, 2, 0, 1, 1.0}, {3, 0, 3, 0, 1, 0.5}};
  EXPECT_EQ(select_pruned(g, 2), (std::vector<std::uint8_t>{0, 1, 0, 1}));
  EXPECT_EQ(select_pruned(g, 0), (std::vector<std::uint8_t>{0, 0, 0, 0}));
  EXPECT_THROW(select_pruned(g, 5), std::invalid_argument);
}

TEST(PruneLayer, ZeroSparsityKeepsEverything) {
  const auto m = make_toy_model(4, ModelDims::toy());
  for (auto st : kAll) {
    const auto p = prune_layer(m, 0, st, 0.0);
    for (const auto& mask : p.masks) EXPECT_EQ(mask.kept_count(), mask.rows * mask.cols);
  }
}

TEST(PruneLayer, UnitMasksClearRowsAndRecurrentColumns) {
  const auto m = make_toy_model(5, ModelDims::toy());
  const auto p = prune_layer(m, 1, SparsityStructure::unit(), 0.25);
  EXPECT_EQ(p.kept.size(), 12u);
  std::set<std::size_t> kept(p.kept.begin(), p.kept.end());
  for (std::size_t k = 0; k < 8; ++k) {
    for (std::size_t r = 0; r < 16; ++r) {
      for (std::size_t c = 0; c < 16; ++c) {
        const bool row_ok = kept.count(r) > 0;
        const bool col_ok = k % 2 == 0 || kept.count(c) > 0;
        ASSERT_EQ(p.masks[k].kept(r, c), row_ok && col_ok);
      }
    }
  }
}

TEST(PruneLayer, OutputLayerUnitPruningRejected) {
  const auto m = make_toy_model(5, ModelDims::toy());
  EXPECT_THROW(prune_layer(m, 3, SparsityStructure::unit(), 0.2), InfeasiblePlan);
  EXPECT_NO_THROW(prune_layer(m, 3, SparsityStructure::unit(), 0.0));
}

TEST(PruneLayer, NoKeptGroupBelowAnyPrunedGroup) {
  std::mt19937_64 rng(6);
  for (auto st : kAll) {
    for (int trial = 0; trial < 5; ++trial) {
      const auto m = make_toy_model(rng(), ModelDims::toy());
      for (std::size_t l = 0; l < 3; ++l) {
        const auto groups = group_layer(m, l, st);
        const std::size_t count = rng() % groups.size();
        const auto pruned = select_pruned(groups, count);
        double max_pruned = -1, min_kept = 1e30;
        for (const auto& g : groups) {
          if (pruned[g.id]) {
            max_pruned = std::max(max_pruned, g.l1);
          } else {
            min_kept = std::min(min_kept, g.l1);
          }
        }
        EXPECT_LE(max_pruned, min_kept);
      }
    }
  }
}

TEST(Plans, WorkedExampleOverRawCounts) {
  // Four equal layers, target 30%: every plan lies in [30%, 40%).
  const std::vector<std::size_t> counts = {1000, 1000, 1000, 1000};
  const auto plans = enumerate_plans(counts, 30);
  ASSERT_FALSE(plans.empty());
  bool has_uniform = false;
  for (const auto& p : plans) {
    const int sum = p.percent[0] + p.percent[1] + p.percent[2] + p.percent[3];
    EXPECT_GE(sum, 120);
    EXPECT_LT(sum, 160);
    for (int v : p.percent) EXPECT_LE(v, 50);
    has_uniform = has_uniform || p.percent == std::vector<int>{30, 30, 30, 30};
  }
  EXPECT_TRUE(has_uniform);
}

TEST(Plans, AchievedSparsityWithinWindowAndMatchesRecount) {
  const auto m = make_zero_model(ModelDims::full());
  const auto shapes = layer_shapes(m);
  for (auto st : kAll) {
    for (int t : {10, 30, 50, 70, 80, 90}) {
      const auto plans = enumerate_plans(shapes, st, t);
      ASSERT_FALSE(plans.empty()) << to_string(st.kind) << " " << t;
      for (const auto& p : plans) {
        EXPECT_GE(p.overall, t / 100.0 - 1e-12);
        EXPECT_LT(p.overall, (t + 10) / 100.0);
        EXPECT_NEAR(p.overall, brute_overall(shapes, st, p.percent), 1e-12);
        if (st.kind == StructureKind::Unit) {
          EXPECT_EQ(p.percent[3], 0);
        }
      }
    }
  }
}

TEST(Plans, TargetZeroIsUnpruned) {
  const auto m = make_zero_model(ModelDims::toy());
  const auto plans = enumerate_plans(layer_shapes(m), SparsityStructure::weight(), 0);
  ASSERT_EQ(plans.size(), 1u);
  EXPECT_EQ(plans[0].percent, (std::vector<int>{0, 0, 0, 0}));
}

TEST(Plans, InvalidTargetsRejected) {
  const auto shapes = layer_shapes(make_zero_model(ModelDims::toy()));
  EXPECT_THROW(enumerate_plans(shapes, SparsityStructure::weight(), 100), std::invalid_argument);
  EXPECT_THROW(enumerate_plans(shapes, SparsityStructure::weight(), -5), std::invalid_argument);
}

TEST(Plans, MostUniformPrefersEqualLayers) {
  const auto shapes = layer_shapes(make_zero_model(ModelDims::full()));
  const auto plans = enumerate_plans(shapes, SparsityStructure::block(8), 50);
  EXPECT_EQ(most_uniform_plan(plans, 50, SparsityStructure::block(8)).percent, (std::vector<int>{50, 50, 50, 50}));
  EXPECT_THROW(most_uniform_plan(std::vector<SparsityPlan>{}, 50, SparsityStructure::weight()), InfeasiblePlan);
}

TEST(PruneModel, MeasuredSparsityMatchesPlan) {
  const auto m = make_toy_model(8, ModelDims::toy());
  const auto shapes = layer_shapes(m);
  for (auto st : kAll) {
    for (int t : {20, 50, 80}) {
      const auto plans = enumerate_plans(shapes, st, t);
      ASSERT_FALSE(plans.empty());
      for (std::size_t i = 0; i < plans.size(); i += std::max<std::size_t>(1, plans.size() / 7)) {
        const auto pruned = prune_model(m, plans[i], st);
        const auto ms = measure_sparsity(pruned, st.kind);
        EXPECT_NEAR(ms.overall, plans[i].overall, 1e-12) << plans[i].id();
        EXPECT_GE(ms.overall, t / 100.0 - 1e-12);
        EXPECT_LT(ms.overall, (t + 10) / 100.0);
        for (std::size_t l = 0; l < 4; ++l) {
          const double g = static_cast<double>(group_count(shapes[l], st).groups);
          EXPECT_NEAR(ms.per_layer[l], plans[i].percent[l] / 100.0, 1.0 / g + 1e-12);
        }
      }
    }
  }
}

TEST(PruneModel, UnitPrunedModelMatchesZeroedDenseModel) {
  // Physically removing units must give the same output as zeroing their
  // parameters and their fan-out in a dense model.
  const auto m = make_toy_model(10, ModelDims::toy());
  const SparsityPlan plan{{25, 50, 25, 0}, 0.0};
  const auto pruned = prune_model(m, plan, SparsityStructure::unit());
  EXPECT_EQ(pruned.lstm1.active_units(), 12u);
  EXPECT_EQ(pruned.lstm2.active_units(), 8u);
  EXPECT_EQ(pruned.dense1.active_outputs(), 12u);

  SeModel zeroed = m;
  auto zero_rows_cols = [](Matrix& mat, const std::vector<std::uint16_t>& rows_kept,
                           const std::vector<std::uint16_t>& cols_kept) {
    auto d = to_dense(mat);
    std::set<std::size_t> rk(rows_kept.begin(), rows_kept.end()), ck(cols_kept.begin(), cols_kept.end());
    for (std::size_t r = 0; r < d.rows; ++r) {
      for (std::size_t c = 0; c < d.cols; ++c) {
        if (!rk.count(r) || !ck.count(c)) d.values[r * d.cols + c] = 0;
      }
    }
    mat = d;
  };
  auto zero_bias = [](std::vector<std::int16_t>& b, const std::vector<std::uint16_t>& kept) {
    std::set<std::size_t> k(kept.begin(), kept.end());
    for (std::size_t i = 0; i < b.size(); ++i) {
      if (!k.count(i)) b[i] = 0;
    }
  };
  const auto k1 = pruned.lstm1.active_indices(), k2 = pruned.lstm2.active_indices();
  const auto kd = pruned.dense1.active_indices();
  for (std::size_t g = 0; g < 4; ++g) {
    zero_rows_cols(zeroed.lstm1.gates[g].input, k1, iota_u16(16));
    zero_rows_cols(zeroed.lstm1.gates[g].recurrent, k1, k1);
    zero_bias(zeroed.lstm1.gates[g].bias, k1);
    zero_rows_cols(zeroed.lstm2.gates[g].input, k2, k1);
    zero_rows_cols(zeroed.lstm2.gates[g].recurrent, k2, k2);
    zero_bias(zeroed.lstm2.gates[g].bias, k2);
  }
  zero_rows_cols(zeroed.dense1.weight, kd, k2);
  zero_bias(zeroed.dense1.bias, kd);
  // Pruned dense1 units still emit tanh(0) = 0, so only their columns matter.
  zero_rows_cols(zeroed.dense2.weight, iota_u16(16), kd);

  std::mt19937_64 rng(3);
  const auto x = oracle::random_signal(rng, 6000, 0.4);
  EXPECT_EQ(enhance(pruned, x, 16000), enhance(zeroed, x, 16000));
}

TEST(PruneModel, ZeroPlanKeepsOutputs) {
  const auto m = make_toy_model(12, ModelDims::toy());
  std::mt19937_64 rng(4);
  const auto x = oracle::random_signal(rng, 4000, 0.4);
  const auto ref = enhance(m, x, 16000);
  for (auto st : kAll) {
    const auto p = prune_model(m, SparsityPlan{{0, 0, 0, 0}, 0}, st);
    EXPECT_EQ(enhance(p, x, 16000), ref) << to_string(st.kind);
  }
}

TEST(PruneModel, RejectsBadPlans) {
  const auto m = make_toy_model(12, ModelDims::toy());
  EXPECT_THROW(prune_model(m, SparsityPlan{{10, 10, 10}, 0}, SparsityStructure::weight()), InfeasiblePlan);
  EXPECT_THROW(prune_model(m, SparsityPlan{{10, 10, 10, 100}, 0}, SparsityStructure::weight()), InfeasiblePlan);
  EXPECT_THROW(prune_model(m, SparsityPlan{{10, 10, 10, 10}, 0}, SparsityStructure::unit()), InfeasiblePlan);
}

TEST(Search, MatchesBruteForceArgmax) {
  const auto m = make_toy_model(13, ModelDims::toy());
  auto oracle_q = [](const SparsityPlan& p) {
    const double a = p.percent[0] - 40.0, b = p.percent[1] - 20.0, c = p.percent[2] - 60.0, d = p.percent[3] - 10.0;
    return -(a * a + 2 * b * b + 0.5 * c * c + d * d) / 1000.0;
  };
  PlanEvaluator eval = [&](const SeModel&, const SparsityPlan& p) {
    return MetricTriple{0.0, 0.0, oracle_q(p) / kSiSdrWeight, false};
  };
  for (int threads : {1, 3}) {
    const auto r = search(m, 40, SparsityStructure::weight(), eval, threads);
    const auto plans = enumerate_plans(layer_shapes(m), SparsityStructure::weight(), 40);
    ASSERT_EQ(r.evaluations.size(), plans.size());
    std::size_t best = 0;
    for (std::size_t i = 1; i < plans.size(); ++i) {
      if (oracle_q(plans[i]) > oracle_q(plans[best])) best = i;
    }
    EXPECT_EQ(r.best().plan.percent, plans[best].percent);
    EXPECT_TRUE(r.q_si_sdr_only);
  }
}

TEST(Search, TieBreaksBySmallerFootprintThenOrder) {
  std::vector<PlanEvaluation> e(3);
  for (auto& x : e) x.q = 1.0;
  e[0].footprint.weight_bytes = 100;
  e[1].footprint.weight_bytes = 50;
  e[2].footprint.weight_bytes = 50;
  EXPECT_EQ(select_winner(e), 1u);
  e[2].q = 1.5;
  EXPECT_EQ(select_winner(e), 2u);
}

TEST(Search, TargetZeroEvaluatesOnlyUnpruned) {
  const auto m = make_toy_model(14, ModelDims::toy());
  PlanEvaluator eval = [](const SeModel&, const SparsityPlan&) { return MetricTriple{0.9, 3.0, 10.0, true}; };
  const auto r = search(m, 0, SparsityStructure::block(8), eval);
  ASSERT_EQ(r.evaluations.size(), 1u);
  EXPECT_NEAR(r.best().q, q_score(0.9, 3.0, 10.0), 1e-12);
  EXPECT_FALSE(r.q_si_sdr_only);
}

TEST(Search, EvaluatorFailurePropagates) {
  const auto m = make_toy_model(14, ModelDims::toy());
  PlanEvaluator eval = [](const SeModel&, const SparsityPlan&) -> MetricTriple { throw std::runtime_error("boom"); };
  EXPECT_THROW(search(m, 30, SparsityStructure::unit(), eval, 2), std::runtime_error);
}

TEST(MetricTable, ParsesBothLayouts) {
  std::istringstream in(
      "utterance,stoi,pesq\n"
      "u1,0.9,3.1\n"
      "30-30-30-30,u1,0.8,2.5\n");
  const auto t = MetricTable::parse_csv(in);
  EXPECT_EQ(t.lookup("0-0-0-0", "u1")->first, 0.9);
  EXPECT_EQ(t.lookup("30-30-30-30", "u1")->second, 2.5);
  EXPECT_FALSE(t.lookup("x", "u2").has_value());
  std::istringstream bad("u1,0.9\n");
  EXPECT_THROW(MetricTable::parse_csv(bad), std::invalid_argument);
  std::istringstream bad2("h,s,p\nu1,zz,1\n");
  EXPECT_THROW(MetricTable::parse_csv(bad2), std::invalid_argument);
}

TEST(AudioEvaluator, UsesTableWhenComplete) {
  const auto m = make_toy_model(15, ModelDims::toy());
  std::mt19937_64 rng(2);
  std::vector<Utterance> set = {{"a", oracle::random_signal(rng, 4000), oracle::random_signal(rng, 4000)}};
  MetricTable t;
  t.add("", "a", 0.5, 2.0);
  const auto full = make_audio_evaluator(set, t)(m, SparsityPlan{{0, 0, 0, 0}, 0});
  EXPECT_TRUE(full.external);
  EXPECT_EQ(full.stoi, 0.5);
  const auto bare = make_audio_evaluator(set, MetricTable{})(m, SparsityPlan{{0, 0, 0, 0}, 0});
  EXPECT_FALSE(bare.external);
  EXPECT_DOUBLE_EQ(bare.si_sdr, full.si_sdr);
  EXPECT_DOUBLE_EQ(bare.si_sdr, si_sdr(set[0].clean, enhance(m, set[0].noisy, 16000)));
}
