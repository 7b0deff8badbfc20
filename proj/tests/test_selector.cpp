#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cln/selector.hpp"
#include "support/grad_cases.hpp"

using namespace cln;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

GlobalKeyBank global_bank(const std::vector<std::vector<double>>& keys) {
  GlobalKeyBank bank(keys.at(0).size());
  for (const auto& k : keys) bank.add_key_values(vec(k));
  return bank;
}

// One site per entry of `keys`, attentions all ones unless given.
LayerKeyBank layer_bank(std::size_t d, std::size_t sites, const std::vector<std::vector<std::vector<double>>>& keys,
                        const std::vector<std::vector<std::vector<double>>>& attn = {}) {
  LayerKeyBank bank(d, sites);
  for (std::size_t t = 0; t < keys.size(); ++t) {
    std::vector<Tensor> k, a;
    for (std::size_t s = 0; s < sites; ++s) {
      k.push_back(vec(keys[t][s]));
      a.push_back(attn.empty() ? Tensor(Shape{d}, 1.0) : vec(attn[t][s]));
    }
    bank.add_task_values(std::move(k), std::move(a));
  }
  return bank;
}

double two_stage_loss(const std::vector<std::vector<double>>& batch, const std::vector<double>& key) {
  std::vector<double> flat;
  for (const auto& e : batch) flat.insert(flat.end(), e.begin(), e.end());
  return key_loss_two_stage(flat, batch.size(), key);
}

}  // namespace

TEST(TwoStageKeyLoss, Examples) {
  const std::vector<double> k{0.6, -0.8, 0.0};
  EXPECT_NEAR(two_stage_loss({k, {1.2, -1.6, 0.0}}, k), 0.0, 1e-15);
  EXPECT_NEAR(two_stage_loss({{0.8, 0.6, 0.0}, {0.0, 0.0, 3.0}}, k), 1.0, 1e-15);
  EXPECT_NEAR(two_stage_loss({k, {-0.6, 0.8, 0.0}}, k), 1.0, 1e-15);
  EXPECT_THROW(key_loss_two_stage(std::vector<double>{}, 0, k), std::invalid_argument);
}

TEST(TwoStageKeyLoss, GraphMatchesScalarForm) {
  Rng rng(1);
  Tensor emb = cln::testing::random_tensor({5, 6}, rng, 1.0, false);
  Tensor key = cln::testing::random_tensor({6}, rng, 1.0, false);
  Graph g;
  const double graph_value = g.item(key_loss_two_stage(g, g.view(emb), g.view(key)));
  EXPECT_NEAR(graph_value, key_loss_two_stage(emb.values(), 5, key.values()), 1e-14);
}

TEST(SelectTwoStage, Examples) {
  EXPECT_EQ(select_two_stage(std::vector<double>{3, -1}, global_bank({{0.2, 0.9}})), 0u);
  const auto bank = global_bank({{1, 0}, {0, 1}});
  EXPECT_EQ(select_two_stage(std::vector<double>{0.9, 0.1}, bank), 0u);
  EXPECT_EQ(select_two_stage(std::vector<double>{0.1, 0.9}, bank), 1u);
}

TEST(SelectTwoStage, TiesGoToLowestIndex) {
  const auto bank = global_bank({{1, 1}, {1, 1}, {2, 2}});
  EXPECT_EQ(select_two_stage(std::vector<double>{1, 0}, bank), 0u);
}

TEST(SelectTwoStage, DegenerateQueryAndEmptyBank) {
  const auto bank = global_bank({{1, 0}, {0, 1}});
  EXPECT_EQ(select_two_stage(std::vector<double>{0, 0}, bank), 0u);
  const auto with_zero_key = global_bank({{0, 0}, {0, 1}});
  EXPECT_EQ(select_two_stage(std::vector<double>{1, 0}, with_zero_key), 1u);
  GlobalKeyBank empty(2);
  try {
    select_two_stage(std::vector<double>{1, 0}, empty);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "no tasks");
  }
}

TEST(SelectTwoStage, InvariantUnderPositiveScaling) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    GlobalKeyBank bank(8);
    for (int t = 0; t < 6; ++t) bank.add_key(Rng::derive(trial, t));
    std::vector<double> e(8);
    for (auto& v : e) v = rng.normal();
    const auto base = select_two_stage(e, bank);
    for (double c : {5.0, 1e-3, 1e3, rng.uniform(0.01, 100.0)}) {
      auto scaled = e;
      for (auto& v : scaled) v *= c;
      EXPECT_EQ(select_two_stage(scaled, bank), base);
    }
  }
}

TEST(SelectSingleStage, ScaledCosineExample) {
  const auto bank = layer_bank(2, 1, {{{1, 0}}, {{0, 1}}}, {{{1, 1}}, {{0, 1}}});
  EXPECT_EQ(select_single_stage_layer(std::vector<double>{10, 1}, bank, 0), 1u);
  // Without the attention vector the first key wins.
  const auto plain = layer_bank(2, 1, {{{1, 0}}, {{0, 1}}});
  EXPECT_EQ(select_single_stage_layer(std::vector<double>{10, 1}, plain, 0), 0u);
}

TEST(SelectSingleStage, QueryEqualToKeyPicksThatTask) {
  const auto bank = layer_bank(3, 2, {{{1, 0, 0}, {0, 1, 0}}, {{0, 0, 1}, {1, 0, 0}}, {{0, 1, 0}, {0, 0, 1}}});
  EXPECT_EQ(select_single_stage_layer(std::vector<double>{0, 0, 1}, bank, 0), 1u);
  EXPECT_EQ(select_single_stage_layer(std::vector<double>{0, 0, 1}, bank, 1), 2u);
  EXPECT_THROW(select_single_stage_layer(std::vector<double>{0, 0, 1}, bank, 2), std::out_of_range);
}

TEST(SelectSingleStage, OnesAttentionEqualsTwoStageOnLayerKeys) {
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    const std::size_t d = 6, sites = 3, tasks = 5;
    LayerKeyBank bank(d, sites);
    for (std::size_t t = 0; t < tasks; ++t) bank.add_task(Rng::derive(trial, t));
    Rng rng(trial);
    std::vector<double> z(d);
    for (auto& v : z) v = rng.normal();
    for (std::size_t s = 0; s < sites; ++s) {
      GlobalKeyBank global(d);
      for (std::size_t t = 0; t < tasks; ++t) global.add_key_values(bank.key(t, s));
      EXPECT_EQ(select_single_stage_layer(z, bank, s), select_two_stage(z, global));
    }
  }
}

TEST(LayerKeyBank, AttentionInitializedToOnes) {
  LayerKeyBank bank(4, 3);
  bank.add_task(7);
  for (std::size_t s = 0; s < 3; ++s) {
    for (double v : bank.attention(0, s).values()) EXPECT_EQ(v, 1.0);
    double norm = 0.0;
    for (double v : bank.key(0, s).values()) norm += v * v;
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
}

TEST(SingleStageKeyLoss, PerfectAlignmentGivesZero) {
  Rng rng(3);
  LayerKeyBank bank(4, 3);
  bank.add_task(1);
  Graph g;
  std::vector<Var> acts;
  for (std::size_t s = 0; s < 3; ++s) {
    std::vector<double> rows;
    for (int b = 0; b < 2; ++b)
      for (double v : bank.key(0, s).values()) rows.push_back(v * (1.0 + b));
    acts.push_back(g.constant({2, 4}, rows));
  }
  EXPECT_NEAR(g.item(key_loss_single_stage(g, acts, bank, 0).aggregate), 0.0, 1e-15);
}

TEST(SingleStageKeyLoss, AggregateIsMeanOfLayers) {
  // cos([1,0], [0.8,0.6]) = 0.8 and cos([1,0], [0.4,sqrt(0.84)]) = 0.4.
  const auto bank = layer_bank(2, 2, {{{0.8, 0.6}, {0.4, std::sqrt(0.84)}}});
  Graph g;
  std::vector<Var> acts{g.constant({1, 2}, {1, 0}), g.constant({1, 2}, {1, 0})};
  const auto loss = key_loss_single_stage(g, acts, bank, 0);
  EXPECT_NEAR(g.item(loss.per_layer[0]), 0.2, 1e-15);
  EXPECT_NEAR(g.item(loss.per_layer[1]), 0.6, 1e-15);
  EXPECT_NEAR(g.item(loss.aggregate), 0.4, 1e-15);
}

TEST(SingleStageKeyLoss, AggregateEqualsMeanWithinTolerance) {
  Rng rng(4);
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    const std::size_t d = 5, sites = 4;
    LayerKeyBank bank(d, sites);
    bank.add_task(trial);
    for (std::size_t s = 0; s < sites; ++s)
      for (auto& v : bank.mutable_attention(0, s).mutable_values()) v = rng.normal();
    Graph g;
    std::vector<Var> acts;
    for (std::size_t s = 0; s < sites; ++s) {
      std::vector<double> rows(3 * d);
      for (auto& v : rows) v = rng.normal();
      acts.push_back(g.constant({3, d}, rows));
    }
    const auto loss = key_loss_single_stage(g, acts, bank, 0);
    double mean = 0.0;
    for (Var v : loss.per_layer) mean += g.item(v);
    mean /= sites;
    EXPECT_NEAR(g.item(loss.aggregate), mean, 1e-12);
  }
}

TEST(SingleStageKeyLoss, WrongActivationCountAndTask) {
  LayerKeyBank bank(2, 3);
  bank.add_task(1);
  Graph g;
  std::vector<Var> acts{g.constant({1, 2}, {1, 0}), g.constant({1, 2}, {0, 1})};
  EXPECT_THROW(key_loss_single_stage(g, acts, bank, 0), std::invalid_argument);
  acts.push_back(g.constant({1, 2}, {1, 1}));
  EXPECT_THROW(key_loss_single_stage(g, acts, bank, 1), std::out_of_range);
}

TEST(SingleStageKeyLoss, NoGradientReachesActivations) {
  Rng rng(5);
  Tensor z = cln::testing::random_tensor({2, 3}, rng);
  LayerKeyBank bank(3, 1);
  bank.add_task(2);
  bank.set_trainable(0);
  Graph g;
  std::vector<Var> acts{g.param(z)};
  g.backward(key_loss_single_stage(g, acts, bank, 0).aggregate);
  for (double v : z.grad()) EXPECT_EQ(v, 0.0);
  double key_grad = 0.0;
  for (double v : bank.key(0, 0).grad()) key_grad += std::abs(v);
  EXPECT_GT(key_grad, 0.0);
}

TEST(KeyLosses, BoundedOnRandomInstances) {
  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 2 + trial % 7, batch = 1 + trial % 4;
    std::vector<double> emb(batch * d), key(d);
    for (auto& v : emb) v = rng.normal(0, rng.uniform(0.01, 10));
    for (auto& v : key) v = rng.normal();
    const double two = key_loss_two_stage(emb, batch, key);
    EXPECT_GE(two, 0.0);
    EXPECT_LE(two, 2.0);

    LayerKeyBank bank(d, 2);
    bank.add_task(trial);
    for (std::size_t s = 0; s < 2; ++s)
      for (auto& v : bank.mutable_attention(0, s).mutable_values()) v = rng.normal();
    Graph g;
    std::vector<Var> acts{g.constant({batch, d}, emb), g.constant({batch, d}, emb)};
    const auto single = key_loss_single_stage(g, acts, bank, 0);
    for (Var v : single.per_layer) {
      EXPECT_GE(g.item(v), 0.0);
      EXPECT_LE(g.item(v), 2.0);
    }
  }
}

TEST(KeySimilarity, Properties) {
  EXPECT_EQ(key_similarity_matrix(global_bank({{0.3, 0.4}})), (Matrix{{1.0}}));
  EXPECT_EQ(key_similarity_matrix(global_bank({{1, 0, 0}, {0, 2, 0}, {0, 0, 3}})),
            (Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  GlobalKeyBank bank(8);
  for (int t = 0; t < 7; ++t) bank.add_key(t);
  const Matrix m = key_similarity_matrix(bank);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(m[i][i], 1.0);
    for (std::size_t j = 0; j < 7; ++j) EXPECT_EQ(m[i][j], m[j][i]);
  }
  const auto p = std::filesystem::temp_directory_path() / "cln_test_similarity.csv";
  write_similarity_csv(m, p);
  EXPECT_EQ(read_similarity_csv(p), m);
}

TEST(SingleStageProvider, RecordsOneSelectionPerSite) {
  const auto cfg = cln::testing::tiny_config();
  Backbone bb = Backbone::initialize(cfg, 1);
  bb.freeze();
  ClnBank cln_bank(cfg.embed_dim, cfg.num_sites());
  LayerKeyBank keys(cfg.embed_dim, cfg.num_sites());
  for (int t = 0; t < 3; ++t) {
    cln_bank.add_task(bb);
    keys.add_task(t);
  }
  SingleStageLnProvider provider(cln_bank, keys);
  std::vector<double> images(4 * cfg.image_values(), 0.25);
  Graph g;
  bb.forward(g, images, 4, provider);
  ASSERT_EQ(provider.selections().size(), 4u);
  for (const auto& per_sample : provider.selections()) EXPECT_EQ(per_sample.size(), cfg.num_sites());

  LayerKeyBank none(cfg.embed_dim, cfg.num_sites());
  EXPECT_THROW(SingleStageLnProvider(cln_bank, none), std::invalid_argument);
}
