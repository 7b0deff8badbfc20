#include <gtest/gtest.h>

#include <filesystem>

#include "cln/cln_bank.hpp"
#include "cln/numcore.hpp"
#include "support/grad_cases.hpp"

using namespace cln;
namespace fs = std::filesystem;

namespace {

ClnBank bank_with(std::size_t d, std::size_t sites, std::vector<double> gamma, std::vector<double> beta) {
  ClnBank bank(d, sites);
  std::vector<Tensor> g, b;
  for (std::size_t s = 0; s < sites; ++s) {
    g.emplace_back(Shape{d}, gamma);
    b.emplace_back(Shape{d}, beta);
  }
  bank.add_task_values(std::move(g), std::move(b));
  return bank;
}

Backbone frozen_tiny(std::uint64_t seed) {
  Backbone bb = Backbone::initialize(cln::testing::tiny_config(), seed);
  Rng rng(seed);
  for (auto& [name, t] : bb.mutable_named_tensors())
    if (name.find("ln") != std::string::npos)
      for (auto& v : t->mutable_values()) v += rng.normal(0.0, 0.5);
  bb.freeze();
  return bb;
}

}  // namespace

TEST(ClnApply, IdentityAffineEqualsLayerNormalize) {
  const auto bank = bank_with(3, 2, {1, 1, 1}, {0, 0, 0});
  const std::vector<double> z{0.3, -2.0, 7.5};
  EXPECT_EQ(bank.apply(z, 0, 1, 1e-5), layer_normalize(z, 1e-5));
}

TEST(ClnApply, ZeroScaleOutputsBias) {
  const auto bank = bank_with(3, 1, {0, 0, 0}, {0.5, -1, 2});
  for (const std::vector<double>& z : {std::vector<double>{1, 2, 3}, std::vector<double>{-9, 0, 4}})
    EXPECT_EQ(bank.apply(z, 0, 0, 1e-5), (std::vector<double>{0.5, -1, 2}));
}

TEST(ClnApply, HandEvaluatedExample) {
  const auto bank = bank_with(3, 1, {2, 2, 2}, {1, 1, 1});
  const auto out = bank.apply(std::vector<double>{1, 2, 3}, 0, 0, 0.0);
  EXPECT_NEAR(out[0], -1.449489742783178, 1e-14);
  EXPECT_NEAR(out[1], 1.0, 1e-15);
  EXPECT_NEAR(out[2], 3.449489742783178, 1e-14);
}

TEST(ClnApply, UnknownTaskOrSite) {
  const auto bank = bank_with(2, 3, {1, 1}, {0, 0});
  const std::vector<double> z{1, 2};
  for (auto [t, s] : {std::pair<std::size_t, std::size_t>{1, 0}, {0, 3}}) {
    try {
      bank.apply(z, t, s, 1e-5);
      FAIL();
    } catch (const std::out_of_range& e) {
      EXPECT_STREQ(e.what(), "unknown task/site");
    }
  }
}

TEST(ClnApply, ScaleEquivariance) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> g(5), b(5), z(5);
    for (auto& v : g) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    for (auto& v : z) v = rng.normal(0, 3);
    const double c = rng.uniform(0.1, 4.0);
    auto scaled_g = g;
    for (auto& v : scaled_g) v *= c;
    const auto one = bank_with(5, 1, g, b).apply(z, 0, 0, 1e-5);
    const auto two = bank_with(5, 1, scaled_g, b).apply(z, 0, 0, 1e-5);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(two[j] - b[j], c * (one[j] - b[j]), 1e-12);
  }
}

TEST(ClnBank, AddTaskClonesBase) {
  const Backbone bb = frozen_tiny(3);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  EXPECT_EQ(bank.add_task(bb), 0u);
  EXPECT_EQ(bank.trainable_task(), std::optional<std::size_t>(0));
  for (std::size_t s = 0; s < bank.num_sites(); ++s) {
    EXPECT_TRUE(bank.gamma(0, s).values().size() == bb.ln_gamma(s).numel());
    for (std::size_t j = 0; j < bank.embed_dim(); ++j) {
      EXPECT_EQ(bank.gamma(0, s)[j], bb.ln_gamma(s)[j]);
      EXPECT_EQ(bank.beta(0, s)[j], bb.ln_beta(s)[j]);
    }
    const std::vector<double> z{1, -2, 3, 0.5, 9, -1, 2, 4};
    auto expected = layer_normalize(z, 1e-5);
    for (std::size_t j = 0; j < z.size(); ++j) expected[j] = expected[j] * bb.ln_gamma(s)[j] + bb.ln_beta(s)[j];
    EXPECT_EQ(bank.apply(z, 0, s, 1e-5), expected);
  }
}

TEST(ClnBank, TasksAreIndependentObjects) {
  const Backbone bb = frozen_tiny(3);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  bank.add_task(bb);
  bank.add_task(bb);
  EXPECT_EQ(bank.num_tasks(), 2u);
  EXPECT_EQ(bank.trainable_task(), std::optional<std::size_t>(1));
  const ClnBank snapshot = bank;
  for (Tensor* t : bank.task_parameters(1))
    for (auto& v : t->mutable_values()) v += 1.0;
  EXPECT_TRUE(bank.task_bit_equal(0, snapshot));
  EXPECT_FALSE(bank.task_bit_equal(1, snapshot));
}

TEST(ClnBank, OnlyTrainableTaskTakesGradients) {
  const Backbone bb = frozen_tiny(3);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  bank.add_task(bb);
  bank.add_task(bb);
  bank.set_trainable(0);
  for (std::size_t s = 0; s < bank.num_sites(); ++s) {
    EXPECT_TRUE(bank.gamma(0, s).requires_grad());
    EXPECT_FALSE(bank.gamma(1, s).requires_grad());
  }
  bank.freeze_all();
  EXPECT_FALSE(bank.trainable_task().has_value());
  EXPECT_FALSE(bank.beta(0, 0).requires_grad());
  EXPECT_THROW(bank.set_trainable(2), std::out_of_range);
}

TEST(ClnBank, RequiresFrozenBase) {
  Backbone bb = Backbone::initialize(cln::testing::tiny_config(), 1);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  EXPECT_THROW(bank.add_task(bb), std::logic_error);
}

TEST(ClnExport, FreshBankSmallestCase) {
  const auto bank = bank_with(2, 1, {1.5, 2.5}, {-0.5, 0.25});
  const auto rows = export_params(bank);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].kind, "scale");
  EXPECT_EQ(rows[0].value, 1.5);
  EXPECT_EQ(rows[1].index, 1u);
  EXPECT_EQ(rows[1].value, 2.5);
  EXPECT_EQ(rows[2].kind, "bias");
  EXPECT_EQ(rows[2].value, -0.5);
  EXPECT_EQ(rows[3].value, 0.25);
}

TEST(ClnExport, RoundTripThroughCsvIsBitExact) {
  const Backbone bb = frozen_tiny(5);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  bank.add_task(bb);
  bank.add_task(bb);
  Rng rng(6);
  for (std::size_t t = 0; t < 2; ++t)
    for (Tensor* p : bank.task_parameters(t))
      for (auto& v : p->mutable_values()) v = rng.normal() / 3.0;
  const ClnBank imported = import_params(export_params(bank), bank.embed_dim(), bank.num_sites());
  EXPECT_TRUE(imported.task_bit_equal(0, bank));
  EXPECT_TRUE(imported.task_bit_equal(1, bank));

  const fs::path p = fs::temp_directory_path() / "cln_test_ln_params.csv";
  write_params_csv(bank, p);
  const auto rows = read_params_csv(p);
  const ClnBank from_csv = import_params(rows, bank.embed_dim(), bank.num_sites());
  EXPECT_TRUE(from_csv.task_bit_equal(0, bank));
  EXPECT_TRUE(from_csv.task_bit_equal(1, bank));
}

TEST(ClnExport, ImportRejectsIncompleteTables) {
  const auto bank = bank_with(2, 1, {1, 1}, {0, 0});
  auto rows = export_params(bank);
  rows.pop_back();
  EXPECT_THROW(import_params(rows, 2, 1), std::invalid_argument);
}

TEST(ClnProvider, PerSampleMatchesPerTask) {
  const Backbone bb = frozen_tiny(7);
  ClnBank bank(bb.config().embed_dim, bb.config().num_sites());
  bank.add_task(bb);
  bank.add_task(bb);
  Rng rng(8);
  for (Tensor* p : bank.task_parameters(1))
    for (auto& v : p->mutable_values()) v += rng.normal(0, 0.3);
  std::vector<double> images(2 * bb.config().image_values());
  for (auto& v : images) v = rng.uniform();
  auto run = [&](LnProvider& p, std::span<const double> img, std::size_t batch) {
    Graph g;
    auto v = g.value(bb.forward(g, img, batch, p).cls_embedding);
    return std::vector<double>(v.begin(), v.end());
  };
  PerSampleLnProvider mixed(bank, {1, 0});
  const auto both = run(mixed, images, 2);
  TaskLnProvider t1(bank, 1), t0(bank, 0);
  const std::size_t iv = bb.config().image_values(), d = bb.config().embed_dim;
  const auto a = run(t1, std::span<const double>(images).first(iv), 1);
  const auto b = run(t0, std::span<const double>(images).subspan(iv), 1);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_NEAR(both[j], a[j], 1e-12);
    EXPECT_NEAR(both[d + j], b[j], 1e-12);
  }
}
