#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "cln/backbone.hpp"
#include "cln/bench.hpp"
#include "cln/cln_bank.hpp"
#include "support/grad_cases.hpp"

using namespace cln;
namespace fs = std::filesystem;

namespace {

std::vector<double> random_images(const BackboneConfig& c, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(batch * c.image_values());
  for (auto& x : v) x = rng.uniform();
  return v;
}

std::vector<double> cls_of(const Backbone& bb, const std::vector<double>& images, std::size_t batch,
                           LnProvider& provider) {
  Graph g;
  auto r = bb.forward(g, images, batch, provider);
  auto v = g.value(r.cls_embedding);
  return {v.begin(), v.end()};
}

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cln_test_backbone";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(BackboneConfig, SitesAndValidation) {
  BackboneConfig c;
  EXPECT_EQ(c.num_sites(), 9u);
  c.depth = 12;
  EXPECT_EQ(c.num_sites(), 25u);
  EXPECT_NO_THROW(c.validate());

  BackboneConfig bad;
  bad.patch_size = 7;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = BackboneConfig{};
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = BackboneConfig{};
  bad.depth = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ParamCount, ReferenceScaleTwoStage) {
  EXPECT_EQ(count_trainable_params(768, 25, 10, Variant::kTwoStage, false, 0), 391680u);
}

TEST(ParamCount, ReferenceScaleSingleStage) {
  EXPECT_EQ(count_trainable_params(768, 25, 10, Variant::kSingleStage, false, 0), 768000u);
}

TEST(ParamCount, ZeroTasksAndLinearity) {
  for (Variant v : {Variant::kTwoStage, Variant::kSingleStage}) {
    EXPECT_EQ(count_trainable_params(64, 9, 0, v, true, 5), 0u);
    const auto one = count_trainable_params(64, 9, 1, v, true, 5);
    for (std::uint64_t t = 2; t < 12; ++t) EXPECT_EQ(count_trainable_params(64, 9, t, v, true, 5), t * one);
  }
}

TEST(ParamCount, ClassifierRowsIncludeBias) {
  const auto without = count_trainable_params(64, 9, 10, Variant::kTwoStage, false, 5);
  const auto with = count_trainable_params(64, 9, 10, Variant::kTwoStage, true, 5);
  EXPECT_EQ(with - without, 10u * 5u * 65u);
  EXPECT_EQ(without, 10u * (9u * 2u * 64u + 64u));
}

TEST(Backbone, ClonedTaskParamsReproduceBaseForward) {
  const auto cfg = cln::testing::tiny_config();
  Backbone bb = Backbone::initialize(cfg, 5);
  for (auto& [name, t] : bb.mutable_named_tensors())
    for (auto& v : t->mutable_values()) v += 0.1 * std::sin(static_cast<double>(name.size()) + v);
  bb.freeze();
  ClnBank bank(cfg.embed_dim, cfg.num_sites());
  bank.add_task(bb);
  const auto images = random_images(cfg, 3, 6);
  BaseLnProvider base(bb);
  TaskLnProvider task(bank, 0);
  EXPECT_EQ(cls_of(bb, images, 3, base), cls_of(bb, images, 3, task));
}

TEST(Backbone, ForwardIsDeterministicAndBatchIndependent) {
  const auto cfg = cln::testing::tiny_config();
  Backbone bb = Backbone::initialize(cfg, 5);
  bb.freeze();
  const auto images = random_images(cfg, 4, 7);
  BaseLnProvider base(bb);
  const auto a = cls_of(bb, images, 4, base);
  EXPECT_EQ(a, cls_of(bb, images, 4, base));
  const std::vector<double> second(images.begin() + cfg.image_values(), images.begin() + 2 * cfg.image_values());
  const auto single = cls_of(bb, second, 1, base);
  for (std::size_t j = 0; j < cfg.embed_dim; ++j) EXPECT_NEAR(single[j], a[cfg.embed_dim + j], 1e-12);
}

TEST(Backbone, ForwardShapesAndCounter) {
  const auto cfg = cln::testing::tiny_config();
  Backbone bb = Backbone::initialize(cfg, 5);
  bb.freeze();
  BaseLnProvider base(bb);
  Graph g;
  const auto images = random_images(cfg, 3, 8);
  const auto before = bb.forward_count();
  auto r = bb.forward(g, images, 3, base);
  EXPECT_EQ(bb.forward_count() - before, 3u);
  EXPECT_EQ(g.shape(r.cls_embedding), (Shape{3, cfg.embed_dim}));
  ASSERT_EQ(r.site_cls.size(), cfg.num_sites());
  for (Var v : r.site_cls) EXPECT_EQ(g.shape(v), (Shape{3, cfg.embed_dim}));
  EXPECT_THROW(bb.forward(g, std::span<const double>(images).first(10), 1, base), std::invalid_argument);
}

TEST(Backbone, FrozenBackboneRejectsTraining) {
  Backbone bb = Backbone::initialize(cln::testing::tiny_config(), 1);
  bb.freeze();
  EXPECT_TRUE(bb.frozen());
  EXPECT_THROW(bb.make_trainable(), std::logic_error);
  for (const auto& [name, t] : bb.named_tensors()) EXPECT_FALSE(t->requires_grad()) << name;
  Backbone thawed = bb.thawed_copy();
  EXPECT_FALSE(thawed.frozen());
  EXPECT_TRUE(thawed.bit_equal(bb));
}

TEST(Pretrain, RejectsBaseStreamLeakage) {
  SynthSpec spec;
  spec.num_classes = 4;
  spec.samples_per_class = 2;
  spec.image_size = 8;
  const Dataset d = synth_dataset(spec);
  const std::vector<std::uint32_t> stream{3};
  try {
    pretrain_base(cln::testing::tiny_config(), d, stream, PretrainOptions{});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "base/stream leakage");
  }
}

TEST(Pretrain, ZeroEpochsReturnsFrozenInitialization) {
  SynthSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = 2;
  spec.image_size = 8;
  const Dataset d = synth_dataset(spec);
  PretrainOptions opt;
  opt.epochs = 0;
  opt.seed = 4;
  const Backbone bb = pretrain_base(cln::testing::tiny_config(), d, {}, opt);
  EXPECT_TRUE(bb.frozen());
  EXPECT_TRUE(bb.bit_equal(Backbone::initialize(cln::testing::tiny_config(), Rng::derive(4, 1))));
}

TEST(Pretrain, LearnsTinyProblemDeterministically) {
  SynthSpec spec;
  spec.num_classes = 3;
  spec.samples_per_class = 12;
  spec.image_size = 8;
  spec.noise_std = 0.1;
  const Dataset d = synth_dataset(spec);
  PretrainOptions opt;
  opt.epochs = 15;
  opt.batch_size = 8;
  opt.adam.lr = 3e-3;
  PretrainReport r1, r2;
  const Backbone a = pretrain_base(cln::testing::tiny_config(), d, {}, opt, &r1);
  const Backbone b = pretrain_base(cln::testing::tiny_config(), d, {}, opt, &r2);
  EXPECT_TRUE(a.bit_equal(b));
  EXPECT_EQ(r1.epoch_loss, r2.epoch_loss);
  ASSERT_EQ(r1.epoch_loss.size(), 15u);
  EXPECT_LT(r1.epoch_loss.back(), r1.epoch_loss.front());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Backbone bb = Backbone::initialize(cln::testing::tiny_config(), 3);
  bb.freeze();
  const fs::path p = temp_path("a.ckpt");
  save_checkpoint(bb, p);
  const Backbone back = load_checkpoint(p);
  EXPECT_TRUE(back.bit_equal(bb));
  EXPECT_TRUE(back.frozen());
  EXPECT_EQ(back.config(), bb.config());

  const fs::path q = temp_path("b.ckpt");
  Backbone again = Backbone::initialize(cln::testing::tiny_config(), 3);
  again.freeze();
  save_checkpoint(again, q);
  EXPECT_EQ(slurp(p), slurp(q));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  Backbone bb = Backbone::initialize(cln::testing::tiny_config(), 3);
  const fs::path p = temp_path("c.ckpt");
  save_checkpoint(bb, p);
  const std::string bytes = slurp(p);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "XX" << bytes.substr(2);
  }
  EXPECT_THROW(load_checkpoint(p), std::runtime_error);
  {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_THROW(load_checkpoint(p), std::runtime_error);
  EXPECT_THROW(load_checkpoint(temp_path("missing.ckpt")), std::runtime_error);
}

TEST(Variant, ParseAndPrint) {
  EXPECT_EQ(parse_variant(to_string(Variant::kTwoStage)), Variant::kTwoStage);
  EXPECT_EQ(parse_variant(to_string(Variant::kSingleStage)), Variant::kSingleStage);
  EXPECT_THROW(parse_variant("three-stage"), std::invalid_argument);
}
