#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cln/backbone.hpp"
#include "cln/cln_bank.hpp"
#include "cln/dataio.hpp"
#include "cln/graph.hpp"
#include "cln/selector.hpp"

namespace cln {

struct TrainConfig {
  Variant variant = Variant::kTwoStage;
  std::size_t epochs = 5;
  std::size_t refine_epochs = 5;
  std::size_t batch_size = 128;
  double lr_main = 5e-3;
  double lr_refine = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_opt = 1e-8;
  std::uint64_t seed = 0;
};

// Per task: the classes it introduces, as [d, k] weights and [k] biases.
struct TaskHead {
  std::vector<std::uint32_t> classes;
  Tensor weight;
  Tensor bias;
};

// Linear head over every class seen so far. Global class index order is the
// concatenation of the task heads in task order.
class Classifier {
 public:
  explicit Classifier(std::size_t embed_dim) : d_(embed_dim) {}

  std::size_t num_heads() const { return heads_.size(); }
  std::size_t num_classes() const;
  const TaskHead& head(std::size_t t) const { return heads_.at(t); }
  TaskHead& mutable_head(std::size_t t) { return heads_.at(t); }

  // Truncated-normal(0.02) weights and zero biases; the new head becomes the
  // only trainable one.
  std::size_t add_head(std::vector<std::uint32_t> classes, std::uint64_t seed);
  void reinit_head(std::size_t t, std::uint64_t seed);
  void set_trainable(std::optional<std::size_t> t);
  void set_all_trainable();
  std::vector<Tensor*> head_parameters(std::size_t t);

  // Global index of the first class of head t.
  std::size_t offset(std::size_t t) const;
  std::uint32_t label_of(std::size_t global_index) const;
  std::size_t index_of(std::uint32_t label) const;
  // True at the global indices of head t.
  std::vector<bool> task_mask(std::size_t t) const;

  // [B, num_classes] logits for [B, d] features.
  Var logits(Graph& g, Var features) const;

 private:
  std::size_t d_;
  std::vector<TaskHead> heads_;
};

// Frozen backbone plus every task-specific parameter set. Copies share the
// backbone (read-only) and deep-copy everything else.
class ContinualModel {
 public:
  ContinualModel(std::shared_ptr<const Backbone> backbone, Variant variant, std::uint64_t seed = 0);

  Variant variant() const { return variant_; }
  const Backbone& backbone() const { return *backbone_; }
  std::shared_ptr<const Backbone> shared_backbone() const { return backbone_; }
  const ClnBank& bank() const { return bank_; }
  ClnBank& bank() { return bank_; }
  const GlobalKeyBank& global_keys() const { return global_keys_; }
  GlobalKeyBank& global_keys() { return global_keys_; }
  const LayerKeyBank& layer_keys() const { return layer_keys_; }
  LayerKeyBank& layer_keys() { return layer_keys_; }
  const Classifier& classifier() const { return classifier_; }
  Classifier& classifier() { return classifier_; }

  std::size_t num_tasks() const { return bank_.num_tasks(); }
  bool phase1_done(std::size_t t) const { return t < phase1_done_.size() && phase1_done_[t]; }
  void mark_phase1_done(std::size_t t) { phase1_done_.at(t) = true; }

  // Allocates LayerNorm parameters, selection parameters and classifier rows
  // for a new task. Classes must be disjoint from every earlier task.
  std::size_t add_task(std::vector<std::uint32_t> classes);
  // Enables gradients on exactly one task's parameters, or none.
  void set_trainable(std::optional<std::size_t> t);

  std::uint64_t forward_count() const { return backbone_->forward_count(); }
  std::uint64_t seed() const { return seed_; }

 private:
  std::shared_ptr<const Backbone> backbone_;
  Variant variant_;
  std::uint64_t seed_;
  ClnBank bank_;
  GlobalKeyBank global_keys_;
  LayerKeyBank layer_keys_;
  Classifier classifier_;
  std::vector<bool> phase1_done_;
};

struct EpochLog {
  std::size_t task = 0;
  std::string phase;
  std::size_t epoch = 0;
  double ce_loss = 0.0;
  double key_loss = 0.0;
  double seconds = 0.0;
};

std::string to_json_line(const EpochLog& log);

// Minimizes cross-entropy (softmax restricted to the task's classes) plus the
// variant's key loss over the task's parameters, with ground-truth task
// identity at every LayerNorm site.
std::vector<EpochLog> train_task_phase1(ContinualModel& model, std::size_t task, const Dataset& data,
                                        const TrainConfig& config);

// Re-initializes the task's classifier rows and trains only them with the
// global softmax, selecting LayerNorm parameters as at inference time.
std::vector<EpochLog> refine_classifier(ContinualModel& model, std::size_t task, const Dataset& data,
                                        const TrainConfig& config);

enum class InferMode { kNormal, kOracle };

struct Prediction {
  std::uint32_t label = 0;
  std::size_t class_index = 0;
  // Two-stage and oracle: one id. Single-stage: one id per site.
  std::vector<std::size_t> task_ids;
};

// kNormal two-stage: one pretrained forward for selection, one task forward.
// kNormal single-stage: one forward with per-site selection. kOracle: one
// forward with oracle_tasks[i] at every site.
std::vector<Prediction> infer_batch(const ContinualModel& model, std::span<const double> images,
                                    std::size_t batch, InferMode mode,
                                    std::span<const std::size_t> oracle_tasks = {});
Prediction infer(const ContinualModel& model, std::span<const double> image, InferMode mode,
                 std::optional<std::size_t> oracle_task = std::nullopt);

// Lower-level pieces, shared with the benchmark harness.
// cls embeddings [B, d] of the pretrained model.
std::vector<double> base_embeddings(const Backbone& backbone, std::span<const double> images,
                                    std::size_t batch);
// cls embeddings [B, d] with tasks[i] applied at every site of sample i.
std::vector<double> task_embeddings(const ContinualModel& model, std::span<const double> images,
                                    std::size_t batch, std::span<const std::size_t> tasks);
// Global argmax over all seen classes for each row of `features`.
std::vector<std::size_t> classify(const Classifier& classifier, std::span<const double> features,
                                  std::size_t batch);

}  // namespace cln
