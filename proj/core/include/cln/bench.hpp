#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cln/backbone.hpp"
#include "cln/dataio.hpp"
#include "cln/selector.hpp"
#include "cln/trainer.hpp"

namespace cln {

// --- data --------------------------------------------------------------

struct SynthSpec {
  std::size_t num_classes = 60;
  std::size_t samples_per_class = 150;
  std::size_t image_size = 32;
  std::size_t channels = 3;
  // Side of the coarse random grid each class template is upsampled from.
  std::size_t template_grid = 2;
  // Nearest-template accuracy on the default 60-class set is about 0.95.
  double noise_std = 0.62;
  std::uint64_t seed = 0;
};

// One smooth random template per class, [num_classes, image_values] in [0,1].
std::vector<std::vector<double>> synth_templates(const SynthSpec& spec);

// Samples are template + N(0, noise_std) per pixel, clipped to [0,1] and
// quantized to bytes. Sample order is class-interleaved: sample i has class
// i % num_classes.
Dataset synth_dataset(const SynthSpec& spec);

// Per class, the first `train_per_class` samples go to the first dataset and
// the rest to the second.
std::pair<Dataset, Dataset> split_train_test(const Dataset& data, std::size_t train_per_class);

// Fraction of samples whose nearest template (squared L2) is their own class.
double nearest_template_accuracy(const Dataset& data, const std::vector<std::vector<double>>& templates);

struct TaskData {
  std::vector<std::uint32_t> classes;
  Dataset train;
  Dataset test;
};

struct TaskStream {
  std::vector<std::uint32_t> base_classes;
  Dataset base;  // training split of the base classes, for pretraining
  std::vector<TaskData> tasks;
  std::uint64_t split_seed = 0;

  std::size_t num_tasks() const { return tasks.size(); }
  std::vector<std::uint32_t> stream_labels() const;
};

struct ClassPartition {
  std::vector<std::uint32_t> base;
  std::vector<std::vector<std::uint32_t>> tasks;
};

// Seeded permutation of [0, total_classes): first the base classes, then
// num_tasks groups of classes_per_task.
ClassPartition partition_classes(std::size_t total_classes, std::size_t num_tasks,
                                 std::size_t classes_per_task, std::size_t base_classes,
                                 std::uint64_t seed);

TaskStream split_classes(const Dataset& train, const Dataset& test, std::size_t num_tasks,
                         std::size_t classes_per_task, std::size_t base_classes, std::uint64_t seed);

// --- metrics -----------------------------------------------------------

// a(l, t): accuracy on task t's test set after training step l, t <= l.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks) : n_(tasks), cells_(tasks * tasks) {}

  std::size_t tasks() const { return n_; }
  void set(std::size_t step, std::size_t task, double value);
  std::optional<double> get(std::size_t step, std::size_t task) const;
  bool operator==(const AccuracyMatrix&) const = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::optional<double>> cells_;
};

// Mean of the final row. Throws if any final-row entry is missing.
double average_accuracy(const AccuracyMatrix& m);
// (1/(T-1)) * sum_{t<T} [max_{l in t..T-1} a(l,t) - a(T,t)], terms not floored.
double forgetting(const AccuracyMatrix& m);

void write_matrix_csv(const AccuracyMatrix& m, const std::filesystem::path& path);
AccuracyMatrix read_matrix_csv(const std::filesystem::path& path);

// --- experiments -------------------------------------------------------

// kNormal: inferred selection, refined classifier. kNoRefinement: inferred
// selection, phase-1 classifier. kOracle: ground-truth task at every site,
// phase-1 classifier.
enum class EvalMode { kNormal, kOracle, kNoRefinement };
const char* to_string(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

// Sequential fine-tuning of the whole backbone and classifier with no
// protection against forgetting. Evaluated class-incrementally after each task.
AccuracyMatrix run_ft_baseline(const TaskStream& stream, const Backbone& pretrained,
                               const TrainConfig& config, double lr);

struct ModeResult {
  AccuracyMatrix matrix;
  double average_accuracy = 0.0;
  std::optional<double> forgetting;
  // Per task, on the final model: fraction of test selections equal to the
  // true task (single-stage: over every sample and site).
  std::vector<double> selection_accuracy;
  // Backbone forwards for one prediction, measured on a single sample.
  double forward_passes_per_prediction = 0.0;
};

struct ExperimentReport {
  Variant variant = Variant::kTwoStage;
  std::uint64_t seed = 0;
  std::size_t num_tasks = 0;
  std::map<std::string, ModeResult> modes;
  std::map<std::string, std::uint64_t> param_counts;
  Matrix key_similarity;
  std::vector<ClnParamRow> ln_params;
  std::vector<EpochLog> train_log;
  std::map<std::string, double> timings;
  std::shared_ptr<ContinualModel> model;  // final model, not serialized

  bool same_results(const ExperimentReport& other) const;
};

// Called with stage "added", "phase1" and "refined" as each task progresses.
// Refinement only runs when kNormal is requested.
using ExperimentObserver =
    std::function<void(std::size_t task, const std::string& stage, const ContinualModel& model)>;

ExperimentReport run_experiment(const TaskStream& stream, std::shared_ptr<const Backbone> backbone,
                                const TrainConfig& config, const std::set<EvalMode>& modes,
                                const ExperimentObserver& observer = {});

// Bundle layout: metrics.json, accuracy_matrix_<mode>.csv, key_similarity.csv,
// ln_params.csv, train_log.jsonl, timing.json. Only timing.json and the
// seconds field of the log depend on wall-clock time.
void write_report_bundle(const ExperimentReport& report, const std::filesystem::path& dir);
ExperimentReport read_report_bundle(const std::filesystem::path& dir);

}  // namespace cln
