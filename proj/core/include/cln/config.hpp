#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cln/backbone.hpp"
#include "cln/bench.hpp"
#include "cln/trainer.hpp"

namespace cln {

struct StreamConfig {
  // Empty: generate the synthetic set described by `synthetic`.
  std::string dataset;
  SynthSpec synthetic;
  std::size_t train_per_class = 100;
  std::size_t num_tasks = 10;
  std::size_t classes_per_task = 5;
  std::size_t base_classes = 10;
  std::uint64_t split_seed = 0;
};

struct BaselineConfig {
  bool enabled = true;
  std::size_t epochs = 5;
  double lr = 3e-4;
};

// Defaults are the desk benchmark. Every field can be given in the JSON file;
// unknown keys are errors.
struct ExperimentConfig {
  BackboneConfig backbone;
  PretrainOptions pretrain{.epochs = 20, .batch_size = 32, .adam = {.lr = 3e-4}, .seed = 0};
  TrainConfig train{.epochs = 5, .refine_epochs = 5, .batch_size = 32, .lr_main = 5e-3, .lr_refine = 1e-3};
  BaselineConfig baseline;
  StreamConfig stream;
  Variant variant = Variant::kTwoStage;
  // Single-stage selection query. Only "live" (activations of the current
  // forward) is implemented; "pretrained" would need a second frozen pass.
  std::string single_stage_query = "live";
  std::vector<EvalMode> modes{EvalMode::kNormal, EvalMode::kOracle, EvalMode::kNoRefinement};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string precision = "f64";
  std::string output_dir = "runs/desk";
  // Relative paths resolve against output_dir.
  std::string checkpoint = "backbone.ckpt";

  std::filesystem::path checkpoint_path() const;
  std::set<EvalMode> mode_set() const;
  // Train config for one seed, with the variant applied.
  TrainConfig train_for_seed(std::uint64_t seed) const;
  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig parse_config(const std::string& json_text);
// Throws ConfigError naming the path when it cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);
// Every field, defaults included.
std::string dump_config(const ExperimentConfig& config);

// Dataset from the stream block, split into train and test.
std::pair<Dataset, Dataset> load_stream_data(const StreamConfig& stream);
TaskStream build_stream(const StreamConfig& stream);

}  // namespace cln
