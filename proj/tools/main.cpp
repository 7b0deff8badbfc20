#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cln/config.hpp"
#include "cln/runtime.hpp"

using namespace cln;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  std::optional<std::string> out;
  std::vector<std::string> modes;
  std::optional<std::string> checkpoint;
};

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) c.seeds = {*o.seed};
  if (o.variant) c.variant = parse_variant(*o.variant);
  if (o.out) c.output_dir = *o.out;
  if (!o.modes.empty()) {
    c.modes.clear();
    for (const auto& m : o.modes) c.modes.push_back(parse_eval_mode(m));
  }
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  c.validate();
  return c;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

int cmd_pretrain(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const auto start = std::chrono::steady_clock::now();
  const TaskStream stream = build_stream(c.stream);
  PretrainReport report;
  const Backbone backbone = pretrain_base(c.backbone, stream.base, stream.stream_labels(), c.pretrain, &report);
  const fs::path path = c.checkpoint_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(backbone, path);
  std::printf("pretrained %zu base classes, %zu samples, %zu epochs in %.1f s\n", stream.base_classes.size(),
              stream.base.size(), c.pretrain.epochs, seconds_since(start));
  if (!report.epoch_loss.empty())
    std::printf("loss %.4f -> %.4f, training accuracy %.4f\n", report.epoch_loss.front(), report.epoch_loss.back(),
                report.train_accuracy);
  std::printf("checkpoint %s\n", path.string().c_str());
  return 0;
}

int cmd_run(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path ckpt = c.checkpoint_path();
  auto backbone = std::make_shared<const Backbone>(load_checkpoint(ckpt));
  if (!(backbone->config() == c.backbone))
    throw ConfigError("checkpoint " + ckpt.string() + " was trained with a different backbone config");
  if (!backbone->frozen()) throw ConfigError("checkpoint " + ckpt.string() + " is not a frozen backbone");

  const TaskStream stream = build_stream(c.stream);
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << dump_config(c);

  std::map<std::string, std::vector<double>> columns;
  nlohmann::ordered_json per_seed = nlohmann::ordered_json::array();
  for (std::uint64_t seed : c.seeds) {
    const auto start = std::chrono::steady_clock::now();
    const TrainConfig train = c.train_for_seed(seed);
    const auto report = run_experiment(stream, backbone, train, c.mode_set());
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    write_report_bundle(report, dir);

    nlohmann::ordered_json row{{"seed", seed}};
    for (const auto& [mode, r] : report.modes) {
      columns[mode + ".average_accuracy"].push_back(r.average_accuracy);
      row[mode] = {{"average_accuracy", r.average_accuracy}};
      if (r.forgetting) {
        columns[mode + ".forgetting"].push_back(*r.forgetting);
        row[mode]["forgetting"] = *r.forgetting;
      }
      row[mode]["forward_passes_per_prediction"] = r.forward_passes_per_prediction;
    }
    std::string line;
    for (const auto& [mode, r] : report.modes) line += " " + mode + " " + std::to_string(r.average_accuracy);
    if (c.baseline.enabled) {
      TrainConfig ft = train;
      ft.epochs = c.baseline.epochs;
      const AccuracyMatrix m = run_ft_baseline(stream, *backbone, ft, c.baseline.lr);
      write_matrix_csv(m, dir / "accuracy_matrix_ft.csv");
      const double acc = average_accuracy(m);
      columns["ft.average_accuracy"].push_back(acc);
      row["ft"] = {{"average_accuracy", acc}};
      if (m.tasks() >= 2) {
        const double f = forgetting(m);
        columns["ft.forgetting"].push_back(f);
        row["ft"]["forgetting"] = f;
      }
      line += " ft " + std::to_string(acc);
    }
    per_seed.push_back(row);
    std::printf("seed %llu:%s (%.1f s)\n", static_cast<unsigned long long>(seed), line.c_str(),
                seconds_since(start));
    std::fflush(stdout);
  }

  nlohmann::ordered_json summary;
  summary["variant"] = to_string(c.variant);
  summary["seeds"] = c.seeds;
  nlohmann::ordered_json med;
  for (const auto& [key, v] : columns) med[key] = median(v);
  summary["medians"] = med;
  summary["per_seed"] = per_seed;
  std::ofstream(out / "summary.json") << summary.dump(2) << "\n";
  std::printf("summary %s\n", (out / "summary.json").string().c_str());
  return 0;
}

void print_params(const char* label, std::uint64_t d, std::uint64_t sites, std::uint64_t tasks) {
  for (Variant v : {Variant::kTwoStage, Variant::kSingleStage}) {
    const auto n = count_trainable_params(d, sites, tasks, v, false, 0);
    std::string digits = std::to_string(n), s;
    for (std::size_t i = 0; i < digits.size(); ++i) {
      if (i && (digits.size() - i) % 3 == 0) s += ',';
      s += digits[i];
    }
    std::printf("%-10s d=%-4llu L=%-3llu T=%-3llu %-13s %12s  ≈%.2fM\n", label, static_cast<unsigned long long>(d),
                static_cast<unsigned long long>(sites), static_cast<unsigned long long>(tasks), to_string(v), s.c_str(),
                static_cast<double>(n) / 1e6);
  }
}

int cmd_params(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  print_params("configured", c.backbone.embed_dim, c.backbone.num_sites(), c.stream.num_tasks);
  print_params("reference", 768, 25, 10);
  return 0;
}

int cmd_export(const Overrides& o, const std::string& path, bool split) {
  const ExperimentConfig c = resolve(o);
  if (split) {
    const auto [train, test] = load_stream_data(c.stream);
    const fs::path p(path);
    const fs::path stem = p.parent_path() / p.stem();
    for (const auto& [name, data] : {std::pair{"train", &train}, std::pair{"test", &test}}) {
      const fs::path file = stem.string() + "_" + name + ".clds";
      write_clds(*data, file);
      std::printf("%s: %zu samples, checksum %016llx\n", file.string().c_str(), data->size(),
                  static_cast<unsigned long long>(dataset_checksum(*data)));
    }
    return 0;
  }
  const Dataset data = c.stream.dataset.empty() ? synth_dataset(c.stream.synthetic) : read_clds(c.stream.dataset);
  write_clds(data, path);
  std::printf("%s: %zu samples, checksum %016llx\n", path.c_str(), data.size(),
              static_cast<unsigned long long>(dataset_checksum(data)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Continual LayerNorm experiments"};
  app.require_subcommand(1);
  Overrides o;
  std::string export_path;
  bool export_split = false;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", o.config, "Experiment config (JSON)")->required();
  };
  auto pretrain = app.add_subcommand("pretrain", "Pretrain and freeze the backbone on the base classes");
  common(pretrain);
  pretrain->add_option("--out", o.out, "Output directory (overrides output_dir)");
  pretrain->add_option("--checkpoint", o.checkpoint, "Checkpoint path");

  auto run = app.add_subcommand("run", "Run the continual stream for every seed and mode");
  common(run);
  run->add_option("--seed", o.seed, "Run only this seed");
  run->add_option("--variant", o.variant, "two-stage or single-stage");
  run->add_option("--out", o.out, "Output directory (overrides output_dir)");
  run->add_option("--mode", o.modes, "normal, oracle or no-refinement; repeatable");
  run->add_option("--checkpoint", o.checkpoint, "Checkpoint path");

  auto params = app.add_subcommand("params", "Print task-specific parameter counts");
  common(params);

  auto exp = app.add_subcommand("export", "Write the configured dataset as a CLDS file");
  common(exp);
  exp->add_option("path", export_path, "Output file")->required();
  exp->add_flag("--split", export_split, "Write <stem>_train.clds and <stem>_test.clds instead");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(o);
    if (*run) return cmd_run(o);
    if (*params) return cmd_params(o);
    if (*exp) return cmd_export(o, export_path, export_split);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
