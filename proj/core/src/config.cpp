#include "cln/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cln {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

// Reads the keys of one JSON object into typed fields, rejecting anything it
// was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, where(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key: " + where(key));
  }

 private:
  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

std::filesystem::path ExperimentConfig::checkpoint_path() const {
  const std::filesystem::path p(checkpoint);
  return p.is_absolute() ? p : std::filesystem::path(output_dir) / p;
}

std::set<EvalMode> ExperimentConfig::mode_set() const { return {modes.begin(), modes.end()}; }

TrainConfig ExperimentConfig::train_for_seed(std::uint64_t seed) const {
  TrainConfig t = train;
  t.variant = variant;
  t.seed = seed;
  return t;
}

void ExperimentConfig::validate() const {
  try {
    backbone.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (single_stage_query == "pretrained")
    throw ConfigError("single_stage_query: \"pretrained\" is not implemented");
  if (single_stage_query != "live") throw ConfigError("single_stage_query: expected \"live\"");
  if (precision != "f64") throw ConfigError("precision: only \"f64\" is supported");
  if (train.epochs == 0 || train.batch_size == 0) throw ConfigError("train: epochs and batch_size must be positive");
  if (!(train.lr_main > 0.0) || !(train.lr_refine > 0.0)) throw ConfigError("train: learning rates must be positive");
  if (pretrain.batch_size == 0 || !(pretrain.adam.lr > 0.0)) throw ConfigError("pretrain: batch_size and lr must be positive");
  if (baseline.enabled && (baseline.epochs == 0 || !(baseline.lr > 0.0)))
    throw ConfigError("baseline: epochs and lr must be positive");
  if (modes.empty()) throw ConfigError("modes: at least one mode is required");
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  if (stream.num_tasks == 0 || stream.classes_per_task == 0) throw ConfigError("stream: no tasks");
  if (stream.dataset.empty()) {
    const auto& s = stream.synthetic;
    if (s.image_size != backbone.image_size || s.channels != backbone.channels)
      throw ConfigError("stream.synthetic: image geometry must match the backbone");
    if (s.num_classes < stream.base_classes + stream.num_tasks * stream.classes_per_task)
      throw ConfigError("stream: insufficient classes");
    if (stream.train_per_class >= s.samples_per_class)
      throw ConfigError("stream: train_per_class must leave test samples");
  }
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");

  Section bb = top.sub("backbone");
  bb.get("image_size", c.backbone.image_size);
  bb.get("patch_size", c.backbone.patch_size);
  bb.get("channels", c.backbone.channels);
  bb.get("embed_dim", c.backbone.embed_dim);
  bb.get("depth", c.backbone.depth);
  bb.get("heads", c.backbone.heads);
  bb.get("mlp_ratio", c.backbone.mlp_ratio);
  bb.get("ln_eps", c.backbone.ln_eps);
  bb.finish();

  Section pre = top.sub("pretrain");
  pre.get("epochs", c.pretrain.epochs);
  pre.get("batch_size", c.pretrain.batch_size);
  pre.get("lr", c.pretrain.adam.lr);
  pre.get("beta1", c.pretrain.adam.beta1);
  pre.get("beta2", c.pretrain.adam.beta2);
  pre.get("eps", c.pretrain.adam.eps);
  pre.get("seed", c.pretrain.seed);
  pre.finish();

  Section tr = top.sub("train");
  tr.get("epochs", c.train.epochs);
  tr.get("refine_epochs", c.train.refine_epochs);
  tr.get("batch_size", c.train.batch_size);
  tr.get("lr_main", c.train.lr_main);
  tr.get("lr_refine", c.train.lr_refine);
  tr.get("beta1", c.train.beta1);
  tr.get("beta2", c.train.beta2);
  tr.get("eps_opt", c.train.eps_opt);
  tr.finish();

  Section base = top.sub("baseline");
  base.get("enabled", c.baseline.enabled);
  base.get("epochs", c.baseline.epochs);
  base.get("lr", c.baseline.lr);
  base.finish();

  Section st = top.sub("stream");
  st.get("dataset", c.stream.dataset);
  st.get("train_per_class", c.stream.train_per_class);
  st.get("num_tasks", c.stream.num_tasks);
  st.get("classes_per_task", c.stream.classes_per_task);
  st.get("base_classes", c.stream.base_classes);
  st.get("split_seed", c.stream.split_seed);
  Section syn = st.sub("synthetic");
  syn.get("num_classes", c.stream.synthetic.num_classes);
  syn.get("samples_per_class", c.stream.synthetic.samples_per_class);
  syn.get("image_size", c.stream.synthetic.image_size);
  syn.get("channels", c.stream.synthetic.channels);
  syn.get("template_grid", c.stream.synthetic.template_grid);
  syn.get("noise_std", c.stream.synthetic.noise_std);
  syn.get("seed", c.stream.synthetic.seed);
  syn.finish();
  st.finish();

  std::string variant = to_string(c.variant);
  top.get("variant", variant);
  try {
    c.variant = parse_variant(variant);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  top.get("single_stage_query", c.single_stage_query);
  std::vector<std::string> modes;
  for (EvalMode m : c.modes) modes.push_back(to_string(m));
  top.get("modes", modes);
  c.modes.clear();
  for (const auto& m : modes) {
    try {
      c.modes.push_back(parse_eval_mode(m));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  top.get("seeds", c.seeds);
  top.get("precision", c.precision);
  top.get("output_dir", c.output_dir);
  top.get("checkpoint", c.checkpoint);
  top.finish();

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& c) {
  ordered_json j;
  j["backbone"] = {{"image_size", c.backbone.image_size}, {"patch_size", c.backbone.patch_size},
                   {"channels", c.backbone.channels},     {"embed_dim", c.backbone.embed_dim},
                   {"depth", c.backbone.depth},           {"heads", c.backbone.heads},
                   {"mlp_ratio", c.backbone.mlp_ratio},   {"ln_eps", c.backbone.ln_eps}};
  j["pretrain"] = {{"epochs", c.pretrain.epochs}, {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.adam.lr},     {"beta1", c.pretrain.adam.beta1},
                   {"beta2", c.pretrain.adam.beta2}, {"eps", c.pretrain.adam.eps},
                   {"seed", c.pretrain.seed}};
  j["train"] = {{"epochs", c.train.epochs},       {"refine_epochs", c.train.refine_epochs},
                {"batch_size", c.train.batch_size}, {"lr_main", c.train.lr_main},
                {"lr_refine", c.train.lr_refine},   {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},           {"eps_opt", c.train.eps_opt}};
  j["baseline"] = {{"enabled", c.baseline.enabled}, {"epochs", c.baseline.epochs}, {"lr", c.baseline.lr}};
  const auto& s = c.stream.synthetic;
  j["stream"] = {{"dataset", c.stream.dataset},
                 {"synthetic",
                  {{"num_classes", s.num_classes},
                   {"samples_per_class", s.samples_per_class},
                   {"image_size", s.image_size},
                   {"channels", s.channels},
                   {"template_grid", s.template_grid},
                   {"noise_std", s.noise_std},
                   {"seed", s.seed}}},
                 {"train_per_class", c.stream.train_per_class},
                 {"num_tasks", c.stream.num_tasks},
                 {"classes_per_task", c.stream.classes_per_task},
                 {"base_classes", c.stream.base_classes},
                 {"split_seed", c.stream.split_seed}};
  j["variant"] = to_string(c.variant);
  j["single_stage_query"] = c.single_stage_query;
  j["modes"] = ordered_json::array();
  for (EvalMode m : c.modes) j["modes"].push_back(to_string(m));
  j["seeds"] = c.seeds;
  j["precision"] = c.precision;
  j["output_dir"] = c.output_dir;
  j["checkpoint"] = c.checkpoint;
  return j.dump(2) + "\n";
}

std::pair<Dataset, Dataset> load_stream_data(const StreamConfig& stream) {
  const Dataset all = stream.dataset.empty() ? synth_dataset(stream.synthetic) : read_clds(stream.dataset);
  return split_train_test(all, stream.train_per_class);
}

TaskStream build_stream(const StreamConfig& stream) {
  const auto [train, test] = load_stream_data(stream);
  return split_classes(train, test, stream.num_tasks, stream.classes_per_task, stream.base_classes,
                       stream.split_seed);
}

}  // namespace cln
