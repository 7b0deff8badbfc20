#include "cln/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cln/optim.hpp"
#include "cln/random.hpp"

namespace cln {

// --- Classifier --------------------------------------------------------

std::size_t Classifier::num_classes() const {
  std::size_t n = 0;
  for (const auto& h : heads_) n += h.classes.size();
  return n;
}

std::size_t Classifier::add_head(std::vector<std::uint32_t> classes, std::uint64_t seed) {
  if (classes.empty()) throw std::invalid_argument("classifier: empty class set");
  TaskHead h;
  h.weight = Tensor({d_, classes.size()});
  h.bias = Tensor({classes.size()});
  h.classes = std::move(classes);
  heads_.push_back(std::move(h));
  reinit_head(heads_.size() - 1, seed);
  set_trainable(heads_.size() - 1);
  return heads_.size() - 1;
}

void Classifier::reinit_head(std::size_t t, std::uint64_t seed) {
  auto& h = heads_.at(t);
  Rng rng(seed);
  for (auto& v : h.weight.mutable_values()) v = rng.trunc_normal(0.02);
  for (auto& v : h.bias.mutable_values()) v = 0.0;
}

void Classifier::set_trainable(std::optional<std::size_t> t) {
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const bool on = t && *t == i;
    if (heads_[i].weight.requires_grad() != on) heads_[i].weight.set_requires_grad(on);
    if (heads_[i].bias.requires_grad() != on) heads_[i].bias.set_requires_grad(on);
  }
}

void Classifier::set_all_trainable() {
  for (auto& h : heads_) {
    if (!h.weight.requires_grad()) h.weight.set_requires_grad(true);
    if (!h.bias.requires_grad()) h.bias.set_requires_grad(true);
  }
}

std::vector<Tensor*> Classifier::head_parameters(std::size_t t) {
  return {&heads_.at(t).weight, &heads_.at(t).bias};
}

std::size_t Classifier::offset(std::size_t t) const {
  std::size_t off = 0;
  for (std::size_t i = 0; i < t; ++i) off += heads_.at(i).classes.size();
  return off;
}

std::uint32_t Classifier::label_of(std::size_t global_index) const {
  for (const auto& h : heads_) {
    if (global_index < h.classes.size()) return h.classes[global_index];
    global_index -= h.classes.size();
  }
  throw std::out_of_range("classifier: class index out of range");
}

std::size_t Classifier::index_of(std::uint32_t label) const {
  std::size_t off = 0;
  for (const auto& h : heads_) {
    auto it = std::find(h.classes.begin(), h.classes.end(), label);
    if (it != h.classes.end()) return off + static_cast<std::size_t>(it - h.classes.begin());
    off += h.classes.size();
  }
  throw std::out_of_range("classifier: unknown label " + std::to_string(label));
}

std::vector<bool> Classifier::task_mask(std::size_t t) const {
  std::vector<bool> mask(num_classes(), false);
  const std::size_t off = offset(t);
  for (std::size_t i = 0; i < heads_.at(t).classes.size(); ++i) mask[off + i] = true;
  return mask;
}

Var Classifier::logits(Graph& g, Var features) const {
  if (heads_.empty()) throw std::logic_error("classifier: no heads");
  std::vector<Var> parts;
  for (const auto& h : heads_) parts.push_back(g.linear(features, g.param(h.weight), g.param(h.bias)));
  return parts.size() == 1 ? parts[0] : g.concat_cols(parts);
}

// --- ContinualModel ----------------------------------------------------

ContinualModel::ContinualModel(std::shared_ptr<const Backbone> backbone, Variant variant,
                               std::uint64_t seed)
    : backbone_(std::move(backbone)),
      variant_(variant),
      seed_(seed),
      bank_(backbone_->config().embed_dim, backbone_->config().num_sites()),
      global_keys_(backbone_->config().embed_dim),
      layer_keys_(backbone_->config().embed_dim, backbone_->config().num_sites()),
      classifier_(backbone_->config().embed_dim) {
  if (!backbone_->frozen()) throw std::logic_error("ContinualModel: backbone must be frozen");
}

std::size_t ContinualModel::add_task(std::vector<std::uint32_t> classes) {
  std::set<std::uint32_t> fresh(classes.begin(), classes.end());
  if (fresh.size() != classes.size()) throw std::invalid_argument("add_task: duplicate classes");
  for (std::size_t t = 0; t < classifier_.num_heads(); ++t)
    for (auto c : classifier_.head(t).classes)
      if (fresh.count(c)) throw std::invalid_argument("label leakage: class " + std::to_string(c) + " already seen");
  const std::size_t t = bank_.add_task(*backbone_);
  if (variant_ == Variant::kTwoStage) {
    global_keys_.add_key(Rng::derive(seed_, 100, t));
  } else {
    layer_keys_.add_task(Rng::derive(seed_, 101, t));
  }
  classifier_.add_head(std::move(classes), Rng::derive(seed_, 102, t));
  phase1_done_.push_back(false);
  set_trainable(t);
  return t;
}

void ContinualModel::set_trainable(std::optional<std::size_t> t) {
  bank_.set_trainable(t);
  if (variant_ == Variant::kTwoStage) {
    global_keys_.set_trainable(t);
  } else {
    layer_keys_.set_trainable(t);
  }
  classifier_.set_trainable(t);
}

// --- helpers -----------------------------------------------------------

std::string to_json_line(const EpochLog& log) {
  nlohmann::ordered_json j;
  j["task"] = log.task;
  j["phase"] = log.phase;
  j["epoch"] = log.epoch;
  j["ce_loss"] = log.ce_loss;
  j["key_loss"] = log.key_loss;
  j["seconds"] = log.seconds;
  return j.dump();
}

namespace {

constexpr std::size_t kEvalChunk = 128;

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_task_labels(const ContinualModel& model, std::size_t task, const Dataset& data) {
  const auto& classes = model.classifier().head(task).classes;
  std::set<std::uint32_t> own(classes.begin(), classes.end());
  for (auto l : data.labels)
    if (!own.count(l)) throw std::invalid_argument("label leakage: label " + std::to_string(l) + " is not in task " + std::to_string(task));
}

std::vector<double> copy_values(const Graph& g, Var v) {
  auto s = g.value(v);
  return {s.begin(), s.end()};
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// cls features under inference-time selection, [n, d].
std::vector<double> inferred_features(const ContinualModel& model, const Dataset& data) {
  const std::size_t d = model.backbone().config().embed_dim;
  std::vector<double> out;
  out.reserve(data.size() * d);
  const auto all = iota_indices(data.size());
  for (std::size_t start = 0; start < all.size(); start += kEvalChunk) {
    std::span<const std::size_t> idx(all.data() + start, std::min(kEvalChunk, all.size() - start));
    const auto images = to_reals(data, idx);
    std::vector<double> feats;
    if (model.variant() == Variant::kTwoStage) {
      const auto emb = base_embeddings(model.backbone(), images, idx.size());
      std::vector<std::size_t> tasks(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        tasks[i] = select_two_stage(std::span<const double>(emb).subspan(i * d, d), model.global_keys());
      feats = task_embeddings(model, images, idx.size(), tasks);
    } else {
      Graph g;
      SingleStageLnProvider provider(model.bank(), model.layer_keys());
      auto fwd = model.backbone().forward(g, images, idx.size(), provider);
      feats = copy_values(g, fwd.cls_embedding);
    }
    out.insert(out.end(), feats.begin(), feats.end());
  }
  return out;
}

}  // namespace

std::vector<double> base_embeddings(const Backbone& backbone, std::span<const double> images,
                                    std::size_t batch) {
  Graph g;
  BaseLnProvider provider(backbone);
  auto fwd = backbone.forward(g, images, batch, provider);
  return copy_values(g, fwd.cls_embedding);
}

std::vector<double> task_embeddings(const ContinualModel& model, std::span<const double> images,
                                    std::size_t batch, std::span<const std::size_t> tasks) {
  Graph g;
  PerSampleLnProvider provider(model.bank(), std::vector<std::size_t>(tasks.begin(), tasks.end()));
  auto fwd = model.backbone().forward(g, images, batch, provider);
  return copy_values(g, fwd.cls_embedding);
}

std::vector<std::size_t> classify(const Classifier& classifier, std::span<const double> features,
                                  std::size_t batch) {
  Graph g;
  const std::size_t d = features.size() / std::max<std::size_t>(batch, 1);
  Var f = g.constant({batch, d}, std::vector<double>(features.begin(), features.end()));
  auto logits = g.value(classifier.logits(g, f));
  const std::size_t k = classifier.num_classes();
  std::vector<std::size_t> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto row = logits.subspan(b * k, k);
    out[b] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

// --- training ----------------------------------------------------------

std::vector<EpochLog> train_task_phase1(ContinualModel& model, std::size_t task, const Dataset& data,
                                        const TrainConfig& config) {
  if (task >= model.num_tasks()) throw std::out_of_range("phase 1: unknown task");
  if (data.size() == 0) throw std::invalid_argument("phase 1: empty dataset");
  check_task_labels(model, task, data);
  const std::size_t d = model.backbone().config().embed_dim;
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);

  model.set_trainable(task);
  std::vector<Tensor*> params = model.bank().task_parameters(task);
  if (model.variant() == Variant::kTwoStage) {
    params.push_back(&model.global_keys().mutable_key(task));
  } else {
    for (Tensor* p : model.layer_keys().task_parameters(task)) params.push_back(p);
  }
  for (Tensor* p : model.classifier().head_parameters(task)) params.push_back(p);
  Adam adam(params, AdamConfig{config.lr_main, config.beta1, config.beta2, config.eps_opt});

  // Two-stage keys match pretrained embeddings, which never change.
  std::vector<double> base_emb;
  if (model.variant() == Variant::kTwoStage) {
    const auto all = iota_indices(data.size());
    for (std::size_t start = 0; start < all.size(); start += kEvalChunk) {
      std::span<const std::size_t> idx(all.data() + start, std::min(kEvalChunk, all.size() - start));
      auto e = base_embeddings(model.backbone(), to_reals(data, idx), idx.size());
      base_emb.insert(base_emb.end(), e.begin(), e.end());
    }
  }

  const std::vector<bool> mask = model.classifier().task_mask(task);
  std::vector<std::size_t> order = iota_indices(data.size());
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start_time = std::chrono::steady_clock::now();
    Rng rng(Rng::derive(config.seed, 1000 + task, epoch));
    rng.shuffle(order);
    double ce_sum = 0.0, key_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<std::size_t> targets;
      for (auto i : idx) targets.push_back(model.classifier().index_of(data.labels[i]));

      adam.zero_grad();
      Graph g;
      TaskLnProvider provider(model.bank(), task);
      auto fwd = model.backbone().forward(g, to_reals(data, idx), idx.size(), provider);
      Var ce = g.softmax_cross_entropy(model.classifier().logits(g, fwd.cls_embedding), targets, &mask);
      Var key;
      if (model.variant() == Variant::kTwoStage) {
        std::vector<double> emb;
        for (auto i : idx) emb.insert(emb.end(), base_emb.begin() + i * d, base_emb.begin() + (i + 1) * d);
        Var e = g.constant({idx.size(), d}, std::move(emb));
        key = key_loss_two_stage(g, e, g.param(model.global_keys().key(task)));
      } else {
        key = key_loss_single_stage(g, fwd.site_cls, model.layer_keys(), task).aggregate;
      }
      Var total = g.add(ce, key);
      if (!std::isfinite(g.item(total))) throw std::runtime_error("diverged");
      g.backward(total);
      adam.step();
      ce_sum += g.item(ce) * static_cast<double>(idx.size());
      key_sum += g.item(key) * static_cast<double>(idx.size());
    }
    const double n = static_cast<double>(order.size());
    logs.push_back({task, "phase1", epoch, ce_sum / n, key_sum / n, seconds_since(start_time)});
  }
  model.set_trainable(std::nullopt);
  model.mark_phase1_done(task);
  return logs;
}

std::vector<EpochLog> refine_classifier(ContinualModel& model, std::size_t task, const Dataset& data,
                                        const TrainConfig& config) {
  if (!model.phase1_done(task)) throw std::logic_error("refine_classifier: phase 1 not complete for task");
  if (data.size() == 0) throw std::invalid_argument("refinement: empty dataset");
  check_task_labels(model, task, data);
  const std::size_t d = model.backbone().config().embed_dim;
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);

  // Everything except the head is frozen, so selection and features are
  // fixed for the whole refinement and computed once.
  model.set_trainable(std::nullopt);
  const auto features = inferred_features(model, data);

  Classifier& clf = model.classifier();
  clf.reinit_head(task, Rng::derive(model.seed(), 103, task));
  clf.set_trainable(task);
  Adam adam(clf.head_parameters(task), AdamConfig{config.lr_refine, config.beta1, config.beta2, config.eps_opt});

  std::vector<std::size_t> targets(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) targets[i] = clf.index_of(data.labels[i]);

  std::vector<std::size_t> order = iota_indices(data.size());
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 0; epoch < config.refine_epochs; ++epoch) {
    const auto start_time = std::chrono::steady_clock::now();
    Rng rng(Rng::derive(config.seed, 2000 + task, epoch));
    rng.shuffle(order);
    double ce_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<double> feats;
      std::vector<std::size_t> tgt;
      for (auto i : idx) {
        feats.insert(feats.end(), features.begin() + i * d, features.begin() + (i + 1) * d);
        tgt.push_back(targets[i]);
      }
      adam.zero_grad();
      Graph g;
      Var f = g.constant({idx.size(), d}, std::move(feats));
      Var ce = g.softmax_cross_entropy(clf.logits(g, f), tgt);
      if (!std::isfinite(g.item(ce))) throw std::runtime_error("diverged");
      g.backward(ce);
      adam.step();
      ce_sum += g.item(ce) * static_cast<double>(idx.size());
    }
    logs.push_back({task, "refine", epoch, ce_sum / static_cast<double>(order.size()), 0.0,
                    seconds_since(start_time)});
  }
  model.set_trainable(std::nullopt);
  return logs;
}

// --- inference ---------------------------------------------------------

std::vector<Prediction> infer_batch(const ContinualModel& model, std::span<const double> images,
                                    std::size_t batch, InferMode mode,
                                    std::span<const std::size_t> oracle_tasks) {
  if (model.num_tasks() == 0 || !model.phase1_done(0)) throw std::logic_error("infer: no trained tasks");
  const std::size_t d = model.backbone().config().embed_dim;
  std::vector<Prediction> out(batch);
  std::vector<double> features;

  if (mode == InferMode::kOracle) {
    if (oracle_tasks.size() != batch) throw std::invalid_argument("infer: one oracle task per sample required");
    features = task_embeddings(model, images, batch, oracle_tasks);
    for (std::size_t i = 0; i < batch; ++i) out[i].task_ids = {oracle_tasks[i]};
  } else if (model.variant() == Variant::kTwoStage) {
    const auto emb = base_embeddings(model.backbone(), images, batch);
    std::vector<std::size_t> tasks(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      tasks[i] = select_two_stage(std::span<const double>(emb).subspan(i * d, d), model.global_keys());
      out[i].task_ids = {tasks[i]};
    }
    features = task_embeddings(model, images, batch, tasks);
  } else {
    Graph g;
    SingleStageLnProvider provider(model.bank(), model.layer_keys());
    auto fwd = model.backbone().forward(g, images, batch, provider);
    features = copy_values(g, fwd.cls_embedding);
    for (std::size_t i = 0; i < batch; ++i) out[i].task_ids = provider.selections()[i];
  }

  const auto cls = classify(model.classifier(), features, batch);
  for (std::size_t i = 0; i < batch; ++i) {
    out[i].class_index = cls[i];
    out[i].label = model.classifier().label_of(cls[i]);
  }
  return out;
}

Prediction infer(const ContinualModel& model, std::span<const double> image, InferMode mode,
                 std::optional<std::size_t> oracle_task) {
  std::vector<std::size_t> tasks;
  if (mode == InferMode::kOracle) {
    if (!oracle_task) throw std::invalid_argument("infer: oracle mode needs a task");
    tasks.push_back(*oracle_task);
  }
  return infer_batch(model, image, 1, mode, tasks).front();
}

}  // namespace cln
