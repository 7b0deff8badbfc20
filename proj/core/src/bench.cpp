#include "cln/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cln/optim.hpp"
#include "cln/random.hpp"

namespace cln {

// --- data --------------------------------------------------------------

std::vector<std::vector<double>> synth_templates(const SynthSpec& spec) {
  if (spec.num_classes == 0 || spec.image_size == 0 || spec.channels == 0 || spec.template_grid == 0)
    throw std::invalid_argument("synth: counts must be positive");
  const std::size_t s = spec.image_size, c = spec.channels, grid = spec.template_grid;
  std::vector<std::vector<double>> out(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    Rng rng(Rng::derive(spec.seed, 1, k));
    std::vector<double> coarse(grid * grid * c);
    for (auto& v : coarse) v = rng.uniform();
    auto at = [&](std::size_t gy, std::size_t gx, std::size_t ch) { return coarse[(gy * grid + gx) * c + ch]; };
    auto& img = out[k];
    img.resize(s * s * c);
    const double scale = (grid > 1 && s > 1) ? static_cast<double>(grid - 1) / static_cast<double>(s - 1) : 0.0;
    for (std::size_t y = 0; y < s; ++y) {
      const double fy = static_cast<double>(y) * scale;
      const std::size_t y0 = std::min(static_cast<std::size_t>(fy), grid - 1);
      const std::size_t y1 = std::min(y0 + 1, grid - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < s; ++x) {
        const double fx = static_cast<double>(x) * scale;
        const std::size_t x0 = std::min(static_cast<std::size_t>(fx), grid - 1);
        const std::size_t x1 = std::min(x0 + 1, grid - 1);
        const double wx = fx - static_cast<double>(x0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double top = (1 - wx) * at(y0, x0, ch) + wx * at(y0, x1, ch);
          const double bottom = (1 - wx) * at(y1, x0, ch) + wx * at(y1, x1, ch);
          img[(y * s + x) * c + ch] = (1 - wy) * top + wy * bottom;
        }
      }
    }
  }
  return out;
}

Dataset synth_dataset(const SynthSpec& spec) {
  if (spec.samples_per_class == 0) throw std::invalid_argument("synth: counts must be positive");
  const auto templates = synth_templates(spec);
  Dataset data;
  data.height = data.width = static_cast<std::uint32_t>(spec.image_size);
  data.channels = static_cast<std::uint32_t>(spec.channels);
  data.num_classes = static_cast<std::uint32_t>(spec.num_classes);
  const std::size_t n = spec.num_classes * spec.samples_per_class;
  const std::size_t values = templates.front().size();
  data.pixels.resize(n * values);
  data.labels.resize(n);
  Rng rng(Rng::derive(spec.seed, 2));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % spec.num_classes;
    data.labels[i] = static_cast<std::uint32_t>(k);
    for (std::size_t j = 0; j < values; ++j) {
      double v = templates[k][j];
      if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
      v = std::clamp(v, 0.0, 1.0);
      data.pixels[i * values + j] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return data;
}

std::pair<Dataset, Dataset> split_train_test(const Dataset& data, std::size_t train_per_class) {
  std::vector<std::size_t> seen(data.num_classes, 0);
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto label = data.labels[i];
    if (label >= data.num_classes) throw std::invalid_argument("invalid label");
    (seen[label]++ < train_per_class ? train : test).push_back(i);
  }
  return {data.select(train), data.select(test)};
}

double nearest_template_accuracy(const Dataset& data, const std::vector<std::vector<double>>& templates) {
  if (data.size() == 0) throw std::invalid_argument("nearest template: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto px = data.sample(i);
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < templates.size(); ++k) {
      if (templates[k].size() != px.size()) throw std::invalid_argument("nearest template: size mismatch");
      double dist = 0.0;
      for (std::size_t j = 0; j < px.size(); ++j) {
        const double diff = static_cast<double>(px[j]) / 255.0 - templates[k][j];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    if (best == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<std::uint32_t> TaskStream::stream_labels() const {
  std::vector<std::uint32_t> out;
  for (const auto& t : tasks) out.insert(out.end(), t.classes.begin(), t.classes.end());
  return out;
}

ClassPartition partition_classes(std::size_t total_classes, std::size_t num_tasks,
                                 std::size_t classes_per_task, std::size_t base_classes,
                                 std::uint64_t seed) {
  if (num_tasks == 0 || classes_per_task == 0) throw std::invalid_argument("split: no tasks");
  if (total_classes < base_classes + num_tasks * classes_per_task)
    throw std::invalid_argument("split: insufficient classes");
  std::vector<std::uint32_t> perm(total_classes);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng(Rng::derive(seed, 3));
  rng.shuffle(perm);
  ClassPartition p;
  auto it = perm.begin();
  p.base.assign(it, it + static_cast<std::ptrdiff_t>(base_classes));
  std::sort(p.base.begin(), p.base.end());
  it += static_cast<std::ptrdiff_t>(base_classes);
  for (std::size_t t = 0; t < num_tasks; ++t) {
    std::vector<std::uint32_t> cls(it, it + static_cast<std::ptrdiff_t>(classes_per_task));
    std::sort(cls.begin(), cls.end());
    p.tasks.push_back(std::move(cls));
    it += static_cast<std::ptrdiff_t>(classes_per_task);
  }
  return p;
}

namespace {

Dataset subset_by_classes(const Dataset& data, const std::vector<std::uint32_t>& classes) {
  std::vector<bool> keep(data.num_classes, false);
  for (auto c : classes) keep.at(c) = true;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (keep.at(data.labels[i])) idx.push_back(i);
  return data.select(idx);
}

}  // namespace

TaskStream split_classes(const Dataset& train, const Dataset& test, std::size_t num_tasks,
                         std::size_t classes_per_task, std::size_t base_classes, std::uint64_t seed) {
  if (train.num_classes != test.num_classes) throw std::invalid_argument("split: train/test class count mismatch");
  const auto part = partition_classes(train.num_classes, num_tasks, classes_per_task, base_classes, seed);
  TaskStream stream;
  stream.split_seed = seed;
  stream.base_classes = part.base;
  stream.base = subset_by_classes(train, part.base);
  for (const auto& cls : part.tasks)
    stream.tasks.push_back({cls, subset_by_classes(train, cls), subset_by_classes(test, cls)});
  return stream;
}

// --- metrics -----------------------------------------------------------

void AccuracyMatrix::set(std::size_t step, std::size_t task, double value) {
  if (step >= n_ || task > step) throw std::out_of_range("accuracy matrix: entry outside lower triangle");
  if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument("accuracy matrix: value outside [0,1]");
  cells_[step * n_ + task] = value;
}

std::optional<double> AccuracyMatrix::get(std::size_t step, std::size_t task) const {
  if (step >= n_ || task > step) return std::nullopt;
  return cells_[step * n_ + task];
}

double average_accuracy(const AccuracyMatrix& m) {
  const std::size_t n = m.tasks();
  if (n == 0) throw std::invalid_argument("average accuracy: missing entries");
  double sum = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto v = m.get(n - 1, t);
    if (!v) throw std::invalid_argument("average accuracy: missing entries");
    sum += *v;
  }
  return sum / static_cast<double>(n);
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t n = m.tasks();
  if (n < 2) throw std::invalid_argument("undefined for single task");
  double sum = 0.0;
  for (std::size_t t = 0; t + 1 < n; ++t) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t l = t; l + 1 < n; ++l) {
      const auto v = m.get(l, t);
      if (!v) throw std::invalid_argument("forgetting: missing entries");
      best = std::max(best, *v);
    }
    const auto last = m.get(n - 1, t);
    if (!last) throw std::invalid_argument("forgetting: missing entries");
    sum += best - *last;
  }
  return sum / static_cast<double>(n - 1);
}

void write_matrix_csv(const AccuracyMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "step";
  for (std::size_t t = 0; t < m.tasks(); ++t) out << ",task_" << t;
  out << '\n';
  char buf[64];
  for (std::size_t l = 0; l < m.tasks(); ++l) {
    out << l;
    for (std::size_t t = 0; t < m.tasks(); ++t) {
      out << ',';
      if (const auto v = m.get(l, t)) {
        std::snprintf(buf, sizeof buf, "%.17g", *v);
        out << buf;
      }
    }
    out << '\n';
  }
}

AccuracyMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("step", 0) != 0) throw std::runtime_error("accuracy csv: bad header");
  const auto n = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  AccuracyMatrix m(n);
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (row >= n) throw std::runtime_error("accuracy csv: too many rows");
    std::istringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    for (std::size_t t = 0; t < n; ++t) {
      if (!std::getline(ss, field, ',')) field.clear();
      if (!field.empty()) m.set(row, t, std::strtod(field.c_str(), nullptr));
    }
    ++row;
  }
  if (row != n) throw std::runtime_error("accuracy csv: missing rows");
  return m;
}

// --- experiments -------------------------------------------------------

const char* to_string(EvalMode m) {
  switch (m) {
    case EvalMode::kNormal:
      return "normal";
    case EvalMode::kOracle:
      return "oracle";
    case EvalMode::kNoRefinement:
      return "no-refinement";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "normal") return EvalMode::kNormal;
  if (s == "oracle") return EvalMode::kOracle;
  if (s == "no-refinement") return EvalMode::kNoRefinement;
  throw std::invalid_argument("unknown mode: " + s);
}

namespace {

constexpr std::size_t kChunk = 128;

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

template <typename Fn>
void for_chunks(std::size_t n, std::size_t chunk, Fn&& fn) {
  for (std::size_t start = 0; start < n; start += chunk) fn(start, std::min(chunk, n - start));
}

double label_accuracy(const Classifier& clf, std::span<const double> features, const Dataset& data) {
  const auto pred = classify(clf, features, data.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (clf.label_of(pred[i]) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> gather(std::span<const double> rows, std::span<const std::size_t> idx, std::size_t width) {
  std::vector<double> out;
  out.reserve(idx.size() * width);
  for (auto i : idx) out.insert(out.end(), rows.begin() + i * width, rows.begin() + (i + 1) * width);
  return out;
}

// Test set of one task with cached reals, pretrained embeddings and
// per-(sample, task) features. A task's parameters never change after its
// training step, so cached features stay valid for the rest of the run.
struct TestCache {
  const Dataset* data = nullptr;
  std::vector<double> images;
  std::vector<double> base_emb;
  std::vector<std::map<std::size_t, std::vector<double>>> feats;
};

TestCache make_cache(const Dataset& data, const Backbone& backbone, bool with_base) {
  TestCache c;
  c.data = &data;
  c.images = to_reals(data, iota_indices(data.size()));
  c.feats.resize(data.size());
  if (with_base) {
    const std::size_t iv = backbone.config().image_values();
    for_chunks(data.size(), kChunk, [&](std::size_t start, std::size_t n) {
      auto e = base_embeddings(backbone, std::span<const double>(c.images).subspan(start * iv, n * iv), n);
      c.base_emb.insert(c.base_emb.end(), e.begin(), e.end());
    });
  }
  return c;
}

// Features of every sample i under task tasks[i].
std::vector<double> cached_features(TestCache& c, const ContinualModel& model, std::span<const std::size_t> tasks) {
  const std::size_t iv = model.backbone().config().image_values();
  const std::size_t d = model.backbone().config().embed_dim;
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (!c.feats[i].count(tasks[i])) missing.push_back(i);
  for_chunks(missing.size(), kChunk, [&](std::size_t start, std::size_t n) {
    std::span<const std::size_t> idx(missing.data() + start, n);
    auto images = gather(c.images, idx, iv);
    std::vector<std::size_t> t;
    for (auto i : idx) t.push_back(tasks[i]);
    auto e = task_embeddings(model, images, n, t);
    for (std::size_t k = 0; k < n; ++k) c.feats[idx[k]][t[k]].assign(e.begin() + k * d, e.begin() + (k + 1) * d);
  });
  std::vector<double> out;
  out.reserve(tasks.size() * d);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& f = c.feats[i].at(tasks[i]);
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

struct Selected {
  std::vector<double> features;
  std::size_t correct_selections = 0;
  std::size_t selections = 0;
};

// Inference-time selection and features for a whole test set.
Selected selected_features(TestCache& c, const ContinualModel& model, std::size_t true_task) {
  const std::size_t d = model.backbone().config().embed_dim;
  const std::size_t n = c.data->size();
  Selected s;
  if (model.variant() == Variant::kTwoStage) {
    std::vector<std::size_t> tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
      tasks[i] = select_two_stage(std::span<const double>(c.base_emb).subspan(i * d, d), model.global_keys());
      if (tasks[i] == true_task) ++s.correct_selections;
    }
    s.selections = n;
    s.features = cached_features(c, model, tasks);
    return s;
  }
  const std::size_t iv = model.backbone().config().image_values();
  for_chunks(n, kChunk, [&](std::size_t start, std::size_t m) {
    Graph g;
    SingleStageLnProvider provider(model.bank(), model.layer_keys());
    auto fwd = model.backbone().forward(g, std::span<const double>(c.images).subspan(start * iv, m * iv), m, provider);
    auto v = g.value(fwd.cls_embedding);
    s.features.insert(s.features.end(), v.begin(), v.end());
    for (const auto& per_sample : provider.selections())
      for (auto t : per_sample) {
        ++s.selections;
        if (t == true_task) ++s.correct_selections;
      }
  });
  return s;
}

Matrix layer_key_similarity(const LayerKeyBank& keys) {
  const std::size_t n = keys.size();
  Matrix m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t s = 0; s < keys.num_sites(); ++s)
        sum += selection_similarity(keys.key(i, s).values(), keys.key(j, s).values());
      m[i][j] = sum / static_cast<double>(keys.num_sites());
    }
  return m;
}

double measured_forwards(const ContinualModel& model, const TaskStream& stream, InferMode mode) {
  const auto image = to_reals(stream.tasks.front().test, std::vector<std::size_t>{0});
  const auto before = model.forward_count();
  infer(model, image, mode, mode == InferMode::kOracle ? std::optional<std::size_t>(0) : std::nullopt);
  return static_cast<double>(model.forward_count() - before);
}

}  // namespace

AccuracyMatrix run_ft_baseline(const TaskStream& stream, const Backbone& pretrained, const TrainConfig& config,
                               double lr) {
  if (stream.num_tasks() == 0) throw std::invalid_argument("no tasks");
  Backbone backbone = pretrained.thawed_copy();
  backbone.make_trainable();
  const std::size_t d = backbone.config().embed_dim;
  const std::size_t iv = backbone.config().image_values();
  const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
  Classifier clf(d);
  AccuracyMatrix matrix(stream.num_tasks());
  std::vector<std::vector<double>> test_images;

  for (std::size_t t = 0; t < stream.num_tasks(); ++t) {
    const auto& task = stream.tasks[t];
    clf.add_head(task.classes, Rng::derive(config.seed, 300, t));
    clf.set_all_trainable();
    std::vector<Tensor*> params = backbone.parameters();
    for (std::size_t h = 0; h <= t; ++h)
      for (Tensor* p : clf.head_parameters(h)) params.push_back(p);
    Adam adam(params, AdamConfig{lr, config.beta1, config.beta2, config.eps_opt});

    std::vector<std::size_t> targets(task.train.size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = clf.index_of(task.train.labels[i]);
    std::vector<std::size_t> order = iota_indices(task.train.size());
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      Rng rng(Rng::derive(config.seed, 3000 + t, epoch));
      rng.shuffle(order);
      for_chunks(order.size(), bs, [&](std::size_t start, std::size_t n) {
        std::span<const std::size_t> idx(order.data() + start, n);
        std::vector<std::size_t> tgt;
        for (auto i : idx) tgt.push_back(targets[i]);
        adam.zero_grad();
        Graph g;
        BaseLnProvider provider(backbone);
        auto fwd = backbone.forward(g, to_reals(task.train, idx), n, provider);
        Var ce = g.softmax_cross_entropy(clf.logits(g, fwd.cls_embedding), tgt);
        if (!std::isfinite(g.item(ce))) throw std::runtime_error("diverged");
        g.backward(ce);
        adam.step();
      });
    }

    test_images.push_back(to_reals(task.test, iota_indices(task.test.size())));
    for (std::size_t u = 0; u <= t; ++u) {
      const Dataset& test = stream.tasks[u].test;
      std::vector<double> feats;
      for_chunks(test.size(), kChunk, [&](std::size_t start, std::size_t n) {
        Graph g;
        BaseLnProvider provider(backbone);
        auto fwd = backbone.forward(g, std::span<const double>(test_images[u]).subspan(start * iv, n * iv), n,
                                    provider);
        auto v = g.value(fwd.cls_embedding);
        feats.insert(feats.end(), v.begin(), v.end());
      });
      matrix.set(t, u, label_accuracy(clf, feats, test));
    }
  }
  return matrix;
}

ExperimentReport run_experiment(const TaskStream& stream, std::shared_ptr<const Backbone> backbone,
                                const TrainConfig& config, const std::set<EvalMode>& modes,
                                const ExperimentObserver& observer) {
  if (stream.num_tasks() == 0) throw std::invalid_argument("no tasks");
  if (modes.empty()) throw std::invalid_argument("run_experiment: no modes requested");
  const auto total_start = std::chrono::steady_clock::now();
  const std::size_t T = stream.num_tasks();
  const bool want_normal = modes.count(EvalMode::kNormal) > 0;
  const bool want_oracle = modes.count(EvalMode::kOracle) > 0;
  const bool want_unrefined = modes.count(EvalMode::kNoRefinement) > 0;
  // Oracle and no-refinement both use the phase-1 heads, so oracle differs
  // from no-refinement only in which LayerNorm parameters are applied.
  const bool keep_phase1_heads = want_oracle || want_unrefined;

  auto model = std::make_shared<ContinualModel>(backbone, config.variant, config.seed);
  const std::size_t d = backbone->config().embed_dim;
  Classifier unrefined(d);

  ExperimentReport report;
  report.variant = config.variant;
  report.seed = config.seed;
  report.num_tasks = T;
  std::map<EvalMode, AccuracyMatrix> matrices;
  for (auto m : modes) matrices.emplace(m, AccuracyMatrix(T));
  double phase1_s = 0.0, refine_s = 0.0, eval_s = 0.0;

  std::vector<TestCache> caches;
  std::vector<double> final_selection(T, 0.0);
  auto notify = [&](std::size_t t, const char* stage) {
    if (observer) observer(t, stage, *model);
  };

  for (std::size_t t = 0; t < T; ++t) {
    const auto& task = stream.tasks[t];
    model->add_task(task.classes);
    notify(t, "added");

    auto start = std::chrono::steady_clock::now();
    auto logs = train_task_phase1(*model, t, task.train, config);
    report.train_log.insert(report.train_log.end(), logs.begin(), logs.end());
    phase1_s += seconds_since(start);
    notify(t, "phase1");

    if (keep_phase1_heads) {
      unrefined.add_head(task.classes, 0);
      unrefined.mutable_head(t).weight = model->classifier().head(t).weight;
      unrefined.mutable_head(t).bias = model->classifier().head(t).bias;
      unrefined.set_trainable(std::nullopt);
    }
    if (want_normal) {
      start = std::chrono::steady_clock::now();
      logs = refine_classifier(*model, t, task.train, config);
      report.train_log.insert(report.train_log.end(), logs.begin(), logs.end());
      refine_s += seconds_since(start);
      notify(t, "refined");
    }

    start = std::chrono::steady_clock::now();
    caches.push_back(make_cache(task.test, model->backbone(), config.variant == Variant::kTwoStage));
    for (std::size_t u = 0; u <= t; ++u) {
      TestCache& c = caches[u];
      if (want_normal || want_unrefined) {
        const auto sel = selected_features(c, *model, u);
        if (want_normal) matrices[EvalMode::kNormal].set(t, u, label_accuracy(model->classifier(), sel.features, *c.data));
        if (want_unrefined) matrices[EvalMode::kNoRefinement].set(t, u, label_accuracy(unrefined, sel.features, *c.data));
        if (t + 1 == T)
          final_selection[u] = static_cast<double>(sel.correct_selections) / static_cast<double>(sel.selections);
      }
      if (want_oracle) {
        const std::vector<std::size_t> truth(c.data->size(), u);
        const auto feats = cached_features(c, *model, truth);
        matrices[EvalMode::kOracle].set(t, u, label_accuracy(unrefined, feats, *c.data));
      }
    }
    eval_s += seconds_since(start);
  }

  for (auto& [mode, matrix] : matrices) {
    ModeResult r;
    r.matrix = matrix;
    r.average_accuracy = average_accuracy(matrix);
    if (T >= 2) r.forgetting = forgetting(matrix);
    if (mode == EvalMode::kOracle) {
      r.selection_accuracy.assign(T, 1.0);
      r.forward_passes_per_prediction = measured_forwards(*model, stream, InferMode::kOracle);
    } else {
      r.selection_accuracy = final_selection;
      r.forward_passes_per_prediction = measured_forwards(*model, stream, InferMode::kNormal);
    }
    report.modes[to_string(mode)] = std::move(r);
  }

  const std::uint64_t L = backbone->config().num_sites();
  const std::uint64_t cpt = stream.tasks.front().classes.size();
  std::uint64_t backbone_values = 0;
  for (const auto& [name, tensor] : backbone->named_tensors()) backbone_values += tensor->numel();
  report.param_counts["task_specific"] = count_trainable_params(d, L, T, config.variant, false, 0);
  report.param_counts["task_specific_with_classifier"] = count_trainable_params(d, L, T, config.variant, true, cpt);
  report.param_counts["frozen_backbone"] = backbone_values;

  report.key_similarity = config.variant == Variant::kTwoStage ? key_similarity_matrix(model->global_keys())
                                                              : layer_key_similarity(model->layer_keys());
  report.ln_params = export_params(model->bank());
  report.timings["phase1_seconds"] = phase1_s;
  report.timings["refine_seconds"] = refine_s;
  report.timings["eval_seconds"] = eval_s;
  report.timings["total_seconds"] = seconds_since(total_start);
  report.model = model;
  return report;
}

bool ExperimentReport::same_results(const ExperimentReport& other) const {
  if (variant != other.variant || seed != other.seed || num_tasks != other.num_tasks) return false;
  if (param_counts != other.param_counts || key_similarity != other.key_similarity) return false;
  if (modes.size() != other.modes.size()) return false;
  for (const auto& [name, r] : modes) {
    auto it = other.modes.find(name);
    if (it == other.modes.end()) return false;
    const auto& o = it->second;
    if (!(r.matrix == o.matrix) || r.average_accuracy != o.average_accuracy || r.forgetting != o.forgetting ||
        r.selection_accuracy != o.selection_accuracy ||
        r.forward_passes_per_prediction != o.forward_passes_per_prediction)
      return false;
  }
  if (ln_params.size() != other.ln_params.size()) return false;
  for (std::size_t i = 0; i < ln_params.size(); ++i) {
    const auto &a = ln_params[i], &b = other.ln_params[i];
    if (a.task != b.task || a.site != b.site || a.kind != b.kind || a.index != b.index || a.value != b.value)
      return false;
  }
  if (train_log.size() != other.train_log.size()) return false;
  for (std::size_t i = 0; i < train_log.size(); ++i) {
    const auto &a = train_log[i], &b = other.train_log[i];
    if (a.task != b.task || a.phase != b.phase || a.epoch != b.epoch || a.ce_loss != b.ce_loss ||
        a.key_loss != b.key_loss)
      return false;
  }
  return true;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

}  // namespace

void write_report_bundle(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json metrics;
  metrics["variant"] = to_string(report.variant);
  metrics["seed"] = report.seed;
  metrics["num_tasks"] = report.num_tasks;
  nlohmann::ordered_json modes = nlohmann::ordered_json::object();
  for (const auto& [name, r] : report.modes) {
    nlohmann::ordered_json m;
    m["average_accuracy"] = r.average_accuracy;
    m["forgetting"] = r.forgetting ? nlohmann::ordered_json(*r.forgetting) : nlohmann::ordered_json(nullptr);
    m["selection_accuracy"] = r.selection_accuracy;
    m["forward_passes_per_prediction"] = r.forward_passes_per_prediction;
    modes[name] = m;
    write_matrix_csv(r.matrix, dir / ("accuracy_matrix_" + name + ".csv"));
  }
  metrics["modes"] = modes;
  metrics["param_counts"] = report.param_counts;
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");

  write_similarity_csv(report.key_similarity, dir / "key_similarity.csv");
  write_params_csv(report.ln_params, dir / "ln_params.csv");

  std::string log;
  for (const auto& e : report.train_log) log += to_json_line(e) + "\n";
  write_text(dir / "train_log.jsonl", log);

  nlohmann::ordered_json timing(report.timings);
  write_text(dir / "timing.json", timing.dump(2) + "\n");
}

ExperimentReport read_report_bundle(const std::filesystem::path& dir) {
  const auto metrics = read_json(dir / "metrics.json");
  ExperimentReport report;
  report.variant = parse_variant(metrics.at("variant").get<std::string>());
  report.seed = metrics.at("seed").get<std::uint64_t>();
  report.num_tasks = metrics.at("num_tasks").get<std::size_t>();
  for (const auto& [name, m] : metrics.at("modes").items()) {
    ModeResult r;
    r.matrix = read_matrix_csv(dir / ("accuracy_matrix_" + name + ".csv"));
    r.average_accuracy = m.at("average_accuracy").get<double>();
    if (!m.at("forgetting").is_null()) r.forgetting = m.at("forgetting").get<double>();
    r.selection_accuracy = m.at("selection_accuracy").get<std::vector<double>>();
    r.forward_passes_per_prediction = m.at("forward_passes_per_prediction").get<double>();
    report.modes[name] = std::move(r);
  }
  report.param_counts = metrics.at("param_counts").get<std::map<std::string, std::uint64_t>>();
  report.key_similarity = read_similarity_csv(dir / "key_similarity.csv");
  report.ln_params = read_params_csv(dir / "ln_params.csv");

  std::ifstream log(dir / "train_log.jsonl");
  if (!log) throw std::runtime_error("cannot open " + (dir / "train_log.jsonl").string());
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    report.train_log.push_back({j.at("task").get<std::size_t>(), j.at("phase").get<std::string>(),
                                j.at("epoch").get<std::size_t>(), j.at("ce_loss").get<double>(),
                                j.at("key_loss").get<double>(), j.at("seconds").get<double>()});
  }
  if (std::filesystem::exists(dir / "timing.json"))
    report.timings = read_json(dir / "timing.json").get<std::map<std::string, double>>();
  return report;
}

}  // namespace cln
