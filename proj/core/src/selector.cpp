#include "cln/selector.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <stdexcept>

#include "cln/numcore.hpp"
#include "cln/random.hpp"

namespace cln {

std::vector<double> random_unit_vector(std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(d);
  for (;;) {
    double n = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      n += x * x;
    }
    n = std::sqrt(n);
    if (n > 1e-6) {
      for (auto& x : v) x /= n;
      return v;
    }
  }
}

GlobalKeyBank::GlobalKeyBank(std::size_t embed_dim) : d_(embed_dim) {
  if (d_ == 0) throw std::invalid_argument("GlobalKeyBank: empty dimension");
}

std::size_t GlobalKeyBank::add_key(std::uint64_t seed) {
  const std::size_t t = add_key_values(Tensor({d_}, random_unit_vector(d_, seed)));
  set_trainable(t);
  return t;
}

std::size_t GlobalKeyBank::add_key_values(Tensor key) {
  if (key.numel() != d_) throw std::invalid_argument("GlobalKeyBank: key length must equal embed_dim");
  key.set_requires_grad(false);
  keys_.push_back(std::move(key));
  return keys_.size() - 1;
}

void GlobalKeyBank::set_trainable(std::optional<std::size_t> task) {
  if (task && *task >= size()) throw std::out_of_range("unknown task");
  for (std::size_t t = 0; t < size(); ++t) {
    const bool on = task && *task == t;
    if (keys_[t].requires_grad() != on) keys_[t].set_requires_grad(on);
  }
}

LayerKeyBank::LayerKeyBank(std::size_t embed_dim, std::size_t num_sites)
    : d_(embed_dim), sites_(num_sites) {
  if (d_ == 0 || sites_ == 0) throw std::invalid_argument("LayerKeyBank: empty dimensions");
}

std::size_t LayerKeyBank::add_task(std::uint64_t seed) {
  std::vector<Tensor> keys, attn;
  for (std::size_t s = 0; s < sites_; ++s) {
    keys.emplace_back(Shape{d_}, random_unit_vector(d_, Rng::derive(seed, s)));
    attn.emplace_back(Shape{d_}, 1.0);
  }
  const std::size_t t = add_task_values(std::move(keys), std::move(attn));
  set_trainable(t);
  return t;
}

std::size_t LayerKeyBank::add_task_values(std::vector<Tensor> keys, std::vector<Tensor> attentions) {
  if (keys.size() != sites_ || attentions.size() != sites_)
    throw std::invalid_argument("LayerKeyBank: wrong number of sites");
  for (std::size_t s = 0; s < sites_; ++s) {
    if (keys[s].numel() != d_ || attentions[s].numel() != d_)
      throw std::invalid_argument("LayerKeyBank: vector length must equal embed_dim");
    keys[s].set_requires_grad(false);
    attentions[s].set_requires_grad(false);
  }
  keys_.push_back(std::move(keys));
  attn_.push_back(std::move(attentions));
  return keys_.size() - 1;
}

void LayerKeyBank::set_trainable(std::optional<std::size_t> task) {
  if (task && *task >= size()) throw std::out_of_range("unknown task");
  for (std::size_t t = 0; t < size(); ++t) {
    const bool on = task && *task == t;
    for (std::size_t s = 0; s < sites_; ++s) {
      if (keys_[t][s].requires_grad() != on) keys_[t][s].set_requires_grad(on);
      if (attn_[t][s].requires_grad() != on) attn_[t][s].set_requires_grad(on);
    }
  }
}

std::vector<Tensor*> LayerKeyBank::task_parameters(std::size_t t) {
  std::vector<Tensor*> out;
  for (std::size_t s = 0; s < sites_; ++s) {
    out.push_back(&keys_.at(t)[s]);
    out.push_back(&attn_.at(t)[s]);
  }
  return out;
}

double selection_similarity(std::span<const double> query, std::span<const double> key) {
  try {
    return cosine_similarity(query, key);
  } catch (const std::invalid_argument&) {
    if (query.size() != key.size()) throw;
    return -1.0;
  }
}

namespace {

template <typename SimilarityFn>
std::size_t argmax_similarity(std::size_t count, SimilarityFn sim) {
  if (count == 0) throw std::invalid_argument("no tasks");
  std::size_t best = 0;
  double best_sim = sim(0);
  for (std::size_t t = 1; t < count; ++t) {
    const double s = sim(t);
    if (s > best_sim) {
      best = t;
      best_sim = s;
    }
  }
  return best;
}

}  // namespace

Var key_loss_two_stage(Graph& g, Var embeddings, Var key) {
  if (shape_numel(g.shape(embeddings)) == 0) throw std::invalid_argument("key loss: empty batch");
  Var cos = g.cosine_rows(embeddings, key);
  return g.add(g.constant({1}, {1.0}), g.scale(g.mean(cos), -1.0));
}

double key_loss_two_stage(std::span<const double> embeddings, std::size_t batch,
                          std::span<const double> key) {
  if (batch == 0) throw std::invalid_argument("key loss: empty batch");
  if (embeddings.size() != batch * key.size()) throw std::invalid_argument("key loss: shape mismatch");
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b)
    total += 1.0 - cosine_similarity(embeddings.subspan(b * key.size(), key.size()), key);
  return total / static_cast<double>(batch);
}

std::size_t select_two_stage(std::span<const double> embedding, const GlobalKeyBank& keys) {
  return argmax_similarity(keys.size(), [&](std::size_t t) {
    return selection_similarity(embedding, keys.key(t).values());
  });
}

std::size_t select_single_stage_layer(std::span<const double> z, const LayerKeyBank& bank,
                                      std::size_t site) {
  if (site >= bank.num_sites()) throw std::out_of_range("unknown site");
  if (z.size() != bank.embed_dim()) throw std::invalid_argument("selection: query length mismatch");
  std::vector<double> scaled(z.size());
  return argmax_similarity(bank.size(), [&](std::size_t t) {
    const auto a = bank.attention(t, site).values();
    for (std::size_t j = 0; j < z.size(); ++j) scaled[j] = a[j] * z[j];
    return selection_similarity(scaled, bank.key(t, site).values());
  });
}

SingleStageKeyLoss key_loss_single_stage(Graph& g, std::span<const Var> site_cls,
                                         const LayerKeyBank& bank, std::size_t task) {
  if (site_cls.size() != bank.num_sites())
    throw std::invalid_argument("key loss: activation count must equal site count");
  if (task >= bank.size()) throw std::out_of_range("unknown task");
  SingleStageKeyLoss out;
  Var total;
  for (std::size_t s = 0; s < site_cls.size(); ++s) {
    auto vals = g.value(site_cls[s]);
    Var z = g.constant(g.shape(site_cls[s]), std::vector<double>(vals.begin(), vals.end()));
    Var scaled = g.mul_row_broadcast(z, g.param(bank.attention(task, s)));
    Var layer = key_loss_two_stage(g, scaled, g.param(bank.key(task, s)));
    out.per_layer.push_back(layer);
    total = total.valid() ? g.add(total, layer) : layer;
  }
  out.aggregate = g.scale(total, 1.0 / static_cast<double>(site_cls.size()));
  return out;
}

Matrix key_similarity_matrix(const GlobalKeyBank& keys) {
  const std::size_t n = keys.size();
  Matrix m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    m[i][i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      m[i][j] = m[j][i] = selection_similarity(keys.key(i).values(), keys.key(j).values());
    }
  }
  return m;
}

void write_similarity_csv(const Matrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "i,j,similarity\n";
  char buf[64];
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", m[i][j]);
      out << i << ',' << j << ',' << buf << '\n';
    }
}

Matrix read_similarity_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "i,j,similarity") throw std::runtime_error("similarity csv: bad header");
  Matrix m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[3];
    for (auto& s : f)
      if (!std::getline(ss, s, ',')) throw std::runtime_error("similarity csv: short row");
    const std::size_t i = std::stoul(f[0]), j = std::stoul(f[1]);
    if (i >= m.size()) m.resize(i + 1);
    if (j >= m[i].size()) m[i].resize(j + 1, 0.0);
    m[i][j] = std::strtod(f[2].c_str(), nullptr);
  }
  return m;
}

SingleStageLnProvider::SingleStageLnProvider(const ClnBank& bank, const LayerKeyBank& keys)
    : bank_(bank), keys_(keys) {
  if (keys.size() == 0 || keys.size() > bank.num_tasks()) throw std::invalid_argument("no tasks");
}

Var SingleStageLnProvider::apply(Graph& g, std::size_t site, Var pre_norm, Var normalized,
                                 std::size_t batch, std::size_t tokens) {
  if (site == 0 || selections_.size() != batch) selections_.assign(batch, {});
  const std::size_t d = keys_.embed_dim();
  const auto acts = g.value(pre_norm);
  std::vector<Var> gammas, betas;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t t = select_single_stage_layer(acts.subspan(b * tokens * d, d), keys_, site);
    selections_[b].push_back(t);
    gammas.push_back(g.param(bank_.gamma(t, site)));
    betas.push_back(g.param(bank_.beta(t, site)));
  }
  return g.affine_rows(normalized, gammas, betas, tokens);
}

}  // namespace cln
