#include "cln/cln_bank.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cln/numcore.hpp"

namespace cln {

ClnBank::ClnBank(std::size_t embed_dim, std::size_t num_sites) : d_(embed_dim), sites_(num_sites) {
  if (d_ == 0 || sites_ == 0) throw std::invalid_argument("ClnBank: empty dimensions");
}

std::size_t ClnBank::add_task(const Backbone& base) {
  if (!base.frozen()) throw std::logic_error("add_task: base backbone must be frozen");
  if (base.config().embed_dim != d_ || base.config().num_sites() != sites_)
    throw std::invalid_argument("add_task: backbone does not match bank dimensions");
  std::vector<Tensor> g, b;
  for (std::size_t s = 0; s < sites_; ++s) {
    g.emplace_back(Shape{d_}, std::vector<double>(base.ln_gamma(s).values().begin(),
                                                  base.ln_gamma(s).values().end()));
    b.emplace_back(Shape{d_}, std::vector<double>(base.ln_beta(s).values().begin(),
                                                  base.ln_beta(s).values().end()));
  }
  const std::size_t t = add_task_values(std::move(g), std::move(b));
  set_trainable(t);
  return t;
}

std::size_t ClnBank::add_task_values(std::vector<Tensor> gammas, std::vector<Tensor> betas) {
  if (gammas.size() != sites_ || betas.size() != sites_)
    throw std::invalid_argument("ClnBank: wrong number of sites");
  for (std::size_t s = 0; s < sites_; ++s) {
    if (gammas[s].numel() != d_ || betas[s].numel() != d_)
      throw std::invalid_argument("ClnBank: parameter length must equal embed_dim");
    gammas[s].set_requires_grad(false);
    betas[s].set_requires_grad(false);
  }
  gamma_.push_back(std::move(gammas));
  beta_.push_back(std::move(betas));
  return gamma_.size() - 1;
}

void ClnBank::freeze_all() { set_trainable(std::nullopt); }

void ClnBank::set_trainable(std::optional<std::size_t> task) {
  if (task && *task >= num_tasks()) throw std::out_of_range("unknown task/site");
  for (std::size_t t = 0; t < num_tasks(); ++t) {
    const bool on = task && *task == t;
    for (std::size_t s = 0; s < sites_; ++s) {
      if (gamma_[t][s].requires_grad() != on) gamma_[t][s].set_requires_grad(on);
      if (beta_[t][s].requires_grad() != on) beta_[t][s].set_requires_grad(on);
    }
  }
  trainable_ = task;
}

void ClnBank::check(std::size_t task, std::size_t site) const {
  if (task >= num_tasks() || site >= sites_) throw std::out_of_range("unknown task/site");
}

const Tensor& ClnBank::gamma(std::size_t task, std::size_t site) const {
  check(task, site);
  return gamma_[task][site];
}
const Tensor& ClnBank::beta(std::size_t task, std::size_t site) const {
  check(task, site);
  return beta_[task][site];
}
Tensor& ClnBank::mutable_gamma(std::size_t task, std::size_t site) {
  check(task, site);
  return gamma_[task][site];
}
Tensor& ClnBank::mutable_beta(std::size_t task, std::size_t site) {
  check(task, site);
  return beta_[task][site];
}

std::vector<Tensor*> ClnBank::task_parameters(std::size_t task) {
  check(task, 0);
  std::vector<Tensor*> out;
  for (std::size_t s = 0; s < sites_; ++s) {
    out.push_back(&gamma_[task][s]);
    out.push_back(&beta_[task][s]);
  }
  return out;
}

std::vector<double> ClnBank::apply(std::span<const double> z, std::size_t task, std::size_t site,
                                   double eps) const {
  check(task, site);
  if (z.size() != d_) throw std::invalid_argument("ClnBank::apply: input length must equal embed_dim");
  auto out = layer_normalize(z, eps);
  const auto g = gamma_[task][site].values();
  const auto b = beta_[task][site].values();
  for (std::size_t j = 0; j < d_; ++j) out[j] = out[j] * g[j] + b[j];
  return out;
}

bool ClnBank::task_bit_equal(std::size_t task, const ClnBank& other) const {
  if (task >= num_tasks() || task >= other.num_tasks() || sites_ != other.sites_) return false;
  for (std::size_t s = 0; s < sites_; ++s)
    if (!gamma_[task][s].bit_equal(other.gamma_[task][s]) ||
        !beta_[task][s].bit_equal(other.beta_[task][s]))
      return false;
  return true;
}

std::vector<ClnParamRow> export_params(const ClnBank& bank) {
  std::vector<ClnParamRow> rows;
  rows.reserve(bank.num_tasks() * bank.num_sites() * 2 * bank.embed_dim());
  for (std::size_t t = 0; t < bank.num_tasks(); ++t)
    for (std::size_t s = 0; s < bank.num_sites(); ++s) {
      for (std::size_t i = 0; i < bank.embed_dim(); ++i)
        rows.push_back({t, s, "scale", i, bank.gamma(t, s)[i]});
      for (std::size_t i = 0; i < bank.embed_dim(); ++i)
        rows.push_back({t, s, "bias", i, bank.beta(t, s)[i]});
    }
  return rows;
}

ClnBank import_params(std::span<const ClnParamRow> rows, std::size_t embed_dim, std::size_t num_sites) {
  ClnBank bank(embed_dim, num_sites);
  std::size_t tasks = 0;
  for (const auto& r : rows) tasks = std::max(tasks, r.task + 1);
  std::vector<std::vector<Tensor>> g(tasks), b(tasks);
  for (std::size_t t = 0; t < tasks; ++t)
    for (std::size_t s = 0; s < num_sites; ++s) {
      g[t].emplace_back(Shape{embed_dim});
      b[t].emplace_back(Shape{embed_dim});
    }
  std::vector<std::size_t> seen(tasks, 0);
  for (const auto& r : rows) {
    if (r.site >= num_sites || r.index >= embed_dim) throw std::invalid_argument("import_params: index out of range");
    if (r.kind == "scale") {
      g[r.task][r.site][r.index] = r.value;
    } else if (r.kind == "bias") {
      b[r.task][r.site][r.index] = r.value;
    } else {
      throw std::invalid_argument("import_params: unknown kind " + r.kind);
    }
    ++seen[r.task];
  }
  for (std::size_t t = 0; t < tasks; ++t) {
    if (seen[t] != 2 * num_sites * embed_dim) throw std::invalid_argument("import_params: incomplete task");
    bank.add_task_values(std::move(g[t]), std::move(b[t]));
  }
  return bank;
}

void write_params_csv(const ClnBank& bank, const std::filesystem::path& path) {
  write_params_csv(export_params(bank), path);
}

void write_params_csv(std::span<const ClnParamRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << "task,site,kind,index,value\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.17g", r.value);
    out << r.task << ',' << r.site << ',' << r.kind << ',' << r.index << ',' << buf << '\n';
  }
}

std::vector<ClnParamRow> read_params_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "task,site,kind,index,value")
    throw std::runtime_error("ln params csv: bad header");
  std::vector<ClnParamRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string f[5];
    for (auto& s : f)
      if (!std::getline(ss, s, ',')) throw std::runtime_error("ln params csv: short row");
    rows.push_back({std::stoul(f[0]), std::stoul(f[1]), f[2], std::stoul(f[3]), std::strtod(f[4].c_str(), nullptr)});
  }
  return rows;
}

TaskLnProvider::TaskLnProvider(const ClnBank& bank, std::size_t task) : bank_(bank), task_(task) {
  if (task >= bank.num_tasks()) throw std::out_of_range("unknown task/site");
}

Var TaskLnProvider::apply(Graph& g, std::size_t site, Var, Var normalized, std::size_t,
                          std::size_t) {
  const Var gamma = g.param(bank_.gamma(task_, site));
  const Var beta = g.param(bank_.beta(task_, site));
  return g.affine_rows(normalized, std::span<const Var>(&gamma, 1), std::span<const Var>(&beta, 1), 1);
}

PerSampleLnProvider::PerSampleLnProvider(const ClnBank& bank, std::vector<std::size_t> tasks)
    : bank_(bank), tasks_(std::move(tasks)) {
  for (auto t : tasks_)
    if (t >= bank.num_tasks()) throw std::out_of_range("unknown task/site");
}

Var PerSampleLnProvider::apply(Graph& g, std::size_t site, Var, Var normalized, std::size_t batch,
                               std::size_t tokens) {
  if (batch != tasks_.size()) throw std::invalid_argument("PerSampleLnProvider: batch size mismatch");
  std::vector<Var> gammas, betas;
  for (auto t : tasks_) {
    gammas.push_back(g.param(bank_.gamma(t, site)));
    betas.push_back(g.param(bank_.beta(t, site)));
  }
  return g.affine_rows(normalized, gammas, betas, tokens);
}

}  // namespace cln
