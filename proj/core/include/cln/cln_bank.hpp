#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cln/backbone.hpp"
#include "cln/graph.hpp"
#include "cln/tensor.hpp"

namespace cln {

// Per-task LayerNorm scale/bias for every site. Only the trainable task's
// tensors carry requires_grad; every other task is read-only.
class ClnBank {
 public:
  ClnBank(std::size_t embed_dim, std::size_t num_sites);

  std::size_t embed_dim() const { return d_; }
  std::size_t num_sites() const { return sites_; }
  std::size_t num_tasks() const { return gamma_.size(); }
  std::optional<std::size_t> trainable_task() const { return trainable_; }

  // Appends a task cloned from the frozen base LayerNorm values and makes it
  // the trainable one.
  std::size_t add_task(const Backbone& base);
  // Appends a task with explicit values (used by import); not trainable.
  std::size_t add_task_values(std::vector<Tensor> gammas, std::vector<Tensor> betas);
  // Disables gradients everywhere.
  void freeze_all();
  void set_trainable(std::optional<std::size_t> task);

  const Tensor& gamma(std::size_t task, std::size_t site) const;
  const Tensor& beta(std::size_t task, std::size_t site) const;
  Tensor& mutable_gamma(std::size_t task, std::size_t site);
  Tensor& mutable_beta(std::size_t task, std::size_t site);

  // All scale and bias tensors of one task.
  std::vector<Tensor*> task_parameters(std::size_t task);

  // layer_normalize(z, eps) * gamma + beta for (task, site).
  std::vector<double> apply(std::span<const double> z, std::size_t task, std::size_t site,
                            double eps) const;

  bool task_bit_equal(std::size_t task, const ClnBank& other) const;

 private:
  void check(std::size_t task, std::size_t site) const;

  std::size_t d_;
  std::size_t sites_;
  std::vector<std::vector<Tensor>> gamma_;
  std::vector<std::vector<Tensor>> beta_;
  std::optional<std::size_t> trainable_;
};

struct ClnParamRow {
  std::size_t task;
  std::size_t site;
  std::string kind;  // "scale" or "bias"
  std::size_t index;
  double value;
};

// Ordered by task, site, kind (scale before bias), index.
std::vector<ClnParamRow> export_params(const ClnBank& bank);
ClnBank import_params(std::span<const ClnParamRow> rows, std::size_t embed_dim, std::size_t num_sites);

// CSV with header task,site,kind,index,value; values printed with 17
// significant digits so the file re-imports bit-exactly.
void write_params_csv(const ClnBank& bank, const std::filesystem::path& path);
void write_params_csv(std::span<const ClnParamRow> rows, const std::filesystem::path& path);
std::vector<ClnParamRow> read_params_csv(const std::filesystem::path& path);

// Provider applying one fixed task's parameters at every site (ground-truth
// or oracle task identity).
class TaskLnProvider : public LnProvider {
 public:
  TaskLnProvider(const ClnBank& bank, std::size_t task);
  Var apply(Graph& g, std::size_t site, Var pre_norm, Var normalized, std::size_t batch,
            std::size_t tokens) override;

 private:
  const ClnBank& bank_;
  std::size_t task_;
};

// Provider applying a per-sample task (e.g. the two-stage selection result).
class PerSampleLnProvider : public LnProvider {
 public:
  PerSampleLnProvider(const ClnBank& bank, std::vector<std::size_t> tasks);
  Var apply(Graph& g, std::size_t site, Var pre_norm, Var normalized, std::size_t batch,
            std::size_t tokens) override;

 private:
  const ClnBank& bank_;
  std::vector<std::size_t> tasks_;
};

}  // namespace cln
