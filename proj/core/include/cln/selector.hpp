#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "cln/backbone.hpp"
#include "cln/cln_bank.hpp"
#include "cln/graph.hpp"
#include "cln/tensor.hpp"

namespace cln {

// One key per task, matched against the pretrained cls embedding.
class GlobalKeyBank {
 public:
  explicit GlobalKeyBank(std::size_t embed_dim);

  std::size_t embed_dim() const { return d_; }
  std::size_t size() const { return keys_.size(); }

  // Appends a key drawn uniformly on the unit sphere; it becomes the only
  // trainable key.
  std::size_t add_key(std::uint64_t seed);
  std::size_t add_key_values(Tensor key);
  void set_trainable(std::optional<std::size_t> task);

  const Tensor& key(std::size_t t) const { return keys_.at(t); }
  Tensor& mutable_key(std::size_t t) { return keys_.at(t); }

 private:
  std::size_t d_;
  std::vector<Tensor> keys_;
};

// Per task and site: a key and an attention vector (initialized to ones).
class LayerKeyBank {
 public:
  LayerKeyBank(std::size_t embed_dim, std::size_t num_sites);

  std::size_t embed_dim() const { return d_; }
  std::size_t num_sites() const { return sites_; }
  std::size_t size() const { return keys_.size(); }

  std::size_t add_task(std::uint64_t seed);
  std::size_t add_task_values(std::vector<Tensor> keys, std::vector<Tensor> attentions);
  void set_trainable(std::optional<std::size_t> task);

  const Tensor& key(std::size_t t, std::size_t site) const { return keys_.at(t).at(site); }
  const Tensor& attention(std::size_t t, std::size_t site) const { return attn_.at(t).at(site); }
  Tensor& mutable_key(std::size_t t, std::size_t site) { return keys_.at(t).at(site); }
  Tensor& mutable_attention(std::size_t t, std::size_t site) { return attn_.at(t).at(site); }
  std::vector<Tensor*> task_parameters(std::size_t t);

 private:
  std::size_t d_;
  std::size_t sites_;
  std::vector<std::vector<Tensor>> keys_;
  std::vector<std::vector<Tensor>> attn_;
};

std::vector<double> random_unit_vector(std::size_t d, std::uint64_t seed);

// Cosine similarity with the degeneracy policy of selection: a query or key
// whose norm is below the floor scores -1.
double selection_similarity(std::span<const double> query, std::span<const double> key);

// Batch mean of 1 - cos(embedding, key). Embeddings are constants.
Var key_loss_two_stage(Graph& g, Var embeddings, Var key);
double key_loss_two_stage(std::span<const double> embeddings, std::size_t batch,
                          std::span<const double> key);

// argmax_t cos(embedding, key_t); ties go to the lowest index.
std::size_t select_two_stage(std::span<const double> embedding, const GlobalKeyBank& keys);
// argmax_t cos(attention_t ⊙ z, key_t) at one site.
std::size_t select_single_stage_layer(std::span<const double> z, const LayerKeyBank& bank,
                                      std::size_t site);

struct SingleStageKeyLoss {
  std::vector<Var> per_layer;
  Var aggregate;
};

// site_cls holds one [B, d] activation per site. Activations are copied as
// constants: no gradient reaches the backbone or the LayerNorm parameters.
SingleStageKeyLoss key_loss_single_stage(Graph& g, std::span<const Var> site_cls,
                                         const LayerKeyBank& bank, std::size_t task);

using Matrix = std::vector<std::vector<double>>;

Matrix key_similarity_matrix(const GlobalKeyBank& keys);
// Rows i,j,similarity.
void write_similarity_csv(const Matrix& m, const std::filesystem::path& path);
Matrix read_similarity_csv(const std::filesystem::path& path);

// Runs per-site selection on the live cls activation before applying that
// site's task parameters. Records the chosen task for every sample and site.
class SingleStageLnProvider : public LnProvider {
 public:
  SingleStageLnProvider(const ClnBank& bank, const LayerKeyBank& keys);
  Var apply(Graph& g, std::size_t site, Var pre_norm, Var normalized, std::size_t batch,
            std::size_t tokens) override;

  // selections()[sample][site]
  const std::vector<std::vector<std::size_t>>& selections() const { return selections_; }

 private:
  const ClnBank& bank_;
  const LayerKeyBank& keys_;
  std::vector<std::vector<std::size_t>> selections_;
};

}  // namespace cln
