#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cln/dataio.hpp"
#include "cln/graph.hpp"
#include "cln/numcore.hpp"
#include "cln/optim.hpp"
#include "cln/tensor.hpp"

namespace cln {

enum class Variant { kTwoStage, kSingleStage };

const char* to_string(Variant v);
Variant parse_variant(const std::string& s);

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  double ln_eps = kDefaultLnEps;

  // Two sites per block (pre-attention, pre-MLP) plus the final encoder norm.
  std::size_t num_sites() const { return 2 * depth + 1; }
  std::size_t num_patches() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
  }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t image_values() const { return image_size * image_size * channels; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(static_cast<double>(embed_dim) * mlp_ratio);
  }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

// Supplies the affine part of every LayerNorm site. `pre_norm` is the
// activation entering site `site` (batch*tokens rows) and `normalized` its
// row-wise normalization; the provider returns the affine output.
class LnProvider {
 public:
  virtual ~LnProvider() = default;
  virtual Var apply(Graph& g, std::size_t site, Var pre_norm, Var normalized, std::size_t batch,
                    std::size_t tokens) = 0;
};

struct ForwardResult {
  Var cls_embedding;           // [B, d], output of the final norm at the cls row
  std::vector<Var> site_cls;   // per site: [B, d] cls rows entering that site
};

struct BlockWeights {
  Tensor qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

// Mini-ViT encoder. After freeze() every tensor is read-only and the object
// may be shared by concurrent forwards on separate graphs.
class Backbone {
 public:
  explicit Backbone(BackboneConfig config);
  Backbone(const Backbone& other);
  Backbone& operator=(const Backbone& other);

  // Truncated-normal(0.02) weights, zero biases, unit LayerNorm scales.
  static Backbone initialize(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  void freeze();
  // Enables gradients on every tensor. Throws if frozen.
  void make_trainable();
  // Independent, unfrozen copy (used by full fine-tuning baselines).
  Backbone thawed_copy() const;

  // images: batch * image_values reals in row-major (h, w, c) order.
  ForwardResult forward(Graph& g, std::span<const double> images, std::size_t batch,
                        LnProvider& provider) const;

  const Tensor& ln_gamma(std::size_t site) const { return ln_gamma_.at(site); }
  const Tensor& ln_beta(std::size_t site) const { return ln_beta_.at(site); }

  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  std::vector<std::pair<std::string, Tensor*>> mutable_named_tensors();
  std::vector<Tensor*> parameters();

  // Number of samples pushed through forward() so far.
  std::uint64_t forward_count() const { return forward_count_.load(std::memory_order_relaxed); }

  bool bit_equal(const Backbone& other) const;

 private:
  BackboneConfig config_;
  Tensor patch_w_, patch_b_, cls_token_, pos_embed_;
  std::vector<BlockWeights> blocks_;
  std::vector<Tensor> ln_gamma_, ln_beta_;
  bool frozen_ = false;
  mutable std::atomic<std::uint64_t> forward_count_{0};
};

// Applies the backbone's own LayerNorm parameters (the pretrained model).
class BaseLnProvider : public LnProvider {
 public:
  explicit BaseLnProvider(const Backbone& backbone) : backbone_(backbone) {}
  Var apply(Graph& g, std::size_t site, Var pre_norm, Var normalized, std::size_t batch,
            std::size_t tokens) override;

 private:
  const Backbone& backbone_;
};

// Rearranges images into [batch * patches, patch_dim] rows.
std::vector<double> extract_patches(const BackboneConfig& config, std::span<const double> images,
                                    std::size_t batch);

struct PretrainOptions {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  AdamConfig adam{.lr = 1e-3};
  std::uint64_t seed = 0;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

// Trains every backbone tensor plus a throwaway linear head on `base`, then
// returns the backbone frozen. `stream_labels` are the labels of the
// continual stream; any overlap with `base` is rejected.
Backbone pretrain_base(const BackboneConfig& config, const Dataset& base,
                       std::span<const std::uint32_t> stream_labels, const PretrainOptions& options,
                       PretrainReport* report = nullptr);

// Task-specific parameter count: per task, 2d per site for scale and bias,
// plus one key (two-stage) or a key and an attention vector per site
// (single-stage); optionally the task's classifier rows with biases.
std::uint64_t count_trainable_params(std::uint64_t embed_dim, std::uint64_t num_sites,
                                     std::uint64_t tasks, Variant variant,
                                     bool include_classifier, std::uint64_t classes_per_task);

inline constexpr const char* kCheckpointMagic = "CLNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Backbone& backbone, const std::filesystem::path& path);
Backbone load_checkpoint(const std::filesystem::path& path);

}  // namespace cln
