#include "cln/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <stdexcept>

#include "cln/random.hpp"

namespace cln {

const char* to_string(Variant v) { return v == Variant::kTwoStage ? "two-stage" : "single-stage"; }

Variant parse_variant(const std::string& s) {
  if (s == "two-stage") return Variant::kTwoStage;
  if (s == "single-stage") return Variant::kSingleStage;
  throw std::invalid_argument("unknown variant: " + s);
}

void BackboneConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw std::invalid_argument("backbone config: image_size must be a positive multiple of patch_size");
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
    throw std::invalid_argument("backbone config: embed_dim must be divisible by heads");
  if (depth == 0) throw std::invalid_argument("backbone config: depth must be positive");
  if (channels == 0) throw std::invalid_argument("backbone config: channels must be positive");
  if (!(mlp_ratio > 0.0) || mlp_hidden() == 0)
    throw std::invalid_argument("backbone config: mlp_ratio must be positive");
  if (!(ln_eps > 0.0)) throw std::invalid_argument("backbone config: ln_eps must be positive");
}

Backbone::Backbone(BackboneConfig config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim, h = config_.mlp_hidden();
  patch_w_ = Tensor({config_.patch_dim(), d});
  patch_b_ = Tensor({d});
  cls_token_ = Tensor({d});
  pos_embed_ = Tensor({config_.tokens(), d});
  blocks_.resize(config_.depth);
  for (auto& b : blocks_) {
    b.qkv_w = Tensor({d, 3 * d});
    b.qkv_b = Tensor({3 * d});
    b.proj_w = Tensor({d, d});
    b.proj_b = Tensor({d});
    b.fc1_w = Tensor({d, h});
    b.fc1_b = Tensor({h});
    b.fc2_w = Tensor({h, d});
    b.fc2_b = Tensor({d});
  }
  for (std::size_t s = 0; s < config_.num_sites(); ++s) {
    ln_gamma_.emplace_back(Shape{d}, 1.0);
    ln_beta_.emplace_back(Shape{d}, 0.0);
  }
}

Backbone::Backbone(const Backbone& other)
    : config_(other.config_),
      patch_w_(other.patch_w_),
      patch_b_(other.patch_b_),
      cls_token_(other.cls_token_),
      pos_embed_(other.pos_embed_),
      blocks_(other.blocks_),
      ln_gamma_(other.ln_gamma_),
      ln_beta_(other.ln_beta_),
      frozen_(other.frozen_),
      forward_count_(other.forward_count()) {}

Backbone& Backbone::operator=(const Backbone& other) {
  if (this == &other) return *this;
  config_ = other.config_;
  patch_w_ = other.patch_w_;
  patch_b_ = other.patch_b_;
  cls_token_ = other.cls_token_;
  pos_embed_ = other.pos_embed_;
  blocks_ = other.blocks_;
  ln_gamma_ = other.ln_gamma_;
  ln_beta_ = other.ln_beta_;
  frozen_ = other.frozen_;
  forward_count_.store(other.forward_count());
  return *this;
}

Backbone Backbone::initialize(const BackboneConfig& config, std::uint64_t seed) {
  Backbone bb(config);
  Rng rng(seed);
  // Scales stay at one and biases at zero; everything else is drawn.
  auto fill = [&rng](Tensor& t) {
    for (auto& v : t.mutable_values()) v = rng.trunc_normal(0.02);
  };
  fill(bb.patch_w_);
  fill(bb.cls_token_);
  fill(bb.pos_embed_);
  for (auto& b : bb.blocks_) {
    fill(b.qkv_w);
    fill(b.proj_w);
    fill(b.fc1_w);
    fill(b.fc2_w);
  }
  return bb;
}

std::vector<std::pair<std::string, const Tensor*>> Backbone::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Backbone*>(this)->mutable_named_tensors()) out.emplace_back(name, t);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Backbone::mutable_named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out{{"patch.w", &patch_w_},
                                                   {"patch.b", &patch_b_},
                                                   {"cls", &cls_token_},
                                                   {"pos", &pos_embed_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    auto& b = blocks_[i];
    out.insert(out.end(), {{p + "qkv.w", &b.qkv_w},
                           {p + "qkv.b", &b.qkv_b},
                           {p + "proj.w", &b.proj_w},
                           {p + "proj.b", &b.proj_b},
                           {p + "fc1.w", &b.fc1_w},
                           {p + "fc1.b", &b.fc1_b},
                           {p + "fc2.w", &b.fc2_w},
                           {p + "fc2.b", &b.fc2_b}});
  }
  for (std::size_t s = 0; s < ln_gamma_.size(); ++s) {
    out.emplace_back("ln" + std::to_string(s) + ".gamma", &ln_gamma_[s]);
    out.emplace_back("ln" + std::to_string(s) + ".beta", &ln_beta_[s]);
  }
  return out;
}

std::vector<Tensor*> Backbone::parameters() {
  if (frozen_) throw std::logic_error("backbone is frozen");
  std::vector<Tensor*> out;
  for (auto& [name, t] : mutable_named_tensors()) out.push_back(t);
  return out;
}

void Backbone::freeze() {
  for (auto& [name, t] : mutable_named_tensors()) t->set_requires_grad(false);
  frozen_ = true;
}

void Backbone::make_trainable() {
  if (frozen_) throw std::logic_error("backbone is frozen");
  for (auto& [name, t] : mutable_named_tensors()) t->set_requires_grad(true);
}

Backbone Backbone::thawed_copy() const {
  Backbone copy(*this);
  copy.frozen_ = false;
  return copy;
}

bool Backbone::bit_equal(const Backbone& other) const {
  if (!(config_ == other.config_)) return false;
  auto a = named_tensors();
  auto b = other.named_tensors();
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].second->bit_equal(*b[i].second)) return false;
  return true;
}

std::vector<double> extract_patches(const BackboneConfig& c, std::span<const double> images,
                                    std::size_t batch) {
  if (images.size() != batch * c.image_values())
    throw std::invalid_argument("forward: image tensor does not match configured image size");
  const std::size_t side = c.image_size / c.patch_size;
  const std::size_t pd = c.patch_dim();
  std::vector<double> out(batch * c.num_patches() * pd);
  for (std::size_t b = 0; b < batch; ++b) {
    const double* img = images.data() + b * c.image_values();
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        double* dst = out.data() + ((b * c.num_patches()) + py * side + px) * pd;
        for (std::size_t y = 0; y < c.patch_size; ++y) {
          const double* src =
              img + ((py * c.patch_size + y) * c.image_size + px * c.patch_size) * c.channels;
          std::copy_n(src, c.patch_size * c.channels, dst + y * c.patch_size * c.channels);
        }
      }
  }
  return out;
}

ForwardResult Backbone::forward(Graph& g, std::span<const double> images, std::size_t batch,
                                LnProvider& provider) const {
  if (batch == 0) throw std::invalid_argument("forward: empty batch");
  const std::size_t n = config_.tokens();
  auto patches = extract_patches(config_, images, batch);
  Var x = g.constant({batch * config_.num_patches(), config_.patch_dim()}, std::move(patches));
  x = g.linear(x, g.param(patch_w_), g.param(patch_b_));
  x = g.assemble_tokens(x, g.param(cls_token_), g.param(pos_embed_), batch);

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * n;

  ForwardResult result;
  auto norm_site = [&](Var in, std::size_t site) {
    result.site_cls.push_back(g.gather_rows(in, cls_rows));
    Var normalized = g.layer_norm_rows(in, config_.ln_eps);
    return provider.apply(g, site, in, normalized, batch, n);
  };

  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& blk = blocks_[i];
    Var h = norm_site(x, 2 * i);
    h = g.linear(h, g.param(blk.qkv_w), g.param(blk.qkv_b));
    h = g.attention(h, batch, n, config_.heads);
    h = g.linear(h, g.param(blk.proj_w), g.param(blk.proj_b));
    x = g.add(x, h);

    h = norm_site(x, 2 * i + 1);
    h = g.linear(h, g.param(blk.fc1_w), g.param(blk.fc1_b));
    h = g.gelu(h);
    h = g.linear(h, g.param(blk.fc2_w), g.param(blk.fc2_b));
    x = g.add(x, h);
  }
  Var out = norm_site(x, config_.num_sites() - 1);
  result.cls_embedding = g.gather_rows(out, cls_rows);
  forward_count_.fetch_add(batch, std::memory_order_relaxed);
  return result;
}

Var BaseLnProvider::apply(Graph& g, std::size_t site, Var, Var normalized, std::size_t,
                          std::size_t) {
  const Var gamma = g.param(backbone_.ln_gamma(site));
  const Var beta = g.param(backbone_.ln_beta(site));
  return g.affine_rows(normalized, std::span<const Var>(&gamma, 1), std::span<const Var>(&beta, 1), 1);
}

Backbone pretrain_base(const BackboneConfig& config, const Dataset& base,
                       std::span<const std::uint32_t> stream_labels, const PretrainOptions& options,
                       PretrainReport* report) {
  base.validate();
  if (base.height != config.image_size || base.width != config.image_size ||
      base.channels != config.channels)
    throw std::invalid_argument("pretrain_base: dataset geometry does not match backbone config");
  std::set<std::uint32_t> base_labels(base.labels.begin(), base.labels.end());
  for (auto l : stream_labels)
    if (base_labels.count(l)) throw std::invalid_argument("base/stream leakage");

  Backbone bb = Backbone::initialize(config, Rng::derive(options.seed, 1));
  if (options.epochs == 0 || base.size() == 0) {
    bb.freeze();
    return bb;
  }
  bb.make_trainable();

  std::map<std::uint32_t, std::size_t> local;
  for (auto l : base_labels) local.emplace(l, local.size());
  const std::size_t d = config.embed_dim, k = local.size();
  Tensor head_w({d, k}), head_b({k});
  {
    Rng rng(Rng::derive(options.seed, 2));
    for (auto& v : head_w.mutable_values()) v = rng.trunc_normal(0.02);
  }
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);

  std::vector<Tensor*> params = bb.parameters();
  params.push_back(&head_w);
  params.push_back(&head_b);
  Adam adam(params, options.adam);
  BaseLnProvider provider(bb);

  std::vector<std::size_t> order(base.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    Rng rng(Rng::derive(options.seed, 3, epoch));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(local.at(base.labels[i]));
      adam.zero_grad();
      Graph g;
      auto fwd = bb.forward(g, to_reals(base, idx), idx.size(), provider);
      Var logits = g.linear(fwd.cls_embedding, g.param(head_w), g.param(head_b));
      Var loss = g.softmax_cross_entropy(logits, labels);
      g.backward(loss);
      adam.step();
      total += g.item(loss) * static_cast<double>(idx.size());
    }
    if (report) report->epoch_loss.push_back(total / static_cast<double>(order.size()));
  }

  if (report) {
    std::size_t correct = 0;
    for (std::size_t start = 0; start < base.size(); start += 256) {
      std::vector<std::size_t> idx(std::min<std::size_t>(256, base.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      Graph g;
      auto fwd = bb.forward(g, to_reals(base, idx), idx.size(), provider);
      Var logits = g.linear(fwd.cls_embedding, g.view(head_w), g.view(head_b));
      auto vals = g.value(logits);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        auto row = vals.subspan(r * k, k);
        auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        if (best == local.at(base.labels[idx[r]])) ++correct;
      }
    }
    report->train_accuracy = static_cast<double>(correct) / static_cast<double>(base.size());
  }
  bb.freeze();
  return bb;
}

std::uint64_t count_trainable_params(std::uint64_t embed_dim, std::uint64_t num_sites,
                                     std::uint64_t tasks, Variant variant, bool include_classifier,
                                     std::uint64_t classes_per_task) {
  const std::uint64_t d = embed_dim, l = num_sites;
  std::uint64_t per_task = l * 2 * d;
  per_task += variant == Variant::kTwoStage ? d : l * d + l * d;
  if (include_classifier) per_task += classes_per_task * (d + 1);
  return tasks * per_task;
}

// --- checkpoint --------------------------------------------------------

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : buf_(std::move(data)) {}
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw std::runtime_error("checkpoint: truncated file");
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::size_t pos_ = 0;
};

constexpr std::uint8_t kDtypeF64 = 1;

}  // namespace

void save_checkpoint(const Backbone& backbone, const std::filesystem::path& path) {
  Writer w;
  w.bytes(kCheckpointMagic, std::strlen(kCheckpointMagic));
  w.u32(kCheckpointVersion);
  const auto& c = backbone.config();
  for (std::uint64_t v : {c.image_size, c.patch_size, c.channels, c.embed_dim, c.depth, c.heads})
    w.u64(v);
  w.f64(c.mlp_ratio);
  w.f64(c.ln_eps);
  w.u8(backbone.frozen() ? 1 : 0);
  auto tensors = backbone.named_tensors();
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(kDtypeF64);
    w.u32(static_cast<std::uint32_t>(t->shape().size()));
    for (auto dim : t->shape()) w.u64(dim);
    for (double v : t->values()) w.f64(v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Backbone load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
  if (r.bytes(std::strlen(kCheckpointMagic)) != kCheckpointMagic)
    throw std::runtime_error("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  BackboneConfig c;
  c.image_size = r.u64();
  c.patch_size = r.u64();
  c.channels = r.u64();
  c.embed_dim = r.u64();
  c.depth = r.u64();
  c.heads = r.u64();
  c.mlp_ratio = r.f64();
  c.ln_eps = r.f64();
  const bool frozen = r.u8() != 0;
  Backbone bb(c);
  auto tensors = bb.mutable_named_tensors();
  const std::uint32_t count = r.u32();
  if (count != tensors.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (auto& [name, t] : tensors) {
    const std::string got = r.bytes(r.u32());
    if (got != name) throw std::runtime_error("checkpoint: expected tensor " + name + ", found " + got);
    if (r.u8() != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype for " + name);
    Shape shape(r.u32());
    for (auto& dim : shape) dim = r.u64();
    if (shape != t->shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    for (auto& v : t->mutable_values()) v = r.f64();
  }
  if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
  if (frozen) bb.freeze();
  return bb;
}

}  // namespace cln
