#include "cln/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cln {

std::vector<double> layer_normalize(std::span<const double> z, double eps) {
  if (z.empty()) throw std::invalid_argument("empty vector");
  if (eps < 0.0) throw std::invalid_argument("layer_normalize: negative eps");
  const double n = static_cast<double>(z.size());
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= n;
  std::vector<double> out(z.size(), 0.0);
  const double denom = std::sqrt(var + eps);
  if (denom == 0.0) return out;
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - mean) / denom;
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kNormFloor || nb < kNormFloor) throw std::invalid_argument("degenerate vector");
  const double c = dot / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

CrossEntropyResult softmax_cross_entropy(std::span<const double> logits, std::size_t label,
                                         const std::vector<bool>* mask) {
  const std::size_t k = logits.size();
  if (mask && mask->size() != k) throw std::invalid_argument("softmax_cross_entropy: mask length");
  if (label >= k || (mask && !(*mask)[label])) throw std::invalid_argument("invalid label");
  auto active = [&](std::size_t i) { return !mask || (*mask)[i]; };

  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < k; ++i)
    if (active(i)) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  CrossEntropyResult r;
  r.grad.assign(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (!active(i)) continue;
    r.grad[i] = std::exp(logits[i] - mx);
    sum += r.grad[i];
  }
  for (std::size_t i = 0; i < k; ++i) r.grad[i] /= sum;
  r.loss = std::log(sum) - (logits[label] - mx);
  r.grad[label] -= 1.0;
  return r;
}

}  // namespace cln
