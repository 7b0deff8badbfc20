#pragma once

#include <optional>
#include <span>
#include <vector>

namespace cln {

inline constexpr double kDefaultLnEps = 1e-5;
inline constexpr double kNormFloor = 1e-12;

// (z - mean) / sqrt(var + eps) with population variance. eps may be 0 for
// exact reference values; a constant input with eps = 0 maps to zeros.
std::vector<double> layer_normalize(std::span<const double> z, double eps = kDefaultLnEps);

// Throws std::invalid_argument("degenerate vector") when either norm is
// below kNormFloor.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct CrossEntropyResult {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d logits; zero at masked-out entries
};

// -log softmax(logits restricted to mask)[label], max-subtracted.
CrossEntropyResult softmax_cross_entropy(std::span<const double> logits, std::size_t label,
                                         const std::vector<bool>* mask = nullptr);

}  // namespace cln
