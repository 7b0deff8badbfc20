#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cln {

// Labeled image set. Pixels are bytes in [0,255], laid out sample-major then
// row-major (height, width, channel); they are scaled to [0,1] when fed to a model.
struct Dataset {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::uint32_t num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_bytes() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  std::span<const std::uint8_t> sample(std::size_t i) const {
    return std::span<const std::uint8_t>(pixels).subspan(i * sample_bytes(), sample_bytes());
  }
  // Throws std::invalid_argument on inconsistent shapes or labels.
  void validate() const;
  // Subset by sample index, same geometry and class count.
  Dataset select(std::span<const std::size_t> indices) const;
};

// Pixels of the given samples, concatenated, as reals in [0,1].
std::vector<double> to_reals(const Dataset& data, std::span<const std::size_t> indices);

enum class CldsErrorKind { kIo, kBadMagic, kBadHeader, kUnsupportedDtype, kTruncatedPayload, kLabelOutOfRange };

class CldsError : public std::runtime_error {
 public:
  CldsError(CldsErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CldsErrorKind kind() const { return kind_; }

 private:
  CldsErrorKind kind_;
};

inline constexpr const char* kCldsMagic = "CLDS1";

// Text header (one "key value" per line, terminated by "end\n") followed by
// the pixel bytes of every sample and one little-endian u32 label per sample.
void write_clds(const Dataset& data, const std::filesystem::path& path);
Dataset read_clds(const std::filesystem::path& path);

// FNV-1a over geometry, pixels and labels.
std::uint64_t dataset_checksum(const Dataset& data);

}  // namespace cln
