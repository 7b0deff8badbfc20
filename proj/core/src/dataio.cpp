#include "cln/dataio.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace cln {

void Dataset::validate() const {
  if (height == 0 || width == 0 || channels == 0) throw std::invalid_argument("dataset: empty geometry");
  if (num_classes == 0) throw std::invalid_argument("dataset: no classes");
  if (pixels.size() != labels.size() * sample_bytes())
    throw std::invalid_argument("dataset: pixel count does not match sample count");
  for (auto l : labels)
    if (l >= num_classes) throw std::invalid_argument("dataset: label out of range");
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset out;
  out.height = height;
  out.width = width;
  out.channels = channels;
  out.num_classes = num_classes;
  out.pixels.reserve(indices.size() * sample_bytes());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    auto s = sample(i);
    out.pixels.insert(out.pixels.end(), s.begin(), s.end());
    out.labels.push_back(labels.at(i));
  }
  return out;
}

std::vector<double> to_reals(const Dataset& data, std::span<const std::size_t> indices) {
  const std::size_t n = data.sample_bytes();
  std::vector<double> out(indices.size() * n);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto s = data.sample(indices[k]);
    for (std::size_t j = 0; j < n; ++j) out[k * n + j] = static_cast<double>(s[j]) / 255.0;
  }
  return out;
}

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint64_t parse_u64(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CldsError(CldsErrorKind::kBadHeader, "bad header: missing " + key);
  std::uint64_t v = 0;
  const auto& s = it->second;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw CldsError(CldsErrorKind::kBadHeader, "bad header: " + key + " is not an integer");
  return v;
}

}  // namespace

void write_clds(const Dataset& data, const std::filesystem::path& path) {
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("write_clds: empty dataset");
  std::ostringstream header;
  header << kCldsMagic << "\n"
         << "height " << data.height << "\n"
         << "width " << data.width << "\n"
         << "channels " << data.channels << "\n"
         << "samples " << data.size() << "\n"
         << "classes " << data.num_classes << "\n"
         << "dtype u8\n"
         << "end\n";
  std::string labels;
  labels.reserve(data.size() * 4);
  for (auto l : data.labels) put_u32(labels, l);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CldsError(CldsErrorKind::kIo, "cannot open " + path.string() + " for writing");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(data.pixels.data()),
            static_cast<std::streamsize>(data.pixels.size()));
  out.write(labels.data(), static_cast<std::streamsize>(labels.size()));
  if (!out) throw CldsError(CldsErrorKind::kIo, "write failed: " + path.string());
}

Dataset read_clds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CldsError(CldsErrorKind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCldsMagic)
    throw CldsError(CldsErrorKind::kBadMagic, "bad magic");

  std::map<std::string, std::string> kv;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end") {
      ended = true;
      break;
    }
    const auto sp = line.find(' ');
    if (sp == std::string::npos) throw CldsError(CldsErrorKind::kBadHeader, "bad header line: " + line);
    kv[line.substr(0, sp)] = line.substr(sp + 1);
  }
  if (!ended) throw CldsError(CldsErrorKind::kBadHeader, "bad header: missing end marker");
  if (kv["dtype"] != "u8")
    throw CldsError(CldsErrorKind::kUnsupportedDtype, "unsupported dtype: " + kv["dtype"]);

  Dataset d;
  const std::uint64_t samples = parse_u64(kv, "samples");
  d.height = static_cast<std::uint32_t>(parse_u64(kv, "height"));
  d.width = static_cast<std::uint32_t>(parse_u64(kv, "width"));
  d.channels = static_cast<std::uint32_t>(parse_u64(kv, "channels"));
  d.num_classes = static_cast<std::uint32_t>(parse_u64(kv, "classes"));
  if (d.height == 0 || d.width == 0 || d.channels == 0 || d.num_classes == 0)
    throw CldsError(CldsErrorKind::kBadHeader, "bad header: zero dimension");

  const std::size_t pixel_bytes = samples * d.sample_bytes();
  const std::size_t expected = pixel_bytes + samples * 4;
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() < expected) throw CldsError(CldsErrorKind::kTruncatedPayload, "truncated payload");
  if (payload.size() > expected)
    throw CldsError(CldsErrorKind::kBadHeader, "bad header: trailing bytes after payload");

  const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
  d.pixels.assign(bytes, bytes + pixel_bytes);
  d.labels.resize(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    d.labels[i] = get_u32(bytes + pixel_bytes + 4 * i);
    if (d.labels[i] >= d.num_classes)
      throw CldsError(CldsErrorKind::kLabelOutOfRange, "label out of range at sample " + std::to_string(i));
  }
  return d;
}

std::uint64_t dataset_checksum(const Dataset& data) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint8_t b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  auto mix32 = [&mix](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) mix(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  mix32(data.height);
  mix32(data.width);
  mix32(data.channels);
  mix32(data.num_classes);
  for (auto b : data.pixels) mix(b);
  for (auto l : data.labels) mix32(l);
  return h;
}

}  // namespace cln
