#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "cln/bench.hpp"
#include "cln/dataio.hpp"

using namespace cln;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "cln_test_dataio";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

Dataset small_dataset() {
  Dataset d;
  d.height = 2;
  d.width = 3;
  d.channels = 2;
  d.num_classes = 4;
  for (std::size_t i = 0; i < 5 * d.sample_bytes(); ++i) d.pixels.push_back(static_cast<std::uint8_t>(i * 37));
  d.labels = {0, 3, 1, 2, 3};
  return d;
}

CldsErrorKind read_error_kind(const fs::path& p, std::string* message = nullptr) {
  try {
    read_clds(p);
  } catch (const CldsError& e) {
    if (message) *message = e.what();
    return e.kind();
  }
  ADD_FAILURE() << "read_clds accepted a malformed file";
  return CldsErrorKind::kIo;
}

}  // namespace

TEST(Clds, RoundTripIsBitExact) {
  const Dataset d = small_dataset();
  const fs::path p = temp_path("roundtrip.clds");
  write_clds(d, p);
  const Dataset back = read_clds(p);
  EXPECT_EQ(back.height, d.height);
  EXPECT_EQ(back.width, d.width);
  EXPECT_EQ(back.channels, d.channels);
  EXPECT_EQ(back.num_classes, d.num_classes);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);

  const fs::path p2 = temp_path("roundtrip2.clds");
  write_clds(back, p2);
  EXPECT_EQ(slurp(p), slurp(p2));
}

TEST(Clds, SingleBytePixelPayloadIsFiveBytes) {
  Dataset d;
  d.height = d.width = d.channels = 1;
  d.num_classes = 1;
  d.pixels = {200};
  d.labels = {0};
  const fs::path p = temp_path("tiny.clds");
  write_clds(d, p);
  const std::string bytes = slurp(p);
  const std::string marker = "end\n";
  const auto header_end = bytes.find(marker) + marker.size();
  EXPECT_EQ(bytes.size() - header_end, 5u);
  EXPECT_EQ(bytes.rfind("CLDS1\n", 0), 0u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header_end]), 200);
}

TEST(Clds, LabelsAreLittleEndian) {
  Dataset d;
  d.height = d.width = d.channels = 1;
  d.num_classes = 300;
  d.pixels = {1};
  d.labels = {258};
  const fs::path p = temp_path("le.clds");
  write_clds(d, p);
  const std::string bytes = slurp(p);
  const std::string tail = bytes.substr(bytes.size() - 4);
  EXPECT_EQ(tail, std::string("\x02\x01\x00\x00", 4));
}

TEST(Clds, CorruptedMagic) {
  const fs::path p = temp_path("magic.clds");
  write_clds(small_dataset(), p);
  std::string bytes = slurp(p);
  bytes[0] = 'X';
  spit(p, bytes);
  std::string msg;
  EXPECT_EQ(read_error_kind(p, &msg), CldsErrorKind::kBadMagic);
  EXPECT_EQ(msg, "bad magic");
}

TEST(Clds, TruncatedPayload) {
  const fs::path p = temp_path("trunc.clds");
  write_clds(small_dataset(), p);
  const std::string bytes = slurp(p);
  for (std::size_t cut : {std::size_t{1}, std::size_t{4}, std::size_t{20}}) {
    spit(p, bytes.substr(0, bytes.size() - cut));
    std::string msg;
    EXPECT_EQ(read_error_kind(p, &msg), CldsErrorKind::kTruncatedPayload);
    EXPECT_EQ(msg, "truncated payload");
  }
}

TEST(Clds, LabelOutOfRange) {
  const fs::path p = temp_path("label.clds");
  write_clds(small_dataset(), p);
  std::string bytes = slurp(p);
  bytes[bytes.size() - 4] = 4;  // last label := num_classes
  spit(p, bytes);
  EXPECT_EQ(read_error_kind(p), CldsErrorKind::kLabelOutOfRange);
}

TEST(Clds, UnsupportedDtypeAndBadHeader) {
  const fs::path p = temp_path("dtype.clds");
  write_clds(small_dataset(), p);
  std::string bytes = slurp(p);
  const auto pos = bytes.find("dtype u8");
  ASSERT_NE(pos, std::string::npos);
  spit(p, bytes.substr(0, pos) + "dtype f4" + bytes.substr(pos + 8));
  EXPECT_EQ(read_error_kind(p), CldsErrorKind::kUnsupportedDtype);

  spit(p, bytes + "x");
  EXPECT_EQ(read_error_kind(p), CldsErrorKind::kBadHeader);

  const auto s = bytes.find("samples ");
  spit(p, bytes.substr(0, s) + bytes.substr(bytes.find('\n', s) + 1));
  EXPECT_EQ(read_error_kind(p), CldsErrorKind::kBadHeader);
}

TEST(Clds, MissingFileIsIoError) {
  EXPECT_EQ(read_error_kind(temp_path("does_not_exist.clds")), CldsErrorKind::kIo);
}

TEST(Clds, EmptyDatasetRejectedOnWrite) {
  Dataset d;
  d.height = d.width = d.channels = 1;
  d.num_classes = 1;
  EXPECT_THROW(write_clds(d, temp_path("empty.clds")), std::invalid_argument);
}

TEST(Clds, DeskDatasetChecksumSurvivesRoundTrip) {
  const Dataset d = synth_dataset(SynthSpec{});
  const fs::path p = temp_path("desk.clds");
  write_clds(d, p);
  const Dataset back = read_clds(p);
  EXPECT_EQ(dataset_checksum(back), dataset_checksum(d));
  EXPECT_EQ(back.size(), 60u * 150u);
  EXPECT_EQ(fs::file_size(p) - slurp(p).find("end\n") - 4, back.size() * (32 * 32 * 3 + 4));
}

TEST(Dataset, ChecksumSeesEveryField) {
  const Dataset d = small_dataset();
  Dataset e = d;
  e.pixels[7] ^= 1;
  EXPECT_NE(dataset_checksum(d), dataset_checksum(e));
  e = d;
  e.labels[0] = 1;
  EXPECT_NE(dataset_checksum(d), dataset_checksum(e));
}

TEST(Dataset, ToRealsScalesToUnitInterval) {
  const Dataset d = small_dataset();
  const std::vector<std::size_t> idx{1};
  const auto r = to_reals(d, idx);
  ASSERT_EQ(r.size(), d.sample_bytes());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i], d.sample(1)[i] / 255.0);
}
