#include "skewsplit/archive.h"

#include <cstdio>
#include <filesystem>
#include <random>

#include <unistd.h>
#include <zlib.h>

#include "gtest/gtest.h"
#include "skewsplit/errors.h"

namespace skewsplit {
namespace {

ModelArchive MakeArchive(int k = 2, std::uint64_t seed = 3) {
  SplitModelConfig cfg;
  cfg.extractor.channels_out = 8;
  cfg.k = k;
  cfg.remote_width = 6;
  cfg.reference_width = 10;
  ModelArchive a;
  a.model = SplitModel(cfg, seed);
  a.model.mutable_combiner().mutable_w()->mutable_data()[0] = 0.7;
  a.model.mutable_quantizer() = Quantizer({-0.1, 0.2, 0.25, 0.9, 1.3, 2.0, 2.5, 4.0});
  std::mt19937_64 rng(seed + 1);
  a.reference = ReferenceNet(8, 10, 4, rng);
  a.spec.k = k;
  a.spec.rho = 0.8;
  a.selected_channels = {5, 1};
  a.metadata = {{"seed", seed}, {"note", "unit"}};
  return a;
}

Tensor RandomInputs(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n) * 16 * 16);
  for (double& x : v) x = u(rng);
  return Tensor::FromData({n, 16, 16, 1}, v);
}

TEST(ArchiveTest, RoundTripReproducesLogitsBitwise) {
  const ModelArchive a = MakeArchive();
  const ModelArchive b = ParseArchive(SerializeArchive(a));
  const Tensor x = RandomInputs(100, 9);
  const Tensor la = a.model.Logits(x), lb = b.model.Logits(x);
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) ASSERT_EQ(la.at(i), lb.at(i)) << i;
  ModelArchive ca = a;
  const Tensor feats = a.model.extractor().Forward(x);
  const Tensor ra = ca.reference.Forward(feats), rb = b.reference.Forward(feats);
  for (std::size_t i = 0; i < ra.size(); ++i) ASSERT_EQ(ra.at(i), rb.at(i));
  EXPECT_EQ(b.selected_channels, a.selected_channels);
  EXPECT_EQ(b.spec.rho, 0.8);
  EXPECT_EQ(b.model.combiner().w(), 0.7);
  EXPECT_EQ(b.metadata, a.metadata);
  EXPECT_EQ(std::vector<double>(b.model.quantizer().centers().begin(),
                                b.model.quantizer().centers().end()),
            (std::vector<double>{-0.1, 0.2, 0.25, 0.9, 1.3, 2.0, 2.5, 4.0}));
}

TEST(ArchiveTest, SerializationIsCanonical) {
  const ModelArchive a = MakeArchive();
  const auto first = SerializeArchive(a);
  EXPECT_EQ(first, SerializeArchive(a));
  EXPECT_EQ(first, SerializeArchive(ParseArchive(first)));
  EXPECT_NE(first, SerializeArchive(MakeArchive(2, 4)));
}

TEST(ArchiveTest, CorruptByteFailsChecksum) {
  const auto bytes = SerializeArchive(MakeArchive());
  for (std::size_t at : {std::size_t{5}, std::size_t{40}, bytes.size() / 2,
                         bytes.size() - 10, bytes.size() - 1}) {
    auto bad = bytes;
    bad[at] ^= 0x20;
    try {
      ParseArchive(bad);
      ADD_FAILURE() << "byte " << at << " accepted";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
  }
}

TEST(ArchiveTest, RejectsBadMagicTruncationAndVersion) {
  auto bytes = SerializeArchive(MakeArchive());
  auto magic = bytes;
  magic[0] = 'Z';
  EXPECT_THROW(ParseArchive(magic), FormatError);
  EXPECT_THROW(ParseArchive(std::span(bytes).first(6)), FormatError);
  EXPECT_THROW(ParseArchive(std::span(bytes).first(bytes.size() - 1)), FormatError);
  // A future version with a valid checksum.
  auto future = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4);
  future[4] = kArchiveVersion + 1;
  const std::uint32_t crc = static_cast<std::uint32_t>(
      ::crc32(0L, future.data(), static_cast<unsigned>(future.size())));
  for (int s = 24; s >= 0; s -= 8) future.push_back(std::uint8_t(crc >> s));
  try {
    ParseArchive(future);
    ADD_FAILURE();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(ArchiveTest, KMismatchIsConfigError) {
  const auto k5 = SerializeArchive(MakeArchive(5));
  EXPECT_EQ(ParseArchive(k5, 5).model.k(), 5);
  EXPECT_THROW(ParseArchive(k5, 2), ConfigError);
}

TEST(ArchiveTest, FileRoundTrip) {
  const std::string path = (std::filesystem::temp_directory_path() /
                            ("skewsplit_archive_" + std::to_string(::getpid()) + ".bin"))
                               .string();
  const ModelArchive a = MakeArchive();
  SaveModel(a, path);
  const ModelArchive b = LoadModel(path, 2);
  EXPECT_EQ(SerializeArchive(b), SerializeArchive(a));
  std::remove(path.c_str());
  EXPECT_THROW(LoadModel(path), DataError);
}

TEST(ArchiveTest, ModelWithoutReference) {
  ModelArchive a = MakeArchive();
  a.reference = ReferenceNet();
  const ModelArchive b = ParseArchive(SerializeArchive(a));
  EXPECT_FALSE(b.reference.initialized());
}

TEST(ArchiveTest, ConfigJsonRoundTrip) {
  SplitModelConfig c;
  c.extractor.channels_out = 12;
  c.k = 3;
  c.temperature = 2.5;
  const SplitModelConfig d = SplitModelConfigFromJson(ToJson(c));
  EXPECT_EQ(ToJson(d), ToJson(c));
  EXPECT_EQ(SplitModelConfigFromJson(nlohmann::ordered_json::object()).k, 2);
  EXPECT_THROW(SplitModelConfigFromJson({{"k", "two"}}), ConfigError);
}

}  // namespace
}  // namespace skewsplit
