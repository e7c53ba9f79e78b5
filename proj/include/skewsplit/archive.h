#ifndef SKEWSPLIT_ARCHIVE_H_
#define SKEWSPLIT_ARCHIVE_H_

// Trained-model persistence. Layout is described in docs/archive_format.md.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "skewsplit/nn.h"
#include "skewsplit/skewtrain.h"

namespace skewsplit {

inline constexpr std::uint8_t kArchiveVersion = 1;

struct ModelArchive {
  SplitModel model;
  ReferenceNet reference;  // may be uninitialised
  SkewnessSpec spec;
  std::vector<int> selected_channels;
  // Free-form provenance (training config, seed, ...). Stored verbatim.
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

// Canonical bytes: equal archives always serialize identically.
std::vector<std::uint8_t> SerializeArchive(const ModelArchive& archive);
// Throws FormatError on bad magic, checksum failure, an unknown version or a
// malformed section; ConfigError when expected_k is given and differs.
ModelArchive ParseArchive(std::span<const std::uint8_t> bytes,
                          std::optional<int> expected_k = std::nullopt);

void SaveModel(const ModelArchive& archive, const std::string& path);
// Also throws DataError if the file cannot be read.
ModelArchive LoadModel(const std::string& path,
                       std::optional<int> expected_k = std::nullopt);

nlohmann::ordered_json ToJson(const ExtractorConfig& c);
nlohmann::ordered_json ToJson(const SplitModelConfig& c);
nlohmann::ordered_json ToJson(const SkewnessSpec& s);
// Missing keys keep their defaults; wrong types throw ConfigError.
ExtractorConfig ExtractorConfigFromJson(const nlohmann::ordered_json& j);
SplitModelConfig SplitModelConfigFromJson(const nlohmann::ordered_json& j);
SkewnessSpec SkewnessSpecFromJson(const nlohmann::ordered_json& j);

}  // namespace skewsplit

#endif  // SKEWSPLIT_ARCHIVE_H_
