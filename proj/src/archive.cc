#include "skewsplit/archive.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

#include <zlib.h>

#include "skewsplit/errors.h"

namespace skewsplit {
namespace {

using json = nlohmann::ordered_json;

constexpr std::uint8_t kMagic[4] = {'S', 'K', 'S', 'A'};
constexpr std::uint8_t kTagManifest = 'M';
constexpr std::uint8_t kTagTensor = 'T';
constexpr std::uint8_t kTagEnd = 'E';

void PutU32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(std::uint8_t(v >> shift));
}

void PutU64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int shift = 56; shift >= 0; shift -= 8) out.push_back(std::uint8_t(v >> shift));
}

void PutRecord(std::vector<std::uint8_t>& out, std::uint8_t tag,
               const std::string& name, std::span<const std::uint8_t> payload) {
  out.push_back(tag);
  PutU32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  PutU32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
}

std::uint32_t Crc(std::span<const std::uint8_t> bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  bool done() const { return at_ == b_.size(); }
  std::uint8_t U8() {
    Need(1);
    return b_[at_++];
  }
  std::uint32_t U32() {
    Need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = v << 8 | b_[at_++];
    return v;
  }
  std::uint64_t U64() {
    Need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = v << 8 | b_[at_++];
    return v;
  }
  std::span<const std::uint8_t> Bytes(std::size_t n) {
    Need(n);
    auto s = b_.subspan(at_, n);
    at_ += n;
    return s;
  }

 private:
  void Need(std::size_t n) const {
    if (b_.size() - at_ < n) throw FormatError("archive truncated");
  }
  std::span<const std::uint8_t> b_;
  std::size_t at_ = 0;
};

std::vector<std::uint8_t> EncodeTensor(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (int d : t.shape()) PutU32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) PutU64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

void DecodeTensorInto(std::span<const std::uint8_t> payload, const std::string& name,
                      Tensor* dst) {
  Reader r(payload);
  const int rank = r.U8();
  Shape shape(rank);
  for (int& d : shape) d = static_cast<int>(r.U32());
  if (shape != dst->shape()) {
    throw FormatError("tensor '" + name + "' has shape " + ShapeToString(shape) +
                      ", model expects " + ShapeToString(dst->shape()));
  }
  std::span<double> data = dst->mutable_data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<double>(r.U64());
    if (!std::isfinite(data[i])) {
      throw FormatError("tensor '" + name + "' element " + std::to_string(i) +
                        " is not finite");
    }
  }
  if (!r.done()) throw FormatError("tensor '" + name + "' has trailing bytes");
}

template <typename T>
T Get(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace

json ToJson(const ExtractorConfig& c) {
  return json{{"conv_layers", c.conv_layers}, {"channels_out", c.channels_out},
              {"kernel", c.kernel},           {"input_h", c.input_h},
              {"input_w", c.input_w},         {"input_c", c.input_c}};
}

json ToJson(const SplitModelConfig& c) {
  return json{{"extractor", ToJson(c.extractor)},
              {"k", c.k},
              {"classes", c.classes},
              {"remote_width", c.remote_width},
              {"reference_width", c.reference_width},
              {"quantizer_levels", c.quantizer_levels},
              {"temperature", c.temperature}};
}

json ToJson(const SkewnessSpec& s) {
  return json{{"k", s.k}, {"rho", s.rho}, {"lambda", s.lambda},
              {"temperature", s.temperature}};
}

ExtractorConfig ExtractorConfigFromJson(const json& j) {
  ExtractorConfig c;
  c.conv_layers = Get(j, "conv_layers", c.conv_layers);
  c.channels_out = Get(j, "channels_out", c.channels_out);
  c.kernel = Get(j, "kernel", c.kernel);
  c.input_h = Get(j, "input_h", c.input_h);
  c.input_w = Get(j, "input_w", c.input_w);
  c.input_c = Get(j, "input_c", c.input_c);
  return c;
}

SplitModelConfig SplitModelConfigFromJson(const json& j) {
  SplitModelConfig c;
  if (j.contains("extractor")) c.extractor = ExtractorConfigFromJson(j.at("extractor"));
  c.k = Get(j, "k", c.k);
  c.classes = Get(j, "classes", c.classes);
  c.remote_width = Get(j, "remote_width", c.remote_width);
  c.reference_width = Get(j, "reference_width", c.reference_width);
  c.quantizer_levels = Get(j, "quantizer_levels", c.quantizer_levels);
  c.temperature = Get(j, "temperature", c.temperature);
  return c;
}

SkewnessSpec SkewnessSpecFromJson(const json& j) {
  SkewnessSpec s;
  s.k = Get(j, "k", s.k);
  s.rho = Get(j, "rho", s.rho);
  s.lambda = Get(j, "lambda", s.lambda);
  s.temperature = Get(j, "temperature", s.temperature);
  return s;
}

std::vector<std::uint8_t> SerializeArchive(const ModelArchive& archive) {
  if (!archive.model.initialized()) throw Error("cannot save an uninitialised model");
  ModelArchive copy = archive;
  std::vector<NamedParameter> tensors = copy.model.NamedParameters();
  if (copy.reference.initialized()) copy.reference.AppendParameters(&tensors);

  json manifest;
  manifest["format"] = "skewsplit-model";
  manifest["version"] = kArchiveVersion;
  manifest["config"] = ToJson(copy.model.config());
  manifest["combiner"] = {{"w", copy.model.combiner().w()},
                          {"T", copy.model.combiner().temperature()}};
  manifest["skewness"] = ToJson(copy.spec);
  manifest["selected_channels"] = copy.selected_channels;
  manifest["mapping"] = copy.model.mapping();
  manifest["has_reference"] = copy.reference.initialized();
  json list = json::array();
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", name}, {"shape", t->shape()}});
  }
  manifest["tensors"] = std::move(list);
  manifest["metadata"] = copy.metadata;
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kArchiveVersion);
  PutRecord(out, kTagManifest, "manifest",
            std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  for (const auto& [name, t] : tensors) PutRecord(out, kTagTensor, name, EncodeTensor(*t));
  PutRecord(out, kTagEnd, "", {});
  PutU32(out, Crc(out));
  return out;
}

ModelArchive ParseArchive(std::span<const std::uint8_t> bytes,
                          std::optional<int> expected_k) {
  if (bytes.size() < 9 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("not a model archive (bad magic)");
  }
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const std::uint32_t stored = tail.U32();
  const std::uint32_t actual = Crc(body);
  if (stored != actual) {
    throw FormatError("archive checksum mismatch (stored " + std::to_string(stored) +
                      ", computed " + std::to_string(actual) + ")");
  }
  if (body[4] != kArchiveVersion) {
    throw FormatError("unsupported archive version " + std::to_string(body[4]) +
                      " (this build reads version " + std::to_string(kArchiveVersion) + ")");
  }

  Reader r(body.subspan(5));
  auto next = [&](std::uint8_t want) {
    const std::uint8_t tag = r.U8();
    const std::uint32_t name_len = r.U32();
    auto name_bytes = r.Bytes(name_len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const std::uint32_t len = r.U32();
    auto payload = r.Bytes(len);
    if (tag != want) {
      throw FormatError(std::string("archive: expected section '") + char(want) +
                        "', found '" + char(tag) + "'");
    }
    return std::make_pair(name, payload);
  };

  const auto [mname, mpayload] = next(kTagManifest);
  json manifest;
  try {
    manifest = json::parse(mpayload.begin(), mpayload.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive manifest is not valid JSON: ") + e.what());
  }
  if (manifest.value("format", "") != "skewsplit-model") {
    throw FormatError("archive manifest has an unknown format tag");
  }

  ModelArchive a;
  SplitModelConfig cfg;
  try {
    cfg = SplitModelConfigFromJson(manifest.at("config"));
    a.spec = SkewnessSpecFromJson(manifest.at("skewness"));
    a.selected_channels = manifest.at("selected_channels").get<std::vector<int>>();
    a.metadata = manifest.value("metadata", json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("archive manifest incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("archive manifest: ") + e.what());
  }
  if (expected_k && *expected_k != cfg.k) {
    throw ConfigError("archive was trained with k=" + std::to_string(cfg.k) +
                      " but k=" + std::to_string(*expected_k) + " was expected");
  }
  a.model = SplitModel(cfg, 0);
  std::vector<NamedParameter> slots = a.model.NamedParameters();
  if (manifest.value("has_reference", false)) {
    std::mt19937_64 rng(0);
    a.reference = ReferenceNet(cfg.extractor.channels_out, cfg.reference_width,
                               cfg.classes, rng);
    a.reference.AppendParameters(&slots);
  }
  for (auto& [name, dst] : slots) {
    const auto [tname, payload] = next(kTagTensor);
    if (tname != name) {
      throw FormatError("archive: expected tensor '" + name + "', found '" + tname + "'");
    }
    DecodeTensorInto(payload, name, dst);
  }
  next(kTagEnd);
  if (!r.done()) throw FormatError("archive has bytes after the end section");
  a.model.mutable_quantizer() = Quantizer(std::vector<double>(
      a.model.quantizer().centers().begin(), a.model.quantizer().centers().end()));
  const std::vector<int> mapping = manifest.value("mapping", std::vector<int>{});
  a.model.set_mapping(mapping);
  return a;
}

void SaveModel(const ModelArchive& archive, const std::string& path) {
  const std::vector<std::uint8_t> bytes = SerializeArchive(archive);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write archive " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing archive " + path);
}

ModelArchive LoadModel(const std::string& path, std::optional<int> expected_k) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open archive " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
  return ParseArchive(bytes, expected_k);
}

}  // namespace skewsplit
