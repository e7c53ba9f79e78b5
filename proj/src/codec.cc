#include "skewsplit/codec.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>

#include "skewsplit/errors.h"

namespace skewsplit {

using internal::Node;

// ---- Quantizer --------------------------------------------------------------

namespace {

void ValidateCenters(std::span<const double> c) {
  if (c.size() < 2 || c.size() > 256) {
    throw Error("quantizer needs between 2 and 256 centers, got " +
                std::to_string(c.size()));
  }
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!std::isfinite(c[i])) throw NonFiniteError("quantizer center not finite");
    if (i && !(c[i] > c[i - 1])) {
      throw Error("quantizer centers must be strictly increasing");
    }
  }
}

}  // namespace

Quantizer::Quantizer(std::vector<double> centers) {
  ValidateCenters(centers);
  const int n = static_cast<int>(centers.size());
  centers_ = Parameter(Tensor::FromData({n}, std::move(centers), true));
}

Quantizer Quantizer::Uniform(double lo, double hi, int levels) {
  if (levels < 2) throw Error("quantizer needs at least 2 levels");
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<double> c(levels);
  for (int i = 0; i < levels; ++i) c[i] = lo + (hi - lo) * i / (levels - 1);
  return Quantizer(std::move(c));
}

int Quantizer::levels() const {
  return static_cast<int>(centers_.tensor().size());
}

int Quantizer::bits_per_symbol() const {
  int bits = 0;
  while ((1 << bits) < levels()) ++bits;
  return bits;
}

std::vector<std::uint8_t> Quantizer::Quantize(
    std::span<const double> values) const {
  const std::span<const double> c = centers();
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = values[i];
    // First center strictly greater than x; the nearest is it or its
    // predecessor. Equal distance keeps the lower one.
    const auto it = std::upper_bound(c.begin(), c.end(), x);
    std::size_t hi = static_cast<std::size_t>(it - c.begin());
    std::size_t best;
    if (hi == 0) {
      best = 0;
    } else if (hi == c.size()) {
      best = c.size() - 1;
    } else {
      best = (c[hi] - x < x - c[hi - 1]) ? hi : hi - 1;
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

std::vector<double> Quantizer::Dequantize(
    std::span<const std::uint8_t> indices) const {
  const std::span<const double> c = centers();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= c.size()) {
      throw FormatError("dequantize: index " + std::to_string(indices[i]) +
                        " out of range for " + std::to_string(c.size()) +
                        " levels");
    }
    out[i] = c[indices[i]];
  }
  return out;
}

Tensor Quantizer::SoftQuantize(const Tensor& x, double sigma) const {
  const Tensor& ct = centers_.tensor();
  const std::span<const double> c = ct.data();
  const std::size_t levels = c.size();
  const double gap = (c.back() - c.front()) / static_cast<double>(levels - 1);
  const double s = sigma / (gap * gap);
  const std::size_t n = x.size();
  std::vector<double> probs(n * levels);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double xv = x.at(i);
    double* p = &probs[i * levels];
    double best = -INFINITY;
    for (std::size_t j = 0; j < levels; ++j) {
      p[j] = -s * (xv - c[j]) * (xv - c[j]);
      best = std::max(best, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < levels; ++j) z += (p[j] = std::exp(p[j] - best));
    double v = 0.0;
    for (std::size_t j = 0; j < levels; ++j) {
      p[j] /= z;
      v += p[j] * c[j];
    }
    out[i] = v;
  }
  return internal::MakeResult(
      x.shape(), std::move(out), {x.node(), ct.node()},
      [probs = std::move(probs), levels, n, s, gap](Node& self) {
        Node& xn = *self.inputs[0];
        Node& cn = *self.inputs[1];
        if (xn.requires_grad) xn.EnsureGrad();
        if (cn.requires_grad) cn.EnsureGrad();
        for (std::size_t i = 0; i < n; ++i) {
          const double g = self.grad[i];
          if (g == 0.0) continue;
          const double xv = xn.data[i];
          const double o = self.data[i];
          const double* p = &probs[i * levels];
          if (xn.requires_grad) {
            // d out/dx = sum_j c_j p_j (z'_j - sum_l p_l z'_l),
            // z'_j = -2 s (x - c_j).
            double mean_dz = 0.0;
            for (std::size_t j = 0; j < levels; ++j) {
              mean_dz += p[j] * (-2.0 * s * (xv - cn.data[j]));
            }
            double d = 0.0;
            for (std::size_t j = 0; j < levels; ++j) {
              d += cn.data[j] * p[j] * (-2.0 * s * (xv - cn.data[j]) - mean_dz);
            }
            xn.grad[i] += g * d;
          }
          if (cn.requires_grad) {
            // d out/dc_m = p_m + 2 s (x - c_m) p_m (c_m - out).
            for (std::size_t m = 0; m < levels; ++m) {
              const double cm = cn.data[m];
              cn.grad[m] += g * (p[m] + 2.0 * s * (xv - cm) * p[m] * (cm - o));
            }
            // The end centers also set the gap: d out/ds = -sum_j p_j d_j^2 (c_j - out)
            // and ds/dc_last = -ds/dc_0 = -2 s / (gap (levels - 1)).
            double dout_ds = 0.0;
            for (std::size_t j = 0; j < levels; ++j) {
              const double d = xv - cn.data[j];
              dout_ds -= p[j] * d * d * (cn.data[j] - o);
            }
            const double ds_dlast = -2.0 * s / (gap * static_cast<double>(levels - 1));
            cn.grad[levels - 1] += g * dout_ds * ds_dlast;
            cn.grad[0] -= g * dout_ds * ds_dlast;
          }
        }
      });
}

void Quantizer::Canonicalize() {
  std::span<double> c = centers_.mutable_tensor()->mutable_data();
  std::sort(c.begin(), c.end());
  const double span = std::max(c.back() - c.front(), 1e-6);
  const double min_gap = 1e-6 * span;
  for (std::size_t i = 1; i < c.size(); ++i) {
    if (c[i] <= c[i - 1] + min_gap) c[i] = c[i - 1] + min_gap;
  }
}

// ---- LZW --------------------------------------------------------------------

std::vector<std::uint32_t> LzwEncode(std::span<const std::uint8_t> bytes) {
  std::vector<std::uint32_t> codes;
  if (bytes.empty()) return codes;
  // (prefix code, next byte) -> code.
  std::unordered_map<std::uint64_t, std::uint32_t> dict;
  std::uint32_t next_code = 256;
  std::uint32_t w = bytes[0];
  for (std::size_t i = 1; i < bytes.size(); ++i) {
    const std::uint64_t key = (std::uint64_t{w} << 8) | bytes[i];
    auto it = dict.find(key);
    if (it != dict.end()) {
      w = it->second;
    } else {
      codes.push_back(w);
      dict.emplace(key, next_code++);
      w = bytes[i];
    }
  }
  codes.push_back(w);
  return codes;
}

namespace {

// Incremental decoder so block decoding can stop at a symbol budget.
class LzwDecoder {
 public:
  LzwDecoder() {
    entries_.reserve(512);
    for (int b = 0; b < 256; ++b) entries_.push_back({static_cast<std::uint8_t>(b)});
  }

  void Feed(std::uint32_t code, std::vector<std::uint8_t>* out) {
    std::vector<std::uint8_t> entry;
    if (code < entries_.size()) {
      entry = entries_[code];
    } else if (code == entries_.size() && !prev_.empty()) {
      entry = prev_;
      entry.push_back(prev_[0]);
    } else {
      throw FormatError("lzw: code " + std::to_string(code) +
                        " references an entry not yet defined (dictionary "
                        "size " + std::to_string(entries_.size()) + ")");
    }
    if (!prev_.empty()) {
      std::vector<std::uint8_t> added = prev_;
      added.push_back(entry[0]);
      entries_.push_back(std::move(added));
    }
    out->insert(out->end(), entry.begin(), entry.end());
    prev_ = std::move(entry);
  }

 private:
  std::vector<std::vector<std::uint8_t>> entries_;
  std::vector<std::uint8_t> prev_;
};

}  // namespace

std::vector<std::uint8_t> LzwDecode(std::span<const std::uint32_t> codes) {
  std::vector<std::uint8_t> out;
  LzwDecoder decoder;
  for (std::uint32_t c : codes) decoder.Feed(c, &out);
  return out;
}

int LzwCodeWidth(std::size_t code_index) {
  int width = 9;
  while ((std::size_t{1} << width) <= 256 + code_index) ++width;
  return width;
}

// ---- Block bitstream ---------------------------------------------------------

namespace {

class BitWriter {
 public:
  void Write(std::uint32_t value, int width) {
    for (int b = width - 1; b >= 0; --b) {
      if (bit_ == 0) bytes_.push_back(0);
      if ((value >> b) & 1u) bytes_.back() |= static_cast<std::uint8_t>(0x80u >> bit_);
      bit_ = (bit_ + 1) % 8;
    }
  }
  std::vector<std::uint8_t> Take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
  int bit_ = 0;
};

class BitReader {
 public:
  explicit BitReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  bool Read(int width, std::uint32_t* value) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size() * 8) return false;
    std::uint32_t v = 0;
    for (int i = 0; i < width; ++i, ++pos_) {
      v = (v << 1) | ((bytes_[pos_ / 8] >> (7 - pos_ % 8)) & 1u);
    }
    *value = v;
    return true;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kBlockHeaderBytes = 3;

}  // namespace

CompressedBlock EncodeBlock(std::span<const std::uint8_t> symbols,
                            std::uint8_t bits_per_symbol) {
  if (symbols.size() > 0xFFFF) {
    throw FormatError("block holds at most 65535 symbols, got " +
                      std::to_string(symbols.size()));
  }
  CompressedBlock block;
  block.symbol_count = static_cast<std::uint16_t>(symbols.size());
  block.bits_per_symbol = bits_per_symbol;
  BitWriter writer;
  const std::vector<std::uint32_t> codes = LzwEncode(symbols);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    writer.Write(codes[i], LzwCodeWidth(i));
  }
  std::vector<std::uint8_t> payload = writer.Take();
  block.bytes.reserve(kBlockHeaderBytes + payload.size());
  block.bytes.push_back(static_cast<std::uint8_t>(block.symbol_count >> 8));
  block.bytes.push_back(static_cast<std::uint8_t>(block.symbol_count & 0xFF));
  block.bytes.push_back(bits_per_symbol);
  block.bytes.insert(block.bytes.end(), payload.begin(), payload.end());
  return block;
}

std::vector<std::uint8_t> DecodeBlock(std::span<const std::uint8_t> block) {
  if (block.size() < kBlockHeaderBytes) {
    throw FormatError("block truncated: expected at least 3 header bytes, got " +
                      std::to_string(block.size()));
  }
  const std::size_t count = (std::size_t{block[0]} << 8) | block[1];
  BitReader reader(block.subspan(kBlockHeaderBytes));
  LzwDecoder decoder;
  std::vector<std::uint8_t> out;
  out.reserve(count);
  for (std::size_t i = 0; out.size() < count; ++i) {
    std::uint32_t code = 0;
    if (!reader.Read(LzwCodeWidth(i), &code)) {
      throw FormatError("block truncated: decoded " + std::to_string(out.size()) +
                        " of " + std::to_string(count) + " symbols");
    }
    decoder.Feed(code, &out);
  }
  if (out.size() != count) {
    throw FormatError("block overruns its symbol count " + std::to_string(count));
  }
  return out;
}

double CompressionRatio(double raw_bits, double compressed_bits) {
  if (!(compressed_bits > 0.0)) {
    throw Error("compression ratio undefined for zero compressed size");
  }
  return raw_bits / compressed_bits;
}

}  // namespace skewsplit
