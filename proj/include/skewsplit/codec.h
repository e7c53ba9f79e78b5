#ifndef SKEWSPLIT_CODEC_H_
#define SKEWSPLIT_CODEC_H_

// Compression for the low-importance feature channels: scalar quantisation
// onto a small learned codebook, then LZW over the resulting index bytes.
//
// Block bitstream (all fields MSB-first):
//   u16  symbol_count
//   u8   bits_per_symbol    width of a symbol before LZW (informational)
//   ...  LZW codes, packed contiguously. Code i (0-based) is written with
//        width w_i = smallest w >= 9 with 256 + i < 2^w, i.e. the width grows
//        once the encoder's dictionary reaches 2^w entries. The final byte is
//        zero-padded.
// The decoder stops once symbol_count symbols have been produced.

#include <cstdint>
#include <span>
#include <vector>

#include "skewsplit/tensor.h"

namespace skewsplit {

class Quantizer {
 public:
  // Centers must be strictly increasing, at least 2 and at most 256 of them.
  explicit Quantizer(std::vector<double> centers);
  // `levels` centers spread evenly over [lo, hi].
  static Quantizer Uniform(double lo, double hi, int levels);

  int levels() const;
  std::span<const double> centers() const { return centers_.tensor().data(); }
  // Minimum bits to represent an index: ceil(log2(levels)).
  int bits_per_symbol() const;

  // Nearest-center index per value; ties go to the lower index.
  std::vector<std::uint8_t> Quantize(std::span<const double> values) const;
  // Throws FormatError for an index >= levels().
  std::vector<double> Dequantize(std::span<const std::uint8_t> indices) const;

  // Differentiable relaxation used while training:
  //   out = sum_j c_j * softmax_j(-sigma * (x - c_j)^2 / gap^2)
  // where gap = (c_last - c_first) / (levels - 1) is the mean spacing between
  // adjacent centers. Gradients flow to x and to the centers.
  Tensor SoftQuantize(const Tensor& x, double sigma) const;

  // Trainable view of the centers for the optimiser.
  Tensor* mutable_center_tensor() { return centers_.mutable_tensor(); }
  // Restores the strictly-increasing invariant after a gradient step by
  // sorting and separating coincident centers.
  void Canonicalize();

 private:
  Parameter centers_;
};

// Classic LZW: the dictionary starts with all 256 single bytes and grows
// without bound.
std::vector<std::uint32_t> LzwEncode(std::span<const std::uint8_t> bytes);
// Throws FormatError on a code that cannot exist yet (other than the
// self-referencing code that is being defined, the KwKwK case).
std::vector<std::uint8_t> LzwDecode(std::span<const std::uint32_t> codes);

// Width used for the i-th code of a stream.
int LzwCodeWidth(std::size_t code_index);

struct CompressedBlock {
  std::uint16_t symbol_count = 0;
  std::uint8_t bits_per_symbol = 8;
  std::vector<std::uint8_t> bytes;  // Full serialized block incl. header.
};

// Throws FormatError if there are more than 65535 symbols.
CompressedBlock EncodeBlock(std::span<const std::uint8_t> symbols,
                            std::uint8_t bits_per_symbol);
// Parses a serialized block. Throws FormatError when truncated or malformed.
std::vector<std::uint8_t> DecodeBlock(std::span<const std::uint8_t> block);

// raw_bits / compressed_bits. Throws Error for compressed_bits == 0.
double CompressionRatio(double raw_bits, double compressed_bits);

}  // namespace skewsplit

#endif  // SKEWSPLIT_CODEC_H_
