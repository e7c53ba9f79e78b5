#ifndef SKEWSPLIT_DATA_H_
#define SKEWSPLIT_DATA_H_

// Datasets: synthetic toy tasks plus IDX and CSV loaders. Images are stored
// NHWC with values in [0, 1].

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "skewsplit/tensor.h"

namespace skewsplit {

enum class SyntheticTask { kRadial, kXorGrid, kStripe };

// "radial", "xor-grid", "stripe". Throws DataError for anything else.
SyntheticTask ParseTask(const std::string& name);
std::string TaskName(SyntheticTask task);
// 4 for radial and stripe, 2 for xor-grid.
int TaskClasses(SyntheticTask task);

struct Dataset {
  Tensor images;            // [N, H, W, Cin]
  std::vector<int> labels;  // N entries in [0, classes)
  int classes = 0;
  std::string split = "train";

  int size() const { return static_cast<int>(labels.size()); }
  int height() const { return images.dim(1); }
  int width() const { return images.dim(2); }
  int channels() const { return images.dim(3); }
  // Throws DataError when the invariants do not hold.
  void Validate() const;
  // Rows `indices` as a new image tensor plus their labels.
  std::pair<Tensor, std::vector<int>> Batch(
      std::span<const std::size_t> indices) const;
  // Rows [begin, end).
  Dataset Slice(int begin, int end) const;
};

// Deterministic in (task, n, seed). Labels are assigned round-robin and then
// shuffled, so class counts differ by at most one. Throws DataError for n < 1.
Dataset GenSynthetic(SyntheticTask task, int n, std::uint64_t seed,
                     int height = 16, int width = 16);

// IDX pair: an unsigned-byte image file with 3 (N,H,W) or 4 (N,H,W,C) dims and
// a 1-dim unsigned-byte label file. Pixels are divided by 255. `classes`
// defaults to max label + 1.
Dataset LoadIdx(const std::string& images_path, const std::string& labels_path,
                int classes = 0);
// Headerless CSV, one sample per row: label, then H*W*C pixel values in
// [0, pixel_max]. Blank lines are skipped.
Dataset LoadCsv(const std::string& path, int height, int width, int channels,
                int classes = 0, double pixel_max = 255.0);

// Writers, mainly for tests and for exporting synthetic data.
void SaveIdx(const Dataset& data, const std::string& images_path,
             const std::string& labels_path);
void SaveCsv(const Dataset& data, const std::string& path);

}  // namespace skewsplit

#endif  // SKEWSPLIT_DATA_H_
