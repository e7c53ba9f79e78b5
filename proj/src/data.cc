#include "skewsplit/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "skewsplit/errors.h"

namespace skewsplit {

namespace {

std::vector<std::uint8_t> ReadFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t ReadU32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

// Returns dims and the offset of the payload.
std::pair<std::vector<std::uint32_t>, std::size_t> ParseIdxHeader(
    const std::vector<std::uint8_t>& b, const std::string& path) {
  if (b.size() < 4 || b[0] != 0 || b[1] != 0) {
    throw DataError(path + ": bad IDX magic");
  }
  if (b[2] != 0x08) {
    throw DataError(path + ": IDX element type " + std::to_string(b[2]) +
                    " unsupported (expected 8 = unsigned byte)");
  }
  const int ndims = b[3];
  const std::size_t header = 4 + 4 * std::size_t(ndims);
  if (b.size() < header) {
    throw DataError(path + ": truncated IDX header, expected " +
                    std::to_string(header) + " bytes, file has " +
                    std::to_string(b.size()));
  }
  std::vector<std::uint32_t> dims(ndims);
  std::size_t payload = 1;
  for (int i = 0; i < ndims; ++i) {
    dims[i] = ReadU32(b, 4 + 4 * i);
    payload *= dims[i];
  }
  if (b.size() != header + payload) {
    throw DataError(path + ": expected " + std::to_string(header + payload) +
                    " bytes, file has " + std::to_string(b.size()));
  }
  return {dims, header};
}

void WriteU32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(bytes, 4);
}

int InferClasses(const std::vector<int>& labels, int classes) {
  if (classes > 0) return classes;
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
}

double Clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

void DrawRadial(int label, int h, int w, std::mt19937_64& rng, double* px) {
  static constexpr double kRadii[4] = {2.0, 3.5, 5.0, 6.5};
  std::uniform_real_distribution<double> jitter(-1.5, 1.5), rj(-0.3, 0.3),
      bright(0.8, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double cy = (h - 1) / 2.0 + jitter(rng);
  const double cx = (w - 1) / 2.0 + jitter(rng);
  const double r = kRadii[label] * std::min(h, w) / 16.0 + rj(rng);
  const double level = bright(rng);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double d = std::hypot(y - cy, x - cx);
      px[y * w + x] = Clamp01(level * Clamp01(r - d + 0.5) + noise(rng));
    }
  }
}

void DrawStripe(int label, int h, int w, std::mt19937_64& rng, double* px) {
  std::uniform_real_distribution<double> period(3.0, 5.0),
      phase(0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double theta = label * std::numbers::pi / 4;
  const double p = period(rng), ph = phase(rng);
  const double c = std::cos(theta), s = std::sin(theta);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double t = 2 * std::numbers::pi * (x * c + y * s) / p + ph;
      px[y * w + x] = Clamp01(0.5 + 0.5 * std::sin(t) + noise(rng));
    }
  }
}

void DrawXorGrid(int label, int h, int w, std::mt19937_64& rng, double* px) {
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> noise(0.0, 0.08);
  // Quadrants: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
  bool on[4];
  on[0] = coin(rng);
  on[3] = on[0] != (label == 1);
  on[1] = coin(rng);
  on[2] = coin(rng);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int q = (y >= h / 2 ? 2 : 0) + (x >= w / 2 ? 1 : 0);
      px[y * w + x] = Clamp01((on[q] ? 0.85 : 0.15) + noise(rng));
    }
  }
}

}  // namespace

SyntheticTask ParseTask(const std::string& name) {
  if (name == "radial") return SyntheticTask::kRadial;
  if (name == "xor-grid") return SyntheticTask::kXorGrid;
  if (name == "stripe") return SyntheticTask::kStripe;
  throw DataError("unknown synthetic task '" + name +
                  "' (expected radial, xor-grid or stripe)");
}

std::string TaskName(SyntheticTask task) {
  switch (task) {
    case SyntheticTask::kRadial: return "radial";
    case SyntheticTask::kXorGrid: return "xor-grid";
    case SyntheticTask::kStripe: return "stripe";
  }
  return "?";
}

int TaskClasses(SyntheticTask task) {
  return task == SyntheticTask::kXorGrid ? 2 : 4;
}

void Dataset::Validate() const {
  if (labels.empty()) throw DataError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != size()) {
    throw DataError("dataset images " + ShapeToString(images.shape()) +
                    " do not match " + std::to_string(size()) + " labels");
  }
  for (int i = 0; i < size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at sample " +
                      std::to_string(i) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
  }
}

std::pair<Tensor, std::vector<int>> Dataset::Batch(
    std::span<const std::size_t> indices) const {
  const std::size_t per = images.size() / size();
  std::vector<double> v;
  v.reserve(indices.size() * per);
  std::vector<int> y;
  y.reserve(indices.size());
  const std::span<const double> src = images.data();
  for (std::size_t i : indices) {
    if (i >= labels.size()) throw DataError("batch index out of range");
    v.insert(v.end(), src.begin() + i * per, src.begin() + (i + 1) * per);
    y.push_back(labels[i]);
  }
  Shape s = images.shape();
  s[0] = static_cast<int>(indices.size());
  return {Tensor::FromData(s, std::move(v)), std::move(y)};
}

Dataset Dataset::Slice(int begin, int end) const {
  if (begin < 0 || end > size() || begin >= end) {
    throw DataError("bad dataset slice [" + std::to_string(begin) + ", " +
                    std::to_string(end) + ")");
  }
  std::vector<std::size_t> idx(end - begin);
  for (int i = begin; i < end; ++i) idx[i - begin] = i;
  Dataset out;
  std::tie(out.images, out.labels) = Batch(idx);
  out.classes = classes;
  out.split = split;
  return out;
}

Dataset GenSynthetic(SyntheticTask task, int n, std::uint64_t seed, int height,
                     int width) {
  if (n < 1) throw DataError("synthetic dataset needs n > 0");
  if (height < 4 || width < 4) throw DataError("synthetic images must be >= 4x4");
  Dataset d;
  d.classes = TaskClasses(task);
  d.labels.resize(n);
  for (int i = 0; i < n; ++i) d.labels[i] = i % d.classes;
  std::mt19937_64 rng(seed);
  std::shuffle(d.labels.begin(), d.labels.end(), rng);
  std::vector<double> px(std::size_t(n) * height * width);
  for (int i = 0; i < n; ++i) {
    double* dst = &px[std::size_t(i) * height * width];
    switch (task) {
      case SyntheticTask::kRadial: DrawRadial(d.labels[i], height, width, rng, dst); break;
      case SyntheticTask::kStripe: DrawStripe(d.labels[i], height, width, rng, dst); break;
      case SyntheticTask::kXorGrid: DrawXorGrid(d.labels[i], height, width, rng, dst); break;
    }
  }
  d.images = Tensor::FromData({n, height, width, 1}, std::move(px));
  return d;
}

Dataset LoadIdx(const std::string& images_path, const std::string& labels_path,
                int classes) {
  const std::vector<std::uint8_t> ib = ReadFile(images_path);
  const auto [dims, off] = ParseIdxHeader(ib, images_path);
  if (dims.size() != 3 && dims.size() != 4) {
    throw DataError(images_path + ": image IDX needs 3 or 4 dims, has " +
                    std::to_string(dims.size()));
  }
  const std::vector<std::uint8_t> lb = ReadFile(labels_path);
  const auto [ldims, loff] = ParseIdxHeader(lb, labels_path);
  if (ldims.size() != 1) {
    throw DataError(labels_path + ": label IDX needs 1 dim, has " +
                    std::to_string(ldims.size()));
  }
  if (ldims[0] != dims[0]) {
    throw DataError("image count " + std::to_string(dims[0]) +
                    " does not match label count " + std::to_string(ldims[0]));
  }
  Dataset d;
  const int c = dims.size() == 4 ? static_cast<int>(dims[3]) : 1;
  std::vector<double> px(ib.size() - off);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = ib[off + i] / 255.0;
  d.images = Tensor::FromData({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                               static_cast<int>(dims[2]), c},
                              std::move(px));
  d.labels.assign(lb.begin() + loff, lb.end());
  d.classes = InferClasses(d.labels, classes);
  d.Validate();
  return d;
}

Dataset LoadCsv(const std::string& path, int height, int width, int channels,
                int classes, double pixel_max) {
  if (height < 1 || width < 1 || channels < 1 || !(pixel_max > 0)) {
    throw DataError("CSV image shape and pixel scale must be positive");
  }
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  const std::size_t per = std::size_t(height) * width * channels;
  std::vector<double> px;
  std::vector<int> labels;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != per + 1) {
      throw DataError(path + ": row " + std::to_string(row) + " has " +
                      std::to_string(fields.size()) + " fields, expected " +
                      std::to_string(per + 1));
    }
    for (std::size_t col = 0; col < fields.size(); ++col) {
      double v;
      try {
        std::size_t used = 0;
        v = std::stod(fields[col], &used);
        if (fields[col].find_first_not_of(" \t", used) != std::string::npos) {
          throw std::invalid_argument("trailing");
        }
      } catch (const std::exception&) {
        throw DataError(path + ": row " + std::to_string(row) + ", column " +
                        std::to_string(col + 1) + ": not a number '" +
                        fields[col] + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(path + ": row " + std::to_string(row) + ", column " +
                        std::to_string(col + 1) + ": non-finite value");
      }
      if (col == 0) {
        if (v != std::floor(v) || v < 0) {
          throw DataError(path + ": row " + std::to_string(row) +
                          ": label must be a non-negative integer");
        }
        labels.push_back(static_cast<int>(v));
      } else {
        if (v < 0 || v > pixel_max) {
          throw DataError(path + ": row " + std::to_string(row) + ", column " +
                          std::to_string(col + 1) + ": pixel outside [0, " +
                          std::to_string(pixel_max) + "]");
        }
        px.push_back(v / pixel_max);
      }
    }
  }
  if (labels.empty()) throw DataError(path + ": no samples");
  Dataset d;
  d.images = Tensor::FromData(
      {static_cast<int>(labels.size()), height, width, channels}, std::move(px));
  d.labels = std::move(labels);
  d.classes = InferClasses(d.labels, classes);
  d.Validate();
  return d;
}

void SaveIdx(const Dataset& data, const std::string& images_path,
             const std::string& labels_path) {
  data.Validate();
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("cannot write IDX files");
  const bool rgb = data.channels() != 1;
  img.put(0).put(0).put(8).put(rgb ? 4 : 3);
  WriteU32(img, data.size());
  WriteU32(img, data.height());
  WriteU32(img, data.width());
  if (rgb) WriteU32(img, data.channels());
  for (double v : data.images.data()) {
    img.put(static_cast<char>(std::lround(Clamp01(v) * 255.0)));
  }
  lab.put(0).put(0).put(8).put(1);
  WriteU32(lab, data.size());
  for (int y : data.labels) lab.put(static_cast<char>(y));
}

void SaveCsv(const Dataset& data, const std::string& path) {
  data.Validate();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  const std::size_t per = data.images.size() / data.size();
  for (int i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (std::size_t e = 0; e < per; ++e) {
      out << ',' << std::lround(Clamp01(data.images.at(i * per + e)) * 255.0);
    }
    out << '\n';
  }
}

}  // namespace skewsplit
