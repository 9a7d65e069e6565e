#pragma once

// Grey-scale digit datasets: IDX byte files or CSV rows, optionally gzip
// compressed (zlib reads plain files transparently).

#include <zlib.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include "lsnn/errors.hpp"
#include "lsnn/snn_core.hpp"

namespace lsnn {

struct Dataset {
  Trace images;  // N x (rows * cols), values in [0, 1], row-major pixels
  std::vector<int> labels;
  int rows = 0;
  int cols = 0;

  int size() const { return static_cast<int>(labels.size()); }
  int pixels() const { return rows * cols; }
};

struct DatasetSource {
  std::string path;
  std::string kind = "csv";  // csv (label last) | csv_label_first | idx
  std::string labels_path;   // idx only
  double max_value = 255.0;  // raw value mapped to 1.0 (csv only)
};

namespace detail {

inline std::string read_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open dataset file: " + path);
  std::string data;
  char buf[1 << 16];
  int got = 0;
  while ((got = gzread(f, buf, sizeof buf)) > 0) data.append(buf, static_cast<std::size_t>(got));
  int err = 0;
  const char* msg = gzerror(f, &err);
  const bool failed = got < 0 || (err != Z_OK && err != Z_STREAM_END);
  const std::string what = failed ? std::string(msg) : std::string();
  gzclose(f);
  if (failed) throw IoError("error reading " + path + ": " + what);
  return data;
}

inline std::uint32_t be32(const std::string& d, std::size_t off, const std::string& path) {
  if (off + 4 > d.size()) throw IoError(path + ": truncated header at byte offset " + std::to_string(off));
  const auto b = [&](std::size_t k) { return static_cast<std::uint32_t>(static_cast<unsigned char>(d[off + k])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

inline int square_side(int pixels) {
  int side = 0;
  while ((side + 1) * (side + 1) <= pixels) ++side;
  return side * side == pixels ? side : 0;
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const std::string img = detail::read_all(images_path);
  const std::string lab = detail::read_all(labels_path);
  if (detail::be32(img, 0, images_path) != 0x00000803)
    throw IoError(images_path + ": bad IDX image magic at byte offset 0");
  if (detail::be32(lab, 0, labels_path) != 0x00000801)
    throw IoError(labels_path + ": bad IDX label magic at byte offset 0");
  const auto n = detail::be32(img, 4, images_path);
  const auto rows = detail::be32(img, 8, images_path);
  const auto cols = detail::be32(img, 12, images_path);
  const auto nl = detail::be32(lab, 4, labels_path);
  if (n != nl) throw IoError(labels_path + ": label count does not match image count (byte offset 4)");
  const std::size_t need = 16 + static_cast<std::size_t>(n) * rows * cols;
  if (img.size() < need) throw IoError(images_path + ": truncated pixel data at byte offset " + std::to_string(img.size()));
  if (lab.size() < 8 + static_cast<std::size_t>(n))
    throw IoError(labels_path + ": truncated label data at byte offset " + std::to_string(lab.size()));
  Dataset d;
  d.rows = static_cast<int>(rows);
  d.cols = static_cast<int>(cols);
  d.images.resize(n, rows * cols);
  d.labels.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t p = 0; p < rows * cols; ++p)
      d.images(k, p) = static_cast<unsigned char>(img[16 + k * rows * cols + p]) / 255.0;
    const int label = static_cast<unsigned char>(lab[8 + k]);
    if (label > 9) throw IoError(labels_path + ": label out of range at byte offset " + std::to_string(8 + k));
    d.labels[k] = label;
  }
  return d;
}

/// One image per line: pixel values and a label (last or first column).
/// A non-numeric first line is treated as a header.
inline Dataset load_csv(const std::string& path, bool label_first, double max_value = 255.0) {
  const std::string text = detail::read_all(path);
  if (text.empty()) throw IoError(path + ": empty file");
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t pos = 0;
  int line_no = 0;
  std::size_t width = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    const std::size_t line_offset = pos;
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<double> values;
    std::size_t s = 0;
    bool numeric = true;
    while (s <= line.size()) {
      std::size_t e = line.find(',', s);
      if (e == std::string::npos) e = line.size();
      const std::string field = line.substr(s, e - s);
      char* stop = nullptr;
      const double v = std::strtod(field.c_str(), &stop);
      if (field.empty() || stop == field.c_str() || *stop != '\0') {
        numeric = false;
        if (line_no == 1) break;
        throw IoError(path + ": malformed value '" + field + "' on line " + std::to_string(line_no) +
                      " (byte offset " + std::to_string(line_offset + s) + ")");
      }
      values.push_back(v);
      s = e + 1;
    }
    if (!numeric) continue;  // header
    if (values.size() < 2) throw IoError(path + ": too few columns on line " + std::to_string(line_no));
    if (width == 0) width = values.size();
    if (values.size() != width)
      throw IoError(path + ": inconsistent column count on line " + std::to_string(line_no) + " (byte offset " +
                    std::to_string(line_offset) + ")");
    const double label = label_first ? values.front() : values.back();
    if (label < 0 || label > 9 || label != std::floor(label))
      throw IoError(path + ": bad label on line " + std::to_string(line_no) + " (byte offset " +
                    std::to_string(line_offset) + ")");
    labels.push_back(static_cast<int>(label));
    if (label_first)
      values.erase(values.begin());
    else
      values.pop_back();
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw IoError(path + ": no data rows");
  Dataset d;
  const int pixels = static_cast<int>(width) - 1;
  const int side = detail::square_side(pixels);
  d.rows = side > 0 ? side : 1;
  d.cols = side > 0 ? side : pixels;
  d.images.resize(static_cast<Eigen::Index>(rows.size()), pixels);
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (int p = 0; p < pixels; ++p) d.images(k, p) = std::clamp(rows[k][p] / max_value, 0.0, 1.0);
  d.labels = std::move(labels);
  return d;
}

inline Dataset load_dataset(const DatasetSource& src) {
  if (src.kind == "idx") return load_idx(src.path, src.labels_path);
  if (src.kind == "csv") return load_csv(src.path, false, src.max_value);
  if (src.kind == "csv_label_first") return load_csv(src.path, true, src.max_value);
  throw ConfigError("unknown dataset kind '" + src.kind + "'");
}

/// Average pooling over factor x factor blocks (trailing partial blocks are dropped).
inline Dataset downsample(const Dataset& d, int factor) {
  if (factor < 1) throw ConfigError("downsample: factor must be >= 1");
  if (factor == 1) return d;
  Dataset out;
  out.rows = d.rows / factor;
  out.cols = d.cols / factor;
  out.labels = d.labels;
  out.images = Trace::Zero(d.images.rows(), out.rows * out.cols);
  const double norm = 1.0 / (factor * factor);
  for (Eigen::Index k = 0; k < d.images.rows(); ++k)
    for (int r = 0; r < out.rows; ++r)
      for (int c = 0; c < out.cols; ++c) {
        double s = 0.0;
        for (int dr = 0; dr < factor; ++dr)
          for (int dc = 0; dc < factor; ++dc) s += d.images(k, (r * factor + dr) * d.cols + c * factor + dc);
        out.images(k, r * out.cols + c) = s * norm;
      }
  return out;
}

/// Rows selected by `index`, in that order.
inline Dataset subset(const Dataset& d, const std::vector<int>& index) {
  Dataset out;
  out.rows = d.rows;
  out.cols = d.cols;
  out.images.resize(static_cast<Eigen::Index>(index.size()), d.images.cols());
  for (std::size_t k = 0; k < index.size(); ++k) {
    out.images.row(k) = d.images.row(index[k]);
    out.labels.push_back(d.labels[index[k]]);
  }
  return out;
}

}  // namespace lsnn
