#include "rhosim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rhosim {

// ---- generators ---------------------------------------------------------------

namespace {

// Vertices of a regular simplex in R^classes (e_i minus the centroid), scaled
// to norm `radius` and laid into the first min(classes, dim) coordinates.
std::vector<std::vector<double>> simplex_means(int classes, int dim, double radius) {
  std::vector<std::vector<double>> means(static_cast<std::size_t>(classes));
  for (int i = 0; i < classes; ++i) {
    std::vector<double> v(static_cast<std::size_t>(classes), -1.0 / classes);
    v[static_cast<std::size_t>(i)] += 1.0;
    v.resize(static_cast<std::size_t>(dim), 0.0);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v) x *= radius / norm;
    means[static_cast<std::size_t>(i)] = std::move(v);
  }
  return means;
}

}  // namespace

template <class T>
Dataset<T> gen_blobs(std::int64_t n, int classes, int dim, double noise_std,
                     std::uint64_t seed) {
  if (classes < 1) throw ValueError("gen_blobs: classes must be positive");
  if (dim < 1) throw ValueError("gen_blobs: dim must be positive");
  if (n < classes)
    throw ValueError("gen_blobs: need n >= classes, got n=" + std::to_string(n));
  if (noise_std < 0.0) throw ValueError("gen_blobs: noise_std must be non-negative");

  const auto means = simplex_means(classes, dim, 3.0);
  RngStream rng(seed);
  Dataset<T> d;
  d.class_count = classes;
  d.labels.resize(static_cast<std::size_t>(n));
  std::vector<T> feat(static_cast<std::size_t>(n * dim));
  for (std::int64_t j = 0; j < n; ++j) {
    const int label = static_cast<int>(j % classes);
    d.labels[static_cast<std::size_t>(j)] = label;
    const auto& m = means[static_cast<std::size_t>(label)];
    for (int k = 0; k < dim; ++k)
      feat[static_cast<std::size_t>(j * dim + k)] =
          static_cast<T>(m[static_cast<std::size_t>(k)] + noise_std * rng.normal());
  }
  d.features = Tensor<T>::from_data({n, dim}, std::move(feat));
  std::ostringstream prov;
  prov << "blobs(n=" << n << ",classes=" << classes << ",dim=" << dim
       << ",noise_std=" << noise_std << ",seed=" << seed << ")";
  d.provenance = prov.str();
  return d;
}

template <class T>
Dataset<T> gen_noisy_labels(const Dataset<T>& d, double flip_rate, std::uint64_t seed) {
  if (!(flip_rate >= 0.0 && flip_rate < 1.0))
    throw ValueError("gen_noisy_labels: flip_rate must lie in [0,1)");
  Dataset<T> out;
  out.features = d.features;
  out.labels = d.labels;
  out.class_count = d.class_count;
  RngStream rng(seed);
  if (d.class_count > 1) {
    for (std::int64_t& label : out.labels) {
      const double u = rng.uniform01();
      if (u < flip_rate) {
        // uniform over the other classes
        std::int64_t k = static_cast<std::int64_t>(
            rng.uniform_int(static_cast<std::uint64_t>(d.class_count - 1)));
        if (k >= label) ++k;
        label = k;
      }
    }
  }
  std::ostringstream prov;
  prov << d.provenance << "+flip(rate=" << flip_rate << ",seed=" << seed << ")";
  out.provenance = prov.str();
  return out;
}

// ---- IDX ------------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path,
                        std::int64_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in)
    throw FormatError(path + ": truncated header at byte offset " +
                      std::to_string(offset));
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

template <class T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path);
  const std::uint32_t magic = read_be32(img, images_path, 0);
  if (magic != 2051)
    throw FormatError(images_path + ": bad image magic " + std::to_string(magic) +
                      " at byte offset 0, expected 2051");
  const std::int64_t count = read_be32(img, images_path, 4);
  const std::int64_t rows = read_be32(img, images_path, 8);
  const std::int64_t cols = read_be32(img, images_path, 12);
  const std::int64_t pixels = count * rows * cols;
  std::vector<unsigned char> raw(static_cast<std::size_t>(pixels));
  img.read(reinterpret_cast<char*>(raw.data()), pixels);
  if (img.gcount() != pixels)
    throw FormatError(images_path + ": truncated pixel data at byte offset " +
                      std::to_string(16 + img.gcount()));

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open " + labels_path);
  const std::uint32_t lmagic = read_be32(lab, labels_path, 0);
  if (lmagic != 2049)
    throw FormatError(labels_path + ": bad label magic " + std::to_string(lmagic) +
                      " at byte offset 0, expected 2049");
  const std::int64_t lcount = read_be32(lab, labels_path, 4);
  if (lcount != count)
    throw FormatError(labels_path + ": label count " + std::to_string(lcount) +
                      " does not match image count " + std::to_string(count));
  std::vector<unsigned char> lraw(static_cast<std::size_t>(lcount));
  lab.read(reinterpret_cast<char*>(lraw.data()), lcount);
  if (lab.gcount() != lcount)
    throw FormatError(labels_path + ": truncated label data at byte offset " +
                      std::to_string(8 + lab.gcount()));

  Dataset<T> d;
  std::vector<T> feat(static_cast<std::size_t>(pixels));
  for (std::int64_t i = 0; i < pixels; ++i)
    feat[static_cast<std::size_t>(i)] =
        static_cast<T>(raw[static_cast<std::size_t>(i)]) / T(255);
  d.features = Tensor<T>::from_data({count, 1, rows, cols}, std::move(feat));
  d.labels.assign(lraw.begin(), lraw.end());
  std::int64_t maxl = 0;
  for (std::int64_t l : d.labels) maxl = std::max(maxl, l);
  d.class_count = maxl + 1;
  d.provenance = "idx(" + images_path + "," + labels_path + ")";
  return d;
}

template <class T>
void save_idx(const Dataset<T>& d, const std::string& images_path,
              const std::string& labels_path) {
  if (d.features.rank() != 4 || d.features.dim(1) != 1)
    throw ContractError("save_idx: features must be [n,1,rows,cols], got " +
                        detail::shape_str(d.features.shape()));
  const std::int64_t n = d.features.dim(0);
  const std::int64_t rows = d.features.dim(2);
  const std::int64_t cols = d.features.dim(3);
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path + " for writing");
  write_be32(img, 2051);
  write_be32(img, static_cast<std::uint32_t>(n));
  write_be32(img, static_cast<std::uint32_t>(rows));
  write_be32(img, static_cast<std::uint32_t>(cols));
  for (T v : d.features.data()) {
    double scaled = std::lround(static_cast<double>(v) * 255.0);
    scaled = std::min(255.0, std::max(0.0, scaled));
    const unsigned char b = static_cast<unsigned char>(scaled);
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open " + labels_path + " for writing");
  write_be32(lab, 2049);
  write_be32(lab, static_cast<std::uint32_t>(n));
  for (std::int64_t l : d.labels) {
    if (l < 0 || l > 255) throw ContractError("save_idx: label out of byte range");
    const unsigned char b = static_cast<unsigned char>(l);
    lab.write(reinterpret_cast<const char*>(&b), 1);
  }
}

// ---- CSV ------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

double parse_cell(const std::string& cell, std::int64_t row, std::size_t col) {
  const char* s = cell.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0')
    throw FormatError("csv: non-numeric cell at row " + std::to_string(row) +
                      " column " + std::to_string(col + 1) + ": '" + cell + "'");
  if (!std::isfinite(v))
    throw FormatError("csv: non-finite value at row " + std::to_string(row) +
                      " column " + std::to_string(col + 1));
  return v;
}

}  // namespace

template <class T>
Dataset<T> load_csv(const std::string& path, const std::string& label_column,
                    std::int64_t expected_classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string header;
  if (!std::getline(in, header) || header.empty())
    throw FormatError(path + ": empty file, expected a header row");
  const std::vector<std::string> cols = split_csv_line(header);
  std::size_t label_idx = cols.size();
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (cols[i] == label_column) label_idx = i;
  if (label_idx == cols.size())
    throw FormatError(path + ": missing label column '" + label_column + "'");
  const std::int64_t dim = static_cast<std::int64_t>(cols.size()) - 1;
  if (dim < 1) throw FormatError(path + ": no feature columns");

  std::vector<T> feat;
  std::vector<std::int64_t> labels;
  std::string line;
  std::int64_t row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != cols.size())
      throw FormatError(path + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(cols.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = parse_cell(cells[c], row, c);
      if (c == label_idx) {
        if (v != std::floor(v) || v < 0)
          throw FormatError(path + ": row " + std::to_string(row) +
                            ": label must be a non-negative integer, got '" +
                            cells[c] + "'");
        labels.push_back(static_cast<std::int64_t>(v));
      } else {
        feat.push_back(static_cast<T>(v));
      }
    }
  }
  const std::int64_t n = static_cast<std::int64_t>(labels.size());
  if (n == 0) throw FormatError(path + ": no data rows");

  Dataset<T> d;
  d.features = Tensor<T>::from_data({n, dim}, std::move(feat));
  d.labels = std::move(labels);
  std::int64_t maxl = 0;
  for (std::int64_t l : d.labels) maxl = std::max(maxl, l);
  if (expected_classes > 0) {
    if (maxl >= expected_classes)
      throw ValueError(path + ": label " + std::to_string(maxl) +
                       " outside the declared " + std::to_string(expected_classes) +
                       " classes");
    d.class_count = expected_classes;
  } else {
    d.class_count = maxl + 1;
  }
  d.provenance = "csv(" + path + ")";
  return d;
}

template <class T>
void save_csv(const Dataset<T>& d, const std::string& path) {
  if (!d.features.defined() || d.features.rank() < 2)
    throw ContractError("save_csv: features must have rank >= 2");
  const std::int64_t n = d.features.dim(0);
  const std::int64_t dim = d.features.numel() / std::max<std::int64_t>(n, 1);
  std::ofstream out(path, std::ios::binary);  // binary: exact '\n' endings
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (std::int64_t k = 0; k < dim; ++k) out << "feature_" << k << ",";
  out << "label\n";
  char buf[64];
  const T* feat = d.features.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < dim; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(feat[i * dim + k]));
      out << buf << ",";
    }
    out << d.labels[static_cast<std::size_t>(i)] << "\n";
  }
}

// ---- batching -----------------------------------------------------------------------

std::vector<std::vector<std::int64_t>> batches(std::int64_t num_samples,
                                               const BatchPlan& plan,
                                               std::int64_t epoch) {
  if (plan.batch_size < 1) throw ValueError("batches: batch_size must be positive");
  std::vector<std::int64_t> perm(static_cast<std::size_t>(num_samples));
  std::iota(perm.begin(), perm.end(), std::int64_t{0});
  RngStream rng(derive_seed(plan.shuffle_seed, static_cast<std::uint64_t>(epoch)));
  for (std::int64_t i = 0; i < num_samples - 1; ++i) {
    const std::int64_t j =
        i + static_cast<std::int64_t>(
                rng.uniform_int(static_cast<std::uint64_t>(num_samples - i)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t start = 0; start < num_samples; start += plan.batch_size) {
    const std::int64_t end = std::min(num_samples, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

template <class T>
std::pair<Tensor<T>, std::vector<std::int64_t>> gather_batch(
    const Dataset<T>& d, std::span<const std::int64_t> rows) {
  const std::int64_t n = d.size();
  const std::int64_t row_elems = n > 0 ? d.features.numel() / n : 0;
  std::vector<T> feat(rows.size() * static_cast<std::size_t>(row_elems));
  std::vector<std::int64_t> labels(rows.size());
  const T* src = d.features.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::int64_t r = rows[i];
    if (r < 0 || r >= n) throw IndexError("gather_batch: row index out of range");
    std::memcpy(feat.data() + i * static_cast<std::size_t>(row_elems),
                src + r * row_elems, sizeof(T) * static_cast<std::size_t>(row_elems));
    labels[i] = d.labels[static_cast<std::size_t>(r)];
  }
  typename Tensor<T>::Shape shape = d.features.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  return {Tensor<T>::from_data(std::move(shape), std::move(feat)), std::move(labels)};
}

// ---- explicit instantiations ----------------------------------------------------------

#define RHOSIM_INSTANTIATE_DATA(T)                                                    \
  template Dataset<T> gen_blobs<T>(std::int64_t, int, int, double, std::uint64_t);    \
  template Dataset<T> gen_noisy_labels<T>(const Dataset<T>&, double, std::uint64_t);  \
  template Dataset<T> load_idx<T>(const std::string&, const std::string&);            \
  template void save_idx<T>(const Dataset<T>&, const std::string&,                    \
                            const std::string&);                                      \
  template Dataset<T> load_csv<T>(const std::string&, const std::string&,             \
                                  std::int64_t);                                      \
  template void save_csv<T>(const Dataset<T>&, const std::string&);                   \
  template std::pair<Tensor<T>, std::vector<std::int64_t>> gather_batch<T>(           \
      const Dataset<T>&, std::span<const std::int64_t>);

RHOSIM_INSTANTIATE_DATA(float)
RHOSIM_INSTANTIATE_DATA(double)

#undef RHOSIM_INSTANTIATE_DATA

}  // namespace rhosim
