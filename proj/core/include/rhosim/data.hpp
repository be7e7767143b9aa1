#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rhosim/tensor.hpp"

namespace rhosim {

/// In-memory labeled dataset. Immutable after construction; all generators
/// and loaders are pure functions of (arguments, seed/bytes).
template <class T>
struct Dataset {
  Tensor<T> features;  // [num_samples, ...feature shape]
  std::vector<std::int64_t> labels;
  std::int64_t class_count = 0;
  std::string provenance;

  std::int64_t size() const {
    return features.defined() && features.rank() > 0 ? features.dim(0) : 0;
  }
};

/// Gaussian blobs around class means placed on a fixed simplex of radius 3;
/// balanced classes (counts differ by at most 1), label of sample j is
/// j % classes.
template <class T>
Dataset<T> gen_blobs(std::int64_t n, int classes, int dim, double noise_std,
                     std::uint64_t seed);

/// Each label independently replaced by a uniformly chosen different class
/// with probability flip_rate.
template <class T>
Dataset<T> gen_noisy_labels(const Dataset<T>& d, double flip_rate, std::uint64_t seed);

/// IDX binary pair (big-endian): images magic 2051 with count/rows/cols
/// fields, labels magic 2049 with a count field, then unsigned bytes. Pixels
/// are scaled to [0,1]; image features come out as [n,1,rows,cols].
template <class T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path);

/// Writes the exact inverse of load_idx (pixels rounded back to bytes).
template <class T>
void save_idx(const Dataset<T>& d, const std::string& images_path,
              const std::string& labels_path);

/// CSV with a header row, comma separator, '.' decimal point. label_column
/// names the integer label column; every other column is a feature. Rejects
/// non-finite values; when expected_classes > 0, labels must stay below it.
template <class T>
Dataset<T> load_csv(const std::string& path, const std::string& label_column,
                    std::int64_t expected_classes = -1);

template <class T>
void save_csv(const Dataset<T>& d, const std::string& path);

struct BatchPlan {
  std::int64_t batch_size = 64;
  std::uint64_t shuffle_seed = 0;
  bool drop_last = false;
};

/// Row indices per batch: a permutation keyed by (shuffle_seed, epoch), cut
/// into batch_size chunks; drop_last controls the ragged tail.
std::vector<std::vector<std::int64_t>> batches(std::int64_t num_samples,
                                               const BatchPlan& plan,
                                               std::int64_t epoch);

template <class T>
std::pair<Tensor<T>, std::vector<std::int64_t>> gather_batch(
    const Dataset<T>& d, std::span<const std::int64_t> rows);

}  // namespace rhosim
