#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rhosim/sim.hpp"
#include "rhosim/tensor.hpp"

namespace rhosim {

enum class BlockKind { linear_block, residual_conv_block };

/// Construction-time description of one block.
struct BlockSpec {
  BlockKind kind = BlockKind::linear_block;
  std::int64_t in_width = 0, out_width = 0;        // linear_block
  std::int64_t in_channels = 0, out_channels = 0;  // residual_conv_block
  int stride = 1;
};

namespace detail {

template <class T>
struct MlpBlock {
  Parameter<T> w, b;
};

template <class T>
struct ConvBlock {
  Parameter<T> k1, b1, k2, b2;  // 3x3 convs, ReLU between, ReLU after the add
  bool has_proj_shortcut = false;
  Parameter<T> ks, bs;  // 1x1 strided shortcut when shape changes
  int stride = 1;
};

}  // namespace detail

/// A small feed-forward model built from an ordered block list, a classifier
/// head, and optional read-only feature taps. Forward order equals block
/// order; blocks are immutable between optimizer steps.
template <class T>
class Model {
 public:
  Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  Tensor<T> forward(const Tensor<T>& x) const;

  /// Identical logits to forward(); additionally captures each requested
  /// block's (input, output) feature pair as B x N x C token views.
  std::pair<Tensor<T>, std::vector<SimTap<T>>> forward_with_taps(
      const Tensor<T>& x) const;

  std::vector<Parameter<T>*> parameters();
  std::int64_t param_count() const;

  const std::vector<BlockShape>& block_shapes() const { return block_shapes_; }
  const std::vector<BlockSpec>& block_specs() const { return block_specs_; }
  int classes() const { return classes_; }

  bool taps_enabled() const { return taps_enabled_; }
  void set_taps_enabled(bool b) { taps_enabled_ = b; }
  /// Blocks that emit taps when enabled (ascending indices).
  void set_tap_blocks(std::vector<int> blocks);

  // Expected input shape (without the batch axis).
  const std::vector<std::int64_t>& input_shape() const { return input_shape_; }

  template <class U>
  friend Model<U> build_mlp(const std::vector<std::int64_t>&, int, std::uint64_t);
  template <class U>
  friend Model<U> build_small_resnet(const std::vector<std::int64_t>&, int, int,
                                     std::int64_t, std::int64_t, std::uint64_t);

 private:
  bool is_mlp_ = true;
  int classes_ = 0;
  std::vector<std::int64_t> input_shape_;
  std::vector<BlockSpec> block_specs_;
  std::vector<BlockShape> block_shapes_;
  std::vector<detail::MlpBlock<T>> mlp_blocks_;
  std::vector<detail::ConvBlock<T>> conv_blocks_;
  Parameter<T> stem_k_, stem_b_;  // resnet stem
  Parameter<T> head_w_, head_b_;  // classifier
  bool taps_enabled_ = false;
  std::vector<int> tap_blocks_;

  Tensor<T> run(const Tensor<T>& x, std::vector<SimTap<T>>* taps) const;
};

/// Consecutive affine+ReLU blocks over the given widths plus a classifier,
/// deterministically initialized from the seed.
template <class T>
Model<T> build_mlp(const std::vector<std::int64_t>& widths, int classes,
                   std::uint64_t seed);

/// Stem conv, stages of residual blocks (stride 2 at each stage entry after
/// the first), global average pooling, classifier.
template <class T>
Model<T> build_small_resnet(const std::vector<std::int64_t>& stage_channels,
                            int blocks_per_stage, int classes,
                            std::int64_t in_channels, std::int64_t image_size,
                            std::uint64_t seed);

}  // namespace rhosim
