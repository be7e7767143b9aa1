#include "rhosim/models.hpp"

#include <algorithm>
#include <cmath>

namespace rhosim {

namespace {

template <class T>
Parameter<T> init_weight(typename Tensor<T>::Shape shape, std::int64_t fan_in,
                         const std::string& name, RngStream& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Parameter<T> p{random_uniform<T>(std::move(shape), -bound, bound, rng), name,
                 ParamGroup::base, false};
  p.tensor.set_requires_grad(true);
  return p;
}

template <class T>
Parameter<T> init_bias(std::int64_t width, const std::string& name) {
  Parameter<T> p{Tensor<T>::zeros({width}), name, ParamGroup::base, false};
  p.tensor.set_requires_grad(true);
  return p;
}

// x[B,C,H,W] + b[C]
template <class T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  return add(x, reshape(b, {1, b.dim(0), 1, 1}));
}

std::int64_t conv_out_extent(std::int64_t in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

}  // namespace

// ---- builders ---------------------------------------------------------------

template <class T>
Model<T> build_mlp(const std::vector<std::int64_t>& widths, int classes,
                   std::uint64_t seed) {
  if (widths.size() < 2)
    throw ConfigError("build_mlp: need at least two widths, got " +
                      std::to_string(widths.size()));
  for (std::int64_t w : widths)
    if (w < 1) throw ConfigError("build_mlp: widths must be positive");
  if (classes < 2) throw ConfigError("build_mlp: need at least two classes");

  Model<T> m;
  m.is_mlp_ = true;
  m.classes_ = classes;
  m.input_shape_ = {widths.front()};
  RngStream rng(derive_seed(seed, "model"));
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const std::int64_t win = widths[i], wout = widths[i + 1];
    const std::string base = "model.block" + std::to_string(i);
    detail::MlpBlock<T> blk;
    blk.w = init_weight<T>({win, wout}, win, base + ".w", rng);
    blk.b = init_bias<T>(wout, base + ".b");
    m.mlp_blocks_.push_back(std::move(blk));

    BlockSpec spec;
    spec.kind = BlockKind::linear_block;
    spec.in_width = win;
    spec.out_width = wout;
    m.block_specs_.push_back(spec);

    BlockShape shape;
    shape.index = static_cast<int>(i);
    shape.c_in = win;
    shape.c_out = wout;
    m.block_shapes_.push_back(shape);
  }
  m.head_w_ = init_weight<T>({widths.back(), classes}, widths.back(), "model.head.w", rng);
  m.head_b_ = init_bias<T>(classes, "model.head.b");
  return m;
}

template <class T>
Model<T> build_small_resnet(const std::vector<std::int64_t>& stage_channels,
                            int blocks_per_stage, int classes,
                            std::int64_t in_channels, std::int64_t image_size,
                            std::uint64_t seed) {
  if (stage_channels.empty())
    throw ConfigError("build_small_resnet: stage_channels must be nonempty");
  for (std::int64_t c : stage_channels)
    if (c < 1) throw ConfigError("build_small_resnet: channels must be positive");
  if (blocks_per_stage < 1)
    throw ConfigError("build_small_resnet: blocks_per_stage must be positive");
  if (classes < 2) throw ConfigError("build_small_resnet: need at least two classes");
  if (in_channels < 1 || image_size < 1)
    throw ConfigError("build_small_resnet: bad input spec");

  Model<T> m;
  m.is_mlp_ = false;
  m.classes_ = classes;
  m.input_shape_ = {in_channels, image_size, image_size};
  RngStream rng(derive_seed(seed, "model"));

  m.stem_k_ = init_weight<T>({stage_channels[0], in_channels, 3, 3}, in_channels * 9,
                             "model.stem.k", rng);
  m.stem_b_ = init_bias<T>(stage_channels[0], "model.stem.b");

  std::int64_t ch = stage_channels[0];
  std::int64_t hw = conv_out_extent(image_size, 3, 1, 1);  // stem keeps extent
  int index = 0;
  for (std::size_t s = 0; s < stage_channels.size(); ++s) {
    for (int b = 0; b < blocks_per_stage; ++b) {
      const bool entry = (b == 0 && s > 0);
      const int stride = entry ? 2 : 1;
      const std::int64_t cin = ch;
      const std::int64_t cout = stage_channels[s];
      const std::string base = "model.block" + std::to_string(index);

      detail::ConvBlock<T> blk;
      blk.stride = stride;
      blk.k1 = init_weight<T>({cout, cin, 3, 3}, cin * 9, base + ".c1.k", rng);
      blk.b1 = init_bias<T>(cout, base + ".c1.b");
      blk.k2 = init_weight<T>({cout, cout, 3, 3}, cout * 9, base + ".c2.k", rng);
      blk.b2 = init_bias<T>(cout, base + ".c2.b");
      blk.has_proj_shortcut = (cin != cout) || (stride != 1);
      if (blk.has_proj_shortcut) {
        blk.ks = init_weight<T>({cout, cin, 1, 1}, cin, base + ".sc.k", rng);
        blk.bs = init_bias<T>(cout, base + ".sc.b");
      }
      m.conv_blocks_.push_back(std::move(blk));

      BlockSpec spec;
      spec.kind = BlockKind::residual_conv_block;
      spec.in_channels = cin;
      spec.out_channels = cout;
      spec.stride = stride;
      m.block_specs_.push_back(spec);

      BlockShape shape;
      shape.index = index;
      shape.c_in = cin;
      shape.c_out = cout;
      shape.in_h = shape.in_w = hw;
      const std::int64_t out_hw = conv_out_extent(hw, 3, stride, 1);
      shape.out_h = shape.out_w = out_hw;
      shape.stride_h = shape.stride_w = stride;
      m.block_shapes_.push_back(shape);

      ch = cout;
      hw = out_hw;
      ++index;
    }
  }
  m.head_w_ = init_weight<T>({ch, classes}, ch, "model.head.w", rng);
  m.head_b_ = init_bias<T>(classes, "model.head.b");
  return m;
}

// ---- forward ------------------------------------------------------------------

template <class T>
void Model<T>::set_tap_blocks(std::vector<int> blocks) {
  std::sort(blocks.begin(), blocks.end());
  tap_blocks_ = std::move(blocks);
}

template <class T>
Tensor<T> Model<T>::run(const Tensor<T>& x, std::vector<SimTap<T>>* taps) const {
  auto want_tap = [&](int index) {
    return taps != nullptr && taps_enabled_ &&
           std::binary_search(tap_blocks_.begin(), tap_blocks_.end(), index);
  };
  auto emit = [&](int index, const Tensor<T>& in, const Tensor<T>& out) {
    SimTap<T> tap;
    tap.block_index = index;
    tap.input_tokens = in.rank() == 4 ? bchw_to_tokens(in)
                                      : reshape(in, {in.dim(0), 1, in.dim(1)});
    tap.output_tokens = out.rank() == 4 ? bchw_to_tokens(out)
                                        : reshape(out, {out.dim(0), 1, out.dim(1)});
    taps->push_back(std::move(tap));
  };

  if (is_mlp_) {
    if (x.rank() != 2 || x.dim(1) != input_shape_[0])
      throw DimensionError("model: expected input [B," +
                           std::to_string(input_shape_[0]) + "], got " +
                           detail::shape_str(x.shape()));
    Tensor<T> h = x;
    for (std::size_t i = 0; i < mlp_blocks_.size(); ++i) {
      Tensor<T> out = relu(linear(h, mlp_blocks_[i].w.tensor, mlp_blocks_[i].b.tensor));
      if (want_tap(static_cast<int>(i))) emit(static_cast<int>(i), h, out);
      h = out;
    }
    return linear(h, head_w_.tensor, head_b_.tensor);
  }

  if (x.rank() != 4 || x.dim(1) != input_shape_[0] || x.dim(2) != input_shape_[1] ||
      x.dim(3) != input_shape_[2])
    throw DimensionError("model: expected input [B," + std::to_string(input_shape_[0]) +
                         "," + std::to_string(input_shape_[1]) + "," +
                         std::to_string(input_shape_[2]) + "], got " +
                         detail::shape_str(x.shape()));
  Tensor<T> h = relu(add_channel_bias(conv2d(x, stem_k_.tensor, 1, 1), stem_b_.tensor));
  for (std::size_t i = 0; i < conv_blocks_.size(); ++i) {
    const detail::ConvBlock<T>& blk = conv_blocks_[i];
    Tensor<T> y = relu(add_channel_bias(conv2d(h, blk.k1.tensor, blk.stride, 1),
                                        blk.b1.tensor));
    y = add_channel_bias(conv2d(y, blk.k2.tensor, 1, 1), blk.b2.tensor);
    Tensor<T> shortcut =
        blk.has_proj_shortcut
            ? add_channel_bias(conv2d(h, blk.ks.tensor, blk.stride, 0), blk.bs.tensor)
            : h;
    Tensor<T> out = relu(add(y, shortcut));
    if (want_tap(static_cast<int>(i))) emit(static_cast<int>(i), h, out);
    h = out;
  }
  Tensor<T> pooled = reduce_mean(h, {2, 3}, false);  // global average pool
  return linear(pooled, head_w_.tensor, head_b_.tensor);
}

template <class T>
Tensor<T> Model<T>::forward(const Tensor<T>& x) const {
  return run(x, nullptr);
}

template <class T>
std::pair<Tensor<T>, std::vector<SimTap<T>>> Model<T>::forward_with_taps(
    const Tensor<T>& x) const {
  std::vector<SimTap<T>> taps;
  Tensor<T> logits = run(x, &taps);
  return {std::move(logits), std::move(taps)};
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() {
  std::vector<Parameter<T>*> out;
  if (!is_mlp_) {
    out.push_back(&stem_k_);
    out.push_back(&stem_b_);
  }
  for (auto& blk : mlp_blocks_) {
    out.push_back(&blk.w);
    out.push_back(&blk.b);
  }
  for (auto& blk : conv_blocks_) {
    out.push_back(&blk.k1);
    out.push_back(&blk.b1);
    out.push_back(&blk.k2);
    out.push_back(&blk.b2);
    if (blk.has_proj_shortcut) {
      out.push_back(&blk.ks);
      out.push_back(&blk.bs);
    }
  }
  out.push_back(&head_w_);
  out.push_back(&head_b_);
  return out;
}

template <class T>
std::int64_t Model<T>::param_count() const {
  std::int64_t n = 0;
  auto* self = const_cast<Model<T>*>(this);
  for (Parameter<T>* p : self->parameters()) n += p->tensor.numel();
  return n;
}

// ---- explicit instantiations -----------------------------------------------------

#define RHOSIM_INSTANTIATE_MODELS(T)                                              \
  template class Model<T>;                                                        \
  template Model<T> build_mlp<T>(const std::vector<std::int64_t>&, int,           \
                                 std::uint64_t);                                  \
  template Model<T> build_small_resnet<T>(const std::vector<std::int64_t>&, int,  \
                                          int, std::int64_t, std::int64_t,        \
                                          std::uint64_t);

RHOSIM_INSTANTIATE_MODELS(float)
RHOSIM_INSTANTIATE_MODELS(double)

#undef RHOSIM_INSTANTIATE_MODELS

}  // namespace rhosim
