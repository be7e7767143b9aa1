#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rhosim/tensor.hpp"

namespace rhosim {

enum class SimLossType { mse, mse_normalized, l1, cosine };
enum class StopgradMode { literal, feature };
enum class NormAxes { token, flat };
enum class AlignPolicy { skip_mismatched, stride_align };

/// Settings of the block-level self-reconstruction regularizer: sample a
/// fraction rho of tokens per block, project both branches into a proj_dim
/// latent space, predict the stop-gradient target, sum the per-block losses
/// and weight the total by lambda.
struct SimConfig {
  double rho = 0.2;
  double lambda = 5e-3;
  int proj_dim = 64;
  int proj_hidden = 64;
  double epsilon = 1e-5;
  SimLossType loss_type = SimLossType::mse_normalized;
  StopgradMode stopgrad_mode = StopgradMode::literal;
  NormAxes norm_axes = NormAxes::token;
  AlignPolicy alignment = AlignPolicy::skip_mismatched;
  std::uint64_t sim_seed = 0;

  void validate() const;
};

/// Feature geometry of one block as exposed by a model: channel widths,
/// token-grid extents (1x1 for rank-2 features) and the spatial stride.
struct BlockShape {
  int index = 0;
  std::int64_t c_in = 0, c_out = 0;
  std::int64_t in_h = 1, in_w = 1;
  std::int64_t out_h = 1, out_w = 1;
  int stride_h = 1, stride_w = 1;

  std::int64_t n_in() const { return in_h * in_w; }
  std::int64_t n_out() const { return out_h * out_w; }
};

/// One eligible block plus the map from output token indices to the input
/// tokens they reconstruct.
struct TapPlan {
  int block_index = 0;
  std::int64_t c_in = 0, c_out = 0;
  std::int64_t n_in = 1, n_out = 1;
  bool identity_map = true;
  // stride map geometry, used when !identity_map
  std::int64_t in_w = 1, out_w = 1;
  int stride_h = 1, stride_w = 1;

  std::int64_t map_output_to_input(std::int64_t j) const {
    if (identity_map) return j;
    const std::int64_t r = j / out_w;
    const std::int64_t c = j % out_w;
    return r * stride_h * in_w + c * stride_w;
  }
};

/// Selects the blocks the regularizer attaches to. Channel changes are always
/// allowed (absorbed by the projectors); spatial changes depend on the policy:
/// skip_mismatched drops blocks with n_in != n_out, stride_align keeps integer
/// downsampling blocks via the row/col stride map. An empty result is a valid
/// configuration (the regularizer becomes a no-op); callers decide whether to
/// warn.
std::vector<TapPlan> plan_taps(const std::vector<BlockShape>& blocks,
                               const SimConfig& cfg);

/// Read-only capture of one block's (input, output) feature pair in token
/// form: B x N x C, rank-2 block features viewed as B x 1 x C.
template <class T>
struct SimTap {
  int block_index = 0;
  Tensor<T> input_tokens;
  Tensor<T> output_tokens;
};

/// n = max(1, floor(rho*N)) distinct indices drawn uniformly without
/// replacement from [0,N), returned sorted. One draw per block per forward
/// pass, shared across the batch and both branches.
std::vector<std::int64_t> sample_token_indices(std::int64_t N, double rho,
                                               RngStream& rng);

/// Deterministic count of sample_token_indices for given (N, rho).
std::int64_t sampled_token_count(std::int64_t N, double rho);

/// Three affine layers with ReLU after the first two, none after the third.
template <class T>
struct Projector {
  Parameter<T> w0, b0, w1, b1, w2, b2;
  std::int64_t in_width() const { return w0.tensor.dim(0); }
  std::int64_t out_width() const { return w2.tensor.dim(1); }
};

template <class T>
struct SimHead {
  Projector<T> h1;   // input-branch projector
  Projector<T> h2;   // output-branch projector
  Parameter<T> gw, gb;  // single affine predictor, proj_dim -> proj_dim
  int block_index = 0;
};

/// Applies the projector per token: x[B,n,C] -> [B,n,D].
template <class T>
Tensor<T> project(const Tensor<T>& tokens, const Projector<T>& proj);

/// Standardizes across the n tokens per (batch, channel) group (mode=token)
/// or across all n*D entries per batch element (mode=flat); population std
/// plus eps in the denominator. Falls back to flat when n == 1.
template <class T>
Tensor<T> normalize_tokens(const Tensor<T>& h, NormAxes mode, double eps);

enum class TargetStage { raw, processed };

/// Stop-gradient placement on the target branch: feature mode detaches the
/// raw gathered tokens before the projector (the projector trains), literal
/// mode detaches the fully processed target (the input-branch projector
/// receives no gradient from any loss).
template <class T>
Tensor<T> apply_stopgrad(const Tensor<T>& x, StopgradMode mode, TargetStage stage);

/// Predicts from the output branch and measures the distance to the target:
/// mse over all elements, mse_normalized = mse after normalize_tokens on both
/// branches, l1 = mean absolute difference, cosine = mean over tokens of
/// (1 - cosine similarity).
template <class T>
Tensor<T> block_sim_loss(const Tensor<T>& target, const Tensor<T>& pred_input,
                         const SimHead<T>& head, const SimConfig& cfg);

template <class T>
Tensor<T> combine_losses(const Tensor<T>& task, const Tensor<T>& sim, double lambda);

/// Parameters added per block: two 3-layer projectors (input widths c_in and
/// c_out) plus the predictor.
std::int64_t head_param_count(std::int64_t c_in, std::int64_t c_out,
                              const SimConfig& cfg);

struct SimBlockRecord {
  int block_index = 0;
  double loss = 0.0;
  std::vector<std::int64_t> output_indices;  // the drawn token set
  std::vector<std::int64_t> input_indices;   // aligned indices on the target branch
};

struct SimLossReport {
  std::vector<SimBlockRecord> per_block;  // ascending block index
  std::vector<std::int64_t> sampled_counts;
  double total = 0.0;
};

/// Record/replay store for the stop-gradient values, used by finite-difference
/// checks: the differentiated objective treats detached values as constants,
/// so the re-evaluations must hold them fixed too.
template <class T>
struct SimTargetCache {
  enum class Mode { record, replay };
  Mode mode = Mode::record;
  std::map<int, std::vector<T>> values;  // block_index -> detach-point data
};

/// Owns one head per planned block and evaluates the total regularizer loss.
template <class T>
class SimBank {
 public:
  SimBank() = default;
  SimBank(const SimBank&) = delete;
  SimBank& operator=(const SimBank&) = delete;
  SimBank(SimBank&&) = default;
  SimBank& operator=(SimBank&&) = default;

  /// Head weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases
  /// zero, drawn from per-block streams derived from cfg.sim_seed. In literal
  /// stop-gradient mode the input-branch projectors are frozen.
  static SimBank init(std::vector<TapPlan> plans, const SimConfig& cfg);

  const SimConfig& config() const { return cfg_; }
  const std::vector<TapPlan>& plans() const { return plans_; }
  std::vector<SimHead<T>>& heads() { return heads_; }

  std::vector<Parameter<T>*> parameters();
  std::int64_t param_count() const;

  struct LossResult {
    Tensor<T> total;  // scalar, on the tape
    SimLossReport report;
  };

  /// Per block (ascending): sample once with the (sim_seed, block, step)
  /// substream, gather both branches with the shared index set, project,
  /// normalize, predict, accumulate. Total is the sum over blocks.
  LossResult loss(const std::vector<SimTap<T>>& taps, std::uint64_t step,
                  SimTargetCache<T>* cache = nullptr);

 private:
  SimConfig cfg_;
  std::vector<TapPlan> plans_;
  std::vector<SimHead<T>> heads_;
};

}  // namespace rhosim
