#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "rhosim/config.hpp"
#include "rhosim/data.hpp"
#include "rhosim/metrics.hpp"
#include "rhosim/models.hpp"
#include "rhosim/sim.hpp"

namespace rhosim {

// ---- optimizer -----------------------------------------------------------------

template <class T>
struct SgdState {
  std::map<std::string, std::vector<double>> velocity;  // keyed by parameter name
};

/// Raw tape gradients in the order of `params`, with weight decay coupled in:
/// g_eff = g + weight_decay * theta. Frozen parameters contribute nothing and
/// get an empty slot.
template <class T>
std::vector<std::vector<double>> effective_gradients(
    const std::vector<Parameter<T>*>& params, double weight_decay);

/// Euclidean norm over the concatenation of all gradient slots, summed in
/// slot order.
double grad_global_norm(const std::vector<std::vector<double>>& grads);

/// v <- momentum*v + g + weight_decay*theta; theta <- theta - lr*v.
/// `params` must already be in name order; frozen parameters are skipped.
template <class T>
void sgd_step(const std::vector<Parameter<T>*>& params, const OptimConfig& cfg,
              double lr, SgdState<T>& state);

/// beta*prev + (1-beta)*value.
double ema_update(double prev, double value, double beta);

/// EMA stream where the first observation initializes the average.
class EmaTracker {
 public:
  explicit EmaTracker(double beta) : beta_(beta) {}
  double update(double value) {
    value_ = seen_ ? ema_update(value_, value, beta_) : value;
    seen_ = true;
    return value_;
  }
  double value() const { return value_; }
  bool seen() const { return seen_; }

 private:
  double beta_;
  double value_ = 0.0;
  bool seen_ = false;
};

// ---- digests / param io -----------------------------------------------------------

/// FNV-1a over (name, shape, raw data) of every parameter in name order.
template <class T>
std::uint64_t params_digest(const std::vector<Parameter<T>*>& params);

template <class T>
void save_params(const std::vector<Parameter<T>*>& params, const std::string& path);

/// Restores tensors by name; shape or name mismatches are format errors.
template <class T>
void load_params(const std::vector<Parameter<T>*>& params, const std::string& path);

template <class T>
std::vector<Parameter<T>*> sorted_by_name(std::vector<Parameter<T>*> params);

// ---- runs ----------------------------------------------------------------------

struct RunArtifacts {
  std::vector<MetricsRow> metrics;
  std::vector<PerBlockRow> per_block_sim;  // filled when per_block_trace is set
  std::uint64_t final_params_digest = 0;
  std::vector<std::uint64_t> base_epoch_digests;  // base-group digest per epoch
  double final_test_accuracy = 0.0;
  double mean_sim_loss = 0.0;
  std::int64_t steps = 0;
};

/// One deterministic training run. Seeds {init, data, sim} are independent
/// streams derived from cfg.master_seed; the sim stream is consumed only when
/// the regularizer is active, so disabling it leaves the base trajectory
/// untouched. When cfg.output.dir is set, writes config_resolved.txt,
/// metrics.csv, params.bin, digest.txt (and per_block_sim.csv if requested).
template <class T>
RunArtifacts train(const TrainConfig& cfg);

/// Dispatches on cfg.precision ("f32" -> float, "f64" -> double).
RunArtifacts run_training(const TrainConfig& cfg);

/// (train, test) datasets as the harness builds them: generated from the data
/// stream, loaded from CSV, or loaded from IDX; generator output is reshaped
/// to the conv input grid for resnet models.
template <class T>
std::pair<Dataset<T>, Dataset<T>> build_datasets(const TrainConfig& cfg);

/// Task loss and argmax accuracy on a dataset; records no gradients and
/// mutates nothing. Ties resolve to the lowest class index.
template <class T>
std::pair<double, double> evaluate(const Model<T>& model, const Dataset<T>& data);

// ---- ablation sweeps --------------------------------------------------------------

struct AblateResult {
  std::vector<AblationRow> rows;    // one per (rho, lambda, seed), grid order
  std::vector<AblationCell> cells;  // per (rho, lambda), completed runs only
};

/// Cross-product of (rho_grid x lambda_grid x seeds). rho = 0 rows run with
/// the regularizer disabled. Runs execute on up to `jobs` threads; failures
/// are recorded as error rows and the sweep continues. When out_dir is set,
/// each run writes its own subdirectory plus ablation_summary.csv and
/// ablation_cells.csv at the top.
AblateResult ablate(const TrainConfig& base, const std::vector<double>& rho_grid,
                    const std::vector<double>& lambda_grid,
                    const std::vector<std::uint64_t>& seeds, int jobs,
                    const std::string& out_dir);

// ---- feature reports ----------------------------------------------------------------

struct Pca2Result {
  Tensor<double> projection;  // [M,2]
  double eigenvalues[2] = {0, 0};
  bool degenerate = false;  // zero-variance input, projection all zero
};

/// Top-2 principal components by power iteration with deflation (tolerance
/// 1e-9, at most 1000 iterations); input is centered first and each component
/// sign is fixed so its largest-magnitude loading is positive.
Pca2Result pca2(const Tensor<double>& features);

}  // namespace rhosim
