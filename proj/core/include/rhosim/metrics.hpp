#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rhosim/errors.hpp"

namespace rhosim {

/// One emitted metrics record. On train rows total_loss accounts exactly for
/// task_loss + lambda * sim_loss; sim_loss is exactly 0 when the regularizer
/// is off.
struct MetricsRow {
  std::int64_t step = 0;
  int epoch = 0;
  std::string split;  // "train" | "test"
  double task_loss = 0;
  double sim_loss = 0;
  double total_loss = 0;
  double accuracy = 0;
  double grad_norm = 0;
  double grad_norm_ema = 0;
  double lr = 0;
  std::uint64_t seed = 0;
};

struct PerBlockRow {
  std::int64_t step = 0;
  int block_index = 0;
  double loss = 0;
};

struct AblationRow {
  double rho = 0;
  double lambda = 0;
  std::uint64_t seed = 0;
  double final_test_acc = 0;
  double mean_sim_loss = 0;
  std::string status = "ok";  // "ok" or "error[<code>]"
};

struct AblationCell {
  double rho = 0;
  double lambda = 0;
  int runs = 0;  // completed runs in the cell
  double acc_mean = 0, acc_std = 0;      // population stddev across seeds
  double sim_mean = 0, sim_std = 0;
};

/// Reals serialized with 9 significant digits ("%#.9g"), '.' decimal point.
std::string format_real(double v);

extern const char kMetricsHeader[];    // step,epoch,split,...
extern const char kAblationHeader[];   // rho,lambda,seed,...
extern const char kCellsHeader[];      // per-cell mean/stddev summary
extern const char kPerBlockHeader[];
extern const char kTraceHeader[];      // step,grad_norm,grad_norm_ema

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& out);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path);
std::vector<MetricsRow> read_metrics_csv(const std::string& path);

void write_per_block_csv(const std::vector<PerBlockRow>& rows, const std::string& path);

void write_ablation_summary(const std::vector<AblationRow>& rows,
                            const std::string& path);
std::vector<AblationRow> read_ablation_summary(const std::string& path);
void write_ablation_cells(const std::vector<AblationCell>& cells,
                          const std::string& path);

}  // namespace rhosim
