#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rhosim/errors.hpp"
#include "rhosim/sim.hpp"

namespace rhosim {

enum class LrSchedule { constant, step };

struct OptimConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 30;
  std::int64_t batch_size = 64;
  LrSchedule schedule = LrSchedule::constant;
  std::vector<int> milestones;  // strictly increasing, < epochs
  double gamma = 0.1;

  double lr_at(int epoch) const {
    if (schedule == LrSchedule::constant) return lr;
    double v = lr;
    for (int m : milestones)
      if (epoch >= m) v *= gamma;
    return v;
  }
};

struct ModelConfig {
  std::string kind = "mlp";  // mlp | resnet
  std::vector<std::int64_t> widths = {2, 32, 32};
  std::vector<std::int64_t> stage_channels = {128, 256};
  int blocks_per_stage = 2;
  int classes = 2;
  std::int64_t in_channels = 1;
  std::int64_t image_size = 16;
};

struct DataConfig {
  std::string kind = "blobs";  // blobs | noisy-blobs | csv | idx
  std::int64_t n_train = 1024;
  std::int64_t n_test = 256;
  int dim = 2;
  double noise_std = 0.5;
  double flip_rate = 0.2;  // noisy-blobs train-label flip probability
  std::string train_csv, test_csv;
  std::string label_column = "label";
  std::string train_images, train_labels, test_images, test_labels;
};

struct SimSettings {
  bool enabled = true;
  double rho = 0.2;  // 0 disables the regularizer entirely
  double lambda = 5e-3;
  int proj_dim = 64;
  int proj_hidden = 64;
  double epsilon = 1e-5;
  std::string loss_type = "mse_normalized";   // mse | mse_normalized | l1 | cosine
  std::string stopgrad_mode = "literal";      // literal | feature
  std::string norm_axes = "token";            // token | flat
  std::string alignment = "skip_mismatched";  // skip_mismatched | stride_align
  bool update_heads = true;  // include head parameters in the optimizer

  bool active() const { return enabled && rho > 0.0; }
};

struct OutputConfig {
  std::string dir;
  bool per_block_trace = false;
  double ema_beta = 0.98;
};

struct TrainConfig {
  ModelConfig model;
  DataConfig data;
  OptimConfig optim;
  SimSettings sim;
  std::uint64_t master_seed = 42;
  OutputConfig output;
  std::string precision = "f32";  // f32 | f64

  SimConfig sim_config() const;  // validated enum form; sim_seed filled in
};

/// Parses the `key = value` format: one pair per line, '#' comments, dotted
/// section keys. Unknown keys, malformed lines and out-of-range values raise
/// ConfigError naming the line and key. Missing keys take their defaults.
TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config(const std::string& path);

/// Canonical serialization of every key; reloads to an identical TrainConfig.
std::string config_to_text(const TrainConfig& cfg);
void save_config(const TrainConfig& cfg, const std::string& path);

void validate_config(const TrainConfig& cfg);

SimLossType parse_loss_type(const std::string& s);
StopgradMode parse_stopgrad_mode(const std::string& s);
NormAxes parse_norm_axes(const std::string& s);
AlignPolicy parse_alignment(const std::string& s);

}  // namespace rhosim
