#include "rhosim/report.hpp"

#include <filesystem>
#include <fstream>
#include <ostream>
#include <vector>

#include "rhosim/config.hpp"
#include "rhosim/metrics.hpp"
#include "rhosim/models.hpp"
#include "rhosim/train.hpp"

namespace rhosim {

namespace fs = std::filesystem;

namespace {

struct BlockFeatures {
  int block_index = 0;
  std::int64_t width = 0;
  std::vector<double> rows;             // flattened token features
  std::vector<std::int64_t> row_labels;  // sample label per token row
};

template <class T>
void collect_features(const TrainConfig& cfg, const std::string& run_dir,
                      std::vector<BlockFeatures>& blocks) {
  const std::uint64_t init_seed = derive_seed(cfg.master_seed, "init");
  Model<T> model = cfg.model.kind == "mlp"
                       ? build_mlp<T>(cfg.model.widths, cfg.model.classes, init_seed)
                       : build_small_resnet<T>(cfg.model.stage_channels,
                                               cfg.model.blocks_per_stage,
                                               cfg.model.classes, cfg.model.in_channels,
                                               cfg.model.image_size, init_seed);
  load_params(sorted_by_name(model.parameters()),
              (fs::path(run_dir) / "params.bin").string());

  // Tap every eligible block under the configured alignment policy; the
  // feature report does not need the regularizer itself to be on.
  SimConfig scfg;
  scfg.alignment = parse_alignment(cfg.sim.alignment);
  std::vector<TapPlan> plans = plan_taps(model.block_shapes(), scfg);
  std::vector<int> tap_blocks;
  for (const TapPlan& p : plans) tap_blocks.push_back(p.block_index);
  model.set_taps_enabled(true);
  model.set_tap_blocks(tap_blocks);

  Dataset<T> test_set = build_datasets<T>(cfg).second;

  blocks.clear();
  for (const TapPlan& p : plans) {
    BlockFeatures bf;
    bf.block_index = p.block_index;
    bf.width = p.c_out;
    blocks.push_back(std::move(bf));
  }

  typename Tape<T>::NoGrad guard;
  const std::int64_t chunk = 128;
  std::vector<std::int64_t> rows;
  for (std::int64_t start = 0; start < test_set.size(); start += chunk) {
    const std::int64_t end = std::min(test_set.size(), start + chunk);
    rows.resize(static_cast<std::size_t>(end - start));
    for (std::int64_t i = start; i < end; ++i)
      rows[static_cast<std::size_t>(i - start)] = i;
    auto [x, y] = gather_batch(test_set, rows);
    auto [logits, taps] = model.forward_with_taps(x);
    (void)logits;
    for (const SimTap<T>& tap : taps) {
      for (BlockFeatures& bf : blocks) {
        if (bf.block_index != tap.block_index) continue;
        const std::int64_t B = tap.output_tokens.dim(0);
        const std::int64_t N = tap.output_tokens.dim(1);
        const std::int64_t C = tap.output_tokens.dim(2);
        const T* src = tap.output_tokens.data().data();
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t t = 0; t < N; ++t) {
            for (std::int64_t c = 0; c < C; ++c)
              bf.rows.push_back(static_cast<double>(src[(b * N + t) * C + c]));
            bf.row_labels.push_back(y[static_cast<std::size_t>(b)]);
          }
      }
    }
  }
}

}  // namespace

void report_run(const std::string& run_dir, bool with_pca, std::ostream& out) {
  const fs::path dir(run_dir);
  if (!fs::exists(dir / "config_resolved.txt"))
    throw IoError("run directory " + run_dir + " has no config_resolved.txt");
  const TrainConfig cfg = load_config((dir / "config_resolved.txt").string());

  out << "run: " << run_dir << "\n";
  {
    std::ifstream digest(dir / "digest.txt");
    std::string line;
    if (digest && std::getline(digest, line))
      out << "final_params_digest: " << line << "\n";
  }

  // Parameter accounting from the config alone.
  const std::uint64_t init_seed = derive_seed(cfg.master_seed, "init");
  std::int64_t base_count = 0;
  std::vector<TapPlan> plans;
  {
    SimConfig scfg;
    scfg.alignment = parse_alignment(cfg.sim.alignment);
    scfg.proj_dim = cfg.sim.proj_dim;
    scfg.proj_hidden = cfg.sim.proj_hidden;
    if (cfg.precision == "f64") {
      Model<double> m =
          cfg.model.kind == "mlp"
              ? build_mlp<double>(cfg.model.widths, cfg.model.classes, init_seed)
              : build_small_resnet<double>(cfg.model.stage_channels,
                                           cfg.model.blocks_per_stage,
                                           cfg.model.classes, cfg.model.in_channels,
                                           cfg.model.image_size, init_seed);
      base_count = m.param_count();
      plans = plan_taps(m.block_shapes(), scfg);
    } else {
      Model<float> m =
          cfg.model.kind == "mlp"
              ? build_mlp<float>(cfg.model.widths, cfg.model.classes, init_seed)
              : build_small_resnet<float>(cfg.model.stage_channels,
                                          cfg.model.blocks_per_stage, cfg.model.classes,
                                          cfg.model.in_channels, cfg.model.image_size,
                                          init_seed);
      base_count = m.param_count();
      plans = plan_taps(m.block_shapes(), scfg);
    }
    std::int64_t sim_count = 0;
    if (cfg.sim.active()) {
      SimConfig counting = scfg;
      for (const TapPlan& p : plans)
        sim_count += head_param_count(p.c_in, p.c_out, counting);
    }
    out << "base_params: " << base_count << "\n";
    out << "sim_params: " << sim_count << "\n";
    const double overhead =
        base_count > 0 ? 100.0 * static_cast<double>(sim_count) /
                             static_cast<double>(base_count)
                       : 0.0;
    out << "sim_overhead_percent: " << format_real(overhead) << "\n";
  }

  // Gradient-norm trace columns.
  const std::vector<MetricsRow> metrics =
      read_metrics_csv((dir / "metrics.csv").string());
  {
    std::ofstream trace(dir / "trace.csv", std::ios::binary);
    if (!trace) throw IoError("cannot write trace.csv in " + run_dir);
    trace << kTraceHeader << "\n";
    std::int64_t n = 0;
    for (const MetricsRow& r : metrics)
      if (r.split == "train") {
        trace << r.step << ',' << format_real(r.grad_norm) << ','
              << format_real(r.grad_norm_ema) << "\n";
        ++n;
      }
    out << "trace: trace.csv (" << n << " rows)\n";
  }
  for (auto it = metrics.rbegin(); it != metrics.rend(); ++it)
    if (it->split == "test") {
      out << "final_test_accuracy: " << format_real(it->accuracy) << "\n";
      break;
    }

  if (with_pca) {
    std::vector<BlockFeatures> blocks;
    if (cfg.precision == "f64")
      collect_features<double>(cfg, run_dir, blocks);
    else
      collect_features<float>(cfg, run_dir, blocks);
    for (const BlockFeatures& bf : blocks) {
      const std::int64_t m = static_cast<std::int64_t>(bf.row_labels.size());
      if (m < 2) continue;
      Pca2Result pca = pca2(Tensor<double>::from_data({m, bf.width}, bf.rows));
      const fs::path path = dir / ("pca_block" + std::to_string(bf.block_index) + ".csv");
      std::ofstream f(path, std::ios::binary);
      if (!f) throw IoError("cannot write " + path.string());
      f << "pc1,pc2,label\n";
      const double* p = pca.projection.data().data();
      for (std::int64_t i = 0; i < m; ++i)
        f << format_real(p[i * 2]) << ',' << format_real(p[i * 2 + 1]) << ','
          << bf.row_labels[static_cast<std::size_t>(i)] << "\n";
      out << "pca: " << path.filename().string() << " (" << m << " rows"
          << (pca.degenerate ? ", degenerate" : "") << ")\n";
    }
  }
}

}  // namespace rhosim
