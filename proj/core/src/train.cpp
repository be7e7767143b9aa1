#include "rhosim/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace rhosim {

namespace fs = std::filesystem;

// ---- optimizer -----------------------------------------------------------------

template <class T>
std::vector<std::vector<double>> effective_gradients(
    const std::vector<Parameter<T>*>& params, double weight_decay) {
  std::vector<std::vector<double>> out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter<T>& p = *params[i];
    if (p.frozen) continue;
    const auto g = p.tensor.grad();
    const auto theta = p.tensor.data();
    std::vector<double>& slot = out[i];
    slot.resize(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    for (std::size_t k = 0; k < slot.size(); ++k) {
      double v = g.empty() ? 0.0 : static_cast<double>(g[k]);
      v += weight_decay * static_cast<double>(theta[k]);
      slot[k] = v;
    }
  }
  return out;
}

double grad_global_norm(const std::vector<std::vector<double>>& grads) {
  double acc = 0.0;
  for (const auto& slot : grads)
    for (double g : slot) acc += g * g;
  return std::sqrt(acc);
}

template <class T>
void sgd_step(const std::vector<Parameter<T>*>& params, const OptimConfig& cfg,
              double lr, SgdState<T>& state) {
  for (Parameter<T>* p : params) {
    if (p->frozen) continue;
    const auto g = p->tensor.grad();
    auto theta = p->tensor.data();
    auto& v = state.velocity[p->name];
    if (v.empty()) v.assign(static_cast<std::size_t>(p->tensor.numel()), 0.0);
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
      if (!std::isfinite(gk))
        throw NumericError("sgd_step: non-finite gradient in parameter '" + p->name +
                           "'");
      const double eff = gk + cfg.weight_decay * static_cast<double>(theta[k]);
      v[k] = cfg.momentum * v[k] + eff;
      theta[k] = static_cast<T>(static_cast<double>(theta[k]) - lr * v[k]);
    }
  }
}

double ema_update(double prev, double value, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ValueError("ema_update: beta must lie in [0,1)");
  return beta * prev + (1.0 - beta) * value;
}

// ---- digests / parameter io --------------------------------------------------------

template <class T>
std::vector<Parameter<T>*> sorted_by_name(std::vector<Parameter<T>*> params) {
  std::sort(params.begin(), params.end(),
            [](const Parameter<T>* a, const Parameter<T>* b) { return a->name < b->name; });
  return params;
}

namespace {

void digest_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
}

}  // namespace

template <class T>
std::uint64_t params_digest(const std::vector<Parameter<T>*>& params) {
  auto sorted = sorted_by_name(params);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Parameter<T>* p : sorted) {
    digest_bytes(h, p->name.data(), p->name.size());
    digest_bytes(h, "\0", 1);
    for (std::int64_t d : p->tensor.shape()) digest_bytes(h, &d, sizeof d);
    digest_bytes(h, p->tensor.data().data(), p->tensor.data().size_bytes());
  }
  return h;
}

namespace {

constexpr std::uint32_t kParamsMagic = 0x52534D50;  // "RSMP"

template <class V>
void write_pod(std::ostream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V read_pod(std::istream& in, const std::string& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw FormatError(path + ": truncated parameter file");
  return v;
}

}  // namespace

template <class T>
void save_params(const std::vector<Parameter<T>*>& params, const std::string& path) {
  auto sorted = sorted_by_name(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_pod(out, kParamsMagic);
  write_pod(out, static_cast<std::uint32_t>(sizeof(T)));
  write_pod(out, static_cast<std::uint32_t>(sorted.size()));
  for (const Parameter<T>* p : sorted) {
    write_pod(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_pod(out, static_cast<std::uint32_t>(p->tensor.rank()));
    for (std::int64_t d : p->tensor.shape()) write_pod(out, d);
    out.write(reinterpret_cast<const char*>(p->tensor.data().data()),
              static_cast<std::streamsize>(p->tensor.data().size_bytes()));
  }
}

template <class T>
void load_params(const std::vector<Parameter<T>*>& params, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  if (read_pod<std::uint32_t>(in, path) != kParamsMagic)
    throw FormatError(path + ": not a parameter file");
  if (read_pod<std::uint32_t>(in, path) != sizeof(T))
    throw FormatError(path + ": precision does not match the requested build");
  const std::uint32_t count = read_pod<std::uint32_t>(in, path);
  std::map<std::string, std::vector<T>> blobs;
  std::map<std::string, std::vector<std::int64_t>> shapes;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read_pod<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = read_pod<std::uint32_t>(in, path);
    std::vector<std::int64_t> shape(rank);
    std::int64_t numel = 1;
    for (auto& d : shape) {
      d = read_pod<std::int64_t>(in, path);
      numel *= d;
    }
    std::vector<T> data(static_cast<std::size_t>(numel));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * static_cast<std::int64_t>(sizeof(T))));
    if (!in) throw FormatError(path + ": truncated parameter data for '" + name + "'");
    blobs[name] = std::move(data);
    shapes[name] = std::move(shape);
  }
  for (Parameter<T>* p : params) {
    auto it = blobs.find(p->name);
    if (it == blobs.end())
      throw FormatError(path + ": missing parameter '" + p->name + "'");
    if (shapes[p->name] != p->tensor.shape())
      throw FormatError(path + ": shape mismatch for parameter '" + p->name + "'");
    std::copy(it->second.begin(), it->second.end(), p->tensor.data().begin());
  }
}

// ---- dataset / model construction ---------------------------------------------------

template <class T>
std::pair<Dataset<T>, Dataset<T>> build_datasets(const TrainConfig& cfg) {
  const std::uint64_t data_seed = derive_seed(cfg.master_seed, "data");
  Dataset<T> train_set, test_set;
  if (cfg.data.kind == "blobs" || cfg.data.kind == "noisy-blobs") {
    train_set = gen_blobs<T>(cfg.data.n_train, cfg.model.classes, cfg.data.dim,
                             cfg.data.noise_std, derive_seed(data_seed, "train"));
    test_set = gen_blobs<T>(cfg.data.n_test, cfg.model.classes, cfg.data.dim,
                            cfg.data.noise_std, derive_seed(data_seed, "test"));
    if (cfg.data.kind == "noisy-blobs")
      train_set = gen_noisy_labels(train_set, cfg.data.flip_rate,
                                   derive_seed(data_seed, "flip"));
    if (cfg.model.kind == "resnet") {
      // generated vectors feed conv models as C x H x W grids
      const std::int64_t c = cfg.model.in_channels, s = cfg.model.image_size;
      if (cfg.data.dim != c * s * s)
        throw ConfigError("data.dim must equal in_channels*image_size^2 = " +
                          std::to_string(c * s * s) + " for generated conv input");
      for (Dataset<T>* d : {&train_set, &test_set})
        d->features = Tensor<T>::from_data(
            {d->size(), c, s, s}, {d->features.data().begin(), d->features.data().end()});
    }
  } else if (cfg.data.kind == "csv") {
    train_set = load_csv<T>(cfg.data.train_csv, cfg.data.label_column,
                            cfg.model.classes);
    test_set = load_csv<T>(cfg.data.test_csv, cfg.data.label_column, cfg.model.classes);
  } else {
    train_set = load_idx<T>(cfg.data.train_images, cfg.data.train_labels);
    test_set = load_idx<T>(cfg.data.test_images, cfg.data.test_labels);
    for (const Dataset<T>* d : {&train_set, &test_set})
      for (std::int64_t l : d->labels)
        if (l >= cfg.model.classes)
          throw ConfigError("dataset label " + std::to_string(l) +
                            " outside model.classes = " +
                            std::to_string(cfg.model.classes));
  }
  return {std::move(train_set), std::move(test_set)};
}

namespace {

template <class T>
Model<T> build_model(const TrainConfig& cfg, std::uint64_t init_seed) {
  if (cfg.model.kind == "mlp")
    return build_mlp<T>(cfg.model.widths, cfg.model.classes, init_seed);
  return build_small_resnet<T>(cfg.model.stage_channels, cfg.model.blocks_per_stage,
                               cfg.model.classes, cfg.model.in_channels,
                               cfg.model.image_size, init_seed);
}

template <class T>
void check_dataset_shape(const TrainConfig& cfg, const Dataset<T>& d,
                         const char* which) {
  const auto& shape = d.features.shape();
  if (cfg.model.kind == "mlp") {
    if (shape.size() != 2 || shape[1] != cfg.model.widths.front())
      throw ConfigError(std::string(which) + " features " + detail::shape_str(shape) +
                        " do not match the mlp input width " +
                        std::to_string(cfg.model.widths.front()));
  } else {
    if (shape.size() != 4 || shape[1] != cfg.model.in_channels ||
        shape[2] != cfg.model.image_size || shape[3] != cfg.model.image_size)
      throw ConfigError(std::string(which) + " features " + detail::shape_str(shape) +
                        " do not match the conv input spec");
  }
}

template <class T>
double batch_accuracy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  const T* p = logits.data().data();
  std::int64_t correct = 0;
  for (std::int64_t b = 0; b < B; ++b) {
    std::int64_t best = 0;
    for (std::int64_t k = 1; k < K; ++k)
      if (p[b * K + k] > p[b * K + best]) best = k;  // ties: lowest index wins
    if (best == labels[static_cast<std::size_t>(b)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(B);
}

}  // namespace

// ---- evaluation ----------------------------------------------------------------------

template <class T>
std::pair<double, double> evaluate(const Model<T>& model, const Dataset<T>& data) {
  typename Tape<T>::NoGrad guard;
  const std::int64_t n = data.size();
  if (n == 0) return {0.0, 0.0};
  const std::int64_t chunk = 256;
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  std::vector<std::int64_t> rows;
  for (std::int64_t start = 0; start < n; start += chunk) {
    const std::int64_t end = std::min(n, start + chunk);
    rows.resize(static_cast<std::size_t>(end - start));
    for (std::int64_t i = start; i < end; ++i)
      rows[static_cast<std::size_t>(i - start)] = i;
    auto [x, y] = gather_batch(data, rows);
    Tensor<T> logits = model.forward(x);
    loss_sum += static_cast<double>(softmax_cross_entropy<T>(logits, y).item()) *
                static_cast<double>(end - start);
    const T* p = logits.data().data();
    const std::int64_t K = logits.dim(1);
    for (std::int64_t b = 0; b < end - start; ++b) {
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < K; ++k)
        if (p[b * K + k] > p[b * K + best]) best = k;
      if (best == y[static_cast<std::size_t>(b)]) ++correct;
    }
  }
  return {loss_sum / static_cast<double>(n),
          static_cast<double>(correct) / static_cast<double>(n)};
}

// ---- training ------------------------------------------------------------------------

template <class T>
RunArtifacts train(const TrainConfig& cfg) {
  validate_config(cfg);
  const std::uint64_t init_seed = derive_seed(cfg.master_seed, "init");
  const std::uint64_t data_seed = derive_seed(cfg.master_seed, "data");

  Model<T> model = build_model<T>(cfg, init_seed);
  auto [train_set, test_set] = build_datasets<T>(cfg);
  check_dataset_shape(cfg, train_set, "train");
  check_dataset_shape(cfg, test_set, "test");

  const bool sim_on = cfg.sim.active();
  SimBank<T> bank;
  if (sim_on) {
    const SimConfig scfg = cfg.sim_config();
    std::vector<TapPlan> plans = plan_taps(model.block_shapes(), scfg);
    if (plans.empty())
      std::fprintf(stderr,
                   "warning: no eligible blocks under alignment=%s; the "
                   "regularizer is a no-op\n",
                   cfg.sim.alignment.c_str());
    std::vector<int> tap_blocks;
    for (const TapPlan& p : plans) tap_blocks.push_back(p.block_index);
    bank = SimBank<T>::init(std::move(plans), scfg);
    model.set_taps_enabled(true);
    model.set_tap_blocks(std::move(tap_blocks));
  }

  std::vector<Parameter<T>*> base_params = sorted_by_name(model.parameters());
  std::vector<Parameter<T>*> all_params = base_params;
  std::vector<Parameter<T>*> opt_params = base_params;
  if (sim_on) {
    auto head_params = bank.parameters();
    all_params.insert(all_params.end(), head_params.begin(), head_params.end());
    if (cfg.sim.update_heads)
      opt_params.insert(opt_params.end(), head_params.begin(), head_params.end());
    all_params = sorted_by_name(all_params);
    opt_params = sorted_by_name(opt_params);
  }

  BatchPlan plan;
  plan.batch_size = cfg.optim.batch_size;
  plan.shuffle_seed = derive_seed(data_seed, "shuffle");
  plan.drop_last = false;

  SgdState<T> state;
  EmaTracker ema(cfg.output.ema_beta);
  RunArtifacts art;
  double last_norm = 0.0;
  std::int64_t step = 0;
  double sim_loss_sum = 0.0;
  std::int64_t train_rows = 0;

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const double lr = cfg.optim.lr_at(epoch);
    for (const auto& rows : batches(train_set.size(), plan, epoch)) {
      auto [x, y] = gather_batch(train_set, rows);
      for (Parameter<T>* p : all_params) p->tensor.zero_grad();

      Tape<T> tape;
      typename Tape<T>::Scope scope(tape);
      auto [logits, taps] = model.forward_with_taps(x);
      Tensor<T> task = softmax_cross_entropy<T>(logits, y);
      const double task_val = static_cast<double>(task.item());
      if (!std::isfinite(task_val))
        throw NumericError("step " + std::to_string(step) +
                           ": task loss is not finite");

      double sim_val = 0.0;
      Tensor<T> total = task;
      if (sim_on) {
        auto sim_res = bank.loss(taps, static_cast<std::uint64_t>(step));
        sim_val = sim_res.report.total;
        if (!std::isfinite(sim_val))
          throw NumericError("step " + std::to_string(step) +
                             ": sim loss is not finite");
        total = combine_losses(task, sim_res.total, cfg.sim.lambda);
        if (cfg.output.per_block_trace)
          for (const SimBlockRecord& rec : sim_res.report.per_block)
            art.per_block_sim.push_back({step, rec.block_index, rec.loss});
      }
      tape.backward(total);

      const auto eff = effective_gradients(opt_params, cfg.optim.weight_decay);
      last_norm = grad_global_norm(eff);
      const double ema_val = ema.update(last_norm);
      sgd_step(opt_params, cfg.optim, lr, state);

      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.split = "train";
      row.task_loss = task_val;
      row.sim_loss = sim_val;
      row.total_loss = task_val + cfg.sim.lambda * sim_val;
      row.accuracy = batch_accuracy<T>(logits, y);
      row.grad_norm = last_norm;
      row.grad_norm_ema = ema_val;
      row.lr = lr;
      row.seed = cfg.master_seed;
      art.metrics.push_back(std::move(row));
      sim_loss_sum += sim_val;
      ++train_rows;
      ++step;
    }

    auto [test_loss, test_acc] = evaluate(model, test_set);
    MetricsRow row;
    row.step = step;
    row.epoch = epoch;
    row.split = "test";
    row.task_loss = test_loss;
    row.sim_loss = 0.0;
    row.total_loss = test_loss;
    row.accuracy = test_acc;
    row.grad_norm = last_norm;
    row.grad_norm_ema = ema.seen() ? ema.value() : 0.0;
    row.lr = lr;
    row.seed = cfg.master_seed;
    art.metrics.push_back(std::move(row));
    art.final_test_accuracy = test_acc;
    art.base_epoch_digests.push_back(params_digest(base_params));
  }

  if (cfg.optim.epochs == 0) {
    auto [test_loss, test_acc] = evaluate(model, test_set);
    MetricsRow row;
    row.step = 0;
    row.epoch = 0;
    row.split = "test";
    row.task_loss = test_loss;
    row.total_loss = test_loss;
    row.accuracy = test_acc;
    row.lr = cfg.optim.lr;
    row.seed = cfg.master_seed;
    art.metrics.push_back(std::move(row));
    art.final_test_accuracy = test_acc;
  }

  art.steps = step;
  art.mean_sim_loss = train_rows > 0 ? sim_loss_sum / static_cast<double>(train_rows) : 0.0;
  art.final_params_digest = params_digest(all_params);

  if (!cfg.output.dir.empty()) {
    fs::create_directories(cfg.output.dir);
    const fs::path dir(cfg.output.dir);
    save_config(cfg, (dir / "config_resolved.txt").string());
    write_metrics_csv(art.metrics, (dir / "metrics.csv").string());
    save_params(all_params, (dir / "params.bin").string());
    std::ofstream digest((dir / "digest.txt").string(), std::ios::binary);
    if (!digest) throw IoError("cannot write digest.txt in " + cfg.output.dir);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx\n",
                  static_cast<unsigned long long>(art.final_params_digest));
    digest << buf;
    if (cfg.output.per_block_trace)
      write_per_block_csv(art.per_block_sim, (dir / "per_block_sim.csv").string());
  }
  return art;
}

RunArtifacts run_training(const TrainConfig& cfg) {
  if (cfg.precision == "f64") return train<double>(cfg);
  return train<float>(cfg);
}

// ---- ablation ------------------------------------------------------------------------

namespace {

std::string cell_dir_name(double rho, double lambda, std::uint64_t seed) {
  std::ostringstream os;
  os << "rho" << rho << "_lam" << lambda << "_seed" << seed;
  return os.str();
}

}  // namespace

AblateResult ablate(const TrainConfig& base, const std::vector<double>& rho_grid,
                    const std::vector<double>& lambda_grid,
                    const std::vector<std::uint64_t>& seeds, int jobs,
                    const std::string& out_dir) {
  if (rho_grid.empty() || lambda_grid.empty() || seeds.empty())
    throw ValueError("ablate: grids and seed list must be nonempty");
  if (jobs < 1) throw ValueError("ablate: jobs must be positive");

  struct RunSpec {
    double rho, lambda;
    std::uint64_t seed;
  };
  std::vector<RunSpec> specs;
  for (double rho : rho_grid)
    for (double lambda : lambda_grid)
      for (std::uint64_t seed : seeds) specs.push_back({rho, lambda, seed});

  AblateResult result;
  result.rows.resize(specs.size());
  if (!out_dir.empty()) fs::create_directories(out_dir);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      const RunSpec& s = specs[i];
      AblationRow row;
      row.rho = s.rho;
      row.lambda = s.lambda;
      row.seed = s.seed;
      TrainConfig cfg = base;
      cfg.master_seed = s.seed;
      cfg.sim.rho = s.rho;
      cfg.sim.lambda = s.lambda;
      cfg.sim.enabled = s.rho > 0.0;
      cfg.output.dir = out_dir.empty()
                           ? std::string()
                           : (fs::path(out_dir) / cell_dir_name(s.rho, s.lambda, s.seed))
                                 .string();
      try {
        const RunArtifacts art = run_training(cfg);
        row.final_test_acc = art.final_test_accuracy;
        row.mean_sim_loss = art.mean_sim_loss;
        row.status = "ok";
      } catch (const Error& e) {
        row.status = "error[" + e.code() + "]";
      } catch (const std::exception&) {
        row.status = "error[runtime]";
      }
      result.rows[i] = std::move(row);
    }
  };
  const int nthreads = std::min<int>(jobs, static_cast<int>(specs.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (double rho : rho_grid)
    for (double lambda : lambda_grid) {
      AblationCell cell;
      cell.rho = rho;
      cell.lambda = lambda;
      double acc_sum = 0, sim_sum = 0;
      std::vector<double> accs, sims;
      for (const AblationRow& row : result.rows)
        if (row.rho == rho && row.lambda == lambda && row.status == "ok") {
          accs.push_back(row.final_test_acc);
          sims.push_back(row.mean_sim_loss);
          acc_sum += row.final_test_acc;
          sim_sum += row.mean_sim_loss;
        }
      cell.runs = static_cast<int>(accs.size());
      if (cell.runs > 0) {
        cell.acc_mean = acc_sum / cell.runs;
        cell.sim_mean = sim_sum / cell.runs;
        double acc_var = 0, sim_var = 0;
        for (std::size_t i = 0; i < accs.size(); ++i) {
          acc_var += (accs[i] - cell.acc_mean) * (accs[i] - cell.acc_mean);
          sim_var += (sims[i] - cell.sim_mean) * (sims[i] - cell.sim_mean);
        }
        cell.acc_std = std::sqrt(acc_var / cell.runs);  // population stddev
        cell.sim_std = std::sqrt(sim_var / cell.runs);
      }
      result.cells.push_back(cell);
    }

  if (!out_dir.empty()) {
    write_ablation_summary(result.rows, (fs::path(out_dir) / "ablation_summary.csv").string());
    write_ablation_cells(result.cells, (fs::path(out_dir) / "ablation_cells.csv").string());
  }
  return result;
}

// ---- pca2 ----------------------------------------------------------------------------

namespace {

// Power iteration on a dense symmetric PSD matrix.
struct PowerResult {
  std::vector<double> v;
  double eigenvalue = 0.0;
};

PowerResult power_iterate(const std::vector<double>& m, std::int64_t d) {
  // start from the axis with the largest diagonal mass
  std::int64_t start = 0;
  for (std::int64_t i = 1; i < d; ++i)
    if (m[static_cast<std::size_t>(i * d + i)] >
        m[static_cast<std::size_t>(start * d + start)])
      start = i;
  std::vector<double> v(static_cast<std::size_t>(d), 0.0);
  v[static_cast<std::size_t>(start)] = 1.0;
  std::vector<double> w(static_cast<std::size_t>(d));
  for (int iter = 0; iter < 1000; ++iter) {
    for (std::int64_t i = 0; i < d; ++i) {
      double acc = 0;
      for (std::int64_t j = 0; j < d; ++j)
        acc += m[static_cast<std::size_t>(i * d + j)] * v[static_cast<std::size_t>(j)];
      w[static_cast<std::size_t>(i)] = acc;
    }
    double norm = 0;
    for (double x : w) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) break;  // v is in the null space; eigenvalue 0
    double diff = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] /= norm;
      diff = std::max(diff, std::fabs(w[i] - v[i]));
    }
    v = w;
    if (diff <= 1e-9) break;
  }
  PowerResult res;
  res.v = v;
  double acc = 0;
  for (std::int64_t i = 0; i < d; ++i) {
    double row = 0;
    for (std::int64_t j = 0; j < d; ++j)
      row += m[static_cast<std::size_t>(i * d + j)] * v[static_cast<std::size_t>(j)];
    acc += v[static_cast<std::size_t>(i)] * row;
  }
  res.eigenvalue = acc;
  return res;
}

void fix_sign(std::vector<double>& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::fabs(v[i]) > std::fabs(v[arg])) arg = i;
  if (v[arg] < 0)
    for (double& x : v) x = -x;
}

}  // namespace

Pca2Result pca2(const Tensor<double>& features) {
  if (!features.defined() || features.rank() != 2)
    throw DimensionError("pca2: expects features[M,D]");
  const std::int64_t M = features.dim(0), D = features.dim(1);
  if (M < 2) throw ValueError("pca2: need at least two rows");

  std::vector<double> centered(features.data().begin(), features.data().end());
  for (std::int64_t j = 0; j < D; ++j) {
    double mean = 0;
    for (std::int64_t i = 0; i < M; ++i) mean += centered[static_cast<std::size_t>(i * D + j)];
    mean /= static_cast<double>(M);
    for (std::int64_t i = 0; i < M; ++i) centered[static_cast<std::size_t>(i * D + j)] -= mean;
  }
  std::vector<double> cov(static_cast<std::size_t>(D * D), 0.0);
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t a = 0; a < D; ++a) {
      const double xa = centered[static_cast<std::size_t>(i * D + a)];
      for (std::int64_t b = 0; b < D; ++b)
        cov[static_cast<std::size_t>(a * D + b)] +=
            xa * centered[static_cast<std::size_t>(i * D + b)];
    }
  for (double& x : cov) x /= static_cast<double>(M);

  Pca2Result res;
  double trace = 0;
  for (std::int64_t i = 0; i < D; ++i) trace += cov[static_cast<std::size_t>(i * D + i)];
  if (trace <= 1e-30) {
    res.projection = Tensor<double>::zeros({M, 2});
    res.degenerate = true;
    return res;
  }

  PowerResult first = power_iterate(cov, D);
  fix_sign(first.v);
  std::vector<double> deflated = cov;
  for (std::int64_t a = 0; a < D; ++a)
    for (std::int64_t b = 0; b < D; ++b)
      deflated[static_cast<std::size_t>(a * D + b)] -=
          first.eigenvalue * first.v[static_cast<std::size_t>(a)] *
          first.v[static_cast<std::size_t>(b)];

  PowerResult second;
  double dtrace = 0;
  for (std::int64_t i = 0; i < D; ++i)
    dtrace += deflated[static_cast<std::size_t>(i * D + i)];
  if (D < 2) {
    second.v.assign(static_cast<std::size_t>(D), 0.0);
    second.eigenvalue = 0.0;
  } else if (dtrace <= 1e-18 * std::max(1.0, first.eigenvalue)) {
    // rank-1 data: any unit vector orthogonal to the first component
    std::size_t arg = 0;
    for (std::size_t i = 1; i < first.v.size(); ++i)
      if (std::fabs(first.v[i]) < std::fabs(first.v[arg])) arg = i;
    std::vector<double> v(static_cast<std::size_t>(D), 0.0);
    v[arg] = 1.0;
    double dot = first.v[arg];
    double norm = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] -= dot * first.v[i];
      norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    second.v = std::move(v);
    double acc = 0;
    for (std::int64_t a = 0; a < D; ++a) {
      double row = 0;
      for (std::int64_t b = 0; b < D; ++b)
        row += cov[static_cast<std::size_t>(a * D + b)] *
               second.v[static_cast<std::size_t>(b)];
      acc += second.v[static_cast<std::size_t>(a)] * row;
    }
    second.eigenvalue = acc;
  } else {
    second = power_iterate(deflated, D);
  }
  fix_sign(second.v);

  std::vector<double> proj(static_cast<std::size_t>(M * 2));
  for (std::int64_t i = 0; i < M; ++i) {
    double p0 = 0, p1 = 0;
    for (std::int64_t j = 0; j < D; ++j) {
      const double x = centered[static_cast<std::size_t>(i * D + j)];
      p0 += x * first.v[static_cast<std::size_t>(j)];
      p1 += x * second.v[static_cast<std::size_t>(j)];
    }
    proj[static_cast<std::size_t>(i * 2)] = p0;
    proj[static_cast<std::size_t>(i * 2 + 1)] = p1;
  }
  res.projection = Tensor<double>::from_data({M, 2}, std::move(proj));
  res.eigenvalues[0] = first.eigenvalue;
  res.eigenvalues[1] = second.eigenvalue;
  return res;
}

// ---- explicit instantiations -----------------------------------------------------------

#define RHOSIM_INSTANTIATE_TRAIN(T)                                                \
  template std::vector<std::vector<double>> effective_gradients<T>(                \
      const std::vector<Parameter<T>*>&, double);                                  \
  template void sgd_step<T>(const std::vector<Parameter<T>*>&, const OptimConfig&, \
                            double, SgdState<T>&);                                 \
  template std::uint64_t params_digest<T>(const std::vector<Parameter<T>*>&);      \
  template void save_params<T>(const std::vector<Parameter<T>*>&,                  \
                               const std::string&);                                \
  template void load_params<T>(const std::vector<Parameter<T>*>&,                  \
                               const std::string&);                                \
  template std::vector<Parameter<T>*> sorted_by_name<T>(                           \
      std::vector<Parameter<T>*>);                                                 \
  template RunArtifacts train<T>(const TrainConfig&);                              \
  template std::pair<Dataset<T>, Dataset<T>> build_datasets<T>(const TrainConfig&);                              \
  template std::pair<double, double> evaluate<T>(const Model<T>&,                  \
                                                 const Dataset<T>&);

RHOSIM_INSTANTIATE_TRAIN(float)
RHOSIM_INSTANTIATE_TRAIN(double)

#undef RHOSIM_INSTANTIATE_TRAIN

}  // namespace rhosim
