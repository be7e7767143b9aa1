#include "rhosim/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "rhosim/config.hpp"
#include "rhosim/data.hpp"
#include "rhosim/gradcheck.hpp"
#include "rhosim/metrics.hpp"
#include "rhosim/report.hpp"
#include "rhosim/train.hpp"

namespace rhosim::cli {

namespace {

void print_usage(std::ostream& out) {
  out << "usage: rhosim <subcommand> [flags]\n"
         "\n"
         "subcommands:\n"
         "  train --config P [--seed N] [--out DIR]\n"
         "      run one training job; writes config echo, metrics.csv,\n"
         "      params.bin and digest.txt into the output directory\n"
         "  gradcheck --model {mlp,resnet} --sim {on,off} [--eps H]\n"
         "      compare tape gradients against central finite differences;\n"
         "      exits 0 iff the max relative error is <= 1e-5\n"
         "  ablate --config P --rho LIST --lambda LIST --seeds LIST [--jobs K]\n"
         "         [--out DIR]\n"
         "      cross-product sweep; writes ablation_summary.csv and\n"
         "      ablation_cells.csv plus one run directory per cell\n"
         "  gen-data --kind {blobs,noisy-blobs} --n N --classes K --dim D\n"
         "           --noise S --seed N --out P [--flip F]\n"
         "      write a synthetic dataset as CSV\n"
         "  report --run DIR [--pca]\n"
         "      parameter accounting, grad-norm trace extraction and optional\n"
         "      per-block 2-component feature projections\n";
}

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

class Flags {
 public:
  Flags(const std::vector<std::string>& args, std::size_t start) {
    for (std::size_t i = start; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a.rfind("--", 0) != 0) throw UsageError("unexpected argument '" + a + "'");
      const std::string name = a.substr(2);
      if (name == "pca" || name == "help") {
        switches_[name] = true;
        continue;
      }
      if (i + 1 >= args.size()) throw UsageError("flag --" + name + " needs a value");
      values_[name] = args[++i];
    }
  }

  std::optional<std::string> get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) return std::nullopt;
    used_.insert(name);
    return it->second;
  }

  std::string require(const std::string& name) {
    auto v = get(name);
    if (!v) throw UsageError("missing required flag --" + name);
    return *v;
  }

  bool has_switch(const std::string& name) {
    auto it = switches_.find(name);
    if (it == switches_.end()) return false;
    used_.insert(name);
    return true;
  }

  void reject_unknown() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw UsageError("unknown flag --" + k);
    for (const auto& [k, v] : switches_)
      if (!used_.count(k)) throw UsageError("unknown flag --" + k);
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, bool> switches_;
  std::set<std::string> used_;
};

double to_double(const std::string& flag, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw UsageError("flag --" + flag + ": expected a number, got '" + v + "'");
  return x;
}

std::int64_t to_int(const std::string& flag, const std::string& v) {
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw UsageError("flag --" + flag + ": expected an integer, got '" + v + "'");
  return static_cast<std::int64_t>(x);
}

std::uint64_t to_u64(const std::string& flag, const std::string& v) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
    throw UsageError("flag --" + flag + ": expected a non-negative integer, got '" + v +
                     "'");
  return static_cast<std::uint64_t>(x);
}

template <class F>
auto parse_list(const std::string& flag, const std::string& v, F&& one) {
  std::vector<decltype(one(flag, v))> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(one(flag, item));
  if (out.empty()) throw UsageError("flag --" + flag + ": empty list");
  return out;
}

int cmd_train(Flags& flags) {
  TrainConfig cfg = load_config(flags.require("config"));
  if (auto seed = flags.get("seed")) cfg.master_seed = to_u64("seed", *seed);
  if (auto out = flags.get("out")) cfg.output.dir = *out;
  flags.reject_unknown();
  if (cfg.output.dir.empty())
    cfg.output.dir = "runs/run-seed" + std::to_string(cfg.master_seed);
  const RunArtifacts art = run_training(cfg);
  std::cout << "out: " << cfg.output.dir << "\n"
            << "steps: " << art.steps << "\n"
            << "final_test_accuracy: " << format_real(art.final_test_accuracy) << "\n";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(art.final_params_digest));
  std::cout << "final_params_digest: " << buf << "\n";
  return 0;
}

int cmd_gradcheck(Flags& flags) {
  GradcheckOptions opts;
  opts.model = flags.require("model");
  if (opts.model != "mlp" && opts.model != "resnet")
    throw UsageError("flag --model: expected mlp or resnet");
  const std::string sim = flags.require("sim");
  if (sim != "on" && sim != "off") throw UsageError("flag --sim: expected on or off");
  opts.sim_on = sim == "on";
  if (auto eps = flags.get("eps")) {
    opts.step = to_double("eps", *eps);
    if (opts.step <= 0) throw UsageError("flag --eps: must be positive");
  }
  flags.reject_unknown();
  const auto cases = run_gradcheck(opts);
  double worst = 0.0;
  bool all_pass = true;
  for (const GradcheckCase& c : cases) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name
              << " max_rel_err=" << format_real(c.report.max_rel_err);
    if (!c.pass)
      std::cout << " worst=" << c.report.worst_param << "[" << c.report.worst_index
                << "] tape=" << format_real(c.report.tape_grad)
                << " fd=" << format_real(c.report.fd_grad);
    std::cout << "\n";
    worst = std::max(worst, c.report.max_rel_err);
    all_pass = all_pass && c.pass;
  }
  std::cout << "max_rel_err: " << format_real(worst) << " (tolerance "
            << format_real(opts.tolerance) << ")\n";
  return all_pass ? 0 : 1;
}

int cmd_ablate(Flags& flags) {
  TrainConfig cfg = load_config(flags.require("config"));
  const auto rho_grid = parse_list("rho", flags.require("rho"), to_double);
  const auto lambda_grid = parse_list("lambda", flags.require("lambda"), to_double);
  const auto seeds = parse_list("seeds", flags.require("seeds"), to_u64);
  int jobs = 1;
  if (auto j = flags.get("jobs")) {
    jobs = static_cast<int>(to_int("jobs", *j));
    if (jobs < 1) throw UsageError("flag --jobs: must be positive");
  }
  if (auto out = flags.get("out")) cfg.output.dir = *out;
  flags.reject_unknown();
  for (double rho : rho_grid)
    if (!(rho >= 0.0 && rho <= 1.0))
      throw UsageError("flag --rho: values must lie in [0,1] (0 disables)");
  const std::string out_dir =
      cfg.output.dir.empty() ? std::string("runs/ablate") : cfg.output.dir;
  const AblateResult res = ablate(cfg, rho_grid, lambda_grid, seeds, jobs, out_dir);
  for (const AblationRow& r : res.rows)
    std::cout << "rho=" << format_real(r.rho) << " lambda=" << format_real(r.lambda)
              << " seed=" << r.seed << " acc=" << format_real(r.final_test_acc)
              << " mean_sim_loss=" << format_real(r.mean_sim_loss) << " " << r.status
              << "\n";
  std::cout << "summary: " << out_dir << "/ablation_summary.csv\n"
            << "cells: " << out_dir << "/ablation_cells.csv\n";
  return 0;
}

int cmd_gen_data(Flags& flags) {
  const std::string kind = flags.require("kind");
  if (kind != "blobs" && kind != "noisy-blobs")
    throw UsageError("flag --kind: expected blobs or noisy-blobs");
  const std::int64_t n = to_int("n", flags.require("n"));
  const int classes = static_cast<int>(to_int("classes", flags.require("classes")));
  const int dim = static_cast<int>(to_int("dim", flags.require("dim")));
  const double noise = to_double("noise", flags.require("noise"));
  const std::uint64_t seed = to_u64("seed", flags.require("seed"));
  const std::string out = flags.require("out");
  double flip = 0.2;
  if (auto f = flags.get("flip")) flip = to_double("flip", *f);
  flags.reject_unknown();

  Dataset<double> d = gen_blobs<double>(n, classes, dim, noise, seed);
  if (kind == "noisy-blobs")
    d = gen_noisy_labels(d, flip, derive_seed(seed, "flip"));
  save_csv(d, out);
  std::cout << "wrote " << out << " (" << d.provenance << ")\n";
  return 0;
}

int cmd_report(Flags& flags) {
  const std::string run = flags.require("run");
  const bool pca = flags.has_switch("pca");
  flags.reject_unknown();
  report_run(run, pca, std::cout);
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  try {
    if (args.empty()) {
      print_usage(std::cerr);
      std::cerr << "error[usage]: missing subcommand\n";
      return 2;
    }
    const std::string& cmd = args[0];
    if (cmd == "--help" || cmd == "help") {
      print_usage(std::cout);
      return 0;
    }
    Flags flags(args, 1);
    if (flags.has_switch("help")) {
      print_usage(std::cout);
      return 0;
    }
    if (cmd == "train") return cmd_train(flags);
    if (cmd == "gradcheck") return cmd_gradcheck(flags);
    if (cmd == "ablate") return cmd_ablate(flags);
    if (cmd == "gen-data") return cmd_gen_data(flags);
    if (cmd == "report") return cmd_report(flags);
    throw UsageError("unknown subcommand '" + cmd + "'");
  } catch (const UsageError& e) {
    print_usage(std::cerr);
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[runtime]: " << e.what() << "\n";
    return 1;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace rhosim::cli
