#include "rhosim/config.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace rhosim {

SimLossType parse_loss_type(const std::string& s) {
  if (s == "mse") return SimLossType::mse;
  if (s == "mse_normalized") return SimLossType::mse_normalized;
  if (s == "l1") return SimLossType::l1;
  if (s == "cosine") return SimLossType::cosine;
  throw ConfigError("sim.loss_type: unsupported value '" + s +
                    "', valid types are mse, mse_normalized, l1, cosine");
}

StopgradMode parse_stopgrad_mode(const std::string& s) {
  if (s == "literal") return StopgradMode::literal;
  if (s == "feature") return StopgradMode::feature;
  throw ConfigError("sim.stopgrad_mode: unsupported value '" + s +
                    "', valid modes are literal, feature");
}

NormAxes parse_norm_axes(const std::string& s) {
  if (s == "token") return NormAxes::token;
  if (s == "flat") return NormAxes::flat;
  throw ConfigError("sim.norm_axes: unsupported value '" + s +
                    "', valid modes are token, flat");
}

AlignPolicy parse_alignment(const std::string& s) {
  if (s == "skip_mismatched") return AlignPolicy::skip_mismatched;
  if (s == "stride_align") return AlignPolicy::stride_align;
  throw ConfigError("sim.alignment: unsupported value '" + s +
                    "', valid policies are skip_mismatched, stride_align");
}

SimConfig TrainConfig::sim_config() const {
  SimConfig cfg;
  cfg.rho = sim.rho;
  cfg.lambda = sim.lambda;
  cfg.proj_dim = sim.proj_dim;
  cfg.proj_hidden = sim.proj_hidden;
  cfg.epsilon = sim.epsilon;
  cfg.loss_type = parse_loss_type(sim.loss_type);
  cfg.stopgrad_mode = parse_stopgrad_mode(sim.stopgrad_mode);
  cfg.norm_axes = parse_norm_axes(sim.norm_axes);
  cfg.alignment = parse_alignment(sim.alignment);
  cfg.sim_seed = derive_seed(master_seed, "sim");
  return cfg;
}

// ---- parsing ----------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

struct KeyContext {
  std::string key;
  int line = 0;
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("line " + std::to_string(line) + ": key '" + key + "': " + msg);
  }
};

double parse_real(const KeyContext& ctx, const std::string& v) {
  const char* s = v.c_str();
  char* end = nullptr;
  const double x = std::strtod(s, &end);
  if (end == s || *end != '\0' || !std::isfinite(x))
    ctx.fail("expected a finite real number, got '" + v + "'");
  return x;
}

std::int64_t parse_int(const KeyContext& ctx, const std::string& v) {
  const char* s = v.c_str();
  char* end = nullptr;
  const long long x = std::strtoll(s, &end, 10);
  if (end == s || *end != '\0') ctx.fail("expected an integer, got '" + v + "'");
  return static_cast<std::int64_t>(x);
}

std::uint64_t parse_u64(const KeyContext& ctx, const std::string& v) {
  const char* s = v.c_str();
  char* end = nullptr;
  const unsigned long long x = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0' || v.find('-') != std::string::npos)
    ctx.fail("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::uint64_t>(x);
}

bool parse_bool(const KeyContext& ctx, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  ctx.fail("expected true or false, got '" + v + "'");
}

template <class I>
std::vector<I> parse_int_list(const KeyContext& ctx, const std::string& v) {
  std::vector<I> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<I>(parse_int(ctx, trim(item))));
  return out;
}

template <class I>
std::string join_list(const std::vector<I>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ',';
    os << xs[i];
  }
  return os.str();
}

std::string real_str(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%#.9g", v);
  return buf;
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::map<std::string, std::function<void(const KeyContext&, const std::string&)>>
      setters;
  auto set_str = [](std::string* dst) {
    return [dst](const KeyContext&, const std::string& v) { *dst = v; };
  };
  setters["model.kind"] = set_str(&cfg.model.kind);
  setters["model.widths"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.widths = parse_int_list<std::int64_t>(c, v);
  };
  setters["model.stage_channels"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.stage_channels = parse_int_list<std::int64_t>(c, v);
  };
  setters["model.blocks_per_stage"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.blocks_per_stage = static_cast<int>(parse_int(c, v));
  };
  setters["model.classes"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.classes = static_cast<int>(parse_int(c, v));
  };
  setters["model.in_channels"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.in_channels = parse_int(c, v);
  };
  setters["model.image_size"] = [&](const KeyContext& c, const std::string& v) {
    cfg.model.image_size = parse_int(c, v);
  };

  setters["data.kind"] = set_str(&cfg.data.kind);
  setters["data.n_train"] = [&](const KeyContext& c, const std::string& v) {
    cfg.data.n_train = parse_int(c, v);
  };
  setters["data.n_test"] = [&](const KeyContext& c, const std::string& v) {
    cfg.data.n_test = parse_int(c, v);
  };
  setters["data.dim"] = [&](const KeyContext& c, const std::string& v) {
    cfg.data.dim = static_cast<int>(parse_int(c, v));
  };
  setters["data.noise_std"] = [&](const KeyContext& c, const std::string& v) {
    cfg.data.noise_std = parse_real(c, v);
  };
  setters["data.flip_rate"] = [&](const KeyContext& c, const std::string& v) {
    cfg.data.flip_rate = parse_real(c, v);
  };
  setters["data.train_csv"] = set_str(&cfg.data.train_csv);
  setters["data.test_csv"] = set_str(&cfg.data.test_csv);
  setters["data.label_column"] = set_str(&cfg.data.label_column);
  setters["data.train_images"] = set_str(&cfg.data.train_images);
  setters["data.train_labels"] = set_str(&cfg.data.train_labels);
  setters["data.test_images"] = set_str(&cfg.data.test_images);
  setters["data.test_labels"] = set_str(&cfg.data.test_labels);

  setters["optim.lr"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.lr = parse_real(c, v);
  };
  setters["optim.momentum"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.momentum = parse_real(c, v);
  };
  setters["optim.weight_decay"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.weight_decay = parse_real(c, v);
  };
  setters["optim.epochs"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.epochs = static_cast<int>(parse_int(c, v));
  };
  setters["optim.batch_size"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.batch_size = parse_int(c, v);
  };
  setters["optim.lr_schedule"] = [&](const KeyContext& c, const std::string& v) {
    if (v == "constant") cfg.optim.schedule = LrSchedule::constant;
    else if (v == "step") cfg.optim.schedule = LrSchedule::step;
    else c.fail("expected constant or step, got '" + v + "'");
  };
  setters["optim.milestones"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.milestones = parse_int_list<int>(c, v);
  };
  setters["optim.gamma"] = [&](const KeyContext& c, const std::string& v) {
    cfg.optim.gamma = parse_real(c, v);
  };

  setters["sim.enabled"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.enabled = parse_bool(c, v);
  };
  setters["sim.rho"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.rho = parse_real(c, v);
  };
  setters["sim.lambda"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.lambda = parse_real(c, v);
  };
  setters["sim.proj_dim"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.proj_dim = static_cast<int>(parse_int(c, v));
  };
  setters["sim.proj_hidden"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.proj_hidden = static_cast<int>(parse_int(c, v));
  };
  setters["sim.epsilon"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.epsilon = parse_real(c, v);
  };
  setters["sim.loss_type"] = set_str(&cfg.sim.loss_type);
  setters["sim.stopgrad_mode"] = set_str(&cfg.sim.stopgrad_mode);
  setters["sim.norm_axes"] = set_str(&cfg.sim.norm_axes);
  setters["sim.alignment"] = set_str(&cfg.sim.alignment);
  setters["sim.update_heads"] = [&](const KeyContext& c, const std::string& v) {
    cfg.sim.update_heads = parse_bool(c, v);
  };

  setters["seeds.master"] = [&](const KeyContext& c, const std::string& v) {
    cfg.master_seed = parse_u64(c, v);
  };

  setters["output.dir"] = set_str(&cfg.output.dir);
  setters["output.per_block_trace"] = [&](const KeyContext& c, const std::string& v) {
    cfg.output.per_block_trace = parse_bool(c, v);
  };
  setters["output.ema_beta"] = [&](const KeyContext& c, const std::string& v) {
    cfg.output.ema_beta = parse_real(c, v);
  };

  setters["precision"] = set_str(&cfg.precision);

  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) +
                        ": malformed line, expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters.find(key);
    if (it == setters.end())
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    auto [seen_it, fresh] = seen.emplace(key, lineno);
    if (!fresh)
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key +
                        "' (first set on line " + std::to_string(seen_it->second) + ")");
    KeyContext ctx{key, lineno};
    it->second(ctx, value);
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---- validation ---------------------------------------------------------------

void validate_config(const TrainConfig& cfg) {
  auto fail = [](const std::string& key, const std::string& msg) {
    throw ConfigError("key '" + key + "': " + msg);
  };

  if (cfg.model.kind != "mlp" && cfg.model.kind != "resnet")
    fail("model.kind", "expected mlp or resnet, got '" + cfg.model.kind + "'");
  if (cfg.model.kind == "mlp") {
    if (cfg.model.widths.size() < 2) fail("model.widths", "need at least two widths");
    for (std::int64_t w : cfg.model.widths)
      if (w < 1) fail("model.widths", "widths must be positive");
  } else {
    if (cfg.model.stage_channels.empty())
      fail("model.stage_channels", "must be nonempty");
    for (std::int64_t c : cfg.model.stage_channels)
      if (c < 1) fail("model.stage_channels", "channels must be positive");
    if (cfg.model.blocks_per_stage < 1)
      fail("model.blocks_per_stage", "must be positive");
    if (cfg.model.in_channels < 1) fail("model.in_channels", "must be positive");
    if (cfg.model.image_size < 1) fail("model.image_size", "must be positive");
  }
  if (cfg.model.classes < 2) fail("model.classes", "need at least two classes");

  if (cfg.data.kind != "blobs" && cfg.data.kind != "noisy-blobs" &&
      cfg.data.kind != "csv" && cfg.data.kind != "idx")
    fail("data.kind", "expected blobs, noisy-blobs, csv or idx, got '" +
                          cfg.data.kind + "'");
  if (cfg.data.kind == "blobs" || cfg.data.kind == "noisy-blobs") {
    if (cfg.data.n_train < cfg.model.classes)
      fail("data.n_train", "need at least one sample per class");
    if (cfg.data.n_test < 1) fail("data.n_test", "must be positive");
    if (cfg.data.dim < 1) fail("data.dim", "must be positive");
    if (cfg.data.noise_std < 0) fail("data.noise_std", "must be non-negative");
  }
  if (cfg.data.kind == "noisy-blobs" &&
      !(cfg.data.flip_rate >= 0.0 && cfg.data.flip_rate < 1.0))
    fail("data.flip_rate", "must lie in [0,1)");
  if (cfg.data.kind == "csv" && (cfg.data.train_csv.empty() || cfg.data.test_csv.empty()))
    fail("data.train_csv", "csv data needs data.train_csv and data.test_csv");
  if (cfg.data.kind == "idx" &&
      (cfg.data.train_images.empty() || cfg.data.train_labels.empty() ||
       cfg.data.test_images.empty() || cfg.data.test_labels.empty()))
    fail("data.train_images", "idx data needs all four idx paths");

  if (!(cfg.optim.lr > 0)) fail("optim.lr", "must be positive");
  if (!(cfg.optim.momentum >= 0 && cfg.optim.momentum < 1))
    fail("optim.momentum", "must lie in [0,1)");
  if (cfg.optim.weight_decay < 0) fail("optim.weight_decay", "must be non-negative");
  if (cfg.optim.epochs < 0) fail("optim.epochs", "must be non-negative");
  if (cfg.optim.batch_size < 1) fail("optim.batch_size", "must be positive");
  if (cfg.optim.schedule == LrSchedule::step) {
    if (!(cfg.optim.gamma > 0)) fail("optim.gamma", "must be positive");
    int prev = -1;
    for (int m : cfg.optim.milestones) {
      if (m <= prev) fail("optim.milestones", "must be strictly increasing");
      if (m >= cfg.optim.epochs)
        fail("optim.milestones", "milestones must stay below optim.epochs");
      prev = m;
    }
  }

  if (!(cfg.sim.rho >= 0.0 && cfg.sim.rho <= 1.0))
    fail("sim.rho", "must lie in (0,1] (0 disables), got " + real_str(cfg.sim.rho));
  if (cfg.sim.lambda < 0) fail("sim.lambda", "must be non-negative");
  if (cfg.sim.proj_dim < 1) fail("sim.proj_dim", "must be positive");
  if (cfg.sim.proj_hidden < 1) fail("sim.proj_hidden", "must be positive");
  if (!(cfg.sim.epsilon > 0)) fail("sim.epsilon", "must be positive");
  parse_loss_type(cfg.sim.loss_type);
  parse_stopgrad_mode(cfg.sim.stopgrad_mode);
  parse_norm_axes(cfg.sim.norm_axes);
  parse_alignment(cfg.sim.alignment);

  if (!(cfg.output.ema_beta >= 0.0 && cfg.output.ema_beta < 1.0))
    fail("output.ema_beta", "must lie in [0,1)");
  if (cfg.precision != "f32" && cfg.precision != "f64")
    fail("precision", "expected f32 or f64, got '" + cfg.precision + "'");
}

// ---- serialization -------------------------------------------------------------

std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "model.kind = " << cfg.model.kind << "\n";
  os << "model.widths = " << join_list(cfg.model.widths) << "\n";
  os << "model.stage_channels = " << join_list(cfg.model.stage_channels) << "\n";
  os << "model.blocks_per_stage = " << cfg.model.blocks_per_stage << "\n";
  os << "model.classes = " << cfg.model.classes << "\n";
  os << "model.in_channels = " << cfg.model.in_channels << "\n";
  os << "model.image_size = " << cfg.model.image_size << "\n";
  os << "data.kind = " << cfg.data.kind << "\n";
  os << "data.n_train = " << cfg.data.n_train << "\n";
  os << "data.n_test = " << cfg.data.n_test << "\n";
  os << "data.dim = " << cfg.data.dim << "\n";
  os << "data.noise_std = " << real_str(cfg.data.noise_std) << "\n";
  os << "data.flip_rate = " << real_str(cfg.data.flip_rate) << "\n";
  os << "data.train_csv = " << cfg.data.train_csv << "\n";
  os << "data.test_csv = " << cfg.data.test_csv << "\n";
  os << "data.label_column = " << cfg.data.label_column << "\n";
  os << "data.train_images = " << cfg.data.train_images << "\n";
  os << "data.train_labels = " << cfg.data.train_labels << "\n";
  os << "data.test_images = " << cfg.data.test_images << "\n";
  os << "data.test_labels = " << cfg.data.test_labels << "\n";
  os << "optim.lr = " << real_str(cfg.optim.lr) << "\n";
  os << "optim.momentum = " << real_str(cfg.optim.momentum) << "\n";
  os << "optim.weight_decay = " << real_str(cfg.optim.weight_decay) << "\n";
  os << "optim.epochs = " << cfg.optim.epochs << "\n";
  os << "optim.batch_size = " << cfg.optim.batch_size << "\n";
  os << "optim.lr_schedule = "
     << (cfg.optim.schedule == LrSchedule::constant ? "constant" : "step") << "\n";
  os << "optim.milestones = " << join_list(cfg.optim.milestones) << "\n";
  os << "optim.gamma = " << real_str(cfg.optim.gamma) << "\n";
  os << "sim.enabled = " << (cfg.sim.enabled ? "true" : "false") << "\n";
  os << "sim.rho = " << real_str(cfg.sim.rho) << "\n";
  os << "sim.lambda = " << real_str(cfg.sim.lambda) << "\n";
  os << "sim.proj_dim = " << cfg.sim.proj_dim << "\n";
  os << "sim.proj_hidden = " << cfg.sim.proj_hidden << "\n";
  os << "sim.epsilon = " << real_str(cfg.sim.epsilon) << "\n";
  os << "sim.loss_type = " << cfg.sim.loss_type << "\n";
  os << "sim.stopgrad_mode = " << cfg.sim.stopgrad_mode << "\n";
  os << "sim.norm_axes = " << cfg.sim.norm_axes << "\n";
  os << "sim.alignment = " << cfg.sim.alignment << "\n";
  os << "sim.update_heads = " << (cfg.sim.update_heads ? "true" : "false") << "\n";
  os << "seeds.master = " << cfg.master_seed << "\n";
  os << "output.dir = " << cfg.output.dir << "\n";
  os << "output.per_block_trace = " << (cfg.output.per_block_trace ? "true" : "false")
     << "\n";
  os << "output.ema_beta = " << real_str(cfg.output.ema_beta) << "\n";
  os << "precision = " << cfg.precision << "\n";
  return os.str();
}

void save_config(const TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << config_to_text(cfg);
}

}  // namespace rhosim
