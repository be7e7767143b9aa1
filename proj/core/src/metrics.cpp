#include "rhosim/metrics.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace rhosim {

const char kMetricsHeader[] =
    "step,epoch,split,task_loss,sim_loss,total_loss,accuracy,grad_norm,"
    "grad_norm_ema,lr,seed";
const char kAblationHeader[] = "rho,lambda,seed,final_test_acc,mean_sim_loss,status";
const char kCellsHeader[] =
    "rho,lambda,runs,acc_mean,acc_std,sim_loss_mean,sim_loss_std";
const char kPerBlockHeader[] = "step,block_index,sim_loss";
const char kTraceHeader[] = "step,grad_norm,grad_norm_ema";

std::string format_real(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%#.9g", v);
  return buf;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, std::ostream& out) {
  out << kMetricsHeader << "\n";
  for (const MetricsRow& r : rows) {
    out << r.step << ',' << r.epoch << ',' << r.split << ',' << format_real(r.task_loss)
        << ',' << format_real(r.sim_loss) << ',' << format_real(r.total_loss) << ','
        << format_real(r.accuracy) << ',' << format_real(r.grad_norm) << ','
        << format_real(r.grad_norm_ema) << ',' << format_real(r.lr) << ',' << r.seed
        << "\n";
  }
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_metrics_csv(rows, out);
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double to_real(const std::string& s, const std::string& path) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw FormatError(path + ": bad numeric field '" + s + "'");
  return v;
}

}  // namespace

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty metrics file");
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 11) throw FormatError(path + ": bad metrics row '" + line + "'");
    MetricsRow r;
    r.step = std::strtoll(f[0].c_str(), nullptr, 10);
    r.epoch = static_cast<int>(std::strtol(f[1].c_str(), nullptr, 10));
    r.split = f[2];
    r.task_loss = to_real(f[3], path);
    r.sim_loss = to_real(f[4], path);
    r.total_loss = to_real(f[5], path);
    r.accuracy = to_real(f[6], path);
    r.grad_norm = to_real(f[7], path);
    r.grad_norm_ema = to_real(f[8], path);
    r.lr = to_real(f[9], path);
    r.seed = std::strtoull(f[10].c_str(), nullptr, 10);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_per_block_csv(const std::vector<PerBlockRow>& rows, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << kPerBlockHeader << "\n";
  for (const PerBlockRow& r : rows)
    out << r.step << ',' << r.block_index << ',' << format_real(r.loss) << "\n";
}

void write_ablation_summary(const std::vector<AblationRow>& rows,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << kAblationHeader << "\n";
  for (const AblationRow& r : rows)
    out << format_real(r.rho) << ',' << format_real(r.lambda) << ',' << r.seed << ','
        << format_real(r.final_test_acc) << ',' << format_real(r.mean_sim_loss) << ','
        << r.status << "\n";
}

std::vector<AblationRow> read_ablation_summary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": empty summary file");
  std::vector<AblationRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_fields(line);
    if (f.size() != 6) throw FormatError(path + ": bad summary row '" + line + "'");
    AblationRow r;
    r.rho = to_real(f[0], path);
    r.lambda = to_real(f[1], path);
    r.seed = std::strtoull(f[2].c_str(), nullptr, 10);
    r.final_test_acc = to_real(f[3], path);
    r.mean_sim_loss = to_real(f[4], path);
    r.status = f[5];
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_ablation_cells(const std::vector<AblationCell>& cells,
                          const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << kCellsHeader << "\n";
  for (const AblationCell& c : cells)
    out << format_real(c.rho) << ',' << format_real(c.lambda) << ',' << c.runs << ','
        << format_real(c.acc_mean) << ',' << format_real(c.acc_std) << ','
        << format_real(c.sim_mean) << ',' << format_real(c.sim_std) << "\n";
}

}  // namespace rhosim
