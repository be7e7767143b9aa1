#pragma once

#include <string>
#include <vector>

#include "rhosim/tensor.hpp"

namespace rhosim {

struct GradcheckCase {
  std::string name;
  FiniteDiffReport report;
  bool pass = false;
};

struct GradcheckOptions {
  std::string model = "mlp";  // mlp | resnet
  bool sim_on = true;
  double step = 1e-6;
  double tolerance = 1e-5;
};

/// Canonical 64-bit gradient checks: a 2-block MLP or a 2-stage residual CNN
/// on a fixed random batch, the combined objective checked against central
/// finite differences. With the regularizer on, every (loss type, stop-grad
/// mode) pair gets a case; stop-gradient targets are recorded on the taped
/// pass and replayed during the re-evaluations, since the differentiated
/// objective holds them constant.
std::vector<GradcheckCase> run_gradcheck(const GradcheckOptions& opts);

}  // namespace rhosim
