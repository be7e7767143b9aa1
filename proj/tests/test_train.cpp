#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracle_helpers.hpp"
#include "rhosim/train.hpp"

using namespace rhosim;

namespace {

using T64 = Tensor<double>;

Parameter<double> make_param(std::vector<double> data, const std::string& name) {
  const std::int64_t n = static_cast<std::int64_t>(data.size());
  Parameter<double> p{T64::from_data({n}, std::move(data)), name, ParamGroup::base,
                      false};
  p.tensor.set_requires_grad(true);
  return p;
}

// drive one sgd step with the gradient set through a tape: loss = sum(w .* p)
void step_with_gradient(Parameter<double>& p, const std::vector<double>& g,
                        const OptimConfig& cfg, double lr, SgdState<double>& state) {
  auto w = T64::from_data(p.tensor.shape(), g);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum_all(mul(p.tensor, w)));
  sgd_step<double>({&p}, cfg, lr, state);
}

TrainConfig tiny_mlp_config() {
  TrainConfig cfg;
  cfg.model.kind = "mlp";
  cfg.model.widths = {2, 12, 12};
  cfg.model.classes = 2;
  cfg.data.kind = "blobs";
  cfg.data.n_train = 128;
  cfg.data.n_test = 64;
  cfg.data.dim = 2;
  cfg.data.noise_std = 0.0;
  cfg.optim.epochs = 4;
  cfg.optim.batch_size = 32;
  cfg.sim.proj_dim = 6;
  cfg.sim.proj_hidden = 6;
  cfg.precision = "f64";
  return cfg;
}

}  // namespace

TEST_CASE("sgd_step recurrences") {
  OptimConfig cfg;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  SgdState<double> state;
  auto p = make_param({1.0}, "p");
  step_with_gradient(p, {0.5}, cfg, 0.1, state);
  CHECK(p.tensor.data()[0] == doctest::Approx(0.95).epsilon(1e-15));

  // two steps, momentum 0.9, g = 1, lr = 1: theta = -(1 + 1.9) = -2.9
  cfg.momentum = 0.9;
  SgdState<double> state2;
  auto q = make_param({0.0}, "q");
  step_with_gradient(q, {1.0}, cfg, 1.0, state2);
  step_with_gradient(q, {1.0}, cfg, 1.0, state2);
  CHECK(q.tensor.data()[0] == doctest::Approx(-2.9).epsilon(1e-15));

  // pure decay: wd = 0.1, g = 0, theta = 2, lr = 0.5 -> 1.9
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.1;
  SgdState<double> state3;
  auto r = make_param({2.0}, "r");
  step_with_gradient(r, {0.0}, cfg, 0.5, state3);
  CHECK(r.tensor.data()[0] == doctest::Approx(1.9).epsilon(1e-15));

  // lr = 0 leaves parameters bitwise unchanged
  SgdState<double> state4;
  auto s = make_param({0.3141592653589793}, "s");
  const double before = s.tensor.data()[0];
  step_with_gradient(s, {2.5}, cfg, 0.0, state4);
  CHECK(s.tensor.data()[0] == before);

  // frozen parameters are skipped entirely
  SgdState<double> state5;
  auto f = make_param({1.5}, "f");
  f.frozen = true;
  step_with_gradient(f, {1.0}, cfg, 0.5, state5);
  CHECK(f.tensor.data()[0] == 1.5);

  // non-finite gradient names the parameter
  SgdState<double> state6;
  auto n = make_param({1.0}, "naughty");
  auto w = T64::from_data({1}, {std::numeric_limits<double>::infinity()});
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum_all(mul(n.tensor, w)));
  try {
    sgd_step<double>({&n}, cfg, 0.1, state6);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("naughty") != std::string::npos);
  }
}

TEST_CASE("grad_global_norm") {
  CHECK(grad_global_norm({{0, 0}, {0}}) == 0.0);
  CHECK(grad_global_norm({{3}, {4}}) == 5.0);

  RngStream rng(15);
  std::vector<std::vector<double>> slots;
  std::vector<double> flat;
  for (int s = 0; s < 5; ++s) {
    std::vector<double> slot;
    for (int i = 0; i < 7; ++i) {
      slot.push_back(rng.normal());
      flat.push_back(slot.back());
    }
    slots.push_back(std::move(slot));
  }
  double acc = 0;
  for (double v : flat) acc += v * v;
  CHECK(std::fabs(grad_global_norm(slots) - std::sqrt(acc)) <= 1e-12);
}

TEST_CASE("ema_update") {
  CHECK(ema_update(0.0, 1.0, 0.98) == doctest::Approx(0.02).epsilon(1e-15));
  // constant stream is a fixed point
  EmaTracker t(0.9);
  for (int i = 0; i < 10; ++i) CHECK(t.update(2.5) == 2.5);

  // step response converges geometrically: 1 - beta^t
  EmaTracker s(0.5);
  s.update(0.0);
  double expected = 0.0;
  for (int i = 1; i <= 20; ++i) {
    const double v = s.update(1.0);
    expected = 1.0 - std::pow(0.5, i);
    CHECK(v == doctest::Approx(expected).epsilon(1e-12));
  }

  // envelope property on a random stream
  RngStream rng(5);
  EmaTracker e(0.98);
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 200; ++i) {
    const double x = std::fabs(rng.normal()) + 0.1;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    const double v = e.update(x);
    CHECK(v >= lo);
    CHECK(v <= hi);
  }

  CHECK_THROWS_AS(ema_update(0.0, 1.0, 1.0), ValueError);
}

TEST_CASE("pca2") {
  // points on the line y = 2x: the second component carries nothing
  std::vector<double> line;
  RngStream rng(21);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.normal();
    line.push_back(x);
    line.push_back(2 * x);
  }
  auto res = pca2(T64::from_data({200, 2}, line));
  CHECK(res.eigenvalues[1] <= 1e-9 * res.eigenvalues[0]);

  // isotropic gaussian: both components explain similar variance
  std::vector<double> iso;
  for (int i = 0; i < 20000; ++i) iso.push_back(rng.normal());
  auto round = pca2(T64::from_data({10000, 2}, iso));
  CHECK(res.degenerate == false);
  CHECK(round.eigenvalues[0] / round.eigenvalues[1] <= 1.1);

  // projection variances equal the closed-form 2x2 eigenvalues
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> pts;
    RngStream r2(derive_seed(500, trial));
    const double sx = 0.5 + r2.uniform01() * 2.0;
    const double sy = 0.5 + r2.uniform01() * 2.0;
    const double rot = r2.uniform01() * 3.0;
    for (int i = 0; i < 400; ++i) {
      const double a = sx * r2.normal(), b = sy * r2.normal();
      pts.push_back(std::cos(rot) * a - std::sin(rot) * b);
      pts.push_back(std::sin(rot) * a + std::cos(rot) * b);
    }
    auto proj = pca2(T64::from_data({400, 2}, pts));
    // explicit covariance of the input
    double mx = 0, my = 0;
    for (int i = 0; i < 400; ++i) {
      mx += pts[i * 2];
      my += pts[i * 2 + 1];
    }
    mx /= 400;
    my /= 400;
    double cxx = 0, cxy = 0, cyy = 0;
    for (int i = 0; i < 400; ++i) {
      const double dx = pts[i * 2] - mx, dy = pts[i * 2 + 1] - my;
      cxx += dx * dx;
      cxy += dx * dy;
      cyy += dy * dy;
    }
    cxx /= 400;
    cxy /= 400;
    cyy /= 400;
    double l1, l2;
    oracle::eig2x2(cxx, cxy, cyy, &l1, &l2);
    // population variance of each projected column
    for (int comp = 0; comp < 2; ++comp) {
      double mean = 0;
      for (int i = 0; i < 400; ++i) mean += proj.projection.data()[i * 2 + comp];
      mean /= 400;
      double var = 0;
      for (int i = 0; i < 400; ++i) {
        const double d = proj.projection.data()[i * 2 + comp] - mean;
        var += d * d;
      }
      var /= 400;
      CHECK(std::fabs(var - (comp == 0 ? l1 : l2)) <= 1e-6);
    }
  }

  // zero-variance input: all-zero projection plus the warning flag
  auto degen = pca2(T64::full({5, 3}, 1.25));
  CHECK(degen.degenerate);
  for (double v : degen.projection.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(pca2(T64::zeros({1, 4})), ValueError);
}

TEST_CASE("evaluate") {
  // a model that always favors class 0 scores 50% on a balanced set
  auto m = build_mlp<double>({2, 4}, 2, 3);
  for (auto* p : m.parameters()) {
    for (auto& v : p->tensor.data()) v = 0.0;
    if (p->name == "model.head.b") p->tensor.data()[0] = 10.0;
  }
  auto data = gen_blobs<double>(100, 2, 2, 0.3, 8);
  auto [loss, acc] = evaluate(m, data);
  CHECK(acc == 0.5);
  CHECK(loss > 0.0);

  // evaluation is pure: repeating it changes nothing
  auto params = sorted_by_name(m.parameters());
  const std::uint64_t digest_before = params_digest(params);
  auto second = evaluate(m, data);
  CHECK(second.first == loss);
  CHECK(second.second == acc);
  CHECK(params_digest(params) == digest_before);
}

TEST_CASE("training reaches 100% on separable blobs") {
  TrainConfig cfg = tiny_mlp_config();
  cfg.optim.epochs = 50;  // 4 batches/epoch -> 200 steps
  cfg.sim.enabled = true;
  RunArtifacts art = run_training(cfg);
  CHECK(art.steps == 200);
  double last_train_acc = 0;
  for (const auto& row : art.metrics)
    if (row.split == "train") last_train_acc = row.accuracy;
  CHECK(last_train_acc == 1.0);
  CHECK(art.final_test_accuracy == 1.0);
}

TEST_CASE("metrics accounting holds on every train row") {
  TrainConfig cfg = tiny_mlp_config();
  RunArtifacts art = run_training(cfg);
  for (const auto& row : art.metrics) {
    if (row.split != "train") continue;
    CHECK(std::fabs(row.total_loss - row.task_loss - cfg.sim.lambda * row.sim_loss) <=
          1e-9);
    CHECK(std::isfinite(row.grad_norm));
    CHECK(std::isfinite(row.grad_norm_ema));
  }

  cfg.sim.enabled = false;
  RunArtifacts off = run_training(cfg);
  for (const auto& row : off.metrics) CHECK(row.sim_loss == 0.0);
}

TEST_CASE("determinism and stream isolation") {
  TrainConfig cfg = tiny_mlp_config();
  RunArtifacts a = run_training(cfg);
  RunArtifacts b = run_training(cfg);
  CHECK(a.final_params_digest == b.final_params_digest);
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].task_loss == b.metrics[i].task_loss);
    CHECK(a.metrics[i].grad_norm == b.metrics[i].grad_norm);
  }

  // disabled regularizer and lambda = 0 share the base trajectory bitwise
  TrainConfig off = cfg;
  off.sim.enabled = false;
  TrainConfig lambda0 = cfg;
  lambda0.sim.enabled = true;
  lambda0.sim.lambda = 0.0;
  RunArtifacts ra = run_training(off);
  RunArtifacts rb = run_training(lambda0);
  REQUIRE(ra.base_epoch_digests.size() == rb.base_epoch_digests.size());
  for (std::size_t i = 0; i < ra.base_epoch_digests.size(); ++i)
    CHECK(ra.base_epoch_digests[i] == rb.base_epoch_digests[i]);
}

TEST_CASE("nan in the data aborts with the step index") {
  TrainConfig cfg = tiny_mlp_config();
  cfg.optim.lr = 1e9;  // diverges to non-finite losses within the first epoch
  cfg.optim.epochs = 30;
  try {
    run_training(cfg);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("ablate covers the grid and aggregates cells") {
  TrainConfig cfg = tiny_mlp_config();
  cfg.optim.epochs = 2;

  // degenerate grid: one row that matches a standalone run
  auto res = ablate(cfg, {0.2}, {5e-3}, {7}, 1, "");
  REQUIRE(res.rows.size() == 1);
  TrainConfig manual = cfg;
  manual.master_seed = 7;
  manual.sim.enabled = true;
  manual.sim.rho = 0.2;
  manual.sim.lambda = 5e-3;
  RunArtifacts direct = run_training(manual);
  CHECK(res.rows[0].final_test_acc == direct.final_test_accuracy);
  CHECK(res.rows[0].mean_sim_loss == direct.mean_sim_loss);
  CHECK(res.rows[0].status == "ok");

  // rho = 0 rows run with the regularizer disabled
  auto res2 = ablate(cfg, {0.0, 0.2}, {5e-3}, {1, 2, 3}, 2, "");
  REQUIRE(res2.rows.size() == 6);
  for (const auto& row : res2.rows)
    if (row.rho == 0.0) CHECK(row.mean_sim_loss == 0.0);

  // per-cell stats recomputed from the raw rows
  REQUIRE(res2.cells.size() == 2);
  for (const auto& cell : res2.cells) {
    CHECK(cell.runs == 3);
    double mean = 0;
    std::vector<double> accs;
    for (const auto& row : res2.rows)
      if (row.rho == cell.rho && row.lambda == cell.lambda) {
        accs.push_back(row.final_test_acc);
        mean += row.final_test_acc;
      }
    mean /= 3;
    double var = 0;
    for (double a : accs) var += (a - mean) * (a - mean);
    CHECK(cell.acc_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(cell.acc_std == doctest::Approx(std::sqrt(var / 3)).epsilon(1e-12));
  }
}

TEST_CASE("params save/load round trip and digest") {
  auto m = build_mlp<double>({3, 5}, 2, 77);
  auto params = sorted_by_name(m.parameters());
  const std::uint64_t digest = params_digest(params);
  const std::string path =
      (std::filesystem::temp_directory_path() / "rhosim_params_test.bin").string();
  save_params(params, path);

  auto m2 = build_mlp<double>({3, 5}, 2, 78);  // different seed
  auto params2 = sorted_by_name(m2.parameters());
  CHECK(params_digest(params2) != digest);
  load_params(params2, path);
  CHECK(params_digest(params2) == digest);

  auto wrong = build_mlp<double>({3, 6}, 2, 1);
  CHECK_THROWS_AS(load_params(sorted_by_name(wrong.parameters()), path), FormatError);
}
