#include "rhosim/sim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rhosim {

void SimConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0))
    throw ValueError("sim: rho must lie in (0,1], got " + std::to_string(rho));
  if (lambda < 0.0) throw ValueError("sim: lambda must be non-negative");
  if (epsilon <= 0.0) throw ValueError("sim: epsilon must be positive");
  if (proj_dim < 1 || proj_hidden < 1)
    throw ValueError("sim: projector widths must be positive");
}

std::vector<TapPlan> plan_taps(const std::vector<BlockShape>& blocks,
                               const SimConfig& cfg) {
  std::vector<TapPlan> plans;
  for (const BlockShape& b : blocks) {
    TapPlan p;
    p.block_index = b.index;
    p.c_in = b.c_in;
    p.c_out = b.c_out;
    p.n_in = b.n_in();
    p.n_out = b.n_out();
    p.in_w = b.in_w;
    p.out_w = b.out_w;
    p.stride_h = b.stride_h;
    p.stride_w = b.stride_w;
    if (p.n_in == p.n_out) {
      p.identity_map = true;
      plans.push_back(p);
      continue;
    }
    if (cfg.alignment != AlignPolicy::stride_align) continue;
    // Downsampling block: keep it when every output token's anchor
    // row*stride_h, col*stride_w lands inside the input grid. The map is then
    // injective into [0, n_in).
    if (b.stride_h < 1 || b.stride_w < 1) continue;
    if (b.out_h < 1 || b.out_w < 1) continue;
    const bool rows_ok = (b.out_h - 1) * b.stride_h <= b.in_h - 1;
    const bool cols_ok = (b.out_w - 1) * b.stride_w <= b.in_w - 1;
    if (!rows_ok || !cols_ok) continue;
    p.identity_map = false;
    plans.push_back(p);
  }
  std::sort(plans.begin(), plans.end(),
            [](const TapPlan& a, const TapPlan& b) { return a.block_index < b.block_index; });
  return plans;
}

std::int64_t sampled_token_count(std::int64_t N, double rho) {
  if (N <= 0) throw ValueError("sample_token_indices: N must be positive");
  if (!(rho > 0.0 && rho <= 1.0))
    throw ValueError("sample_token_indices: rho must lie in (0,1]");
  // +1e-9 guards the binary rounding of products like 0.6*5.
  const std::int64_t n =
      static_cast<std::int64_t>(std::floor(rho * static_cast<double>(N) + 1e-9));
  return std::max<std::int64_t>(std::int64_t{1}, std::min(n, N));
}

std::vector<std::int64_t> sample_token_indices(std::int64_t N, double rho,
                                               RngStream& rng) {
  const std::int64_t n = sampled_token_count(N, rho);
  std::vector<std::int64_t> pool(static_cast<std::size_t>(N));
  std::iota(pool.begin(), pool.end(), std::int64_t{0});
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t j =
        i + static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(N - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(n));
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---- heads ------------------------------------------------------------------

namespace {

template <class T>
Parameter<T> make_weight(std::int64_t fan_in, std::int64_t fan_out,
                         const std::string& name, RngStream& rng, bool frozen) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Parameter<T> p{random_uniform<T>({fan_in, fan_out}, -bound, bound, rng), name,
                 ParamGroup::sim_head, frozen};
  p.tensor.set_requires_grad(true);
  return p;
}

template <class T>
Parameter<T> make_bias(std::int64_t width, const std::string& name, bool frozen) {
  Parameter<T> p{Tensor<T>::zeros({width}), name, ParamGroup::sim_head, frozen};
  p.tensor.set_requires_grad(true);
  return p;
}

template <class T>
Projector<T> make_projector(std::int64_t c_in, const SimConfig& cfg,
                            const std::string& prefix, RngStream& rng, bool frozen) {
  Projector<T> proj;
  proj.w0 = make_weight<T>(c_in, cfg.proj_hidden, prefix + ".l0.w", rng, frozen);
  proj.b0 = make_bias<T>(cfg.proj_hidden, prefix + ".l0.b", frozen);
  proj.w1 = make_weight<T>(cfg.proj_hidden, cfg.proj_hidden, prefix + ".l1.w", rng, frozen);
  proj.b1 = make_bias<T>(cfg.proj_hidden, prefix + ".l1.b", frozen);
  proj.w2 = make_weight<T>(cfg.proj_hidden, cfg.proj_dim, prefix + ".l2.w", rng, frozen);
  proj.b2 = make_bias<T>(cfg.proj_dim, prefix + ".l2.b", frozen);
  return proj;
}

}  // namespace

template <class T>
SimBank<T> SimBank<T>::init(std::vector<TapPlan> plans, const SimConfig& cfg) {
  cfg.validate();
  SimBank<T> bank;
  bank.cfg_ = cfg;
  bank.plans_ = std::move(plans);
  // Literal stop-gradient leaves the input-branch projector without any
  // gradient path, so it is excluded from optimization and stays at its
  // initialization.
  const bool h1_frozen = cfg.stopgrad_mode == StopgradMode::literal;
  for (const TapPlan& p : bank.plans_) {
    RngStream rng(derive_seed(cfg.sim_seed, "head-init",
                              static_cast<std::uint64_t>(p.block_index)));
    const std::string base = "sim.block" + std::to_string(p.block_index);
    SimHead<T> head;
    head.block_index = p.block_index;
    head.h1 = make_projector<T>(p.c_in, cfg, base + ".h1", rng, h1_frozen);
    head.h2 = make_projector<T>(p.c_out, cfg, base + ".h2", rng, false);
    head.gw = make_weight<T>(cfg.proj_dim, cfg.proj_dim, base + ".g.w", rng, false);
    head.gb = make_bias<T>(cfg.proj_dim, base + ".g.b", false);
    bank.heads_.push_back(std::move(head));
  }
  return bank;
}

template <class T>
std::vector<Parameter<T>*> SimBank<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (SimHead<T>& h : heads_) {
    for (Projector<T>* proj : {&h.h1, &h.h2}) {
      out.push_back(&proj->w0);
      out.push_back(&proj->b0);
      out.push_back(&proj->w1);
      out.push_back(&proj->b1);
      out.push_back(&proj->w2);
      out.push_back(&proj->b2);
    }
    out.push_back(&h.gw);
    out.push_back(&h.gb);
  }
  return out;
}

template <class T>
std::int64_t SimBank<T>::param_count() const {
  std::int64_t n = 0;
  for (const SimHead<T>& h : heads_) {
    for (const Projector<T>* proj : {&h.h1, &h.h2})
      n += proj->w0.tensor.numel() + proj->b0.tensor.numel() + proj->w1.tensor.numel() +
           proj->b1.tensor.numel() + proj->w2.tensor.numel() + proj->b2.tensor.numel();
    n += h.gw.tensor.numel() + h.gb.tensor.numel();
  }
  return n;
}

std::int64_t head_param_count(std::int64_t c_in, std::int64_t c_out,
                              const SimConfig& cfg) {
  const std::int64_t h = cfg.proj_hidden;
  const std::int64_t d = cfg.proj_dim;
  auto projector = [&](std::int64_t c) {
    return (c * h + h) + (h * h + h) + (h * d + d);
  };
  return projector(c_in) + projector(c_out) + (d * d + d);
}

// ---- forward pieces -------------------------------------------------------------

template <class T>
Tensor<T> project(const Tensor<T>& tokens, const Projector<T>& proj) {
  if (tokens.rank() != 3)
    throw DimensionError("project: expects tokens[B,n,C], got " +
                         detail::shape_str(tokens.shape()));
  if (tokens.dim(2) != proj.in_width())
    throw DimensionError("project: token width " + std::to_string(tokens.dim(2)) +
                         " does not match projector input width " +
                         std::to_string(proj.in_width()));
  Tensor<T> x = relu(linear_tokens(tokens, proj.w0.tensor, proj.b0.tensor));
  x = relu(linear_tokens(x, proj.w1.tensor, proj.b1.tensor));
  return linear_tokens(x, proj.w2.tensor, proj.b2.tensor);
}

template <class T>
Tensor<T> normalize_tokens(const Tensor<T>& h, NormAxes mode, double eps) {
  if (h.rank() != 3)
    throw DimensionError("normalize_tokens: expects h[B,n,D], got " +
                         detail::shape_str(h.shape()));
  if (eps <= 0.0) throw ValueError("normalize_tokens: eps must be positive");
  const std::int64_t n = h.dim(1);
  // Token statistics over a single token are degenerate; fall back to flat.
  const NormAxes eff = n == 1 ? NormAxes::flat : mode;
  const std::vector<int> axes = eff == NormAxes::token ? std::vector<int>{1}
                                                       : std::vector<int>{1, 2};
  auto [mean, var] = moments(h, axes);
  Tensor<T> stddev = rhosim::sqrt(var);
  return rhosim::div(sub(h, mean), add_scalar(stddev, static_cast<T>(eps)));
}

template <class T>
Tensor<T> apply_stopgrad(const Tensor<T>& x, StopgradMode mode, TargetStage stage) {
  const bool cut = (mode == StopgradMode::feature && stage == TargetStage::raw) ||
                   (mode == StopgradMode::literal && stage == TargetStage::processed);
  return cut ? detach(x) : x;
}

template <class T>
Tensor<T> block_sim_loss(const Tensor<T>& target, const Tensor<T>& pred_input,
                         const SimHead<T>& head, const SimConfig& cfg) {
  if (target.rank() != 3 || pred_input.rank() != 3 ||
      target.shape() != pred_input.shape())
    throw DimensionError("block_sim_loss: branch shapes differ, " +
                         detail::shape_str(target.shape()) + " vs " +
                         detail::shape_str(pred_input.shape()));
  Tensor<T> t = target;
  Tensor<T> q = pred_input;
  if (cfg.loss_type == SimLossType::mse_normalized) {
    t = normalize_tokens(t, cfg.norm_axes, cfg.epsilon);
    q = normalize_tokens(q, cfg.norm_axes, cfg.epsilon);
  }
  Tensor<T> pred = linear_tokens(q, head.gw.tensor, head.gb.tensor);
  switch (cfg.loss_type) {
    case SimLossType::mse:
    case SimLossType::mse_normalized: {
      Tensor<T> d = sub(pred, t);
      return mean_all(mul(d, d));
    }
    case SimLossType::l1:
      return mean_all(rhosim::abs(sub(pred, t)));
    case SimLossType::cosine: {
      // 1 - dot/(|a||b|) per token; a tiny floor under the squared norms keeps
      // the gradient finite for zero vectors.
      Tensor<T> dot = reduce_sum(mul(pred, t), {2}, false);
      Tensor<T> np = rhosim::sqrt(add_scalar(reduce_sum(mul(pred, pred), {2}, false),
                                             static_cast<T>(1e-24)));
      Tensor<T> nt = rhosim::sqrt(add_scalar(reduce_sum(mul(t, t), {2}, false),
                                             static_cast<T>(1e-24)));
      Tensor<T> cos = rhosim::div(dot, mul(np, nt));
      return mean_all(add_scalar(mul_scalar(cos, T(-1)), T(1)));
    }
  }
  throw ContractError("block_sim_loss: unknown loss type");
}

template <class T>
Tensor<T> combine_losses(const Tensor<T>& task, const Tensor<T>& sim, double lambda) {
  if (!std::isfinite(static_cast<double>(task.item())))
    throw NumericError("combine_losses: task loss is not finite");
  if (!std::isfinite(static_cast<double>(sim.item())))
    throw NumericError("combine_losses: sim loss is not finite");
  return add(task, mul_scalar(sim, static_cast<T>(lambda)));
}

// ---- total loss ----------------------------------------------------------------

namespace {

bool is_full_identity(const std::vector<std::int64_t>& idx, std::int64_t N) {
  if (static_cast<std::int64_t>(idx.size()) != N) return false;
  for (std::int64_t i = 0; i < N; ++i)
    if (idx[static_cast<std::size_t>(i)] != i) return false;
  return true;
}

}  // namespace

template <class T>
typename SimBank<T>::LossResult SimBank<T>::loss(const std::vector<SimTap<T>>& taps,
                                                 std::uint64_t step,
                                                 SimTargetCache<T>* cache) {
  std::map<int, const SimTap<T>*> by_index;
  for (const SimTap<T>& tap : taps) by_index[tap.block_index] = &tap;

  LossResult res;
  res.total = Tensor<T>::scalar(T(0));
  for (std::size_t hi = 0; hi < heads_.size(); ++hi) {
    const TapPlan& plan = plans_[hi];
    SimHead<T>& head = heads_[hi];
    auto it = by_index.find(plan.block_index);
    if (it == by_index.end())
      throw ContractError("sim loss: no tap for planned block " +
                          std::to_string(plan.block_index));
    const SimTap<T>& tap = *it->second;
    if (tap.input_tokens.rank() != 3 || tap.output_tokens.rank() != 3 ||
        tap.input_tokens.dim(1) != plan.n_in || tap.input_tokens.dim(2) != plan.c_in ||
        tap.output_tokens.dim(1) != plan.n_out || tap.output_tokens.dim(2) != plan.c_out)
      throw ContractError("sim loss: tap shapes disagree with the plan for block " +
                          std::to_string(plan.block_index));

    RngStream rng(derive_seed(cfg_.sim_seed,
                              static_cast<std::uint64_t>(plan.block_index), step));
    std::vector<std::int64_t> idx_out =
        sample_token_indices(plan.n_out, cfg_.rho, rng);
    std::vector<std::int64_t> idx_in(idx_out.size());
    for (std::size_t i = 0; i < idx_out.size(); ++i)
      idx_in[i] = plan.map_output_to_input(idx_out[i]);

    Tensor<T> zin = tap.input_tokens;
    Tensor<T> zout = tap.output_tokens;
    if (!is_full_identity(idx_in, plan.n_in))
      zin = index_select_tokens(zin, idx_in);
    if (!is_full_identity(idx_out, plan.n_out))
      zout = index_select_tokens(zout, idx_out);

    zin = apply_stopgrad(zin, cfg_.stopgrad_mode, TargetStage::raw);
    if (cache != nullptr && cfg_.stopgrad_mode == StopgradMode::feature) {
      if (cache->mode == SimTargetCache<T>::Mode::record) {
        cache->values[plan.block_index] = {zin.data().begin(), zin.data().end()};
      } else {
        zin = Tensor<T>::from_data(zin.shape(), cache->values.at(plan.block_index));
      }
    }

    Tensor<T> target = project(zin, head.h1);
    target = apply_stopgrad(target, cfg_.stopgrad_mode, TargetStage::processed);
    if (cache != nullptr && cfg_.stopgrad_mode == StopgradMode::literal) {
      if (cache->mode == SimTargetCache<T>::Mode::record) {
        cache->values[plan.block_index] = {target.data().begin(), target.data().end()};
      } else {
        target = Tensor<T>::from_data(target.shape(), cache->values.at(plan.block_index));
      }
    }

    Tensor<T> pred_input = project(zout, head.h2);
    Tensor<T> bl = block_sim_loss(target, pred_input, head, cfg_);

    res.total = add(res.total, bl);
    SimBlockRecord rec;
    rec.block_index = plan.block_index;
    rec.loss = static_cast<double>(bl.item());
    rec.output_indices = std::move(idx_out);
    rec.input_indices = std::move(idx_in);
    res.report.sampled_counts.push_back(
        static_cast<std::int64_t>(rec.output_indices.size()));
    res.report.per_block.push_back(std::move(rec));
    res.report.total += res.report.per_block.back().loss;
  }
  return res;
}

// ---- explicit instantiations ------------------------------------------------------

#define RHOSIM_INSTANTIATE_SIM(T)                                                     \
  template class SimBank<T>;                                                          \
  template Tensor<T> project<T>(const Tensor<T>&, const Projector<T>&);               \
  template Tensor<T> normalize_tokens<T>(const Tensor<T>&, NormAxes, double);         \
  template Tensor<T> apply_stopgrad<T>(const Tensor<T>&, StopgradMode, TargetStage);  \
  template Tensor<T> block_sim_loss<T>(const Tensor<T>&, const Tensor<T>&,            \
                                       const SimHead<T>&, const SimConfig&);          \
  template Tensor<T> combine_losses<T>(const Tensor<T>&, const Tensor<T>&, double);

RHOSIM_INSTANTIATE_SIM(float)
RHOSIM_INSTANTIATE_SIM(double)

#undef RHOSIM_INSTANTIATE_SIM

}  // namespace rhosim
