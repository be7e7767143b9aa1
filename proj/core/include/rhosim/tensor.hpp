#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rhosim/errors.hpp"
#include "rhosim/rng.hpp"

namespace rhosim {

template <class T>
class Tape;

namespace detail {

template <class T>
struct Storage {
  std::vector<std::int64_t> shape;
  std::vector<T> data;
  std::vector<T> grad;         // sized by Tape::backward, zero-initialized
  bool requires_grad = false;
  std::uint64_t tape_id = 0;   // id of the tape currently tracking this storage
};

std::int64_t numel_of(const std::vector<std::int64_t>& shape);
std::string shape_str(const std::vector<std::int64_t>& shape);

}  // namespace detail

/// Dense row-major tensor. Copies are shallow handles onto shared storage;
/// clone() makes a deep copy. Scalars are rank-0 tensors with one element.
template <class T>
class Tensor {
 public:
  using Shape = std::vector<std::int64_t>;

  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return full({}, value); }
  static Tensor from_data(Shape shape, std::vector<T> data);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  int rank() const { return static_cast<int>(st_->shape.size()); }
  std::int64_t dim(int i) const { return st_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(st_->data.size()); }

  std::span<T> data() { return st_->data; }
  std::span<const T> data() const { return st_->data; }

  bool requires_grad() const { return st_->requires_grad; }
  void set_requires_grad(bool b) { st_->requires_grad = b; }

  /// Gradient buffer; valid after Tape::backward for tensors that took part
  /// in the differentiated graph. Empty span otherwise.
  std::span<const T> grad() const { return st_->grad; }
  void zero_grad() { st_->grad.assign(st_->data.size(), T(0)); }

  /// Value of a rank-0 (or single-element) tensor.
  T item() const {
    if (numel() != 1)
      throw ContractError("item() requires a single-element tensor, got shape " +
                          detail::shape_str(st_->shape));
    return st_->data[0];
  }

  /// Deep copy; the copy does not participate in any tape.
  Tensor clone() const;

  /// Same data, grad_enabled=false, no tape edge to this tensor.
  Tensor detach() const;

  std::shared_ptr<detail::Storage<T>> storage() const { return st_; }

 private:
  std::shared_ptr<detail::Storage<T>> st_;
};

/// Append-only record of one forward pass (define-by-run). backward() visits
/// each node exactly once, in reverse insertion order, accumulating into
/// zero-initialized gradient buffers. One logical thread owns a tape.
template <class T>
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  /// RAII scope making this tape the thread's recording target.
  class Scope {
   public:
    explicit Scope(Tape& t);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape<T>* prev_;
  };

  /// RAII scope suppressing recording entirely (pure evaluation).
  class NoGrad {
   public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape<T>* prev_;
  };

  static Tape* current() noexcept;

  std::int64_t node_count() const { return static_cast<std::int64_t>(nodes_.size()); }
  std::int64_t visit_count() const { return visits_; }

  /// Reverse sweep from a scalar, tape-connected root.
  void backward(const Tensor<T>& root);

  // Used by op implementations.
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  void track(const std::shared_ptr<detail::Storage<T>>& st);
  std::uint64_t id() const { return id_; }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<detail::Storage<T>>> tracked_;
  std::uint64_t id_;
  std::int64_t visits_ = 0;
};

enum class ParamGroup { base, sim_head };

template <class T>
struct Parameter {
  Tensor<T> tensor;       // requires_grad=true
  std::string name;       // unique within a model, hierarchical
  ParamGroup group = ParamGroup::base;
  bool frozen = false;    // excluded from optimization and gradient norms
};

// ---- factories -------------------------------------------------------------

template <class T>
Tensor<T> random_uniform(typename Tensor<T>::Shape shape, double lo, double hi,
                         RngStream& rng);

template <class T>
Tensor<T> random_normal(typename Tensor<T>::Shape shape, double mean, double stddev,
                        RngStream& rng);

// ---- elementwise ops (second operand broadcasts: same rank, dims equal or 1)

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
template <class T>
Tensor<T> sqrt(const Tensor<T>& x);
template <class T>
Tensor<T> abs(const Tensor<T>& x);

// ---- linear algebra / structure --------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Cross-correlation with zero padding: x[B,C,H,W] * k[O,C,kh,kw].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, typename Tensor<T>::Shape shape);

/// B,C,H,W -> B,(H*W),C token view.
template <class T>
Tensor<T> bchw_to_tokens(const Tensor<T>& x);

/// Gathers rows along the token axis of x[B,N,C]; indices distinct, in [0,N).
template <class T>
Tensor<T> index_select_tokens(const Tensor<T>& x, std::span<const std::int64_t> idx);

// ---- reductions -------------------------------------------------------------

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims);
template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims);
template <class T>
Tensor<T> sum_all(const Tensor<T>& x);
template <class T>
Tensor<T> mean_all(const Tensor<T>& x);

/// Mean and population variance (divide by count) over the given axes,
/// keepdims shapes so both broadcast back onto x.
template <class T>
std::pair<Tensor<T>, Tensor<T>> moments(const Tensor<T>& x, const std::vector<int>& axes);

// ---- task loss ---------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label]; max-stabilized.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const std::int64_t> labels);

template <class T>
Tensor<T> detach(const Tensor<T>& x) { return x.detach(); }

// ---- compositions -----------------------------------------------------------

/// x[M,K] * w[K,P] + b[P]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Applies the affine map to the channel axis of x[B,n,C] per token.
template <class T>
Tensor<T> linear_tokens(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- gradient checking --------------------------------------------------------

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::int64_t worst_index = -1;
  double tape_grad = 0.0;
  double fd_grad = 0.0;
};

/// Compares tape gradients of `forward` against central finite differences.
/// `forward` must rebuild the loss from the current parameter values and be
/// deterministic; it is called once under a fresh tape and then twice per
/// parameter element without one. Relative error per element is
/// |g_tape - g_fd| / max(1e-8, |g_tape| + |g_fd|). 64-bit only.
FiniteDiffReport finite_diff_check(
    const std::function<Tensor<double>()>& forward,
    const std::vector<Parameter<double>*>& params, double step);

}  // namespace rhosim
