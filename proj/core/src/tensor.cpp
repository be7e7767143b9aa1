#include "rhosim/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace rhosim {

namespace detail {

std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace detail

namespace {

std::atomic<std::uint64_t> g_next_tape_id{1};

template <class T>
Tape<T>*& current_tape_ref() {
  static thread_local Tape<T>* t = nullptr;
  return t;
}

// Row-major iteration over `shape` while tracking the flat index into a
// same-rank shape whose dims are each equal or 1 (stride 0 on broadcast dims).
template <class F>
void for_each_bcast(const std::vector<std::int64_t>& shape,
                    const std::vector<std::int64_t>& bshape, F&& f) {
  const int r = static_cast<int>(shape.size());
  std::vector<std::int64_t> bstride(shape.size(), 0);
  std::int64_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    bstride[i] = (bshape[i] == 1) ? 0 : s;
    s *= bshape[i];
  }
  const std::int64_t total = detail::numel_of(shape);
  std::vector<std::int64_t> idx(shape.size(), 0);
  std::int64_t ib = 0;
  for (std::int64_t ia = 0; ia < total; ++ia) {
    f(ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      ib += bstride[d];
      if (idx[d] < shape[d]) break;
      ib -= bstride[d] * shape[d];
      idx[d] = 0;
    }
  }
}

template <class T>
void check_defined(const Tensor<T>& t, const char* who) {
  if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

template <class T>
void check_same_rank_bcast(const Tensor<T>& a, const Tensor<T>& b, const char* who) {
  if (a.rank() != b.rank())
    throw DimensionError(std::string(who) + ": rank mismatch " +
                         detail::shape_str(a.shape()) + " vs " +
                         detail::shape_str(b.shape()));
  for (int i = 0; i < a.rank(); ++i) {
    if (b.dim(i) != a.dim(i) && b.dim(i) != 1)
      throw DimensionError(std::string(who) + ": shape " + detail::shape_str(b.shape()) +
                           " does not broadcast to " + detail::shape_str(a.shape()));
  }
}

// Whether an op over these inputs should record a backward node.
template <class T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

template <class T>
void track_all(std::initializer_list<const Tensor<T>*> tensors) {
  Tape<T>* tape = Tape<T>::current();
  for (const Tensor<T>* t : tensors) tape->track(t->storage());
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::int64_t n = detail::numel_of(shape);
  auto st = std::make_shared<detail::Storage<T>>();
  st->shape = std::move(shape);
  st->data.assign(static_cast<std::size_t>(n), T(0));
  Tensor t;
  t.st_ = std::move(st);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.st_->data.begin(), t.st_->data.end(), value);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data) {
  const std::int64_t n = detail::numel_of(shape);
  if (n != static_cast<std::int64_t>(data.size()))
    throw DimensionError("from_data: shape " + detail::shape_str(shape) + " needs " +
                         std::to_string(n) + " values, got " +
                         std::to_string(data.size()));
  auto st = std::make_shared<detail::Storage<T>>();
  st->shape = std::move(shape);
  st->data = std::move(data);
  Tensor t;
  t.st_ = std::move(st);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  Tensor t = from_data(st_->shape, st_->data);
  return t;
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return clone();
}

// ---- Tape -------------------------------------------------------------------

template <class T>
Tape<T>::Tape() : id_(g_next_tape_id.fetch_add(1, std::memory_order_relaxed)) {}

template <class T>
Tape<T>::~Tape() = default;

template <class T>
Tape<T>::Scope::Scope(Tape& t) : prev_(current_tape_ref<T>()) {
  current_tape_ref<T>() = &t;
}

template <class T>
Tape<T>::Scope::~Scope() {
  current_tape_ref<T>() = prev_;
}

template <class T>
Tape<T>::NoGrad::NoGrad() : prev_(current_tape_ref<T>()) {
  current_tape_ref<T>() = nullptr;
}

template <class T>
Tape<T>::NoGrad::~NoGrad() {
  current_tape_ref<T>() = prev_;
}

template <class T>
Tape<T>* Tape<T>::current() noexcept {
  return current_tape_ref<T>();
}

template <class T>
void Tape<T>::track(const std::shared_ptr<detail::Storage<T>>& st) {
  if (st->tape_id != id_) {
    st->tape_id = id_;
    tracked_.push_back(st);
  }
}

template <class T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1)
    throw ContractError("backward: root must be a scalar tensor");
  if (root.storage()->tape_id != id_)
    throw ContractError("backward: root is not connected to this tape");
  for (auto& st : tracked_) st->grad.assign(st->data.size(), T(0));
  root.storage()->grad[0] = T(1);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    nodes_[i]();
    ++visits_;
  }
}

// ---- factories ----------------------------------------------------------------

template <class T>
Tensor<T> random_uniform(typename Tensor<T>::Shape shape, double lo, double hi,
                         RngStream& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform_range(lo, hi));
  return t;
}

template <class T>
Tensor<T> random_normal(typename Tensor<T>::Shape shape, double mean, double stddev,
                        RngStream& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (T& v : t.data()) v = static_cast<T>(mean + stddev * rng.normal());
  return t;
}

// ---- elementwise binary -------------------------------------------------------

namespace {

enum class BinKind { add, sub, mul, divide };

template <class T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind,
                    const char* who) {
  check_defined(a, who);
  check_defined(b, who);
  check_same_rank_bcast(a, b, who);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for_each_bcast(a.shape(), b.shape(), [&](std::int64_t ia, std::int64_t ib) {
    switch (kind) {
      case BinKind::add: po[ia] = pa[ia] + pb[ib]; break;
      case BinKind::sub: po[ia] = pa[ia] - pb[ib]; break;
      case BinKind::mul: po[ia] = pa[ia] * pb[ib]; break;
      case BinKind::divide: po[ia] = pa[ia] / pb[ib]; break;
    }
  });
  if (recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    track_all<T>({&a, &b, &out});
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    Tape<T>::current()->record([sa, sb, so, kind]() {
      const T* g = so->grad.data();
      const T* da = sa->data.data();
      const T* db = sb->data.data();
      T* ga = sa->requires_grad ? sa->grad.data() : nullptr;
      T* gb = sb->requires_grad ? sb->grad.data() : nullptr;
      for_each_bcast(sa->shape, sb->shape, [&](std::int64_t ia, std::int64_t ib) {
        switch (kind) {
          case BinKind::add:
            if (ga) ga[ia] += g[ia];
            if (gb) gb[ib] += g[ia];
            break;
          case BinKind::sub:
            if (ga) ga[ia] += g[ia];
            if (gb) gb[ib] -= g[ia];
            break;
          case BinKind::mul:
            if (ga) ga[ia] += g[ia] * db[ib];
            if (gb) gb[ib] += g[ia] * da[ia];
            break;
          case BinKind::divide:
            if (ga) ga[ia] += g[ia] / db[ib];
            if (gb) gb[ib] -= g[ia] * da[ia] / (db[ib] * db[ib]);
            break;
        }
      });
    });
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::add, "add");
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::sub, "sub");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::mul, "mul");
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(a, b, BinKind::divide, "div");
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  check_defined(a, "add_scalar");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + s;
  if (recording<T>({&a})) {
    out.set_requires_grad(true);
    track_all<T>({&a, &out});
    auto sa = a.storage(), so = out.storage();
    Tape<T>::current()->record([sa, so]() {
      for (std::size_t i = 0; i < sa->grad.size(); ++i) sa->grad[i] += so->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  check_defined(a, "mul_scalar");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * s;
  if (recording<T>({&a})) {
    out.set_requires_grad(true);
    track_all<T>({&a, &out});
    auto sa = a.storage(), so = out.storage();
    Tape<T>::current()->record([sa, so, s]() {
      for (std::size_t i = 0; i < sa->grad.size(); ++i) sa->grad[i] += s * so->grad[i];
    });
  }
  return out;
}

// ---- elementwise unary ----------------------------------------------------------

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  check_defined(x, "relu");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    Tape<T>::current()->record([sx, so]() {
      // subgradient 0 at exactly 0
      for (std::size_t i = 0; i < sx->grad.size(); ++i)
        if (sx->data[i] > T(0)) sx->grad[i] += so->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
  check_defined(x, "sqrt");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = std::sqrt(px[i]);
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    Tape<T>::current()->record([sx, so]() {
      // subgradient 0 at exactly 0 (keeps degenerate variances from poisoning
      // the sweep with 0/0)
      for (std::size_t i = 0; i < sx->grad.size(); ++i)
        if (so->data[i] > T(0)) sx->grad[i] += so->grad[i] / (T(2) * so->data[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
  check_defined(x, "abs");
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] < T(0) ? -px[i] : px[i];
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    Tape<T>::current()->record([sx, so]() {
      // sign convention: 0 at exactly 0
      for (std::size_t i = 0; i < sx->grad.size(); ++i) {
        const T v = sx->data[i];
        if (v > T(0)) sx->grad[i] += so->grad[i];
        else if (v < T(0)) sx->grad[i] -= so->grad[i];
      }
    });
  }
  return out;
}

// ---- matmul ---------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands, got " +
                         detail::shape_str(a.shape()) + " and " +
                         detail::shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), p = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents differ, " + detail::shape_str(a.shape()) +
                         " vs " + detail::shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros({m, p});
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const T aik = pa[i * k + kk];
      for (std::int64_t j = 0; j < p; ++j) po[i * p + j] += aik * pb[kk * p + j];
    }
  if (recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    track_all<T>({&a, &b, &out});
    auto sa = a.storage(), sb = b.storage(), so = out.storage();
    Tape<T>::current()->record([sa, sb, so, m, k, p]() {
      const T* g = so->grad.data();
      const T* da = sa->data.data();
      const T* db = sb->data.data();
      if (sa->requires_grad) {
        T* ga = sa->grad.data();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < p; ++j) {
            const T gij = g[i * p + j];
            for (std::int64_t kk = 0; kk < k; ++kk)
              ga[i * k + kk] += gij * db[kk * p + j];
          }
      }
      if (sb->requires_grad) {
        T* gb = sb->grad.data();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t kk = 0; kk < k; ++kk) {
            const T aik = da[i * k + kk];
            for (std::int64_t j = 0; j < p; ++j)
              gb[kk * p + j] += aik * g[i * p + j];
          }
      }
    });
  }
  return out;
}

// ---- conv2d ----------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, int stride, int pad) {
  check_defined(x, "conv2d");
  check_defined(k, "conv2d");
  if (x.rank() != 4 || k.rank() != 4)
    throw DimensionError("conv2d: expects x[B,C,H,W] and k[O,C,kh,kw], got " +
                         detail::shape_str(x.shape()) + " and " +
                         detail::shape_str(k.shape()));
  if (stride < 1) throw ValueError("conv2d: stride must be positive");
  if (pad < 0) throw ValueError("conv2d: pad must be non-negative");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = k.dim(0), Ck = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  if (C != Ck)
    throw DimensionError("conv2d: channel mismatch, input has " + std::to_string(C) +
                         ", kernel expects " + std::to_string(Ck));
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw DimensionError("conv2d: kernel larger than padded input");
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<T> out = Tensor<T>::zeros({B, O, Ho, Wo});
  const T* px = x.data().data();
  const T* pk = k.data().data();
  T* po = out.data().data();
  auto xat = [&](std::int64_t b, std::int64_t c, std::int64_t h, std::int64_t w) {
    return px[((b * C + c) * H + h) * W + w];
  };
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          T acc = T(0);
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < kh; ++i) {
              const std::int64_t ih = oh * stride - pad + i;
              if (ih < 0 || ih >= H) continue;
              for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t iw = ow * stride - pad + j;
                if (iw < 0 || iw >= W) continue;
                acc += xat(b, c, ih, iw) * pk[((o * C + c) * kh + i) * kw + j];
              }
            }
          po[((b * O + o) * Ho + oh) * Wo + ow] = acc;
        }
  if (recording<T>({&x, &k})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &k, &out});
    auto sx = x.storage(), sk = k.storage(), so = out.storage();
    const int s = stride, pd = pad;
    Tape<T>::current()->record([sx, sk, so, B, C, H, W, O, kh, kw, Ho, Wo, s, pd]() {
      const T* g = so->grad.data();
      const T* dx = sx->data.data();
      const T* dk = sk->data.data();
      T* gx = sx->requires_grad ? sx->grad.data() : nullptr;
      T* gk = sk->requires_grad ? sk->grad.data() : nullptr;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o)
          for (std::int64_t oh = 0; oh < Ho; ++oh)
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
              const T go = g[((b * O + o) * Ho + oh) * Wo + ow];
              for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t i = 0; i < kh; ++i) {
                  const std::int64_t ih = oh * s - pd + i;
                  if (ih < 0 || ih >= H) continue;
                  for (std::int64_t j = 0; j < kw; ++j) {
                    const std::int64_t iw = ow * s - pd + j;
                    if (iw < 0 || iw >= W) continue;
                    const std::int64_t xi = ((b * C + c) * H + ih) * W + iw;
                    const std::int64_t ki = ((o * C + c) * kh + i) * kw + j;
                    if (gx) gx[xi] += go * dk[ki];
                    if (gk) gk[ki] += go * dx[xi];
                  }
                }
            }
    });
  }
  return out;
}

// ---- structure ---------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, typename Tensor<T>::Shape shape) {
  check_defined(x, "reshape");
  const std::int64_t n = detail::numel_of(shape);
  if (n != x.numel())
    throw DimensionError("reshape: cannot view " + detail::shape_str(x.shape()) +
                         " as " + detail::shape_str(shape));
  Tensor<T> out = Tensor<T>::from_data(std::move(shape),
                                       {x.data().begin(), x.data().end()});
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    Tape<T>::current()->record([sx, so]() {
      for (std::size_t i = 0; i < sx->grad.size(); ++i) sx->grad[i] += so->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> bchw_to_tokens(const Tensor<T>& x) {
  check_defined(x, "bchw_to_tokens");
  if (x.rank() != 4)
    throw DimensionError("bchw_to_tokens: expects rank-4 input, got " +
                         detail::shape_str(x.shape()));
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t N = H * W;
  Tensor<T> out = Tensor<T>::zeros({B, N, C});
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t t = 0; t < N; ++t)
        po[(b * N + t) * C + c] = px[(b * C + c) * N + t];
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    Tape<T>::current()->record([sx, so, B, C, N]() {
      const T* g = so->grad.data();
      T* gx = sx->grad.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t t = 0; t < N; ++t)
            gx[(b * C + c) * N + t] += g[(b * N + t) * C + c];
    });
  }
  return out;
}

template <class T>
Tensor<T> index_select_tokens(const Tensor<T>& x, std::span<const std::int64_t> idx) {
  check_defined(x, "index_select_tokens");
  if (x.rank() != 3)
    throw DimensionError("index_select_tokens: expects x[B,N,C], got " +
                         detail::shape_str(x.shape()));
  const std::int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  std::vector<bool> seen(static_cast<std::size_t>(N), false);
  for (std::int64_t i : idx) {
    if (i < 0 || i >= N)
      throw IndexError("index_select_tokens: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(N) + ")");
    if (seen[static_cast<std::size_t>(i)])
      throw IndexError("index_select_tokens: duplicate index " + std::to_string(i));
    seen[static_cast<std::size_t>(i)] = true;
  }
  const std::int64_t n = static_cast<std::int64_t>(idx.size());
  Tensor<T> out = Tensor<T>::zeros({B, n, C});
  const T* px = x.data().data();
  T* po = out.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < n; ++i) {
      const T* src = px + (b * N + idx[static_cast<std::size_t>(i)]) * C;
      T* dst = po + (b * n + i) * C;
      for (std::int64_t c = 0; c < C; ++c) dst[c] = src[c];
    }
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    std::vector<std::int64_t> iv(idx.begin(), idx.end());
    Tape<T>::current()->record([sx, so, iv, B, N, C, n]() {
      const T* g = so->grad.data();
      T* gx = sx->grad.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < n; ++i) {
          const T* src = g + (b * n + i) * C;
          T* dst = gx + (b * N + iv[static_cast<std::size_t>(i)]) * C;
          for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
  }
  return out;
}

// ---- reductions -----------------------------------------------------------------------

namespace {

template <class T>
Tensor<T> reduce_impl(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims,
                      bool mean, const char* who) {
  check_defined(x, who);
  if (axes.empty()) throw ValueError(std::string(who) + ": axis set must be nonempty");
  std::vector<bool> reduced(static_cast<std::size_t>(x.rank()), false);
  for (int a : axes) {
    if (a < 0 || a >= x.rank())
      throw ValueError(std::string(who) + ": axis " + std::to_string(a) +
                       " out of range for rank " + std::to_string(x.rank()));
    if (reduced[static_cast<std::size_t>(a)])
      throw ValueError(std::string(who) + ": duplicate axis " + std::to_string(a));
    reduced[static_cast<std::size_t>(a)] = true;
  }
  std::vector<std::int64_t> kshape = x.shape();  // keepdims shape
  std::int64_t count = 1;
  for (int a = 0; a < x.rank(); ++a)
    if (reduced[static_cast<std::size_t>(a)]) {
      count *= x.dim(a);
      kshape[static_cast<std::size_t>(a)] = 1;
    }
  if (count == 0)
    throw ValueError(std::string(who) + ": degenerate reduction over zero-extent axis");
  Tensor<T> out = Tensor<T>::zeros(kshape);
  const T* px = x.data().data();
  T* po = out.data().data();
  for_each_bcast(x.shape(), kshape,
                 [&](std::int64_t ix, std::int64_t io) { po[io] += px[ix]; });
  if (mean)
    for (T& v : out.data()) v /= static_cast<T>(count);
  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    track_all<T>({&x, &out});
    auto sx = x.storage(), so = out.storage();
    const T scale = mean ? T(1) / static_cast<T>(count) : T(1);
    Tape<T>::current()->record([sx, so, scale]() {
      const T* g = so->grad.data();
      T* gx = sx->grad.data();
      for_each_bcast(sx->shape, so->shape, [&](std::int64_t ix, std::int64_t io) {
        gx[ix] += scale * g[io];
      });
    });
  }
  if (!keepdims) {
    std::vector<std::int64_t> dropped;
    for (int a = 0; a < x.rank(); ++a)
      if (!reduced[static_cast<std::size_t>(a)]) dropped.push_back(x.dim(a));
    out = reshape(out, std::move(dropped));
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(x, axes, keepdims, false, "reduce_sum");
}

template <class T>
Tensor<T> reduce_mean(const Tensor<T>& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl(x, axes, keepdims, true, "reduce_mean");
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  if (axes.empty()) return reshape(x, {});  // already scalar
  return reduce_impl(x, axes, false, false, "sum_all");
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  for (int i = 0; i < x.rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
  if (axes.empty()) return reshape(x, {});
  return reduce_impl(x, axes, false, true, "mean_all");
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> moments(const Tensor<T>& x, const std::vector<int>& axes) {
  Tensor<T> m = reduce_mean(x, axes, true);
  Tensor<T> d = sub(x, m);
  Tensor<T> v = reduce_mean(mul(d, d), axes, true);
  return {m, v};
}

// ---- softmax cross entropy -----------------------------------------------------------

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits,
                                std::span<const std::int64_t> labels) {
  check_defined(logits, "softmax_cross_entropy");
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy: expects logits[B,K], got " +
                         detail::shape_str(logits.shape()));
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != B)
    throw DimensionError("softmax_cross_entropy: batch " + std::to_string(B) + " vs " +
                         std::to_string(labels.size()) + " labels");
  for (std::int64_t y : labels)
    if (y < 0 || y >= K)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(K) + ")");
  const T* pl = logits.data().data();
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * K));
  T loss = T(0);
  for (std::int64_t b = 0; b < B; ++b) {
    const T* row = pl + b * K;
    T m = row[0];
    for (std::int64_t k = 1; k < K; ++k) m = row[k] > m ? row[k] : m;
    T sum = T(0);
    for (std::int64_t k = 0; k < K; ++k) sum += std::exp(row[k] - m);
    const T lse = m + std::log(sum);
    for (std::int64_t k = 0; k < K; ++k)
      (*probs)[static_cast<std::size_t>(b * K + k)] = std::exp(row[k] - lse);
    loss += lse - row[labels[static_cast<std::size_t>(b)]];
  }
  loss /= static_cast<T>(B);
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (recording<T>({&logits})) {
    out.set_requires_grad(true);
    track_all<T>({&logits, &out});
    auto sl = logits.storage(), so = out.storage();
    std::vector<std::int64_t> lv(labels.begin(), labels.end());
    Tape<T>::current()->record([sl, so, probs, lv, B, K]() {
      const T g = so->grad[0] / static_cast<T>(B);
      T* gl = sl->grad.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k) {
          T p = (*probs)[static_cast<std::size_t>(b * K + k)];
          if (k == lv[static_cast<std::size_t>(b)]) p -= T(1);
          gl[b * K + k] += g * p;
        }
    });
  }
  return out;
}

// ---- compositions ---------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_defined(b, "linear");
  if (b.rank() != 1)
    throw DimensionError("linear: bias must be rank-1, got " +
                         detail::shape_str(b.shape()));
  return add(matmul(x, w), reshape(b, {1, b.dim(0)}));
}

template <class T>
Tensor<T> linear_tokens(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_defined(x, "linear_tokens");
  if (x.rank() != 3)
    throw DimensionError("linear_tokens: expects x[B,n,C], got " +
                         detail::shape_str(x.shape()));
  const std::int64_t B = x.dim(0), n = x.dim(1), C = x.dim(2);
  Tensor<T> flat = reshape(x, {B * n, C});
  Tensor<T> y = linear(flat, w, b);
  return reshape(y, {B, n, y.dim(1)});
}

// ---- finite differences -----------------------------------------------------------------

FiniteDiffReport finite_diff_check(
    const std::function<Tensor<double>()>& forward,
    const std::vector<Parameter<double>*>& params, double step) {
  if (step <= 0.0) throw ValueError("finite_diff_check: step must be positive");
  std::vector<std::vector<double>> tape_grads;
  {
    for (Parameter<double>* p : params) p->tensor.zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = forward();
    if (!std::isfinite(loss.item()))
      throw NumericError("finite_diff_check: non-finite loss");
    tape.backward(loss);
    for (Parameter<double>* p : params) {
      auto g = p->tensor.grad();
      tape_grads.emplace_back(g.begin(), g.end());
    }
  }
  auto eval = [&]() {
    Tensor<double> loss = forward();  // no tape scope: pure evaluation
    const double v = loss.item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite loss");
    return v;
  };
  FiniteDiffReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi]->tensor.data();
    for (std::int64_t i = 0; i < params[pi]->tensor.numel(); ++i) {
      const double saved = data[static_cast<std::size_t>(i)];
      data[static_cast<std::size_t>(i)] = saved + step;
      const double up = eval();
      data[static_cast<std::size_t>(i)] = saved - step;
      const double dn = eval();
      data[static_cast<std::size_t>(i)] = saved;
      const double fd = (up - dn) / (2.0 * step);
      const double tg = tape_grads[pi][static_cast<std::size_t>(i)];
      const double rel = std::fabs(tg - fd) /
                         std::max(1e-8, std::fabs(tg) + std::fabs(fd));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi]->name;
        rep.worst_index = i;
        rep.tape_grad = tg;
        rep.fd_grad = fd;
      }
    }
  }
  return rep;
}

// ---- explicit instantiations --------------------------------------------------------------

#define RHOSIM_INSTANTIATE_TENSOR(T)                                                   \
  template class Tensor<T>;                                                            \
  template class Tape<T>;                                                              \
  template Tensor<T> random_uniform<T>(typename Tensor<T>::Shape, double, double,      \
                                       RngStream&);                                    \
  template Tensor<T> random_normal<T>(typename Tensor<T>::Shape, double, double,       \
                                      RngStream&);                                     \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> div<T>(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                               \
  template Tensor<T> mul_scalar<T>(const Tensor<T>&, T);                               \
  template Tensor<T> relu<T>(const Tensor<T>&);                                        \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                                        \
  template Tensor<T> abs<T>(const Tensor<T>&);                                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, int, int);          \
  template Tensor<T> reshape<T>(const Tensor<T>&, typename Tensor<T>::Shape);          \
  template Tensor<T> bchw_to_tokens<T>(const Tensor<T>&);                              \
  template Tensor<T> index_select_tokens<T>(const Tensor<T>&,                          \
                                            std::span<const std::int64_t>);            \
  template Tensor<T> reduce_sum<T>(const Tensor<T>&, const std::vector<int>&, bool);   \
  template Tensor<T> reduce_mean<T>(const Tensor<T>&, const std::vector<int>&, bool);  \
  template Tensor<T> sum_all<T>(const Tensor<T>&);                                     \
  template Tensor<T> mean_all<T>(const Tensor<T>&);                                    \
  template std::pair<Tensor<T>, Tensor<T>> moments<T>(const Tensor<T>&,                \
                                                      const std::vector<int>&);        \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&,                        \
                                              std::span<const std::int64_t>);          \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> linear_tokens<T>(const Tensor<T>&, const Tensor<T>&,              \
                                      const Tensor<T>&);

RHOSIM_INSTANTIATE_TENSOR(float)
RHOSIM_INSTANTIATE_TENSOR(double)

#undef RHOSIM_INSTANTIATE_TENSOR

}  // namespace rhosim
