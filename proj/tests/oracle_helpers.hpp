#pragma once

// Brute-force reference implementations used only by tests. Each oracle is an
// independent re-derivation: plain nested loops and closed forms, no calls
// into the code paths under test.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// C = A[MxK] * B[KxP], triple loop.
inline std::vector<double> matmul(const std::vector<double>& a,
                                  const std::vector<double>& b, std::int64_t m,
                                  std::int64_t k, std::int64_t p) {
  std::vector<double> c(static_cast<std::size_t>(m * p), 0.0);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * p + j];
      c[i * p + j] = acc;
    }
  return c;
}

// Direct 6-loop cross-correlation with zero padding.
inline std::vector<double> conv2d(const std::vector<double>& x,
                                  const std::vector<double>& k, std::int64_t B,
                                  std::int64_t C, std::int64_t H, std::int64_t W,
                                  std::int64_t O, std::int64_t kh, std::int64_t kw,
                                  int stride, int pad) {
  const std::int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(B * O * Ho * Wo), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t oh = 0; oh < Ho; ++oh)
        for (std::int64_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                const std::int64_t ih = oh * stride - pad + i;
                const std::int64_t iw = ow * stride - pad + j;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((b * C + c) * H + ih) * W + iw] *
                       k[((o * C + c) * kh + i) * kw + j];
              }
          out[((b * O + o) * Ho + oh) * Wo + ow] = acc;
        }
  return out;
}

// Mean over the batch of -log softmax(logits)[label], in extended precision.
inline double cross_entropy(const std::vector<double>& logits,
                            const std::vector<std::int64_t>& labels, std::int64_t B,
                            std::int64_t K) {
  long double total = 0.0L;
  for (std::int64_t b = 0; b < B; ++b) {
    long double m = logits[b * K];
    for (std::int64_t k = 1; k < K; ++k)
      m = std::max<long double>(m, logits[b * K + k]);
    long double sum = 0.0L;
    for (std::int64_t k = 0; k < K; ++k)
      sum += std::exp(static_cast<long double>(logits[b * K + k]) - m);
    const long double lse = m + std::log(sum);
    total += lse - static_cast<long double>(logits[b * K + labels[b]]);
  }
  return static_cast<double>(total / B);
}

// Per-token 3-layer affine + ReLU map: widths C -> h -> h -> D.
inline std::vector<double> projector(const std::vector<double>& tokens, std::int64_t Bn,
                                     std::int64_t C, std::int64_t h, std::int64_t D,
                                     const std::vector<double>& w0,
                                     const std::vector<double>& b0,
                                     const std::vector<double>& w1,
                                     const std::vector<double>& b1,
                                     const std::vector<double>& w2,
                                     const std::vector<double>& b2) {
  std::vector<double> out(static_cast<std::size_t>(Bn * D), 0.0);
  std::vector<double> t0(static_cast<std::size_t>(h)), t1(static_cast<std::size_t>(h));
  for (std::int64_t r = 0; r < Bn; ++r) {
    for (std::int64_t j = 0; j < h; ++j) {
      double acc = b0[j];
      for (std::int64_t c = 0; c < C; ++c) acc += tokens[r * C + c] * w0[c * h + j];
      t0[j] = acc > 0 ? acc : 0;
    }
    for (std::int64_t j = 0; j < h; ++j) {
      double acc = b1[j];
      for (std::int64_t c = 0; c < h; ++c) acc += t0[c] * w1[c * h + j];
      t1[j] = acc > 0 ? acc : 0;
    }
    for (std::int64_t j = 0; j < D; ++j) {
      double acc = b2[j];
      for (std::int64_t c = 0; c < h; ++c) acc += t1[c] * w2[c * D + j];
      out[r * D + j] = acc;
    }
  }
  return out;
}

// Eigenvalues of a symmetric 2x2 matrix, descending.
inline void eig2x2(double a, double b, double d, double* l1, double* l2) {
  const double tr = a + d;
  const double det = a * d - b * b;
  const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  *l1 = tr / 2.0 + disc;
  *l2 = tr / 2.0 - disc;
}

// P(N(0,1) <= x) via Simpson quadrature of the density (no erf), step 1e-4.
inline double normal_cdf(double x) {
  const double lo = -10.0;
  if (x <= lo) return 0.0;
  const int n = static_cast<int>(std::ceil((x - lo) / 1e-4 / 2.0)) * 2;
  const double h = (x - lo) / n;
  auto pdf = [](double t) {
    return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::acos(-1.0));
  };
  double acc = pdf(lo) + pdf(x);
  for (int i = 1; i < n; ++i) acc += pdf(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return acc * h / 3.0;
}

}  // namespace oracle
