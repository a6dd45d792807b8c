#pragma once

// Test-only double-precision reference implementations and a central
// finite-difference gradient oracle. Kept independent of the fpl::ad
// implementation paths it is used to check.

#include <cmath>
#include <functional>
#include <vector>

namespace fdo {

using Vec = std::vector<double>;
using Fn = std::function<double(const Vec&)>;

inline Vec fd_grad(const Fn& f, Vec x, double h = 1e-4) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline double max_rel_err(const std::vector<float>& analytic, const Vec& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i)
    worst = std::max(worst, rel_err(static_cast<double>(analytic[i]), fd[i]));
  return worst;
}

// NCHW conv, zero padding, cross-correlation.
inline Vec conv2d(const Vec& x, const Vec& w, int N, int C, int H, int W, int F,
                  int kh, int kw, int stride, int pad) {
  const int oh = (H + 2 * pad - kh) / stride + 1;
  const int ow = (W + 2 * pad - kw) / stride + 1;
  Vec y(static_cast<std::size_t>(N) * F * oh * ow, 0.0);
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int u = 0; u < kh; ++u)
              for (int v = 0; v < kw; ++v) {
                int hi = i * stride - pad + u, wi = j * stride - pad + v;
                if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                acc += x[((static_cast<std::size_t>(n) * C + c) * H + hi) * W + wi] *
                       w[((static_cast<std::size_t>(f) * C + c) * kh + u) * kw + v];
              }
          y[((static_cast<std::size_t>(n) * F + f) * oh + i) * ow + j] = acc;
        }
  return y;
}

inline Vec matmul(const Vec& a, const Vec& b, int m, int k, int n) {
  Vec c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline Vec batchnorm_train(const Vec& x, const Vec& gamma, const Vec& beta,
                           int N, int C, int HW, double eps = 1e-5) {
  Vec y(x.size());
  const double m = static_cast<double>(N) * HW;
  for (int c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < HW; ++i) mu += x[(static_cast<std::size_t>(n) * C + c) * HW + i];
    mu /= m;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < HW; ++i) {
        double d = x[(static_cast<std::size_t>(n) * C + c) * HW + i] - mu;
        var += d * d;
      }
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < HW; ++i) {
        std::size_t idx = (static_cast<std::size_t>(n) * C + c) * HW + i;
        y[idx] = gamma[c] * (x[idx] - mu) * is + beta[c];
      }
  }
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline Vec softmax_row(const Vec& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

// Mean over rows of -sum t log softmax(l).
inline double cross_entropy(const Vec& logits, const Vec& targets, int n, int k) {
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec row(logits.begin() + i * k, logits.begin() + (i + 1) * k);
    Vec p = softmax_row(row);
    for (int j = 0; j < k; ++j)
      if (targets[i * k + j] > 0.0) loss -= targets[i * k + j] * std::log(p[j]);
  }
  return loss / n;
}

// Mean over rows of T^2 * KL(t || softmax(l / T)).
inline double kl_vs_softened(const Vec& target_probs, const Vec& logits, int n,
                             int k, double T) {
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    Vec row(k);
    for (int j = 0; j < k; ++j) row[j] = logits[i * k + j] / T;
    Vec q = softmax_row(row);
    for (int j = 0; j < k; ++j) {
      double p = target_probs[i * k + j];
      if (p > 0.0) loss += p * (std::log(p) - std::log(q[j]));
    }
  }
  return loss * T * T / n;
}

}  // namespace fdo
