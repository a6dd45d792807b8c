#include "fpl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "fpl/conv.hpp"

namespace fpl::ad {

NodePtr constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = false;
  return n;
}

NodePtr param(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->op = "param";
  return n;
}

static NodePtr make(Tensor v, std::vector<NodePtr> parents,
                    std::function<void(Node&)> bp, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->parents = std::move(parents);
  n->requires_grad = false;
  for (auto& p : n->parents) n->requires_grad |= p->requires_grad;
  if (n->requires_grad) n->backprop = std::move(bp);
  n->op = op;
  return n;
}

NodePtr custom(Tensor value, std::vector<NodePtr> parents,
               std::function<void(Node&)> backprop, const char* op) {
  return make(std::move(value), std::move(parents), std::move(backprop), op);
}

static bool scalar_like(const Tensor& t) { return t.numel() == 1; }

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Binary elementwise with scalar broadcast on either side.
template <class Fwd, class BwdA, class BwdB>
static NodePtr binary(const NodePtr& a, const NodePtr& b, Fwd fwd, BwdA ga,
                      BwdB gb, const char* op) {
  const bool sa = scalar_like(a->value), sb = scalar_like(b->value);
  if (!sa && !sb) require_same_shape(a->value, b->value, op);
  const Tensor& big = sa ? b->value : a->value;
  Tensor out(big.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    float av = a->value[sa ? 0 : i];
    float bv = b->value[sb ? 0 : i];
    out[i] = fwd(av, bv);
  }
  return make(std::move(out), {a, b},
              [sa, sb, ga, gb](Node& self) {
                auto& a = *self.parents[0];
                auto& b = *self.parents[1];
                const std::size_t n = self.value.numel();
                if (a.requires_grad) {
                  a.ensure_grad();
                  for (std::size_t i = 0; i < n; ++i)
                    a.grad[sa ? 0 : i] +=
                        self.grad[i] * ga(a.value[sa ? 0 : i], b.value[sb ? 0 : i]);
                }
                if (b.requires_grad) {
                  b.ensure_grad();
                  for (std::size_t i = 0; i < n; ++i)
                    b.grad[sb ? 0 : i] +=
                        self.grad[i] * gb(a.value[sa ? 0 : i], b.value[sb ? 0 : i]);
                }
              },
              op);
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  return binary(a, b, [](float x, float y) { return x + y; },
                [](float, float) { return 1.0f; },
                [](float, float) { return 1.0f; }, "add");
}
NodePtr sub(const NodePtr& a, const NodePtr& b) {
  return binary(a, b, [](float x, float y) { return x - y; },
                [](float, float) { return 1.0f; },
                [](float, float) { return -1.0f; }, "sub");
}
NodePtr mul(const NodePtr& a, const NodePtr& b) {
  return binary(a, b, [](float x, float y) { return x * y; },
                [](float, float y) { return y; },
                [](float x, float) { return x; }, "mul");
}

template <class Fwd, class Bwd>
static NodePtr unary(const NodePtr& a, Fwd fwd, Bwd bwd, const char* op) {
  Tensor out(a->value.shape);
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a->value[i]);
  return make(std::move(out), {a},
              [bwd](Node& self) {
                auto& a = *self.parents[0];
                if (!a.requires_grad) return;
                a.ensure_grad();
                const std::size_t n = self.value.numel();
                for (std::size_t i = 0; i < n; ++i)
                  a.grad[i] += self.grad[i] * bwd(a.value[i], self.value[i]);
              },
              op);
}

NodePtr relu(const NodePtr& a) {
  return unary(a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, "relu");
}
NodePtr sigmoid(const NodePtr& a) {
  return unary(a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
               [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}
NodePtr exp_(const NodePtr& a) {
  auto out = unary(a, [](float x) { return std::exp(x); },
                   [](float, float y) { return y; }, "exp");
  check_finite(out->value, "exp");
  return out;
}
NodePtr log_(const NodePtr& a) {
  for (float v : a->value.data)
    if (v <= 0.0f) throw std::domain_error("log: non-positive input");
  return unary(a, [](float x) { return std::log(x); },
               [](float x, float) { return 1.0f / x; }, "log");
}
NodePtr scale(const NodePtr& a, float s) {
  return unary(a, [s](float x) { return s * x; },
               [s](float, float) { return s; }, "scale");
}

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 ||
      a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: dimension mismatch " +
                                shape_str(a->value.shape) + " x " +
                                shape_str(b->value.shape));
  const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  kernels::matmul_mk_kn(a->value.data.data(), b->value.data.data(),
                        out.data.data(), m, k, n);
  return make(std::move(out), {a, b},
              [m, k, n](Node& self) {
                auto& a = *self.parents[0];
                auto& b = *self.parents[1];
                if (a.requires_grad) {
                  a.ensure_grad();
                  // dA += dY * B^T
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                      const float g = self.grad.at2(i, j);
                      for (int p = 0; p < k; ++p)
                        a.grad.at2(i, p) += g * b.value.at2(p, j);
                    }
                }
                if (b.requires_grad) {
                  b.ensure_grad();
                  // dB += A^T * dY
                  for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                      const float av = a.value.at2(i, p);
                      for (int j = 0; j < n; ++j)
                        b.grad.at2(p, j) += av * self.grad.at2(i, j);
                    }
                }
              },
              "matmul");
}

NodePtr reshape(const NodePtr& a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a->value.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape), a->value.data);
  return make(std::move(out), {a},
              [](Node& self) {
                auto& a = *self.parents[0];
                if (!a.requires_grad) return;
                a.ensure_grad();
                for (std::size_t i = 0; i < self.value.numel(); ++i)
                  a.grad[i] += self.grad[i];
              },
              "reshape");
}

NodePtr sum(const NodePtr& a) {
  float acc = 0.0f;
  for (float v : a->value.data) acc += v;
  return make(Tensor::scalar(acc), {a},
              [](Node& self) {
                auto& a = *self.parents[0];
                if (!a.requires_grad) return;
                a.ensure_grad();
                const float g = self.grad[0];
                for (auto& v : a.grad.data) v += g;
              },
              "sum");
}

NodePtr mean(const NodePtr& a) {
  return scale(sum(a), 1.0f / static_cast<float>(a->value.numel()));
}

NodePtr add_row_bias(const NodePtr& x, const NodePtr& b) {
  if (x->value.rank() != 2 || b->value.rank() != 1 ||
      x->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("add_row_bias: shape mismatch");
  const int n = x->value.dim(0), d = x->value.dim(1);
  Tensor out(x->value.shape);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at2(i, j) = x->value.at2(i, j) + b->value[j];
  return make(std::move(out), {x, b},
              [n, d](Node& self) {
                auto& x = *self.parents[0];
                auto& b = *self.parents[1];
                if (x.requires_grad) {
                  x.ensure_grad();
                  for (std::size_t i = 0; i < self.value.numel(); ++i)
                    x.grad[i] += self.grad[i];
                }
                if (b.requires_grad) {
                  b.ensure_grad();
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) b.grad[j] += self.grad.at2(i, j);
                }
              },
              "add_row_bias");
}

NodePtr add_channel_bias(const NodePtr& x, const NodePtr& b) {
  if (x->value.rank() != 4 || b->value.rank() != 1 ||
      x->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("add_channel_bias: shape mismatch");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int HW = x->value.dim(2) * x->value.dim(3);
  Tensor out(x->value.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float bv = b->value[c];
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out[base + i] = x->value[base + i] + bv;
    }
  return make(std::move(out), {x, b},
              [N, C, HW](Node& self) {
                auto& x = *self.parents[0];
                auto& b = *self.parents[1];
                if (x.requires_grad) {
                  x.ensure_grad();
                  for (std::size_t i = 0; i < self.value.numel(); ++i)
                    x.grad[i] += self.grad[i];
                }
                if (b.requires_grad) {
                  b.ensure_grad();
                  for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                      float acc = 0.0f;
                      for (int i = 0; i < HW; ++i) acc += self.grad[base + i];
                      b.grad[c] += acc;
                    }
                }
              },
              "add_channel_bias");
}

NodePtr channel_scale(const NodePtr& x, const NodePtr& g) {
  if (x->value.rank() != 4 || g->value.rank() != 2 ||
      x->value.dim(0) != g->value.dim(0) || x->value.dim(1) != g->value.dim(1))
    throw std::invalid_argument("channel_scale: shape mismatch");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int HW = x->value.dim(2) * x->value.dim(3);
  Tensor out(x->value.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const float gv = g->value.at2(n, c);
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) out[base + i] = x->value[base + i] * gv;
    }
  return make(std::move(out), {x, g},
              [N, C, HW](Node& self) {
                auto& x = *self.parents[0];
                auto& g = *self.parents[1];
                if (x.requires_grad) {
                  x.ensure_grad();
                  for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                      const float gv = g.value.at2(n, c);
                      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                      for (int i = 0; i < HW; ++i)
                        x.grad[base + i] += self.grad[base + i] * gv;
                    }
                }
                if (g.requires_grad) {
                  g.ensure_grad();
                  for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                      float acc = 0.0f;
                      for (int i = 0; i < HW; ++i)
                        acc += self.grad[base + i] * x.value[base + i];
                      g.grad.at2(n, c) += acc;
                    }
                }
              },
              "channel_scale");
}

NodePtr conv2d(const NodePtr& x, const NodePtr& w, int stride, int padding) {
  Tensor out = kernels::conv2d_im2col(x->value, w->value, stride, padding);
  return make(std::move(out), {x, w},
              [stride, padding](Node& self) {
                auto& x = *self.parents[0];
                auto& w = *self.parents[1];
                Tensor dx, dw;
                kernels::conv2d_backward(x.value, w.value, stride, padding,
                                         self.grad, dx, dw);
                if (x.requires_grad) {
                  x.ensure_grad();
                  for (std::size_t i = 0; i < dx.numel(); ++i) x.grad[i] += dx[i];
                }
                if (w.requires_grad) {
                  w.ensure_grad();
                  for (std::size_t i = 0; i < dw.numel(); ++i) w.grad[i] += dw[i];
                }
              },
              "conv2d");
}

static void check_pool_args(const Tensor& x, int window, int stride) {
  if (x.rank() != 4) throw std::invalid_argument("pool2d: expected NCHW");
  if (window < 1 || stride < 1) throw std::invalid_argument("pool2d: bad window/stride");
  if (window > x.dim(2) || window > x.dim(3))
    throw std::invalid_argument("pool2d: window larger than input");
}

NodePtr maxpool2d(const NodePtr& x, int window, int stride) {
  check_pool_args(x->value, window, stride);
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int H = x->value.dim(2), W = x->value.dim(3);
  const int oh = (H - window) / stride + 1, ow = (W - window) / stride + 1;
  Tensor out({N, C, oh, ow});
  auto argmax = std::make_shared<std::vector<int>>(out.numel());
  std::size_t idx = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j, ++idx) {
          float best = -std::numeric_limits<float>::infinity();
          int besti = -1;
          for (int u = 0; u < window; ++u)
            for (int v = 0; v < window; ++v) {
              int hi = i * stride + u, wi = j * stride + v;
              float val = x->value.at4(n, c, hi, wi);
              if (val > best) {
                best = val;
                besti = ((n * C + c) * H + hi) * W + wi;
              }
            }
          out[idx] = best;
          (*argmax)[idx] = besti;
        }
  return make(std::move(out), {x},
              [argmax](Node& self) {
                auto& x = *self.parents[0];
                if (!x.requires_grad) return;
                x.ensure_grad();
                for (std::size_t i = 0; i < self.value.numel(); ++i)
                  x.grad[(*argmax)[i]] += self.grad[i];
              },
              "maxpool2d");
}

NodePtr avgpool2d(const NodePtr& x, int window, int stride) {
  check_pool_args(x->value, window, stride);
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int H = x->value.dim(2), W = x->value.dim(3);
  const int oh = (H - window) / stride + 1, ow = (W - window) / stride + 1;
  const float inv = 1.0f / static_cast<float>(window * window);
  Tensor out({N, C, oh, ow});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          float acc = 0.0f;
          for (int u = 0; u < window; ++u)
            for (int v = 0; v < window; ++v)
              acc += x->value.at4(n, c, i * stride + u, j * stride + v);
          out.at4(n, c, i, j) = acc * inv;
        }
  return make(std::move(out), {x},
              [window, stride, inv](Node& self) {
                auto& x = *self.parents[0];
                if (!x.requires_grad) return;
                x.ensure_grad();
                const int N = self.value.dim(0), C = self.value.dim(1);
                const int oh = self.value.dim(2), ow = self.value.dim(3);
                for (int n = 0; n < N; ++n)
                  for (int c = 0; c < C; ++c)
                    for (int i = 0; i < oh; ++i)
                      for (int j = 0; j < ow; ++j) {
                        const float g = self.grad.at4(n, c, i, j) * inv;
                        for (int u = 0; u < window; ++u)
                          for (int v = 0; v < window; ++v)
                            x.grad.at4(n, c, i * stride + u, j * stride + v) += g;
                      }
              },
              "avgpool2d");
}

NodePtr global_avg_pool(const NodePtr& x) {
  if (x->value.rank() != 4) throw std::invalid_argument("global_avg_pool: expected NCHW");
  const int N = x->value.dim(0), C = x->value.dim(1);
  const int HW = x->value.dim(2) * x->value.dim(3);
  const float inv = 1.0f / static_cast<float>(HW);
  Tensor out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      float acc = 0.0f;
      for (int i = 0; i < HW; ++i) acc += x->value[base + i];
      out.at2(n, c) = acc * inv;
    }
  return make(std::move(out), {x},
              [N, C, HW, inv](Node& self) {
                auto& x = *self.parents[0];
                if (!x.requires_grad) return;
                x.ensure_grad();
                for (int n = 0; n < N; ++n)
                  for (int c = 0; c < C; ++c) {
                    const float g = self.grad.at2(n, c) * inv;
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                    for (int i = 0; i < HW; ++i) x.grad[base + i] += g;
                  }
              },
              "global_avg_pool");
}

NodePtr dropout(const NodePtr& x, float p, RngStream& rng) {
  if (p < 0.0f || p >= 1.0f) throw std::invalid_argument("dropout: p must be in [0,1)");
  auto mask = std::make_shared<std::vector<float>>(x->value.numel());
  const float keep = 1.0f - p;
  for (auto& m : *mask) m = rng.bernoulli(p) ? 0.0f : 1.0f / keep;
  Tensor out(x->value.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * (*mask)[i];
  return make(std::move(out), {x},
              [mask](Node& self) {
                auto& x = *self.parents[0];
                if (!x.requires_grad) return;
                x.ensure_grad();
                for (std::size_t i = 0; i < self.value.numel(); ++i)
                  x.grad[i] += self.grad[i] * (*mask)[i];
              },
              "dropout");
}

Tensor softmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax_rows: expected [N,K]");
  const int n = logits.dim(0), k = logits.dim(1);
  Tensor out(logits.shape);
  for (int i = 0; i < n; ++i) {
    float mx = logits.at2(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.at2(i, j));
    float z = 0.0f;
    for (int j = 0; j < k; ++j) {
      out.at2(i, j) = std::exp(logits.at2(i, j) - mx);
      z += out.at2(i, j);
    }
    for (int j = 0; j < k; ++j) out.at2(i, j) /= z;
  }
  return out;
}

NodePtr softmax_cross_entropy(const NodePtr& logits, const Tensor& targets) {
  require_same_shape(logits->value, targets, "softmax_cross_entropy");
  const int n = logits->value.dim(0), k = logits->value.dim(1);
  for (int i = 0; i < n; ++i) {
    float s = 0.0f;
    for (int j = 0; j < k; ++j) {
      if (targets.at2(i, j) < 0.0f)
        throw std::invalid_argument("softmax_cross_entropy: negative target");
      s += targets.at2(i, j);
    }
    if (std::abs(s - 1.0f) > 1e-4f)
      throw std::invalid_argument("softmax_cross_entropy: target row does not sum to 1");
  }
  auto probs = std::make_shared<Tensor>(softmax_rows(logits->value));
  auto tgt = std::make_shared<Tensor>(targets);
  float loss = 0.0f;
  for (int i = 0; i < n; ++i) {
    // log softmax recomputed stably
    float mx = logits->value.at2(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits->value.at2(i, j));
    float z = 0.0f;
    for (int j = 0; j < k; ++j) z += std::exp(logits->value.at2(i, j) - mx);
    const float logz = std::log(z) + mx;
    for (int j = 0; j < k; ++j)
      loss -= targets.at2(i, j) * (logits->value.at2(i, j) - logz);
  }
  loss /= static_cast<float>(n);
  return make(Tensor::scalar(loss), {logits},
              [probs, tgt, n, k](Node& self) {
                auto& l = *self.parents[0];
                if (!l.requires_grad) return;
                l.ensure_grad();
                const float g = self.grad[0] / static_cast<float>(n);
                for (int i = 0; i < n; ++i)
                  for (int j = 0; j < k; ++j)
                    l.grad.at2(i, j) += g * (probs->at2(i, j) - tgt->at2(i, j));
              },
              "softmax_cross_entropy");
}

NodePtr kl_vs_softened(const Tensor& target_probs, const NodePtr& logits,
                       float temperature) {
  if (temperature <= 0.0f) throw std::invalid_argument("kl_vs_softened: T must be > 0");
  require_same_shape(logits->value, target_probs, "kl_vs_softened");
  const int n = logits->value.dim(0), k = logits->value.dim(1);
  Tensor scaled(logits->value.shape);
  for (std::size_t i = 0; i < scaled.numel(); ++i)
    scaled[i] = logits->value[i] / temperature;
  auto soft = std::make_shared<Tensor>(softmax_rows(scaled));
  auto tgt = std::make_shared<Tensor>(target_probs);
  double loss = 0.0;
  const double eps = 1e-12;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const double p = tgt->at2(i, j);
      if (p > 0.0)
        loss += p * (std::log(std::max(p, eps)) -
                     std::log(std::max(static_cast<double>(soft->at2(i, j)), eps)));
    }
  loss *= temperature * temperature / n;
  const float tsq_over_t = temperature;  // T^2 * (1/T)
  return make(Tensor::scalar(static_cast<float>(loss)), {logits},
              [soft, tgt, n, k, tsq_over_t](Node& self) {
                auto& l = *self.parents[0];
                if (!l.requires_grad) return;
                l.ensure_grad();
                const float g = self.grad[0] * tsq_over_t / static_cast<float>(n);
                for (int i = 0; i < n; ++i)
                  for (int j = 0; j < k; ++j)
                    l.grad.at2(i, j) += g * (soft->at2(i, j) - tgt->at2(i, j));
              },
              "kl_vs_softened");
}

void backward(const NodePtr& loss) {
  if (loss->value.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  // Reverse topological order via iterative post-order DFS.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && visited.count(node.get())) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      auto child = node->parents[next++];
      if (!visited.count(child.get())) stack.emplace_back(child, 0);
    } else {
      visited.insert(node.get());
      order.push_back(node.get());
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad();
  loss->grad[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->requires_grad && (*it)->backprop) (*it)->backprop(**it);
}

void Sgd::step(const std::vector<NodePtr>& params) {
  for (const auto& p : params) {
    p->ensure_grad();
    auto [it, inserted] = velocity_.try_emplace(p.get(), Tensor::zeros(p->value.shape));
    Tensor& v = it->second;
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      v[i] = momentum * v[i] + p->grad[i] + weight_decay * p->value[i];
      p->value[i] -= lr * v[i];
    }
    p->zero_grad();
  }
}

}  // namespace fpl::ad
