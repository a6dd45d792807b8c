#include "fpl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <stdexcept>

namespace fpl::augment {

std::vector<AugmentOp> default_pipeline() {
  return {
      {AugKind::hflip},    {AugKind::vflip},  {AugKind::translate},
      {AugKind::crop},     {AugKind::affine}, {AugKind::rotate},
      {AugKind::brightness}, {AugKind::contrast},
  };
}

static Tensor warp_affine(const Tensor& img, float m00, float m01, float m10,
                          float m11, float tx, float ty) {
  // output(x,y) samples input at M*(p-c)+c+t, anchored at the image center
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const float cx = (W - 1) * 0.5f, cy = (H - 1) * 0.5f;
  Tensor out(img.shape);
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float dx = x - cx, dy = y - cy;
        const float sx = m00 * dx + m01 * dy + cx + tx;
        const float sy = m10 * dx + m11 * dy + cy + ty;
        out.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
            sample_bilinear(img, c, sx, sy);
      }
  return out;
}

Tensor apply_op(const Tensor& image, const AugmentOp& op, RngStream& rng) {
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  switch (op.kind) {
    case AugKind::hflip: {
      Tensor out(image.shape);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            out.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                image.data[(static_cast<std::size_t>(c) * H + y) * W + (W - 1 - x)];
      return out;
    }
    case AugKind::vflip: {
      Tensor out(image.shape);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            out.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                image.data[(static_cast<std::size_t>(c) * H + (H - 1 - y)) * W + x];
      return out;
    }
    case AugKind::translate: {
      const float tx = rng.uniform(-op.translate_frac, op.translate_frac) * W;
      const float ty = rng.uniform(-op.translate_frac, op.translate_frac) * H;
      return warp_affine(image, 1, 0, 0, 1, tx, ty);
    }
    case AugKind::rotate: {
      const float a = rng.uniform(-op.rotate_deg, op.rotate_deg) * 3.14159265f / 180.0f;
      const float ca = std::cos(a), sa = std::sin(a);
      return warp_affine(image, ca, -sa, sa, ca, 0, 0);
    }
    case AugKind::affine: {
      const float a = op.affine_max;
      return warp_affine(image, 1.0f + rng.uniform(-a, a), rng.uniform(-a, a),
                         rng.uniform(-a, a), 1.0f + rng.uniform(-a, a), 0, 0);
    }
    case AugKind::crop: {
      const float area = rng.uniform(op.crop_min_area, 1.0f);
      const float side = std::sqrt(area);
      const int ch = static_cast<int>(std::lround(H * side));
      const int cw = static_cast<int>(std::lround(W * side));
      if (ch < 2 || cw < 2 || ch > H || cw > W) return image;  // degenerate -> identity
      const int oy = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(H - ch + 1)));
      const int ox = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(W - cw + 1)));
      Tensor out(image.shape);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x) {
            const float sy = oy + (static_cast<float>(y) / (H - 1)) * (ch - 1);
            const float sx = ox + (static_cast<float>(x) / (W - 1)) * (cw - 1);
            out.data[(static_cast<std::size_t>(c) * H + y) * W + x] =
                sample_bilinear(image, c, sx, sy);
          }
      return out;
    }
    case AugKind::brightness: {
      const float d = rng.uniform(-op.brightness_delta, op.brightness_delta);
      Tensor out = image;
      for (auto& v : out.data) v += d;
      return out;
    }
    case AugKind::contrast: {
      const float f = rng.uniform(op.contrast_lo, op.contrast_hi);
      Tensor out = image;
      for (auto& v : out.data) v = 0.5f + (v - 0.5f) * f;
      return out;
    }
  }
  throw std::invalid_argument("apply_op: unknown kind");
}

ImageSample apply_pipeline(const ImageSample& sample, const std::vector<AugmentOp>& ops,
                           RngStream& rng, float apply_prob) {
  if (sample.pixels.numel() == 0) throw std::invalid_argument("apply_pipeline: empty image");
  std::vector<std::size_t> order(ops.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.next_below(i)]);

  ImageSample out = sample;
  for (std::size_t idx : order)
    if (rng.bernoulli(apply_prob)) out.pixels = apply_op(out.pixels, ops[idx], rng);
  for (auto& v : out.pixels.data) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// Inverse 2-D DFT (separable) of the attenuated complex noise grid; only the
// real part is kept.
static std::vector<double> low_freq_field(int h, int w, float decay_power, RngStream& rng) {
  using cd = std::complex<double>;
  std::vector<cd> z(static_cast<std::size_t>(h) * w);
  const double f0 = 1.0 / static_cast<double>(std::max(h, w));
  for (int u = 0; u < h; ++u) {
    const double fy = (u <= h / 2 ? u : u - h) / static_cast<double>(h);
    for (int v = 0; v < w; ++v) {
      const double fx = (v <= w / 2 ? v : v - w) / static_cast<double>(w);
      const double f = std::sqrt(fx * fx + fy * fy);
      const double atten = 1.0 / std::pow(std::max(f, f0), static_cast<double>(decay_power));
      const double re = rng.normal(), im = rng.normal();
      z[static_cast<std::size_t>(u) * w + v] = cd(re, im) * atten;
    }
  }
  // rows first: t[u][x] = sum_v z[u][v] e^{i 2 pi v x / w}
  std::vector<cd> t(static_cast<std::size_t>(h) * w);
  const double two_pi = 6.283185307179586;
  for (int u = 0; u < h; ++u)
    for (int x = 0; x < w; ++x) {
      cd acc(0.0, 0.0);
      for (int v = 0; v < w; ++v) {
        const double ang = two_pi * v * x / w;
        acc += z[static_cast<std::size_t>(u) * w + v] * cd(std::cos(ang), std::sin(ang));
      }
      t[static_cast<std::size_t>(u) * w + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      cd acc(0.0, 0.0);
      for (int u = 0; u < h; ++u) {
        const double ang = two_pi * u * y / h;
        acc += t[static_cast<std::size_t>(u) * w + x] * cd(std::cos(ang), std::sin(ang));
      }
      out[static_cast<std::size_t>(y) * w + x] = acc.real();
    }
  return out;
}

std::vector<std::uint8_t> fmix_mask(int h, int w, double lambda, const FmixConfig& cfg,
                                    RngStream& rng) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("fmix_mask: lambda outside [0,1]");
  if (h <= 0 || w <= 0) throw std::invalid_argument("fmix_mask: empty mask");
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const std::size_t ones = static_cast<std::size_t>(std::llround(lambda * static_cast<double>(n)));
  std::vector<std::uint8_t> mask(n, 0);
  if (ones == 0) return mask;
  if (ones >= n) {
    std::fill(mask.begin(), mask.end(), 1);
    return mask;
  }
  auto field = low_freq_field(h, w, cfg.decay_power, rng);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (field[a] != field[b]) return field[a] > field[b];
    return a < b;  // row-major tie break
  });
  for (std::size_t i = 0; i < ones; ++i) mask[idx[i]] = 1;
  return mask;
}

FmixResult fmix_mix(const ImageSample& a, const ImageSample& b, const FmixConfig& cfg,
                    RngStream& rng) {
  if (!a.pixels.same_shape(b.pixels)) throw std::invalid_argument("fmix_mix: shape mismatch");
  if (cfg.alpha <= 0.0f || cfg.decay_power <= 0.0f)
    throw std::invalid_argument("fmix_mix: invalid config");
  const int C = a.pixels.dim(0), H = a.pixels.dim(1), W = a.pixels.dim(2);
  FmixResult r;
  r.lambda = rng.beta(cfg.alpha, cfg.alpha);
  r.mask = fmix_mask(H, W, r.lambda, cfg, rng);
  r.image = a;
  for (int c = 0; c < C; ++c)
    for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W; ++i) {
      const std::size_t p = static_cast<std::size_t>(c) * H * W + i;
      r.image.pixels[p] = r.mask[i] ? a.pixels[p] : b.pixels[p];
    }
  const float lf = static_cast<float>(r.lambda);
  r.image.target = {lf * a.target[0] + (1 - lf) * b.target[0],
                    lf * a.target[1] + (1 - lf) * b.target[1]};
  return r;
}

}  // namespace fpl::augment
