#include "fpl/styleswap.hpp"

#include <cmath>
#include <stdexcept>

namespace fpl::styleswap {

StyleStats compute_stats(const Tensor& image) {
  if (image.rank() != 3) throw std::invalid_argument("compute_stats: expected [C,H,W]");
  const int C = image.dim(0);
  const std::size_t hw = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  if (hw < 2) throw std::invalid_argument("compute_stats: needs at least 2 pixels");
  StyleStats s;
  s.mean.resize(C);
  s.std.resize(C);
  for (int c = 0; c < C; ++c) {
    double mu = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mu += image.data[c * hw + i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
      double d = image.data[c * hw + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(hw);
    s.mean[c] = static_cast<float>(mu);
    s.std[c] = std::max(static_cast<float>(std::sqrt(var)), kStdFloor);
  }
  return s;
}

static Tensor restyle(const Tensor& img, const StyleStats& own, const StyleStats& other) {
  const int C = img.dim(0);
  const std::size_t hw = static_cast<std::size_t>(img.dim(1)) * img.dim(2);
  Tensor out(img.shape);
  for (int c = 0; c < C; ++c) {
    const float scale = other.std[c] / own.std[c];
    for (std::size_t i = 0; i < hw; ++i)
      out.data[c * hw + i] = scale * (img.data[c * hw + i] - own.mean[c]) + other.mean[c];
  }
  return out;
}

std::pair<Tensor, Tensor> style_swap(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("style_swap: shape mismatch");
  StyleStats sa = compute_stats(a);
  StyleStats sb = compute_stats(b);
  return {restyle(a, sa, sb), restyle(b, sb, sa)};
}

std::vector<SwapRecord> batch_style_swap(std::vector<ImageSample>& batch, float p,
                                         RngStream& rng) {
  if (batch.empty()) throw std::invalid_argument("batch_style_swap: empty batch");
  std::vector<SwapRecord> log;
  for (Label label : {Label::live, Label::spoof}) {
    std::vector<int> members;
    for (int i = 0; i < static_cast<int>(batch.size()); ++i)
      if (batch[static_cast<std::size_t>(i)].label == label) members.push_back(i);
    // uniform partner assignment via shuffle, then consecutive pairing
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[rng.next_below(i)]);
    for (std::size_t i = 0; i + 1 < members.size(); i += 2) {
      SwapRecord rec;
      rec.first = members[i];
      rec.second = members[i + 1];
      rec.label = label;
      rec.swapped = rng.bernoulli(p);
      if (rec.swapped) {
        auto& a = batch[static_cast<std::size_t>(rec.first)];
        auto& b = batch[static_cast<std::size_t>(rec.second)];
        auto [na, nb] = style_swap(a.pixels, b.pixels);
        a.pixels = std::move(na);
        b.pixels = std::move(nb);
      }
      log.push_back(rec);
    }
  }
  return log;
}

}  // namespace fpl::styleswap
