#pragma once

#include <utility>
#include <vector>

#include "fpl/image.hpp"
#include "fpl/rng.hpp"

namespace fpl::styleswap {

inline constexpr float kStdFloor = 1e-5f;

struct StyleStats {
  std::vector<float> mean;  // per channel
  std::vector<float> std;   // per channel, floored at kStdFloor
};

// Per-channel population mean/std over spatial dims.
StyleStats compute_stats(const Tensor& image);

// a' = std_b*(a-mu_a)/std_a + mu_b per channel, and symmetrically for b.
std::pair<Tensor, Tensor> style_swap(const Tensor& a, const Tensor& b);

struct SwapRecord {
  int first = -1;
  int second = -1;
  Label label = Label::live;
  bool swapped = false;
};

// Same-label samples are shuffled into pairs; each pair swaps styles with
// probability p. Cross-label pairs never form; unpaired samples pass through.
// Returns the pairing log for auditing.
std::vector<SwapRecord> batch_style_swap(std::vector<ImageSample>& batch, float p,
                                         RngStream& rng);

}  // namespace fpl::styleswap
