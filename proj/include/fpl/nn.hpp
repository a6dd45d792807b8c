#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fpl/autodiff.hpp"
#include "fpl/tensor.hpp"

namespace fpl::nn {

struct Linear {
  ad::NodePtr w;  // [in, out]
  ad::NodePtr b;  // [out]
  ad::NodePtr forward(const ad::NodePtr& x) const {
    return ad::add_row_bias(ad::matmul(x, w), b);
  }
};

struct Conv2dLayer {
  ad::NodePtr w;  // [F, C, kh, kw]
  ad::NodePtr b;  // [F]
  int stride = 1;
  int padding = 1;
  ad::NodePtr forward(const ad::NodePtr& x) const {
    return ad::add_channel_bias(ad::conv2d(x, w, stride, padding), b);
  }
};

// Train mode normalizes by batch statistics (batch >= 2 required) and
// updates running stats with momentum 0.1; eval mode uses running stats
// and mutates nothing.
struct BatchNorm2d {
  ad::NodePtr gamma;  // [C]
  ad::NodePtr beta;   // [C]
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  ad::NodePtr forward(const ad::NodePtr& x, bool train);
};

// Channel gate: x * sigmoid(W2 relu(W1 gap(x) + b1) + b2), per sample.
struct SEBlock {
  int channels = 0;
  int reduction = 4;
  Linear fc1;  // C -> C/r
  Linear fc2;  // C/r -> C
  ad::NodePtr forward(const ad::NodePtr& x) const;
};

enum class Preset { tiny, small, base };

Preset preset_from_name(const std::string& name);
const char* preset_name(Preset p);

struct ConvBlock {
  Conv2dLayer conv;
  BatchNorm2d bn;
  SEBlock se;
  bool has_se = false;
};

struct ForwardResult {
  ad::NodePtr embedding;  // [N, D]
  ad::NodePtr logits;     // [N, 2]
  Tensor probs;           // softmax(logits), rows sum to 1
};

// Three conv blocks (SE on the last two), global average pool, linear
// embedding head (default 192), linear classifier head to 2 classes.
struct LivenessModel {
  Preset preset = Preset::tiny;
  int embedding_dim = 192;
  float dropout_p = 0.0f;  // applied between embedding and head in train mode
  std::vector<ConvBlock> blocks;
  Linear embed;
  Linear head;

  ForwardResult forward(const Tensor& images, bool train, RngStream* rng = nullptr);

  std::vector<ad::NodePtr> parameters() const;
  std::size_t param_count() const;
  // Named tensors for serialization; includes BN running stats.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
};

// Width table per preset; exact parameter counts follow from these.
std::vector<int> preset_widths(Preset p);

LivenessModel build_model(Preset preset, int embedding_dim, std::uint64_t seed);

struct FeatureResult {
  std::vector<float> feature;
  double elapsed_ms = 0.0;
};
// Pre-head embedding of a single [1,H,W] or [1,1,H,W] image, with timing.
FeatureResult extract_feature(LivenessModel& model, const Tensor& image);

// "FPLM" checkpoint: magic, version u32, preset u32, embedding dim u32,
// then (name-len u32, name, rank u32, dims u32*rank, f32 data) per tensor.
void save_checkpoint(const std::string& path, LivenessModel& model);
LivenessModel load_checkpoint(const std::string& path);

}  // namespace fpl::nn
