#pragma once

#include <array>
#include <string>
#include <vector>

#include "fpl/image.hpp"
#include "fpl/nn.hpp"
#include "fpl/tensor.hpp"
#include "fpl/train.hpp"

namespace fpl::rec {

struct PreprocessResult {
  Tensor image;  // [1,H,W] in [0,1]
  bool low_quality = false;
};

// Local contrast normalization: per-16x16-block mean/std, bilinearly blended
// across block centers, z-scores clamped to [-3,3], rescaled to [0,1].
PreprocessResult preprocess(const Tensor& image);

struct PatchGrid {
  int rows = 3;
  int cols = 3;
  float overlap = 0.25f;  // fraction of patch side shared with neighbors
};

struct Patch {
  Tensor pixels;  // [1,h,w]
  int x0 = 0, y0 = 0;
};

// rows*cols patches with the configured overlap; every pixel covered at
// least once. Throws if the image is smaller than one patch.
std::vector<Patch> split_patches(const Tensor& image, const PatchGrid& grid);

struct KeypointDescriptor {
  float x = 0.0f, y = 0.0f;  // patch coordinates
  float theta = 0.0f;        // dominant gradient orientation in [0, pi)
  std::array<float, 32> desc{};  // orientation histogram, L2-normalized
};

struct KeypointConfig {
  int max_keypoints = 16;
  int nms_radius = 3;
  float harris_k = 0.04f;
  float response_floor = 1e-7f;  // absolute Harris response threshold
};

std::vector<KeypointDescriptor> extract_keypoints(const Tensor& patch,
                                                  const KeypointConfig& cfg = {});

struct MatchedPair {
  int query_index = -1;
  int template_index = -1;
  float cosine = 0.0f;
  float mean_abs_diff = 0.0f;  // mean |q_k - t_k| over descriptor dims
  float displacement = 0.0f;   // keypoint distance / patch diagonal
};

struct PatchMatch {
  float score = 0.0f;  // fraction of mutual matches times mean cosine
  std::vector<MatchedPair> pairs;
};

// Mutual-nearest-neighbor matching with Lowe ratio test (default 0.8).
// The match fraction is over max(#query, #template) keypoints.
PatchMatch match_patch(const std::vector<KeypointDescriptor>& query,
                       const std::vector<KeypointDescriptor>& templ,
                       float patch_diag, float ratio = 0.8f);

// match = mean of the top-k patch scores (k = ceil(usable/2));
// compare-liveness = mean over usable patches. Throws if none usable.
std::pair<float, float> aggregate_patches(const std::vector<float>& match_scores,
                                          const std::vector<float>& compare_scores,
                                          const std::vector<bool>& usable);

// 16-dim comparison feature over matched pairs: diff stats (mean, max, std),
// cosine stats (mean, min), 8-bin cosine histogram, match fraction, mean
// displacement, usable-patch fraction.
std::array<float, 16> comparison_feature(const std::vector<PatchMatch>& matches,
                                         int usable_patches, int total_patches,
                                         int k_per_patch = 16);

// Logistic classifier over comparison features.
struct CompareClassifier {
  std::array<float, 16> w{};
  float b = 0.0f;

  float score(const std::array<float, 16>& feature) const;
};

// Full-batch gradient descent; deterministic.
CompareClassifier train_compare_classifier(
    const std::vector<std::array<float, 16>>& features, const std::vector<int>& labels,
    int iterations = 300, float lr = 0.5f);

struct CompareScore {
  float value = 0.5f;
  bool low_confidence = false;  // set when no pairs matched
};

CompareScore compare_liveness_score(const std::vector<PatchMatch>& matches,
                                    int usable_patches, int total_patches,
                                    const CompareClassifier& clf);

// P(live) from a PAD model or a three-member ensemble.
float normal_liveness_score(nn::LivenessModel& model, const Tensor& image);
float normal_liveness_score(train::EnsembleModel& ensemble, const Tensor& image);

struct FusionWeights {
  float match = 0.4f;
  float compare = 0.3f;
  float normal = 0.3f;
};

struct IMScore {
  float match = 0.0f;
  float compare_liveness = 0.0f;
  float normal_liveness = 0.0f;
  float fused = 0.0f;
  bool accept = false;
};

// fused = weighted mean; accept iff match >= tau_match AND fused >= tau_im.
IMScore fuse_im(float match, float compare_liveness, float normal_liveness,
                const FusionWeights& weights, float tau_match, float tau_im);

struct Template {
  std::string subject;
  std::string finger;
  PatchGrid grid;
  std::vector<std::vector<KeypointDescriptor>> patch_descriptors;
  std::vector<std::uint8_t> usable;  // per patch
  std::vector<float> embedding;      // enrolled liveness embedding
};

// Descriptors from the highest-contrast enrollment image; embedding averaged
// over all enrollment images. Throws if every image is low-quality.
Template enroll(const std::vector<ImageSample>& images, nn::LivenessModel& model,
                const PatchGrid& grid = {});

// "FPTM" file: magic, version u32, grid, strings, per-patch descriptor
// blocks, embedding; little-endian f32; bit-exact round trip.
void save_template(const std::string& path, const Template& t);
Template load_template(const std::string& path);

// Patch pipeline against a template without scoring thresholds: preprocess,
// split, extract, match. Feeds both classifier training and verification.
struct MatchOutcome {
  float match_score = 0.0f;       // top-k aggregate over usable patches
  std::vector<PatchMatch> matches;  // one entry per usable patch
  std::vector<float> patch_scores;  // per grid cell, 0 where unusable
  std::vector<bool> usable;
  int usable_count = 0;
  int total_patches = 0;
  bool low_quality = false;
};
MatchOutcome match_query(const Tensor& query, const Template& templ);

struct VerifyResult {
  IMScore score;
  bool low_quality = false;
  bool low_confidence = false;
};

VerifyResult verify(const Tensor& query, const Template& templ,
                    nn::LivenessModel& model, const CompareClassifier& clf,
                    const FusionWeights& weights, float tau_match, float tau_im);

// Trial protocol CSV: trial_id,query_path,template_id,type.
struct TrialRow {
  std::string trial_id;
  std::string query_path;
  std::string template_id;
  std::string type;  // genuine | impostor | attack
};
void write_trials(const std::string& path, const std::vector<TrialRow>& rows);
std::vector<TrialRow> read_trials(const std::string& path);

}  // namespace fpl::rec
