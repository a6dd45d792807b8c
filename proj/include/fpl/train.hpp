#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fpl/image.hpp"
#include "fpl/metrics.hpp"
#include "fpl/nn.hpp"
#include "fpl/tensor.hpp"

namespace fpl::train {

// Loss bookkeeping: total equals the weighted sum of terms (checked by tests
// to 1e-6); term values are the raw, unweighted quantities.
struct LossValue {
  float total = 0.0f;
  struct Term {
    std::string name;  // "ce", "kl_mutual", "kl_distill"
    float value = 0.0f;
    float weight = 1.0f;
  };
  std::vector<Term> terms;

  float weighted_sum() const;
};

// Mean over rows of -sum_k t_k log softmax(logits)_k; rows of `targets`
// must sum to 1. Plain evaluation, no graph.
LossValue cross_entropy(const Tensor& logits, const Tensor& targets);

// sum_k p_k log(p_k / q_k), logs clamped at eps=1e-12. Inputs must be
// distributions (nonnegative, sum to 1 within 1e-4).
float kl_div(const std::vector<float>& p, const std::vector<float>& q);

// One simultaneous deep-mutual-learning step: each peer minimizes
// CE(own, y) + KL(peer -> constant || own); both optimizers step after both
// backward passes, so neither update sees the other's.
std::pair<LossValue, LossValue> mutual_step(nn::LivenessModel& peer1,
                                            nn::LivenessModel& peer2,
                                            const Tensor& images, const Tensor& targets,
                                            ad::Sgd& opt1, ad::Sgd& opt2);

// (1-alpha)*CE(student, y) + alpha*T^2*KL(softmax(teacher/T) || softmax(student/T)),
// teacher treated as a constant. Plain evaluation.
LossValue distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                       const Tensor& targets, float temperature = 5.0f,
                       float alpha = 0.5f);

struct EnsembleModel {
  std::vector<nn::LivenessModel> members;  // exactly three
};

// Arithmetic mean of probability rows; each row sums to 1.
std::array<float, 2> average_probs(const std::vector<std::array<float, 2>>& probs);

// Mean of member softmax outputs for one [1,H,W] or [1,1,H,W] image.
std::array<float, 2> ensemble_predict(EnsembleModel& ensemble, const Tensor& image);

EnsembleModel load_ensemble(const std::vector<std::string>& checkpoint_paths);

enum class RecipeKind { baseline, strong_aug, mutual, style, distill, ensemble };
RecipeKind recipe_kind_from_name(const std::string& name);
const char* recipe_kind_name(RecipeKind k);

struct Recipe {
  RecipeKind kind = RecipeKind::baseline;
  nn::Preset preset = nn::Preset::small;
  int embedding_dim = 192;
  int epochs = 20;
  int batch_size = 32;
  float lr = 0.05f;           // cosine-decayed per epoch
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  std::uint64_t seed = 1;
  bool strong_augment = false;
  float fmix_prob = 0.0f;     // per consecutive batch pair
  float style_prob = 0.0f;    // per same-label batch pair
  float distill_temperature = 5.0f;
  float distill_alpha = 0.5f;
  double stop_at_val_auc = -1.0;  // early stop once reached; < 0 disables
  std::string out_dir;
};

// Named defaults: baseline = light flips only; strong-aug = full pipeline +
// FMix; style = strong-aug + style swap; mutual/distill/ensemble build on
// strong-aug.
Recipe make_recipe(const std::string& name);

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double train_auc = 0.0;
  double val_auc = 0.0;
  double wall_ms = 0.0;
};

// CSV columns: epoch,train_loss,train_auc,val_auc,wall_ms
void write_epoch_log(const std::string& path, const std::vector<EpochRow>& rows);
std::vector<EpochRow> read_epoch_log(const std::string& path);

struct RecipeResult {
  std::vector<std::string> checkpoints;  // paths, in member order
  std::vector<EpochRow> log;
  double val_auc = 0.0;  // from the last logged epoch (ensemble: fused)
};

// Deterministic from recipe.seed; writes checkpoints and epochs.csv under
// recipe.out_dir. Aborts with a diagnostic on non-finite loss.
RecipeResult run_recipe(const Recipe& recipe, const std::vector<ImageSample>& train_set,
                        const std::vector<ImageSample>& val_set);

// PAD trials (score = P(live)) for a model over a sample set, eval mode.
metrics::PadTrialSet evaluate(nn::LivenessModel& model,
                              const std::vector<ImageSample>& samples,
                              int batch_size = 32);

}  // namespace fpl::train
