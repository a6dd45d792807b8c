#pragma once

#include <string>
#include <vector>

namespace fpl::metrics {

// Decision convention everywhere: live iff score >= tau.
struct PadTrial {
  float score = 0.0f;  // higher = more live
  bool bona_fide = true;
};

struct PadTrialSet {
  std::vector<PadTrial> trials;

  std::size_t count(bool bona_fide) const;
  void require_both_classes(const char* op) const;
};

struct PadRates {
  double accuracy = 0.0;
  double bpcer = 0.0;  // bona fide classified as attack
  double apcer = 0.0;  // attack classified as bona fide
};

PadRates pad_rates(const PadTrialSet& trials, double tau);

// Pairwise rank AUC: mean over (live, attack) pairs of
// [s_live > s_attack] + 0.5*[s_live == s_attack]. 64-bit accumulation.
double auc(const PadTrialSet& trials);

enum class TrialType { genuine, impostor, attack };
TrialType trial_type_from_name(const std::string& s);
const char* trial_type_name(TrialType t);

struct ComparisonOutcome {
  std::string trial_id;
  TrialType type = TrialType::genuine;
  bool accepted = false;
  double fused_score = 0.0;
  double match_score = 0.0;
};

struct IntegratedRates {
  double fnmr = 0.0;         // genuine-mated rejected
  double iapar = 0.0;        // attacks accepted
  double im_accuracy = 0.0;  // correct decisions over all trials
  double fmr = 0.0;          // impostors accepted (extra, outside the ISO trio)
};

IntegratedRates integrated_rates(const std::vector<ComparisonOutcome>& trials);

enum class ThresholdPolicy { max_accuracy, bpcer_at_apcer_target };

// max_accuracy: smallest tau maximizing PAD accuracy over the candidate set
// (all observed scores plus a just-above-max sentinel).
// bpcer_at_apcer_target: smallest tau with apcer <= target.
double choose_threshold(const PadTrialSet& val_trials, ThresholdPolicy policy,
                        double apcer_target = 0.05);

// Score file: CSV `trial_id,type,score[,component...]`.
struct ScoreRow {
  std::string trial_id;
  std::string type;
  double score = 0.0;
  std::vector<double> components;
};
void write_score_csv(const std::string& path, const std::vector<ScoreRow>& rows);
std::vector<ScoreRow> read_score_csv(const std::string& path);

}  // namespace fpl::metrics
