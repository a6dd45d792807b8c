#include "fpl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace fpl::metrics {

std::size_t PadTrialSet::count(bool bona_fide) const {
  std::size_t n = 0;
  for (const auto& t : trials)
    if (t.bona_fide == bona_fide) ++n;
  return n;
}

void PadTrialSet::require_both_classes(const char* op) const {
  if (trials.empty()) throw std::invalid_argument(std::string(op) + ": empty trial set");
  if (count(true) == 0 || count(false) == 0)
    throw std::invalid_argument(std::string(op) + ": both classes required");
}

PadRates pad_rates(const PadTrialSet& trials, double tau) {
  trials.require_both_classes("pad_rates");
  if (!std::isfinite(tau)) throw std::invalid_argument("pad_rates: tau must be finite");
  std::size_t live_err = 0, attack_err = 0, correct = 0;
  const std::size_t n_live = trials.count(true), n_attack = trials.count(false);
  for (const auto& t : trials.trials) {
    const bool live_decision = t.score >= tau;
    if (t.bona_fide) {
      if (!live_decision) ++live_err;
      else ++correct;
    } else {
      if (live_decision) ++attack_err;
      else ++correct;
    }
  }
  PadRates r;
  r.bpcer = static_cast<double>(live_err) / static_cast<double>(n_live);
  r.apcer = static_cast<double>(attack_err) / static_cast<double>(n_attack);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(trials.trials.size());
  return r;
}

double auc(const PadTrialSet& trials) {
  trials.require_both_classes("auc");
  // rank-sum with midranks for ties
  struct Entry {
    float score;
    bool live;
  };
  std::vector<Entry> all;
  all.reserve(trials.trials.size());
  for (const auto& t : trials.trials) all.push_back({t.score, t.bona_fide});
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });
  const double n_live = static_cast<double>(trials.count(true));
  const double n_attack = static_cast<double>(trials.count(false));
  double rank_sum_live = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (all[k].live) rank_sum_live += midrank;
    i = j;
  }
  return (rank_sum_live - n_live * (n_live + 1.0) / 2.0) / (n_live * n_attack);
}

TrialType trial_type_from_name(const std::string& s) {
  if (s == "genuine") return TrialType::genuine;
  if (s == "impostor") return TrialType::impostor;
  if (s == "attack") return TrialType::attack;
  throw std::invalid_argument("unknown trial type: " + s);
}

const char* trial_type_name(TrialType t) {
  switch (t) {
    case TrialType::genuine: return "genuine";
    case TrialType::impostor: return "impostor";
    case TrialType::attack: return "attack";
  }
  return "?";
}

IntegratedRates integrated_rates(const std::vector<ComparisonOutcome>& trials) {
  if (trials.empty()) throw std::invalid_argument("integrated_rates: empty trial set");
  std::size_t n_gen = 0, n_imp = 0, n_att = 0;
  std::size_t gen_rej = 0, imp_acc = 0, att_acc = 0;
  for (const auto& t : trials) {
    switch (t.type) {
      case TrialType::genuine:
        ++n_gen;
        if (!t.accepted) ++gen_rej;
        break;
      case TrialType::impostor:
        ++n_imp;
        if (t.accepted) ++imp_acc;
        break;
      case TrialType::attack:
        ++n_att;
        if (t.accepted) ++att_acc;
        break;
    }
  }
  if (n_gen == 0) throw std::invalid_argument("integrated_rates: no genuine trials");
  if (n_att == 0) throw std::invalid_argument("integrated_rates: no attack trials");
  IntegratedRates r;
  r.fnmr = static_cast<double>(gen_rej) / static_cast<double>(n_gen);
  r.iapar = static_cast<double>(att_acc) / static_cast<double>(n_att);
  r.fmr = n_imp ? static_cast<double>(imp_acc) / static_cast<double>(n_imp) : 0.0;
  const std::size_t correct = (n_gen - gen_rej) + (n_imp - imp_acc) + (n_att - att_acc);
  r.im_accuracy = static_cast<double>(correct) / static_cast<double>(trials.size());
  return r;
}

double choose_threshold(const PadTrialSet& val_trials, ThresholdPolicy policy,
                        double apcer_target) {
  val_trials.require_both_classes("choose_threshold");
  std::vector<double> candidates;
  candidates.reserve(val_trials.trials.size() + 1);
  for (const auto& t : val_trials.trials) candidates.push_back(t.score);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  // sentinel just above the max score: the "reject everything" operating point
  candidates.push_back(std::nextafter(candidates.back(), std::numeric_limits<double>::infinity()));

  if (policy == ThresholdPolicy::max_accuracy) {
    double best_tau = candidates.front();
    double best_acc = -1.0;
    for (double tau : candidates) {
      double acc = pad_rates(val_trials, tau).accuracy;
      if (acc > best_acc) {  // ties keep the smallest tau
        best_acc = acc;
        best_tau = tau;
      }
    }
    return best_tau;
  }

  if (!(apcer_target >= 0.0) || apcer_target > 1.0)
    throw std::invalid_argument("choose_threshold: unattainable apcer target");
  for (double tau : candidates)
    if (pad_rates(val_trials, tau).apcer <= apcer_target) return tau;
  return candidates.back();  // sentinel: apcer == 0 there by construction
}

void write_score_csv(const std::string& path, const std::vector<ScoreRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_score_csv: cannot open " + path);
  os << "trial_id,type,score\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.trial_id << "," << r.type << "," << r.score;
    for (double c : r.components) os << "," << c;
    os << "\n";
  }
  if (!os) throw std::runtime_error("write_score_csv: write failed for " + path);
}

std::vector<ScoreRow> read_score_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_score_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("read_score_csv: empty file " + path);
  std::vector<ScoreRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    ScoreRow r;
    if (!std::getline(ss, r.trial_id, ',') || !std::getline(ss, r.type, ','))
      throw std::runtime_error("read_score_csv: malformed row: " + line);
    if (!std::getline(ss, field, ','))
      throw std::runtime_error("read_score_csv: missing score: " + line);
    r.score = std::stod(field);
    while (std::getline(ss, field, ',')) r.components.push_back(std::stod(field));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace fpl::metrics
