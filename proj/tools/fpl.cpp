#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fpl/expconfig.hpp"
#include "fpl/metrics.hpp"
#include "fpl/nn.hpp"
#include "fpl/recognizer.hpp"
#include "fpl/synthdata.hpp"
#include "fpl/train.hpp"

namespace fs = std::filesystem;
using namespace fpl;

namespace {

cfg::ExperimentConfig load_config(const std::string& config_path,
                                  const std::vector<std::string>& overrides) {
  cfg::ExperimentConfig c;
  if (!config_path.empty()) c.load_file(config_path);
  for (const auto& o : overrides) c.apply_override(o);
  return c;
}

void echo_config(const cfg::ExperimentConfig& c, const std::string& dir) {
  fs::create_directories(dir);
  c.write_resolved((fs::path(dir) / "resolved_config.cfg").string());
  cfg::ExperimentConfig::write_reference((fs::path(dir) / "config_reference.cfg").string());
}

synth::Manifest load_manifest(const cfg::ExperimentConfig& c) {
  const std::string path = (fs::path(c.get("dataset.dir")) / "manifest.csv").string();
  if (!fs::exists(path)) throw cfg::DataError("manifest not found: " + path);
  return synth::read_manifest(path);
}

train::Recipe recipe_from_config(const cfg::ExperimentConfig& c) {
  train::Recipe r;
  try {
    r = train::make_recipe(c.get("recipe.name"));
    r.preset = nn::preset_from_name(c.get("model.preset"));
  } catch (const std::invalid_argument& e) {
    throw cfg::ConfigError(e.what());
  }
  r.embedding_dim = c.get_int("model.embedding_dim");
  r.epochs = c.get_int("train.epochs");
  r.batch_size = c.get_int("train.batch_size");
  r.lr = static_cast<float>(c.get_double("train.lr"));
  r.momentum = static_cast<float>(c.get_double("train.momentum"));
  r.weight_decay = static_cast<float>(c.get_double("train.weight_decay"));
  r.seed = c.get_u64("seed");
  r.stop_at_val_auc = c.get_double("train.stop_at_val_auc");
  if (c.get_double("aug.fmix_prob") >= 0.0)
    r.fmix_prob = static_cast<float>(c.get_double("aug.fmix_prob"));
  if (c.get_double("aug.style_prob") >= 0.0)
    r.style_prob = static_cast<float>(c.get_double("aug.style_prob"));
  r.distill_temperature = static_cast<float>(c.get_double("distill.temperature"));
  r.distill_alpha = static_cast<float>(c.get_double("distill.alpha"));
  r.out_dir = (fs::path(c.get("out.dir")) / c.get("recipe.name")).string();
  return r;
}

nn::LivenessModel load_model(const cfg::ExperimentConfig& c) {
  const std::string path = c.get("model.checkpoint");
  if (path.empty()) throw cfg::ConfigError("model.checkpoint is required");
  if (!fs::exists(path)) throw cfg::DataError("checkpoint not found: " + path);
  return nn::load_checkpoint(path);
}

int cmd_gen_data(const cfg::ExperimentConfig& c) {
  synth::DatasetConfig dc;
  dc.subjects = c.get_int("gen.subjects");
  dc.fingers_per_subject = c.get_int("gen.fingers");
  dc.impressions = c.get_int("gen.impressions");
  dc.scanners = c.get_int("gen.scanners");
  dc.materials = c.get_list("gen.materials");
  try {
    dc.split = synth::split_mode_from_name(c.get("gen.split"));
  } catch (const std::invalid_argument& e) {
    throw cfg::ConfigError(e.what());
  }
  dc.image_size = c.get_int("gen.image_size");
  dc.seed = c.get_u64("seed");
  dc.out_dir = c.get("dataset.dir");
  auto m = synth::build_dataset(dc);
  echo_config(c, dc.out_dir);
  std::size_t train_n = 0;
  for (const auto& r : m.rows)
    if (r.split == "train") ++train_n;
  std::cout << "generated " << m.rows.size() << " images (" << train_n << " train, "
            << m.rows.size() - train_n << " val) under " << dc.out_dir << "\n";
  return 0;
}

int cmd_train(const cfg::ExperimentConfig& c) {
  auto manifest = load_manifest(c);
  const auto& dir = c.get("dataset.dir");
  auto train_set = synth::load_samples(manifest, dir, "train");
  auto val_set = synth::load_samples(manifest, dir, "val");
  if (train_set.empty() || val_set.empty())
    throw cfg::DataError("dataset is missing a train or val split");
  auto recipe = recipe_from_config(c);
  fs::create_directories(recipe.out_dir);
  echo_config(c, recipe.out_dir);
  auto res = train::run_recipe(recipe, train_set, val_set);
  std::cout << "recipe " << c.get("recipe.name") << ": val AUC "
            << res.val_auc << ", " << res.checkpoints.size() << " checkpoint(s) under "
            << recipe.out_dir << "\n";
  return 0;
}

int cmd_eval(const cfg::ExperimentConfig& c) {
  auto model = load_model(c);
  auto manifest = load_manifest(c);
  auto val_set = synth::load_samples(manifest, c.get("dataset.dir"), "val");
  if (val_set.empty()) throw cfg::DataError("dataset has no val split");
  auto trials = train::evaluate(model, val_set);

  const auto& policy_name = c.get("metrics.threshold_policy");
  metrics::ThresholdPolicy policy;
  if (policy_name == "max_accuracy") policy = metrics::ThresholdPolicy::max_accuracy;
  else if (policy_name == "bpcer_at_apcer") policy = metrics::ThresholdPolicy::bpcer_at_apcer_target;
  else throw cfg::ConfigError("unknown threshold policy: " + policy_name);
  const double tau = metrics::choose_threshold(trials, policy, c.get_double("metrics.apcer_target"));
  const auto rates = metrics::pad_rates(trials, tau);
  const double auc = metrics::auc(trials);

  const std::string out_dir = c.get("out.dir");
  fs::create_directories(out_dir);
  echo_config(c, out_dir);
  std::vector<metrics::ScoreRow> rows;
  for (std::size_t i = 0; i < val_set.size(); ++i)
    rows.push_back({val_set[i].path.empty() ? "val" + std::to_string(i) : val_set[i].path,
                    label_name(val_set[i].label), trials.trials[i].score, {}});
  metrics::write_score_csv((fs::path(out_dir) / "scores.csv").string(), rows);
  std::ofstream os((fs::path(out_dir) / "report.csv").string());
  os.precision(17);
  os << "metric,value\n"
     << "pad_accuracy," << rates.accuracy << "\n"
     << "bpcer," << rates.bpcer << "\n"
     << "apcer," << rates.apcer << "\n"
     << "auc," << auc << "\n"
     << "threshold," << tau << "\n";
  std::cout << "pad_accuracy=" << rates.accuracy << " bpcer=" << rates.bpcer
            << " apcer=" << rates.apcer << " auc=" << auc << " tau=" << tau << "\n";
  return 0;
}

int cmd_extract(const cfg::ExperimentConfig& c) {
  auto model = load_model(c);
  auto manifest = load_manifest(c);
  auto samples = synth::load_samples(manifest, c.get("dataset.dir"));
  if (samples.empty()) throw cfg::DataError("dataset is empty");
  const int count = std::min<int>(c.get_int("extract.count"), static_cast<int>(samples.size()));
  if (count < 1) throw cfg::ConfigError("extract.count must be >= 1");

  // warm-up pass, then >= 100 timed extractions cycling the images
  (void)nn::extract_feature(model, samples[0].pixels);
  std::vector<std::vector<float>> feats;
  std::vector<double> times;
  const int timed = std::max(100, count);
  for (int i = 0; i < timed; ++i) {
    auto fr = nn::extract_feature(model, samples[static_cast<std::size_t>(i % count)].pixels);
    times.push_back(fr.elapsed_ms);
    if (i < count) feats.push_back(std::move(fr.feature));
  }
  const std::string out_dir = c.get("out.dir");
  fs::create_directories(out_dir);
  echo_config(c, out_dir);
  cfg::write_features((fs::path(out_dir) / "features.fplv").string(), feats);

  double mean = 0.0;
  for (double t : times) mean += t;
  mean /= static_cast<double>(times.size());
  std::sort(times.begin(), times.end());
  const double median = times[times.size() / 2];
  const std::size_t dim = feats[0].size();
  {
    std::ofstream os((fs::path(out_dir) / "timing.csv").string());
    os << "algorithm,overall_time_ms_mean,overall_time_ms_median,feat_size,acc\n";
    os << "fpl," << mean << "," << median << "," << dim << ",-\n";
  }
  std::cout << "| Algorithm | Overall Time[ms] | Feat size | Acc[%] |\n"
            << "| fpl | " << median << " (mean " << mean << ") | " << dim << " | - |\n"
            << "extracted " << count << " features to " << out_dir << "/features.fplv\n";
  return 0;
}

struct FingerGroup {
  std::vector<ImageSample> live_train, live_val, spoof_train, spoof_val;
};

int cmd_match(const cfg::ExperimentConfig& c) {
  auto model = load_model(c);
  auto manifest = load_manifest(c);
  auto samples = synth::load_samples(manifest, c.get("dataset.dir"));
  if (samples.empty()) throw cfg::DataError("dataset is empty");

  std::map<std::string, FingerGroup> fingers;
  for (auto& s : samples) {
    auto& g = fingers[s.subject + "/" + s.finger];
    const bool live = s.label == Label::live;
    const bool train_split = s.split == "train";
    (live ? (train_split ? g.live_train : g.live_val)
          : (train_split ? g.spoof_train : g.spoof_val))
        .push_back(std::move(s));
  }

  // enroll one template per finger with live training images
  std::vector<std::string> ids;
  std::map<std::string, rec::Template> templates;
  for (auto& [id, g] : fingers) {
    if (g.live_train.empty()) continue;
    templates[id] = rec::enroll(g.live_train, model);
    ids.push_back(id);
  }
  if (ids.size() < 2) throw cfg::DataError("need at least two enrollable fingers");

  // train the compare classifier on training-split comparisons
  std::vector<std::array<float, 16>> feats;
  std::vector<int> labels;
  for (const auto& id : ids) {
    const auto& t = templates[id];
    const auto& g = fingers[id];
    for (std::size_t i = 1; i < g.live_train.size(); ++i) {
      auto out = rec::match_query(g.live_train[i].pixels, t);
      feats.push_back(rec::comparison_feature(out.matches, out.usable_count, out.total_patches));
      labels.push_back(1);
    }
    for (const auto& s : g.spoof_train) {
      auto out = rec::match_query(s.pixels, t);
      feats.push_back(rec::comparison_feature(out.matches, out.usable_count, out.total_patches));
      labels.push_back(0);
    }
  }
  if (feats.empty()) throw cfg::DataError("no comparison training pairs available");
  auto clf = rec::train_compare_classifier(feats, labels);

  rec::FusionWeights weights{static_cast<float>(c.get_double("fuse.w_match")),
                             static_cast<float>(c.get_double("fuse.w_compare")),
                             static_cast<float>(c.get_double("fuse.w_normal"))};
  const float tau_match = static_cast<float>(c.get_double("match.tau_match"));
  const float tau_im = static_cast<float>(c.get_double("match.tau_im"));

  std::vector<rec::TrialRow> trial_rows;
  std::vector<metrics::ScoreRow> score_rows;
  std::vector<metrics::ComparisonOutcome> outcomes;
  int trial_no = 0;
  auto run_trial = [&](const ImageSample& q, const std::string& tpl_id,
                       metrics::TrialType type) {
    auto res = rec::verify(q.pixels, templates[tpl_id], model, clf, weights, tau_match, tau_im);
    const std::string tid = "t" + std::to_string(trial_no++);
    trial_rows.push_back({tid, q.path, tpl_id, metrics::trial_type_name(type)});
    score_rows.push_back({tid, metrics::trial_type_name(type), res.score.fused,
                          {res.score.match, res.score.compare_liveness, res.score.normal_liveness}});
    outcomes.push_back({tid, type, res.score.accept, res.score.fused, res.score.match});
  };
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& g = fingers[ids[i]];
    for (const auto& q : g.live_val) run_trial(q, ids[i], metrics::TrialType::genuine);
    for (const auto& q : g.spoof_val) run_trial(q, ids[i], metrics::TrialType::attack);
    const auto& other = fingers[ids[(i + 1) % ids.size()]];
    for (const auto& q : other.live_val) run_trial(q, ids[i], metrics::TrialType::impostor);
  }
  auto rates = metrics::integrated_rates(outcomes);

  const std::string out_dir = c.get("out.dir");
  fs::create_directories(out_dir);
  echo_config(c, out_dir);
  rec::write_trials((fs::path(out_dir) / "trials.csv").string(), trial_rows);
  metrics::write_score_csv((fs::path(out_dir) / "scores.csv").string(), score_rows);
  {
    std::ofstream os((fs::path(out_dir) / "rates.csv").string());
    os.precision(17);
    os << "metric,value\n"
       << "fnmr," << rates.fnmr << "\n"
       << "iapar," << rates.iapar << "\n"
       << "im_accuracy," << rates.im_accuracy << "\n"
       << "fmr," << rates.fmr << "\n";
  }
  std::cout << "trials=" << outcomes.size() << " fnmr=" << rates.fnmr
            << " iapar=" << rates.iapar << " im_accuracy=" << rates.im_accuracy
            << " fmr=" << rates.fmr << "\n";
  return 0;
}

int cmd_report(const cfg::ExperimentConfig& c) {
  const std::string out_dir = c.get("out.dir");
  const char* names[] = {"baseline", "strong-aug", "mutual", "style", "distill", "ensemble"};
  std::vector<std::pair<std::string, double>> rows;
  for (const char* n : names) {
    const auto log_path = fs::path(out_dir) / n / "epochs.csv";
    if (!fs::exists(log_path)) continue;
    auto log = train::read_epoch_log(log_path.string());
    if (!log.empty()) rows.push_back({n, log.back().val_auc});
  }
  if (rows.empty()) throw cfg::DataError("no recipe logs found under " + out_dir);
  fs::create_directories(out_dir);
  {
    std::ofstream os((fs::path(out_dir) / "ablation.csv").string());
    os.precision(17);
    os << "recipe,val_auc\n";
    for (const auto& [n, auc] : rows) os << n << "," << auc << "\n";
  }
  std::ofstream md((fs::path(out_dir) / "ablation.md").string());
  md.precision(6);
  md << "| Recipe | Val AUC |\n|---|---|\n";
  std::cout << "| Recipe | Val AUC |\n|---|---|\n";
  for (const auto& [n, auc] : rows) {
    md << "| " << n << " | " << auc << " |\n";
    std::cout << "| " << n << " | " << auc << " |\n";
  }
  const auto timing = fs::path(out_dir) / "timing.csv";
  if (fs::exists(timing)) {
    std::ifstream is(timing.string());
    std::string header, row;
    std::getline(is, header);
    md << "\n| Algorithm | Overall Time[ms] | Feat size | Acc[%] |\n|---|---|---|---|\n";
    while (std::getline(is, row)) {
      std::stringstream ss(row);
      std::vector<std::string> f;
      std::string field;
      while (std::getline(ss, field, ',')) f.push_back(field);
      if (f.size() >= 5)
        md << "| " << f[0] << " | " << f[2] << " | " << f[3] << " | " << f[4] << " |\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fingerprint liveness lab"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "config file with flat dotted keys");
  app.add_option("--set", overrides, "override: key=value (repeatable)");

  int (*handler)(const cfg::ExperimentConfig&) = nullptr;
  const std::pair<const char*, int (*)(const cfg::ExperimentConfig&)> commands[] = {
      {"gen-data", cmd_gen_data}, {"train", cmd_train},   {"eval", cmd_eval},
      {"extract", cmd_extract},   {"match", cmd_match},   {"report", cmd_report}};
  const char* docs[] = {"generate a synthetic dataset", "run a training recipe",
                        "evaluate a checkpoint on the val split",
                        "extract liveness features with timing",
                        "run integrated matching trials",
                        "emit ablation and benchmark tables"};
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    auto fn = commands[i].second;
    auto* sub = app.add_subcommand(commands[i].first, docs[i]);
    sub->fallthrough();
    sub->callback([&handler, fn] { handler = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? 1 : 0;
  }

  try {
    auto config = load_config(config_path, overrides);
    return handler(config);
  } catch (const cfg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const cfg::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    if (msg.find("non-finite") != std::string::npos) {
      std::cerr << "numerical error: " << msg << "\n";
      return 3;
    }
    std::cerr << "data error: " << msg << "\n";
    return 2;
  }
}
