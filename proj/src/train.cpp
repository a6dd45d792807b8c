#include "fpl/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fpl/augment.hpp"
#include "fpl/styleswap.hpp"

namespace fpl::train {

namespace fs = std::filesystem;

float LossValue::weighted_sum() const {
  float s = 0.0f;
  for (const auto& t : terms) s += t.weight * t.value;
  return s;
}

LossValue cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.shape != targets.shape || logits.shape.size() != 2)
    throw std::invalid_argument("cross_entropy: logits/targets must be matching [N,K]");
  const int n = logits.shape[0], k = logits.shape[1];
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < k; ++j) {
      const float t = targets.data[static_cast<std::size_t>(i) * k + j];
      if (t < 0.0f) throw std::invalid_argument("cross_entropy: negative target");
      row += t;
    }
    if (std::abs(row - 1.0) > 1e-4)
      throw std::invalid_argument("cross_entropy: target row must sum to 1");
  }
  const Tensor probs = ad::softmax_rows(logits);
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) {
      const std::size_t at = static_cast<std::size_t>(i) * k + j;
      if (targets.data[at] > 0.0f)
        total -= targets.data[at] * std::log(std::max(1e-12, static_cast<double>(probs.data[at])));
    }
  LossValue lv;
  lv.terms.push_back({"ce", static_cast<float>(total / n), 1.0f});
  lv.total = lv.weighted_sum();
  return lv;
}

float kl_div(const std::vector<float>& p, const std::vector<float>& q) {
  if (p.size() != q.size() || p.empty())
    throw std::invalid_argument("kl_div: size mismatch");
  double sp = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0.0f || q[i] < 0.0f) throw std::invalid_argument("kl_div: negative component");
    sp += p[i];
    sq += q[i];
  }
  if (std::abs(sp - 1.0) > 1e-4 || std::abs(sq - 1.0) > 1e-4)
    throw std::invalid_argument("kl_div: inputs must sum to 1");
  double d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0f)
      d += p[i] * (std::log(std::max(1e-12, static_cast<double>(p[i]))) -
                   std::log(std::max(1e-12, static_cast<double>(q[i]))));
  return static_cast<float>(std::max(0.0, d));
}

static LossValue node_ce_plus_kl(float ce, float kl_raw, const char* kl_name,
                                 float ce_w, float kl_w) {
  LossValue lv;
  lv.terms.push_back({"ce", ce, ce_w});
  lv.terms.push_back({kl_name, kl_raw, kl_w});
  lv.total = lv.weighted_sum();
  return lv;
}

std::pair<LossValue, LossValue> mutual_step(nn::LivenessModel& peer1,
                                            nn::LivenessModel& peer2,
                                            const Tensor& images, const Tensor& targets,
                                            ad::Sgd& opt1, ad::Sgd& opt2) {
  auto f1 = peer1.forward(images, true);
  auto f2 = peer2.forward(images, true);
  auto ce1 = ad::softmax_cross_entropy(f1.logits, targets);
  auto ce2 = ad::softmax_cross_entropy(f2.logits, targets);
  // each KL target is the other's probabilities as a constant tensor
  auto kl1 = ad::kl_vs_softened(f2.probs, f1.logits, 1.0f);
  auto kl2 = ad::kl_vs_softened(f1.probs, f2.logits, 1.0f);
  auto loss1 = ad::add(ce1, kl1);
  auto loss2 = ad::add(ce2, kl2);
  ad::backward(loss1);
  ad::backward(loss2);
  opt1.step(peer1.parameters());
  opt2.step(peer2.parameters());
  return {node_ce_plus_kl(ce1->value.data[0], kl1->value.data[0], "kl_mutual", 1.0f, 1.0f),
          node_ce_plus_kl(ce2->value.data[0], kl2->value.data[0], "kl_mutual", 1.0f, 1.0f)};
}

LossValue distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                       const Tensor& targets, float temperature, float alpha) {
  if (!(temperature > 0.0f)) throw std::invalid_argument("distill_loss: T must be > 0");
  if (alpha < 0.0f || alpha > 1.0f) throw std::invalid_argument("distill_loss: alpha in [0,1]");
  if (student_logits.shape != teacher_logits.shape)
    throw std::invalid_argument("distill_loss: logit shape mismatch");
  const float ce = cross_entropy(student_logits, targets).total;
  const int n = student_logits.shape[0], k = student_logits.shape[1];
  Tensor ss = student_logits, ts = teacher_logits;
  for (auto& v : ss.data) v /= temperature;
  for (auto& v : ts.data) v /= temperature;
  const Tensor ps = ad::softmax_rows(ss), pt = ad::softmax_rows(ts);
  double kl = 0.0;
  for (int i = 0; i < n; ++i) {
    std::vector<float> p(k), q(k);
    for (int j = 0; j < k; ++j) {
      p[j] = pt.data[static_cast<std::size_t>(i) * k + j];
      q[j] = ps.data[static_cast<std::size_t>(i) * k + j];
    }
    kl += kl_div(p, q);
  }
  const float kl_mean = static_cast<float>(kl / n);
  return node_ce_plus_kl(ce, kl_mean, "kl_distill", 1.0f - alpha,
                         alpha * temperature * temperature);
}

std::array<float, 2> average_probs(const std::vector<std::array<float, 2>>& probs) {
  if (probs.empty()) throw std::invalid_argument("average_probs: empty");
  double a = 0.0, b = 0.0;
  for (const auto& p : probs) {
    a += p[0];
    b += p[1];
  }
  const double n = static_cast<double>(probs.size());
  return {static_cast<float>(a / n), static_cast<float>(b / n)};
}

static std::array<float, 2> predict_probs(nn::LivenessModel& m, const Tensor& image) {
  Tensor batch = image;
  if (batch.shape.size() == 3) batch.shape.insert(batch.shape.begin(), 1);
  auto f = m.forward(batch, false);
  return {f.probs.data[0], f.probs.data[1]};
}

std::array<float, 2> ensemble_predict(EnsembleModel& ensemble, const Tensor& image) {
  if (ensemble.members.size() != 3)
    throw std::invalid_argument("ensemble_predict: exactly three members required");
  std::vector<std::array<float, 2>> p;
  for (auto& m : ensemble.members) p.push_back(predict_probs(m, image));
  return average_probs(p);
}

EnsembleModel load_ensemble(const std::vector<std::string>& checkpoint_paths) {
  if (checkpoint_paths.size() != 3)
    throw std::invalid_argument("load_ensemble: exactly three checkpoints required");
  EnsembleModel e;
  for (const auto& p : checkpoint_paths) e.members.push_back(nn::load_checkpoint(p));
  return e;
}

RecipeKind recipe_kind_from_name(const std::string& name) {
  if (name == "baseline") return RecipeKind::baseline;
  if (name == "strong-aug") return RecipeKind::strong_aug;
  if (name == "mutual") return RecipeKind::mutual;
  if (name == "style") return RecipeKind::style;
  if (name == "distill") return RecipeKind::distill;
  if (name == "ensemble") return RecipeKind::ensemble;
  throw std::invalid_argument("unknown recipe: " + name);
}

const char* recipe_kind_name(RecipeKind k) {
  switch (k) {
    case RecipeKind::baseline: return "baseline";
    case RecipeKind::strong_aug: return "strong-aug";
    case RecipeKind::mutual: return "mutual";
    case RecipeKind::style: return "style";
    case RecipeKind::distill: return "distill";
    case RecipeKind::ensemble: return "ensemble";
  }
  return "?";
}

Recipe make_recipe(const std::string& name) {
  Recipe r;
  r.kind = recipe_kind_from_name(name);
  switch (r.kind) {
    case RecipeKind::baseline:
      break;
    case RecipeKind::strong_aug:
    case RecipeKind::mutual:
    case RecipeKind::distill:
      r.strong_augment = true;
      r.fmix_prob = 0.3f;
      break;
    case RecipeKind::style:
    case RecipeKind::ensemble:
      r.strong_augment = true;
      r.fmix_prob = 0.3f;
      r.style_prob = 0.5f;
      break;
  }
  return r;
}

void write_epoch_log(const std::string& path, const std::vector<EpochRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_epoch_log: cannot open " + path);
  os << "epoch,train_loss,train_auc,val_auc,wall_ms\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.epoch << "," << r.train_loss << "," << r.train_auc << "," << r.val_auc << ","
       << r.wall_ms << "\n";
  if (!os) throw std::runtime_error("write_epoch_log: write failed for " + path);
}

std::vector<EpochRow> read_epoch_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_epoch_log: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "epoch,train_loss,train_auc,val_auc,wall_ms")
    throw std::runtime_error("read_epoch_log: bad header in " + path);
  std::vector<EpochRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    EpochRow r;
    if (!std::getline(ss, f, ',')) throw std::runtime_error("read_epoch_log: bad row");
    r.epoch = std::stoi(f);
    if (!std::getline(ss, f, ',')) throw std::runtime_error("read_epoch_log: bad row");
    r.train_loss = std::stod(f);
    if (!std::getline(ss, f, ',')) throw std::runtime_error("read_epoch_log: bad row");
    r.train_auc = std::stod(f);
    if (!std::getline(ss, f, ',')) throw std::runtime_error("read_epoch_log: bad row");
    r.val_auc = std::stod(f);
    if (!std::getline(ss, f, ',')) throw std::runtime_error("read_epoch_log: bad row");
    r.wall_ms = std::stod(f);
    rows.push_back(r);
  }
  return rows;
}

// ---- training loop internals ----

static std::vector<augment::AugmentOp> light_pipeline() {
  return {augment::AugmentOp{augment::AugKind::hflip}};
}

static void tensorize(const std::vector<ImageSample>& batch, Tensor& images,
                      Tensor& targets) {
  const int n = static_cast<int>(batch.size());
  const int h = batch[0].pixels.shape[1], w = batch[0].pixels.shape[2];
  images = Tensor::zeros({n, 1, h, w});
  targets = Tensor::zeros({n, 2});
  for (int i = 0; i < n; ++i) {
    std::copy(batch[i].pixels.data.begin(), batch[i].pixels.data.end(),
              images.data.begin() + static_cast<std::size_t>(i) * h * w);
    targets.data[static_cast<std::size_t>(i) * 2] = batch[i].target[0];
    targets.data[static_cast<std::size_t>(i) * 2 + 1] = batch[i].target[1];
  }
}

static std::vector<ImageSample> make_batch(const Recipe& r,
                                           const std::vector<ImageSample>& train_set,
                                           const std::vector<std::size_t>& order,
                                           std::size_t begin, std::size_t end,
                                           RngStream batch_rng) {
  std::vector<ImageSample> batch;
  batch.reserve(end - begin);
  const auto ops = r.strong_augment ? augment::default_pipeline() : light_pipeline();
  for (std::size_t i = begin; i < end; ++i) {
    RngStream srng = batch_rng.substream(i - begin);
    batch.push_back(augment::apply_pipeline(train_set[order[i]], ops, srng));
  }
  if (r.style_prob > 0.0f) {
    RngStream style_rng = batch_rng.substream(0x5791ULL);
    styleswap::batch_style_swap(batch, r.style_prob, style_rng);
  }
  if (r.fmix_prob > 0.0f) {
    RngStream fmix_rng = batch_rng.substream(0xf314ULL);
    augment::FmixConfig fc;
    for (std::size_t k = 0; k + 1 < batch.size(); k += 2)
      if (fmix_rng.bernoulli(r.fmix_prob))
        batch[k] = augment::fmix_mix(batch[k], batch[k + 1], fc, fmix_rng).image;
  }
  return batch;
}

metrics::PadTrialSet evaluate(nn::LivenessModel& model,
                              const std::vector<ImageSample>& samples, int batch_size) {
  metrics::PadTrialSet trials;
  for (std::size_t begin = 0; begin < samples.size();
       begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(samples.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<ImageSample> batch(samples.begin() + static_cast<std::ptrdiff_t>(begin),
                                   samples.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor images, targets;
    tensorize(batch, images, targets);
    auto f = model.forward(images, false);
    for (std::size_t i = 0; i < batch.size(); ++i)
      trials.trials.push_back(
          {f.probs.data[i * 2], batch[i].label == Label::live});
  }
  return trials;
}

static double cosine_lr(const Recipe& r, int epoch) {
  return r.lr * 0.5 * (1.0 + std::cos(3.14159265358979 * epoch / r.epochs));
}

static void check_finite_loss(float total, int epoch) {
  if (!std::isfinite(total))
    throw std::runtime_error("run_recipe: non-finite loss at epoch " +
                             std::to_string(epoch));
}

static std::vector<std::size_t> epoch_order(std::size_t n, RngStream rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_below(i)]);
  return order;
}

struct StepOut {
  float loss = 0.0f;
  Tensor probs;  // [N,2] probabilities for the train-AUC log
};

// Shared per-epoch loop; `step` consumes one (images, targets, lr) batch and
// returns the batch loss. `score` yields the validation AUC after the epoch.
template <typename StepFn, typename ScoreFn>
static std::vector<EpochRow> run_epochs(const Recipe& r,
                                        const std::vector<ImageSample>& train_set,
                                        StepFn&& step, ScoreFn&& score) {
  RngStream root(r.seed, 0x7261696eULL);
  std::vector<EpochRow> log;
  for (int epoch = 0; epoch < r.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto order = epoch_order(train_set.size(), root.substream(0x0eULL).substream(
                                                   static_cast<std::uint64_t>(epoch)));
    const double lr = cosine_lr(r, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    metrics::PadTrialSet train_trials;
    for (std::size_t begin = 0; begin < train_set.size();
         begin += static_cast<std::size_t>(r.batch_size)) {
      const std::size_t end =
          std::min(train_set.size(), begin + static_cast<std::size_t>(r.batch_size));
      if (end - begin < 2) continue;  // batch norm needs at least two samples
      RngStream batch_rng = root.substream(0xbaULL)
                                .substream(static_cast<std::uint64_t>(epoch))
                                .substream(begin);
      auto batch = make_batch(r, train_set, order, begin, end, batch_rng);
      Tensor images, targets;
      tensorize(batch, images, targets);
      StepOut out = step(images, targets, static_cast<float>(lr));
      check_finite_loss(out.loss, epoch);
      loss_sum += out.loss;
      ++batches;
      for (std::size_t i = 0; i < batch.size(); ++i)
        train_trials.trials.push_back(
            {out.probs.data[i * 2], batch[i].target[0] >= 0.5f});
    }
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    const bool both = train_trials.count(true) > 0 && train_trials.count(false) > 0;
    row.train_auc = both ? metrics::auc(train_trials) : 0.5;
    row.val_auc = score();
    row.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    log.push_back(row);
    if (r.stop_at_val_auc > 0.0 && row.val_auc >= r.stop_at_val_auc) break;
  }
  return log;
}

static RecipeResult finish(const Recipe& r, std::vector<EpochRow> log,
                           std::vector<std::string> checkpoints) {
  RecipeResult res;
  res.log = std::move(log);
  res.checkpoints = std::move(checkpoints);
  res.val_auc = res.log.empty() ? 0.0 : res.log.back().val_auc;
  write_epoch_log((fs::path(r.out_dir) / "epochs.csv").string(), res.log);
  return res;
}

static RecipeResult run_single(const Recipe& r, const std::vector<ImageSample>& train_set,
                               const std::vector<ImageSample>& val_set,
                               const nn::LivenessModel* teacher) {
  auto model = nn::build_model(r.preset, r.embedding_dim, r.seed);
  nn::LivenessModel teacher_copy;
  if (teacher) teacher_copy = *teacher;  // local mutable copy for eval forwards
  ad::Sgd opt;
  opt.lr = r.lr;
  opt.momentum = r.momentum;
  opt.weight_decay = r.weight_decay;
  auto step = [&](const Tensor& images, const Tensor& targets, float lr) {
    opt.lr = lr;
    auto f = model.forward(images, true);
    ad::NodePtr loss;
    if (teacher) {
      auto tf = teacher_copy.forward(images, false);
      Tensor soft = tf.logits->value;
      for (auto& v : soft.data) v /= r.distill_temperature;
      soft = ad::softmax_rows(soft);
      auto ce = ad::softmax_cross_entropy(f.logits, targets);
      auto kl = ad::kl_vs_softened(soft, f.logits, r.distill_temperature);
      loss = ad::add(ad::scale(ce, 1.0f - r.distill_alpha),
                     ad::scale(kl, r.distill_alpha));
    } else {
      loss = ad::softmax_cross_entropy(f.logits, targets);
    }
    ad::backward(loss);
    opt.step(model.parameters());
    return StepOut{loss->value.data[0], f.probs};
  };
  auto score = [&] { return metrics::auc(evaluate(model, val_set, r.batch_size)); };
  auto log = run_epochs(r, train_set, step, score);
  const std::string ckpt =
      (fs::path(r.out_dir) / (teacher ? "student.fplm" : "model.fplm")).string();
  nn::save_checkpoint(ckpt, model);
  return finish(r, std::move(log), {ckpt});
}

static RecipeResult run_mutual(const Recipe& r, const std::vector<ImageSample>& train_set,
                               const std::vector<ImageSample>& val_set) {
  auto peer1 = nn::build_model(r.preset, r.embedding_dim, r.seed);
  auto peer2 = nn::build_model(r.preset, r.embedding_dim, r.seed ^ 0x9e3779b97f4a7c15ULL);
  ad::Sgd opt1, opt2;
  opt1.lr = opt2.lr = r.lr;
  opt1.momentum = opt2.momentum = r.momentum;
  opt1.weight_decay = opt2.weight_decay = r.weight_decay;
  auto step = [&](const Tensor& images, const Tensor& targets, float lr) {
    opt1.lr = opt2.lr = lr;
    auto [l1, l2] = mutual_step(peer1, peer2, images, targets, opt1, opt2);
    auto f = peer1.forward(images, false);  // post-update probs for the log
    return StepOut{0.5f * (l1.total + l2.total), f.probs};
  };
  auto score = [&] { return metrics::auc(evaluate(peer1, val_set, r.batch_size)); };
  auto log = run_epochs(r, train_set, step, score);
  const std::string c1 = (fs::path(r.out_dir) / "peer1.fplm").string();
  const std::string c2 = (fs::path(r.out_dir) / "peer2.fplm").string();
  nn::save_checkpoint(c1, peer1);
  nn::save_checkpoint(c2, peer2);
  return finish(r, std::move(log), {c1, c2});
}

RecipeResult run_recipe(const Recipe& recipe, const std::vector<ImageSample>& train_set,
                        const std::vector<ImageSample>& val_set) {
  if (train_set.empty()) throw std::invalid_argument("run_recipe: empty train split");
  if (val_set.empty()) throw std::invalid_argument("run_recipe: empty val split");
  if (recipe.out_dir.empty()) throw std::invalid_argument("run_recipe: out_dir required");
  fs::create_directories(recipe.out_dir);

  switch (recipe.kind) {
    case RecipeKind::baseline:
    case RecipeKind::strong_aug:
    case RecipeKind::style:
      return run_single(recipe, train_set, val_set, nullptr);
    case RecipeKind::mutual:
      return run_mutual(recipe, train_set, val_set);
    case RecipeKind::distill: {
      Recipe tr = recipe;
      tr.kind = RecipeKind::strong_aug;
      tr.style_prob = 0.0f;
      tr.out_dir = (fs::path(recipe.out_dir) / "teacher").string();
      fs::create_directories(tr.out_dir);
      auto teacher_res = run_single(tr, train_set, val_set, nullptr);
      auto teacher = nn::load_checkpoint(teacher_res.checkpoints[0]);
      auto res = run_single(recipe, train_set, val_set, &teacher);
      res.checkpoints.insert(res.checkpoints.begin(), teacher_res.checkpoints[0]);
      return res;
    }
    case RecipeKind::ensemble: {
      Recipe sr = recipe;
      sr.kind = RecipeKind::style;
      sr.out_dir = (fs::path(recipe.out_dir) / "style").string();
      fs::create_directories(sr.out_dir);
      auto style_res = run_single(sr, train_set, val_set, nullptr);

      Recipe mr = recipe;
      mr.kind = RecipeKind::mutual;
      mr.style_prob = 0.0f;
      mr.seed = recipe.seed + 1;
      mr.out_dir = (fs::path(recipe.out_dir) / "mutual").string();
      fs::create_directories(mr.out_dir);
      auto mutual_res = run_mutual(mr, train_set, val_set);

      RecipeResult res;
      res.checkpoints = {style_res.checkpoints[0], mutual_res.checkpoints[0],
                         mutual_res.checkpoints[1]};
      auto ensemble = load_ensemble(res.checkpoints);
      metrics::PadTrialSet trials;
      for (const auto& s : val_set)
        trials.trials.push_back(
            {ensemble_predict(ensemble, s.pixels)[0], s.label == Label::live});
      EpochRow row;
      row.epoch = 0;
      row.val_auc = metrics::auc(trials);
      res.log = {row};
      res.val_auc = row.val_auc;
      write_epoch_log((fs::path(recipe.out_dir) / "epochs.csv").string(), res.log);
      return res;
    }
  }
  throw std::logic_error("run_recipe: unreachable");
}

}  // namespace fpl::train
