#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fpl/synthdata.hpp"
#include "fpl/train.hpp"

using namespace fpl;
using namespace fpl::train;
namespace fs = std::filesystem;

static Tensor row2(float a, float b) { return Tensor({1, 2}, {a, b}); }

TEST_CASE("cross_entropy examples") {
  // uniform prediction, hard label
  auto lv = cross_entropy(row2(0.0f, 0.0f), row2(1.0f, 0.0f));
  CHECK(lv.total == doctest::Approx(std::log(2.0)).epsilon(1e-6));
  CHECK(lv.terms.size() == 1);
  CHECK(lv.terms[0].name == "ce");
  CHECK(std::abs(lv.total - lv.weighted_sum()) < 1e-6f);

  // soft target equal to the prediction's softmax -> loss equals its entropy
  const Tensor logits = row2(1.3f, -0.4f);
  const Tensor probs = ad::softmax_rows(logits);
  const double entropy = -probs.data[0] * std::log(probs.data[0]) -
                         probs.data[1] * std::log(probs.data[1]);
  CHECK(cross_entropy(logits, probs).total == doctest::Approx(entropy).epsilon(1e-5));

  // monotone decrease as the correct logit grows
  float prev = 1e9f;
  for (float z = -2.0f; z <= 2.0f; z += 0.25f) {
    const float cur = cross_entropy(row2(z, 0.3f), row2(1.0f, 0.0f)).total;
    CHECK(cur < prev);
    prev = cur;
  }

  CHECK_THROWS(cross_entropy(row2(0, 0), row2(0.4f, 0.4f)));   // not a distribution
  CHECK_THROWS(cross_entropy(row2(0, 0), row2(1.5f, -0.5f)));  // negative component
}

TEST_CASE("kl_div examples and nonnegativity sweep") {
  CHECK(kl_div({0.3f, 0.7f}, {0.3f, 0.7f}) == 0.0f);
  CHECK(kl_div({1.0f, 0.0f}, {0.5f, 0.5f}) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  RngStream rng(13, 0);
  for (int i = 0; i < 100000; ++i) {
    const float p = rng.next_float(), q = 0.000001f + 0.999998f * rng.next_float();
    CHECK(kl_div({p, 1.0f - p}, {q, 1.0f - q}) >= 0.0f);
  }

  CHECK_THROWS(kl_div({0.5f, 0.5f}, {0.5f}));
  CHECK_THROWS(kl_div({0.7f, 0.7f}, {0.5f, 0.5f}));
  CHECK_THROWS(kl_div({-0.1f, 1.1f}, {0.5f, 0.5f}));
}

static Tensor random_images(int n, int size, std::uint64_t seed) {
  RngStream rng(seed, 0);
  Tensor t = Tensor::zeros({n, 1, size, size});
  for (auto& v : t.data) v = rng.next_float();
  return t;
}

static Tensor hard_targets(int n) {
  Tensor t = Tensor::zeros({n, 2});
  for (int i = 0; i < n; ++i) t.data[static_cast<std::size_t>(i) * 2 + (i % 2)] = 1.0f;
  return t;
}

TEST_CASE("mutual learning contracts") {
  const auto images = random_images(4, 12, 21);
  const auto targets = hard_targets(4);

  SUBCASE("identical peers: KL exactly 0 and updates equal pure-CE updates") {
    auto p1 = nn::build_model(nn::Preset::tiny, 16, 5);
    auto p2 = nn::build_model(nn::Preset::tiny, 16, 5);
    auto ref = nn::build_model(nn::Preset::tiny, 16, 5);
    ad::Sgd o1, o2, oref;
    o1.lr = o2.lr = oref.lr = 0.1f;
    auto [l1, l2] = mutual_step(p1, p2, images, targets, o1, o2);
    CHECK(l1.terms[1].value == 0.0f);
    CHECK(l2.terms[1].value == 0.0f);
    CHECK(std::abs(l1.total - l1.weighted_sum()) < 1e-6f);

    // pure-CE reference step
    auto f = ref.forward(images, true);
    auto loss = ad::softmax_cross_entropy(f.logits, targets);
    ad::backward(loss);
    oref.step(ref.parameters());
    auto pa = p1.parameters(), pb = ref.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::size_t j = 0; j < pa[i]->value.data.size(); ++j)
        CHECK(pa[i]->value.data[j] == doctest::Approx(pb[i]->value.data[j]).epsilon(1e-6));
  }

  SUBCASE("distinct inits: both KL components positive after a step") {
    auto p1 = nn::build_model(nn::Preset::tiny, 16, 5);
    auto p2 = nn::build_model(nn::Preset::tiny, 16, 6);
    ad::Sgd o1, o2;
    o1.lr = o2.lr = 0.05f;
    auto [l1, l2] = mutual_step(p1, p2, images, targets, o1, o2);
    CHECK(l1.terms[1].value > 0.0f);
    CHECK(l2.terms[1].value > 0.0f);
  }

  SUBCASE("stop-gradient: peer2 receives exactly zero gradient from loss1") {
    auto p1 = nn::build_model(nn::Preset::tiny, 16, 5);
    auto p2 = nn::build_model(nn::Preset::tiny, 16, 6);
    auto f1 = p1.forward(images, true);
    auto f2 = p2.forward(images, true);
    auto loss1 = ad::add(ad::softmax_cross_entropy(f1.logits, targets),
                         ad::kl_vs_softened(f2.probs, f1.logits, 1.0f));
    ad::backward(loss1);
    for (const auto& p : p2.parameters()) {
      if (p->grad.data.empty()) continue;
      for (float g : p->grad.data) CHECK(g == 0.0f);
    }
  }
}

TEST_CASE("distill_loss") {
  const Tensor y = row2(1.0f, 0.0f);

  SUBCASE("student == teacher: KL term exactly 0") {
    const Tensor z = row2(0.9f, -0.2f);
    auto lv = distill_loss(z, z, y, 5.0f, 0.5f);
    CHECK(lv.terms[1].value == 0.0f);
    CHECK(lv.total == doctest::Approx(0.5f * cross_entropy(z, y).total).epsilon(1e-6));
  }

  SUBCASE("T=1, alpha=1 reduces to plain KL between softmaxes") {
    const Tensor s = row2(0.2f, -0.5f), t = row2(1.0f, 0.3f);
    auto lv = distill_loss(s, t, y, 1.0f, 1.0f);
    const Tensor ps = ad::softmax_rows(s), pt = ad::softmax_rows(t);
    const float want = kl_div({pt.data[0], pt.data[1]}, {ps.data[0], ps.data[1]});
    CHECK(lv.total == doctest::Approx(want).epsilon(1e-6));
  }

  SUBCASE("hand-evaluated formula: teacher [2,0], student [0,0], T=5") {
    auto lv = distill_loss(row2(0, 0), row2(2, 0), y, 5.0f, 0.5f);
    const double pt = std::exp(0.4) / (std::exp(0.4) + 1.0);
    const double kl = pt * std::log(pt / 0.5) + (1.0 - pt) * std::log((1.0 - pt) / 0.5);
    CHECK(lv.terms[1].value == doctest::Approx(kl).epsilon(1e-5));
    const double total = 0.5 * std::log(2.0) + 0.5 * 25.0 * kl;
    CHECK(lv.total == doctest::Approx(total).epsilon(1e-5));
    CHECK(std::abs(lv.total - lv.weighted_sum()) < 1e-6f);
  }

  CHECK_THROWS(distill_loss(row2(0, 0), row2(0, 0), y, 0.0f, 0.5f));
  CHECK_THROWS(distill_loss(row2(0, 0), row2(0, 0), y, 5.0f, 1.5f));
}

TEST_CASE("ensemble prediction") {
  CHECK(average_probs({{1, 0}, {0, 1}, {1, 0}}) == std::array<float, 2>{2.0f / 3.0f, 1.0f / 3.0f});
  CHECK_THROWS(average_probs({}));

  const auto img = random_images(1, 12, 3);
  Tensor single = img;
  single.shape = {1, 12, 12};

  SUBCASE("identical members equal the single model") {
    EnsembleModel e;
    for (int i = 0; i < 3; ++i) e.members.push_back(nn::build_model(nn::Preset::tiny, 16, 9));
    auto lone = nn::build_model(nn::Preset::tiny, 16, 9);
    auto f = lone.forward(img, false);
    auto p = ensemble_predict(e, single);
    CHECK(p[0] == doctest::Approx(f.probs.data[0]).epsilon(1e-7));
    CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-6));
  }

  SUBCASE("equals the independently recomputed member mean within 1e-12") {
    EnsembleModel e;
    for (int i = 0; i < 3; ++i)
      e.members.push_back(nn::build_model(nn::Preset::tiny, 16, 30 + static_cast<std::uint64_t>(i)));
    auto p = ensemble_predict(e, single);
    double m0 = 0.0, m1 = 0.0;
    for (auto& member : e.members) {
      auto f = member.forward(img, false);
      m0 += f.probs.data[0];
      m1 += f.probs.data[1];
    }
    CHECK(std::abs(p[0] - static_cast<float>(m0 / 3.0)) < 1e-12);
    CHECK(std::abs(p[1] - static_cast<float>(m1 / 3.0)) < 1e-12);

    EnsembleModel two;
    two.members.push_back(nn::build_model(nn::Preset::tiny, 16, 1));
    two.members.push_back(nn::build_model(nn::Preset::tiny, 16, 2));
    CHECK_THROWS(ensemble_predict(two, single));
  }
}

TEST_CASE("epoch log round-trips") {
  std::vector<EpochRow> rows = {{0, 0.693, 0.51, 0.55, 1234.5}, {1, 0.42, 0.93, 0.91, 1100.0}};
  write_epoch_log("test_epochs.csv", rows);
  auto back = read_epoch_log("test_epochs.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].epoch == 0);
  CHECK(back[0].train_loss == 0.693);
  CHECK(back[1].val_auc == 0.91);
  CHECK(back[1].wall_ms == 1100.0);
  std::remove("test_epochs.csv");
  CHECK_THROWS(read_epoch_log("no_such_log.csv"));
}

static void make_splits(std::vector<ImageSample>& train_set, std::vector<ImageSample>& val_set,
                        int per_split_pairs, int size = 16) {
  auto scanners = synth::make_scanners(2, 4);
  auto live = synth::material_by_name("live");
  auto latex = synth::material_by_name("latex");
  int idx = 0;
  for (int i = 0; i < 2 * per_split_pairs; ++i) {
    auto finger = synth::synth_finger(static_cast<std::uint64_t>(500 + i));
    for (const auto* mat : {&live, &latex}) {
      RngStream rng = RngStream(99, 0xda7aULL).substream(static_cast<std::uint64_t>(idx++));
      auto s = synth::render_impression(finger, scanners[i % 2], *mat, rng, size);
      (i < per_split_pairs ? train_set : val_set).push_back(std::move(s));
    }
  }
}

TEST_CASE("run_recipe determinism and artifacts") {
  std::vector<ImageSample> train_set, val_set;
  make_splits(train_set, val_set, 12);  // 24 train, 24 val

  auto base = make_recipe("baseline");
  base.preset = nn::Preset::tiny;
  base.embedding_dim = 16;
  base.epochs = 2;
  base.batch_size = 12;
  base.seed = 7;

  SUBCASE("same seed twice: identical logs (wall time aside) and checkpoints") {
    auto r1 = base, r2 = base;
    r1.out_dir = "train_run1";
    r2.out_dir = "train_run2";
    auto a = run_recipe(r1, train_set, val_set);
    auto b = run_recipe(r2, train_set, val_set);
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      CHECK(a.log[i].epoch == b.log[i].epoch);
      CHECK(a.log[i].train_loss == b.log[i].train_loss);
      CHECK(a.log[i].train_auc == b.log[i].train_auc);
      CHECK(a.log[i].val_auc == b.log[i].val_auc);
    }
    auto slurp = [](const std::string& p) {
      std::ifstream is(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(is), {});
    };
    REQUIRE(a.checkpoints.size() == 1);
    CHECK(slurp(a.checkpoints[0]) == slurp(b.checkpoints[0]));
    CHECK(fs::exists(fs::path(r1.out_dir) / "epochs.csv"));
    auto parsed = read_epoch_log((fs::path(r1.out_dir) / "epochs.csv").string());
    CHECK(parsed.size() == a.log.size());
    fs::remove_all(r1.out_dir);
    fs::remove_all(r2.out_dir);
  }

  SUBCASE("mutual recipe yields two peer checkpoints") {
    auto r = make_recipe("mutual");
    r.preset = nn::Preset::tiny;
    r.embedding_dim = 16;
    r.epochs = 1;
    r.batch_size = 12;
    r.out_dir = "train_mutual";
    auto res = run_recipe(r, train_set, val_set);
    REQUIRE(res.checkpoints.size() == 2);
    for (const auto& c : res.checkpoints) CHECK(fs::exists(c));
    fs::remove_all(r.out_dir);
  }

  SUBCASE("ensemble recipe lists exactly three member checkpoints") {
    auto r = make_recipe("ensemble");
    r.preset = nn::Preset::tiny;
    r.embedding_dim = 16;
    r.epochs = 1;
    r.batch_size = 12;
    r.out_dir = "train_ensemble";
    auto res = run_recipe(r, train_set, val_set);
    REQUIRE(res.checkpoints.size() == 3);
    for (const auto& c : res.checkpoints) CHECK(fs::exists(c));
    CHECK(res.val_auc >= 0.0);
    CHECK(res.val_auc <= 1.0);
    fs::remove_all(r.out_dir);
  }

  SUBCASE("distill recipe produces teacher and student") {
    auto r = make_recipe("distill");
    r.preset = nn::Preset::tiny;
    r.embedding_dim = 16;
    r.epochs = 1;
    r.batch_size = 12;
    r.out_dir = "train_distill";
    auto res = run_recipe(r, train_set, val_set);
    REQUIRE(res.checkpoints.size() == 2);
    CHECK(res.checkpoints[0].find("teacher") != std::string::npos);
    CHECK(res.checkpoints[1].find("student") != std::string::npos);
    fs::remove_all(r.out_dir);
  }

  SUBCASE("missing splits rejected") {
    auto r = base;
    r.out_dir = "train_err";
    CHECK_THROWS(run_recipe(r, {}, val_set));
    CHECK_THROWS(run_recipe(r, train_set, {}));
  }
}

TEST_CASE("recipe names round-trip") {
  for (const char* n : {"baseline", "strong-aug", "mutual", "style", "distill", "ensemble"})
    CHECK(recipe_kind_name(make_recipe(n).kind) == std::string(n));
  CHECK_THROWS(make_recipe("bogus"));
}
