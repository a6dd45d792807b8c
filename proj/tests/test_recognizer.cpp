#include <cmath>
#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "fpl/recognizer.hpp"
#include "fpl/synthdata.hpp"

using namespace fpl;
using namespace fpl::rec;

static Tensor ridge_image(std::uint64_t seed, int size = 64) {
  auto finger = synth::synth_finger(seed);
  auto scanners = synth::make_scanners(1, 1);
  RngStream rng(seed, 0x1111);
  return synth::render_impression(finger, scanners[0], synth::material_by_name("live"),
                                  rng, size)
      .pixels;
}

static double correlation(const Tensor& a, const Tensor& b) {
  double ma = 0, mb = 0;
  const double n = static_cast<double>(a.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    ma += a.data[i];
    mb += b.data[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    cov += (a.data[i] - ma) * (b.data[i] - mb);
    va += (a.data[i] - ma) * (a.data[i] - ma);
    vb += (b.data[i] - mb) * (b.data[i] - mb);
  }
  return cov / std::sqrt(va * vb);
}

TEST_CASE("preprocess") {
  SUBCASE("ridge image stays strongly correlated with its input") {
    const Tensor img = ridge_image(3);
    auto out = preprocess(img);
    CHECK(!out.low_quality);
    CHECK(correlation(img, out.image) >= 0.9);
    for (float v : out.image.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  SUBCASE("constant image flagged low-quality") {
    auto out = preprocess(Tensor::full({1, 32, 32}, 0.37f));
    CHECK(out.low_quality);
  }

  SUBCASE("idempotent within 0.05 RMS") {
    auto once = preprocess(ridge_image(5));
    auto twice = preprocess(once.image);
    double rms = 0.0;
    for (std::size_t i = 0; i < once.image.data.size(); ++i) {
      const double d = once.image.data[i] - twice.image.data[i];
      rms += d * d;
    }
    rms = std::sqrt(rms / static_cast<double>(once.image.data.size()));
    CHECK(rms < 0.05);
  }
}

TEST_CASE("split_patches") {
  const Tensor img = ridge_image(9);

  SUBCASE("2x2 grid, no overlap: four exact 32x32 tiles") {
    auto p = split_patches(img, {2, 2, 0.0f});
    REQUIRE(p.size() == 4);
    for (const auto& patch : p) CHECK(patch.pixels.shape == std::vector<int>{1, 32, 32});
    CHECK(p[0].x0 == 0);
    CHECK(p[3].x0 == 32);
    CHECK(p[3].y0 == 32);
    // reassembled tiles reproduce the image
    for (int i = 0; i < 4; ++i)
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          CHECK(p[static_cast<std::size_t>(i)].pixels.data[static_cast<std::size_t>(y) * 32 + x] ==
                img.data[static_cast<std::size_t>(p[static_cast<std::size_t>(i)].y0 + y) * 64 +
                         p[static_cast<std::size_t>(i)].x0 + x]);
  }

  SUBCASE("3x3 with overlap 0.25 covers every pixel at least once") {
    auto p = split_patches(img, {3, 3, 0.25f});
    REQUIRE(p.size() == 9);
    std::vector<int> cover(64 * 64, 0);
    for (const auto& patch : p)
      for (int y = 0; y < patch.pixels.shape[1]; ++y)
        for (int x = 0; x < patch.pixels.shape[2]; ++x)
          cover[static_cast<std::size_t>(patch.y0 + y) * 64 + patch.x0 + x] += 1;
    for (int c : cover) CHECK(c >= 1);
  }

  SUBCASE("1x1 grid returns the whole image") {
    auto p = split_patches(img, {1, 1, 0.0f});
    REQUIRE(p.size() == 1);
    CHECK(p[0].pixels.data == img.data);
  }

  CHECK_THROWS(split_patches(Tensor::zeros({1, 4, 4}), {3, 3, 0.25f}));
  CHECK_THROWS(split_patches(img, {0, 3, 0.25f}));
}

TEST_CASE("extract_keypoints") {
  SUBCASE("flat patch yields no keypoints") {
    CHECK(extract_keypoints(Tensor::full({1, 24, 24}, 0.5f)).empty());
  }

  SUBCASE("ridge patch yields at least 4 normalized keypoints") {
    auto pre = preprocess(ridge_image(11));
    auto patches = split_patches(pre.image, {3, 3, 0.25f});
    auto kps = extract_keypoints(patches[4].pixels);
    CHECK(kps.size() >= 4);
    CHECK(kps.size() <= 16);
    for (const auto& kp : kps) {
      double norm = 0.0;
      for (float v : kp.desc) norm += v * v;
      CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-5);
      CHECK(kp.theta >= 0.0f);
      CHECK(kp.theta < 3.1415927f);
    }
  }

  SUBCASE("descriptor invariant to a global brightness offset") {
    auto pre = preprocess(ridge_image(13));
    auto patch = split_patches(pre.image, {3, 3, 0.25f})[0].pixels;
    Tensor shifted = patch;
    for (auto& v : shifted.data) v += 0.1f;
    auto a = extract_keypoints(patch), b = extract_keypoints(shifted);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      for (int d = 0; d < 32; ++d)
        CHECK(a[i].desc[static_cast<std::size_t>(d)] ==
              doctest::Approx(b[i].desc[static_cast<std::size_t>(d)]).epsilon(1e-5));
  }
}

static std::vector<KeypointDescriptor> random_descs(int n, RngStream& rng) {
  std::vector<KeypointDescriptor> out;
  for (int i = 0; i < n; ++i) {
    KeypointDescriptor kp;
    kp.x = rng.uniform(0.0f, 20.0f);
    kp.y = rng.uniform(0.0f, 20.0f);
    double norm = 0.0;
    for (auto& v : kp.desc) {
      v = rng.next_float();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : kp.desc) v = static_cast<float>(v / norm);
    out.push_back(kp);
  }
  return out;
}

TEST_CASE("match_patch") {
  const float diag = 30.0f;

  SUBCASE("identical lists self-match with score 1") {
    RngStream rng(77, 0);
    auto d = random_descs(10, rng);
    auto m = match_patch(d, d, diag);
    CHECK(m.pairs.size() == 10);
    CHECK(m.score == doctest::Approx(1.0).epsilon(1e-5));
    for (const auto& p : m.pairs) {
      CHECK(p.query_index == p.template_index);
      CHECK(p.mean_abs_diff == 0.0f);
      CHECK(p.displacement == 0.0f);
    }
  }

  SUBCASE("disjoint random descriptors score low; noisy copies score higher") {
    int higher = 0;
    double disjoint_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      RngStream rng(200 + seed, 0);
      auto q = random_descs(12, rng);
      auto t = random_descs(12, rng);
      const float disjoint = match_patch(q, t, diag).score;
      disjoint_sum += disjoint;

      auto noisy = q;
      for (auto& kp : noisy) {
        double norm = 0.0;
        for (auto& v : kp.desc) {
          v += 0.01f * rng.normal();
          norm += v * v;
        }
        norm = std::sqrt(norm);
        for (auto& v : kp.desc) v = static_cast<float>(v / norm);
      }
      if (match_patch(noisy, q, diag).score > disjoint) ++higher;
    }
    CHECK(disjoint_sum / 100.0 < 0.2);
    CHECK(higher == 100);
  }

  SUBCASE("empty inputs give score 0 and no pairs") {
    RngStream rng(1, 0);
    auto d = random_descs(4, rng);
    CHECK(match_patch({}, d, diag).score == 0.0f);
    CHECK(match_patch(d, {}, diag).pairs.empty());
  }
}

TEST_CASE("aggregate_patches") {
  SUBCASE("constant scores pass through") {
    auto [m, c] = aggregate_patches({0.7f, 0.7f, 0.7f}, {0.4f, 0.4f, 0.4f},
                                    {true, true, true});
    CHECK(m == doctest::Approx(0.7));
    CHECK(c == doctest::Approx(0.4));
  }

  SUBCASE("top-k by hand: [1,1,0,0] with k=2 gives match 1") {
    auto [m, c] = aggregate_patches({1, 1, 0, 0}, {1, 1, 0, 0}, {true, true, true, true});
    CHECK(m == doctest::Approx(1.0));
    CHECK(c == doctest::Approx(0.5));
  }

  SUBCASE("single usable patch dominates") {
    auto [m, c] = aggregate_patches({0.2f, 0.9f}, {0.3f, 0.8f}, {false, true});
    CHECK(m == doctest::Approx(0.9));
    CHECK(c == doctest::Approx(0.8));
  }

  CHECK_THROWS(aggregate_patches({0.5f}, {0.5f}, {false}));
  CHECK_THROWS(aggregate_patches({0.5f}, {0.5f, 0.5f}, {true}));
}

TEST_CASE("comparison feature and classifier") {
  SUBCASE("no matched pairs: neutral score with flag") {
    CompareClassifier clf;
    auto s = compare_liveness_score({PatchMatch{}}, 1, 9, clf);
    CHECK(s.value == 0.5f);
    CHECK(s.low_confidence);
  }

  SUBCASE("feature is 16-dim with sane entries") {
    RngStream rng(42, 0);
    auto d = random_descs(8, rng);
    auto m = match_patch(d, d, 30.0f);
    auto f = comparison_feature({m}, 9, 9, 16);
    CHECK(f.size() == 16);
    CHECK(f[3] == doctest::Approx(1.0).epsilon(1e-5));  // mean cosine of self-match
    CHECK(f[15] == doctest::Approx(1.0));
    float hist = 0.0f;
    for (int i = 5; i < 13; ++i) hist += f[static_cast<std::size_t>(i)];
    CHECK(hist == doctest::Approx(1.0).epsilon(1e-5));
  }

  SUBCASE("logistic classifier separates a linearly separable set") {
    std::vector<std::array<float, 16>> feats;
    std::vector<int> labels;
    RngStream rng(8, 0);
    for (int i = 0; i < 200; ++i) {
      std::array<float, 16> f{};
      const int y = i % 2;
      f[3] = (y ? 0.9f : 0.2f) + 0.05f * rng.normal();
      f[13] = (y ? 0.8f : 0.1f) + 0.05f * rng.normal();
      feats.push_back(f);
      labels.push_back(y);
    }
    auto clf = train_compare_classifier(feats, labels);
    int correct = 0;
    for (int i = 0; i < 200; ++i)
      if ((clf.score(feats[static_cast<std::size_t>(i)]) >= 0.5f) == (labels[static_cast<std::size_t>(i)] == 1))
        ++correct;
    CHECK(correct >= 190);
    CHECK_THROWS(train_compare_classifier({}, {}));
  }
}

TEST_CASE("fuse_im") {
  FusionWeights w;

  SUBCASE("all ones accepts under any valid thresholds") {
    auto s = fuse_im(1, 1, 1, w, 0.9f, 0.9f);
    CHECK(s.fused == doctest::Approx(1.0));
    CHECK(s.accept);
  }

  SUBCASE("match gate rejects despite perfect liveness") {
    auto s = fuse_im(0.1f, 1, 1, w, 0.5f, 0.5f);
    CHECK(!s.accept);
  }

  SUBCASE("weighted mean oracle and bounds on random triples") {
    RngStream rng(31, 0);
    for (int i = 0; i < 1000; ++i) {
      const float m = rng.next_float(), c = rng.next_float(), n = rng.next_float();
      auto s = fuse_im(m, c, n, w, 0.5f, 0.5f);
      const float want = static_cast<float>(static_cast<double>(w.match) * m +
                                            static_cast<double>(w.compare) * c +
                                            static_cast<double>(w.normal) * n);
      CHECK(std::abs(static_cast<double>(s.fused) - want) < 1e-9);
      CHECK(s.fused >= std::min({m, c, n}) - 1e-7f);
      CHECK(s.fused <= std::max({m, c, n}) + 1e-7f);
    }
  }

  SUBCASE("dual-gate monotonicity under fuzzing") {
    RngStream rng(32, 0);
    for (int i = 0; i < 10000; ++i) {
      const float m = rng.next_float(), c = rng.next_float(), n = rng.next_float();
      const float tm = rng.next_float(), ti = rng.next_float();
      auto s = fuse_im(m, c, n, w, tm, ti);
      if (!s.accept) continue;
      // raising any component keeps the accept
      CHECK(fuse_im(std::min(1.0f, m + 0.1f), c, n, w, tm, ti).accept);
      CHECK(fuse_im(m, std::min(1.0f, c + 0.1f), n, w, tm, ti).accept);
      CHECK(fuse_im(m, c, std::min(1.0f, n + 0.1f), w, tm, ti).accept);
    }
  }

  CHECK_THROWS(fuse_im(0.5f, 0.5f, 0.5f, {0.8f, 0.3f, 0.3f}, 0.5f, 0.5f));
  CHECK_THROWS(fuse_im(1.5f, 0.5f, 0.5f, w, 0.5f, 0.5f));
}

TEST_CASE("enroll, template io, verify") {
  auto finger = synth::synth_finger(404);
  auto scanners = synth::make_scanners(1, 1);
  auto live = synth::material_by_name("live");
  std::vector<ImageSample> enroll_imgs;
  for (int i = 0; i < 2; ++i) {
    RngStream rng(600, static_cast<std::uint64_t>(i));
    auto s = synth::render_impression(finger, scanners[0], live, rng);
    s.subject = "s1";
    s.finger = "f1";
    enroll_imgs.push_back(std::move(s));
  }
  auto model = nn::build_model(nn::Preset::tiny, 32, 12);
  auto tpl = enroll(enroll_imgs, model, {});

  SUBCASE("template structure and bit-exact round trip") {
    CHECK(tpl.subject == "s1");
    CHECK(tpl.patch_descriptors.size() == 9);
    CHECK(tpl.embedding.size() == 32);
    int usable = 0;
    for (auto u : tpl.usable) usable += u;
    CHECK(usable >= 5);

    save_template("test_tpl.fptm", tpl);
    auto back = load_template("test_tpl.fptm");
    save_template("test_tpl2.fptm", back);
    auto slurp = [](const char* p) {
      std::ifstream is(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(is), {});
    };
    CHECK(slurp("test_tpl.fptm") == slurp("test_tpl2.fptm"));
    CHECK(back.patch_descriptors[0].size() == tpl.patch_descriptors[0].size());
    std::remove("test_tpl.fptm");
    std::remove("test_tpl2.fptm");

    std::ofstream trunc("test_trunc.fptm", std::ios::binary);
    trunc << "FPTM";
    trunc.close();
    CHECK_THROWS(load_template("test_trunc.fptm"));
    std::remove("test_trunc.fptm");
  }

  SUBCASE("self-match scores at least 0.9; verify pipeline runs") {
    CompareClassifier clf;
    auto res = verify(enroll_imgs[0].pixels, tpl, model, clf, {}, 0.5f, 0.0f);
    CHECK(res.score.match >= 0.9f);
    CHECK(!res.low_quality);

    // an impostor finger matches worse than self
    RngStream rng(601, 0);
    auto other = synth::render_impression(synth::synth_finger(999), scanners[0], live, rng);
    auto imp = verify(other.pixels, tpl, model, clf, {}, 0.5f, 0.0f);
    CHECK(imp.score.match < res.score.match);
  }

  SUBCASE("single-image enrollment supported; all-blank rejected") {
    auto one = enroll({enroll_imgs[0]}, model, {});
    CHECK(one.patch_descriptors.size() == 9);
    ImageSample blank;
    blank.pixels = Tensor::full({1, 64, 64}, 0.5f);
    CHECK_THROWS(enroll({blank}, model, {}));
    CHECK_THROWS(enroll({}, model, {}));
  }
}

TEST_CASE("normal liveness score") {
  auto model = nn::build_model(nn::Preset::tiny, 16, 77);
  const Tensor img = ridge_image(21, 32);
  const float a = normal_liveness_score(model, img);
  const float b = normal_liveness_score(model, img);
  CHECK(a == b);
  CHECK(a >= 0.0f);
  CHECK(a <= 1.0f);

  train::EnsembleModel e;
  for (int i = 0; i < 3; ++i) e.members.push_back(nn::build_model(nn::Preset::tiny, 16, 77));
  CHECK(normal_liveness_score(e, img) == doctest::Approx(a).epsilon(1e-6));
}

TEST_CASE("trial protocol csv round-trips") {
  std::vector<TrialRow> rows = {{"t1", "images/a.pgm", "tpl1", "genuine"},
                                {"t2", "images/b.pgm", "tpl1", "attack"}};
  write_trials("test_trials.csv", rows);
  auto back = read_trials("test_trials.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].trial_id == "t1");
  CHECK(back[1].type == "attack");
  std::remove("test_trials.csv");
  CHECK_THROWS(read_trials("missing_trials.csv"));
}
