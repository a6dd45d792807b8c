#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "fpl/nn.hpp"

using namespace fpl;
using namespace fpl::nn;

static Tensor randn(std::vector<int> shape, RngStream& rng, float scale = 1.0f) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

static SEBlock make_se(int channels, int r, RngStream& rng) {
  SEBlock se;
  se.channels = channels;
  se.reduction = r;
  se.fc1.w = ad::param(randn({channels, channels / r}, rng, 0.3f));
  se.fc1.b = ad::param(Tensor::zeros({channels / r}));
  se.fc2.w = ad::param(randn({channels / r, channels}, rng, 0.3f));
  se.fc2.b = ad::param(Tensor::zeros({channels}));
  return se;
}

TEST_CASE("se block: zero weights gate everything at 0.5") {
  RngStream rng(1, 0);
  SEBlock se = make_se(8, 4, rng);
  std::fill(se.fc1.w->value.data.begin(), se.fc1.w->value.data.end(), 0.0f);
  std::fill(se.fc2.w->value.data.begin(), se.fc2.w->value.data.end(), 0.0f);
  Tensor x = randn({2, 8, 4, 4}, rng);
  auto y = se.forward(ad::constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(y->value[i] == doctest::Approx(x[i] * 0.5f));
}

TEST_CASE("se block: zero input stays zero") {
  RngStream rng(2, 0);
  SEBlock se = make_se(8, 4, rng);
  auto y = se.forward(ad::constant(Tensor::zeros({1, 8, 3, 3})));
  for (float v : y->value.data) CHECK(v == 0.0f);
}

TEST_CASE("se block matches brute-force per-channel computation") {
  RngStream rng(3, 0);
  const int C = 8, r = 4, H = 5, W = 5;
  SEBlock se = make_se(C, r, rng);
  Tensor x = randn({1, C, H, W}, rng);
  auto y = se.forward(ad::constant(x));

  // independent recomputation in f64
  fdo::Vec squeeze(C, 0.0);
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < H * W; ++i) squeeze[c] += x.data[c * H * W + i];
    squeeze[c] /= H * W;
  }
  fdo::Vec hidden(C / r, 0.0);
  for (int j = 0; j < C / r; ++j) {
    for (int c = 0; c < C; ++c)
      hidden[j] += squeeze[c] * se.fc1.w->value.at2(c, j);
    hidden[j] = std::max(0.0, hidden[j] + se.fc1.b->value[j]);
  }
  for (int c = 0; c < C; ++c) {
    double z = se.fc2.b->value[c];
    for (int j = 0; j < C / r; ++j) z += hidden[j] * se.fc2.w->value.at2(j, c);
    double gate = fdo::sigmoid(z);
    CHECK(gate > 0.0);
    CHECK(gate < 1.0);
    for (int i = 0; i < H * W; ++i)
      CHECK(y->value.data[c * H * W + i] ==
            doctest::Approx(x.data[c * H * W + i] * gate).epsilon(1e-4));
  }

  CHECK_THROWS(make_se(8, 4, rng).forward(ad::constant(Tensor({1, 6, 2, 2}))));
}

TEST_CASE("se gate keeps per-channel magnitude bounded by input") {
  RngStream rng(4, 0);
  SEBlock se = make_se(8, 4, rng);
  Tensor x = randn({2, 8, 4, 4}, rng);
  auto y = se.forward(ad::constant(x));
  for (std::size_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(y->value[i]) <= std::abs(x[i]) + 1e-7f);
}

static BatchNorm2d make_bn(int C) {
  BatchNorm2d bn;
  bn.gamma = ad::param(Tensor::full({C}, 1.0f));
  bn.beta = ad::param(Tensor::zeros({C}));
  bn.running_mean = Tensor::zeros({C});
  bn.running_var = Tensor::full({C}, 1.0f);
  return bn;
}

TEST_CASE("batchnorm train mode normalizes") {
  RngStream rng(5, 0);
  const int N = 4, C = 3, H = 6, W = 6;
  BatchNorm2d bn = make_bn(C);
  Tensor x = randn({N, C, H, W}, rng, 2.0f);
  for (auto& v : x.data) v += 1.5f;
  auto y = bn.forward(ad::constant(x), true);
  for (int c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H * W; ++i) mu += y->value.data[(n * C + c) * H * W + i];
    mu /= N * H * W;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H * W; ++i) {
        double d = y->value.data[(n * C + c) * H * W + i] - mu;
        var += d * d;
      }
    var /= N * H * W;
    CHECK(std::abs(mu) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }
}

TEST_CASE("batchnorm gamma 0 gives beta everywhere") {
  RngStream rng(6, 0);
  BatchNorm2d bn = make_bn(2);
  std::fill(bn.gamma->value.data.begin(), bn.gamma->value.data.end(), 0.0f);
  bn.beta->value.data = {0.3f, -0.7f};
  Tensor x = randn({3, 2, 4, 4}, rng);
  auto y = bn.forward(ad::constant(x), true);
  for (int n = 0; n < 3; ++n)
    for (int c = 0; c < 2; ++c)
      for (int i = 0; i < 16; ++i)
        CHECK(y->value.data[(n * 2 + c) * 16 + i] ==
              doctest::Approx(bn.beta->value[c]));
}

TEST_CASE("batchnorm eval mode uses stored running stats") {
  BatchNorm2d bn = make_bn(1);
  bn.running_mean[0] = 0.5f;
  bn.running_var[0] = 4.0f;
  bn.gamma->value[0] = 2.0f;
  bn.beta->value[0] = 1.0f;
  Tensor x({1, 1, 1, 2}, {2.5f, 0.5f});
  auto y = bn.forward(ad::constant(x), false);
  // 2 * (x - 0.5)/sqrt(4 + 1e-5) + 1
  CHECK(y->value[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.00001) + 1.0));
  CHECK(y->value[1] == doctest::Approx(1.0));
}

TEST_CASE("batchnorm rejects batch of 1 in train mode") {
  BatchNorm2d bn = make_bn(2);
  CHECK_THROWS(bn.forward(ad::constant(Tensor({1, 2, 4, 4})), true));
  CHECK_NOTHROW(bn.forward(ad::constant(Tensor({1, 2, 4, 4})), false));
}

TEST_CASE("batchnorm gradient matches finite differences") {
  RngStream rng(7, 0);
  const int N = 3, C = 2, HW = 9;
  BatchNorm2d bn = make_bn(C);
  bn.gamma->value.data = {1.3f, 0.7f};
  bn.beta->value.data = {0.1f, -0.2f};
  Tensor xv = randn({N, C, 3, 3}, rng);
  Tensor coef = randn({N, C, 3, 3}, rng);
  auto x = ad::param(xv);
  auto y = bn.forward(x, true);
  ad::backward(ad::sum(ad::mul(y, ad::constant(coef))));
  auto f = [&](const fdo::Vec& in) {
    fdo::Vec g(bn.gamma->value.data.begin(), bn.gamma->value.data.end());
    fdo::Vec b(bn.beta->value.data.begin(), bn.beta->value.data.end());
    auto out = fdo::batchnorm_train(in, g, b, N, C, HW);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) acc += out[i] * coef[i];
    return acc;
  };
  auto fd = fdo::fd_grad(f, fdo::Vec(xv.data.begin(), xv.data.end()));
  CHECK(fdo::max_rel_err(x->grad.data, fd) < 1e-3);
}

TEST_CASE("build_model determinism and shapes") {
  auto m1 = build_model(Preset::tiny, 192, 1234);
  auto m2 = build_model(Preset::tiny, 192, 1234);
  auto n1 = m1.named_tensors();
  auto n2 = m2.named_tensors();
  REQUIRE(n1.size() == n2.size());
  for (std::size_t i = 0; i < n1.size(); ++i)
    CHECK(n1[i].second->data == n2[i].second->data);

  auto m3 = build_model(Preset::tiny, 192, 1235);
  bool any_diff = false;
  auto n3 = m3.named_tensors();
  for (std::size_t i = 0; i < n1.size(); ++i)
    if (n1[i].second->data != n3[i].second->data) any_diff = true;
  CHECK(any_diff);

  Tensor img = Tensor::full({2, 1, 64, 64}, 0.4f);
  auto r = m1.forward(img, false);
  CHECK(r.embedding->value.shape == std::vector<int>{2, 192});
  CHECK(r.logits->value.shape == std::vector<int>{2, 2});
  for (int i = 0; i < 2; ++i)
    CHECK(r.probs.at2(i, 0) + r.probs.at2(i, 1) == doctest::Approx(1.0).epsilon(1e-6));

  CHECK_THROWS(preset_from_name("huge"));
}

// Closed-form layer-size sums for the documented width tables.
static std::size_t expected_param_count(Preset p, int D) {
  auto w = preset_widths(p);
  std::size_t total = 0;
  int in = 1;
  for (std::size_t i = 0; i < w.size(); ++i) {
    int out = w[i];
    total += static_cast<std::size_t>(out) * in * 9 + out;  // conv
    total += 2 * static_cast<std::size_t>(out);             // bn gamma/beta
    if (i > 0) {
      int hid = out / 4;
      total += static_cast<std::size_t>(out) * hid + hid;   // se fc1
      total += static_cast<std::size_t>(hid) * out + out;   // se fc2
    }
    in = out;
  }
  total += static_cast<std::size_t>(in) * D + D;  // embed
  total += static_cast<std::size_t>(D) * 2 + 2;   // head
  return total;
}

TEST_CASE("preset parameter counts match the closed-form sum") {
  for (auto p : {Preset::tiny, Preset::small, Preset::base}) {
    auto m = build_model(p, 192, 1);
    CHECK(m.param_count() == expected_param_count(p, 192));
  }
  // documented ballparks
  CHECK(build_model(Preset::tiny, 192, 1).param_count() > 25000);
  CHECK(build_model(Preset::tiny, 192, 1).param_count() < 40000);
  CHECK(build_model(Preset::base, 192, 1).param_count() > 400000);
}

TEST_CASE("extract_feature returns the pre-head embedding") {
  auto m = build_model(Preset::tiny, 192, 42);
  RngStream rng(8, 0);
  Tensor img({1, 1, 64, 64});
  for (auto& v : img.data) v = rng.next_float();
  auto f1 = extract_feature(m, img);
  auto f2 = extract_feature(m, img);
  CHECK(f1.feature.size() == 192);
  CHECK(f1.feature == f2.feature);  // identical input, identical feature
  auto r = m.forward(img, false);
  CHECK(f1.feature == r.embedding->value.data);
  CHECK(f1.elapsed_ms >= 0.0);

  CHECK_THROWS(extract_feature(m, Tensor({2, 1, 64, 64})));
}

TEST_CASE("eval-mode forward is pure") {
  auto m = build_model(Preset::tiny, 64, 9);
  Tensor img = Tensor::full({1, 1, 32, 32}, 0.3f);
  auto before = m.blocks[0].bn.running_mean.data;
  (void)m.forward(img, false);
  CHECK(m.blocks[0].bn.running_mean.data == before);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  auto m = build_model(Preset::tiny, 192, 77);
  // make running stats non-trivial
  Tensor img = Tensor::full({2, 1, 64, 64}, 0.6f);
  (void)m.forward(img, true);
  const std::string path = "test_ckpt.fplm";
  save_checkpoint(path, m);
  auto loaded = load_checkpoint(path);
  auto a = m.named_tensors();
  auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->data == b[i].second->data);
  }

  // second save of the loaded model is byte-identical
  save_checkpoint("test_ckpt2.fplm", loaded);
  std::ifstream f1(path, std::ios::binary), f2("test_ckpt2.fplm", std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  // truncation is detected
  std::ofstream trunc("test_ckpt3.fplm", std::ios::binary);
  trunc.write(s1.data(), static_cast<std::streamsize>(s1.size() / 2));
  trunc.close();
  CHECK_THROWS(load_checkpoint("test_ckpt3.fplm"));

  std::remove(path.c_str());
  std::remove("test_ckpt2.fplm");
  std::remove("test_ckpt3.fplm");
}
