#include "fpl/recognizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace fpl::rec {

static constexpr float kPi = 3.14159265358979f;

// ---- preprocess ----

PreprocessResult preprocess(const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[0] != 1)
    throw std::invalid_argument("preprocess: expected [1,H,W] grayscale");
  const int h = image.shape[1], w = image.shape[2];
  const int block = 16;
  const int nby = (h + block - 1) / block, nbx = (w + block - 1) / block;
  std::vector<float> bmean(static_cast<std::size_t>(nby) * nbx);
  std::vector<float> bstd(static_cast<std::size_t>(nby) * nbx);
  bool any_structure = false;
  for (int by = 0; by < nby; ++by)
    for (int bx = 0; bx < nbx; ++bx) {
      double s = 0.0, s2 = 0.0;
      int n = 0;
      for (int y = by * block; y < std::min(h, (by + 1) * block); ++y)
        for (int x = bx * block; x < std::min(w, (bx + 1) * block); ++x) {
          const double v = image.data[static_cast<std::size_t>(y) * w + x];
          s += v;
          s2 += v * v;
          ++n;
        }
      const double mu = s / n;
      const double var = std::max(0.0, s2 / n - mu * mu);
      bmean[static_cast<std::size_t>(by) * nbx + bx] = static_cast<float>(mu);
      bstd[static_cast<std::size_t>(by) * nbx + bx] = static_cast<float>(std::sqrt(var));
      if (var > 1e-8) any_structure = true;
    }

  PreprocessResult out;
  out.low_quality = !any_structure;
  out.image = Tensor::zeros({1, h, w});
  // bilinear blend between block centers
  auto at = [&](const std::vector<float>& f, int by, int bx) {
    by = std::clamp(by, 0, nby - 1);
    bx = std::clamp(bx, 0, nbx - 1);
    return f[static_cast<std::size_t>(by) * nbx + bx];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const float fy = (y - block * 0.5f) / block, fx = (x - block * 0.5f) / block;
      const int by = static_cast<int>(std::floor(fy)), bx = static_cast<int>(std::floor(fx));
      const float wy = fy - by, wx = fx - bx;
      const float mu = (1 - wy) * ((1 - wx) * at(bmean, by, bx) + wx * at(bmean, by, bx + 1)) +
                       wy * ((1 - wx) * at(bmean, by + 1, bx) + wx * at(bmean, by + 1, bx + 1));
      const float sd = (1 - wy) * ((1 - wx) * at(bstd, by, bx) + wx * at(bstd, by, bx + 1)) +
                       wy * ((1 - wx) * at(bstd, by + 1, bx) + wx * at(bstd, by + 1, bx + 1));
      const float z = (image.data[static_cast<std::size_t>(y) * w + x] - mu) / (sd + 1e-6f);
      out.image.data[static_cast<std::size_t>(y) * w + x] =
          (std::clamp(z, -3.0f, 3.0f) + 3.0f) / 6.0f;
    }
  return out;
}

// ---- patches ----

std::vector<Patch> split_patches(const Tensor& image, const PatchGrid& grid) {
  if (image.shape.size() != 3 || image.shape[0] != 1)
    throw std::invalid_argument("split_patches: expected [1,H,W]");
  if (grid.rows < 1 || grid.cols < 1 || grid.overlap < 0.0f || grid.overlap >= 1.0f)
    throw std::invalid_argument("split_patches: invalid grid");
  const int h = image.shape[1], w = image.shape[2];
  const auto side = [&](int extent, int n) {
    const float denom = n - (n - 1) * grid.overlap;
    return static_cast<int>(std::ceil(extent / denom));
  };
  const int ph = side(h, grid.rows), pw = side(w, grid.cols);
  if (ph < 3 || pw < 3 || ph > h || pw > w)
    throw std::invalid_argument("split_patches: image smaller than one patch");
  const auto start = [](int extent, int patch, int n, int i) {
    if (n == 1) return 0;
    return static_cast<int>(std::lround(static_cast<double>(i) * (extent - patch) / (n - 1)));
  };
  std::vector<Patch> patches;
  for (int r = 0; r < grid.rows; ++r)
    for (int c = 0; c < grid.cols; ++c) {
      Patch p;
      p.y0 = start(h, ph, grid.rows, r);
      p.x0 = start(w, pw, grid.cols, c);
      p.pixels = Tensor::zeros({1, ph, pw});
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x)
          p.pixels.data[static_cast<std::size_t>(y) * pw + x] =
              image.data[static_cast<std::size_t>(p.y0 + y) * w + (p.x0 + x)];
      patches.push_back(std::move(p));
    }
  return patches;
}

// ---- keypoints ----

static void gradients(const Tensor& patch, std::vector<float>& gx, std::vector<float>& gy) {
  const int h = patch.shape[1], w = patch.shape[2];
  gx.assign(static_cast<std::size_t>(h) * w, 0.0f);
  gy.assign(static_cast<std::size_t>(h) * w, 0.0f);
  auto px = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return patch.data[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      gx[static_cast<std::size_t>(y) * w + x] = 0.5f * (px(y, x + 1) - px(y, x - 1));
      gy[static_cast<std::size_t>(y) * w + x] = 0.5f * (px(y + 1, x) - px(y - 1, x));
    }
}

std::vector<KeypointDescriptor> extract_keypoints(const Tensor& patch,
                                                  const KeypointConfig& cfg) {
  if (patch.shape.size() != 3 || patch.shape[0] != 1)
    throw std::invalid_argument("extract_keypoints: expected [1,h,w]");
  const int h = patch.shape[1], w = patch.shape[2];
  std::vector<float> gx, gy;
  gradients(patch, gx, gy);

  // Harris response with a box-summed structure tensor (radius 2)
  std::vector<float> response(static_cast<std::size_t>(h) * w, 0.0f);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double sxx = 0.0, syy = 0.0, sxy = 0.0;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          const int xx = std::clamp(x + dx, 0, w - 1);
          const float a = gx[static_cast<std::size_t>(yy) * w + xx];
          const float b = gy[static_cast<std::size_t>(yy) * w + xx];
          sxx += a * a;
          syy += b * b;
          sxy += a * b;
        }
      const double det = sxx * syy - sxy * sxy;
      const double tr = sxx + syy;
      response[static_cast<std::size_t>(y) * w + x] =
          static_cast<float>(det - cfg.harris_k * tr * tr);
    }

  // candidates sorted by response, ties by index for determinism
  std::vector<int> order;
  for (int i = 0; i < h * w; ++i)
    if (response[static_cast<std::size_t>(i)] > cfg.response_floor) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return response[static_cast<std::size_t>(a)] > response[static_cast<std::size_t>(b)];
  });

  std::vector<KeypointDescriptor> out;
  std::vector<std::pair<int, int>> kept;
  const int r2 = cfg.nms_radius * cfg.nms_radius;
  for (int idx : order) {
    if (static_cast<int>(out.size()) >= cfg.max_keypoints) break;
    const int y = idx / w, x = idx % w;
    bool suppressed = false;
    for (const auto& [ky, kx] : kept)
      if ((ky - y) * (ky - y) + (kx - x) * (kx - x) <= r2) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;

    // 32-bin gradient-orientation histogram over the 9x9 neighborhood
    KeypointDescriptor kp;
    kp.x = static_cast<float>(x);
    kp.y = static_cast<float>(y);
    for (int dy = -4; dy <= 4; ++dy)
      for (int dx = -4; dx <= 4; ++dx) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        const int xx = std::clamp(x + dx, 0, w - 1);
        const float a = gx[static_cast<std::size_t>(yy) * w + xx];
        const float b = gy[static_cast<std::size_t>(yy) * w + xx];
        const float mag = std::sqrt(a * a + b * b);
        if (mag <= 0.0f) continue;
        float ang = std::atan2(b, a);
        if (ang < 0.0f) ang += 2.0f * kPi;
        int bin = static_cast<int>(ang / (2.0f * kPi) * 32.0f);
        bin = std::clamp(bin, 0, 31);
        kp.desc[static_cast<std::size_t>(bin)] += mag;
      }
    double norm = 0.0;
    int best_bin = 0;
    for (int i = 0; i < 32; ++i) {
      norm += kp.desc[static_cast<std::size_t>(i)] * kp.desc[static_cast<std::size_t>(i)];
      if (kp.desc[static_cast<std::size_t>(i)] > kp.desc[static_cast<std::size_t>(best_bin)])
        best_bin = i;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) continue;
    for (auto& v : kp.desc) v = static_cast<float>(v / norm);
    float theta = (best_bin + 0.5f) * (2.0f * kPi / 32.0f);
    while (theta >= kPi) theta -= kPi;
    kp.theta = theta;
    kept.push_back({y, x});
    out.push_back(kp);
  }
  return out;
}

// ---- matching ----

static float cosine(const KeypointDescriptor& a, const KeypointDescriptor& b) {
  float s = 0.0f;
  for (int i = 0; i < 32; ++i)
    s += a.desc[static_cast<std::size_t>(i)] * b.desc[static_cast<std::size_t>(i)];
  return s;
}

PatchMatch match_patch(const std::vector<KeypointDescriptor>& query,
                       const std::vector<KeypointDescriptor>& templ,
                       float patch_diag, float ratio) {
  PatchMatch out;
  if (query.empty() || templ.empty()) return out;
  const int nq = static_cast<int>(query.size()), nt = static_cast<int>(templ.size());

  // nearest and second-nearest template neighbor per query point
  std::vector<int> best_t(static_cast<std::size_t>(nq), -1);
  std::vector<int> best_q(static_cast<std::size_t>(nt), -1);
  std::vector<float> best_q_cos(static_cast<std::size_t>(nt),
                                -std::numeric_limits<float>::infinity());
  std::vector<bool> pass_ratio(static_cast<std::size_t>(nq), false);
  for (int i = 0; i < nq; ++i) {
    float c1 = -std::numeric_limits<float>::infinity(), c2 = c1;
    for (int j = 0; j < nt; ++j) {
      const float c = cosine(query[static_cast<std::size_t>(i)], templ[static_cast<std::size_t>(j)]);
      if (c > c1) {
        c2 = c1;
        c1 = c;
        best_t[static_cast<std::size_t>(i)] = j;
      } else if (c > c2) {
        c2 = c;
      }
      if (c > best_q_cos[static_cast<std::size_t>(j)]) {
        best_q_cos[static_cast<std::size_t>(j)] = c;
        best_q[static_cast<std::size_t>(j)] = i;
      }
    }
    if (nt == 1) {
      pass_ratio[static_cast<std::size_t>(i)] = true;
    } else {
      const float d1 = std::sqrt(std::max(0.0f, 2.0f - 2.0f * c1));
      const float d2 = std::sqrt(std::max(0.0f, 2.0f - 2.0f * c2));
      pass_ratio[static_cast<std::size_t>(i)] = d2 <= 0.0f || d1 < ratio * d2;
    }
  }

  double cos_sum = 0.0;
  for (int i = 0; i < nq; ++i) {
    const int j = best_t[static_cast<std::size_t>(i)];
    if (j < 0 || best_q[static_cast<std::size_t>(j)] != i || !pass_ratio[static_cast<std::size_t>(i)])
      continue;
    MatchedPair pair;
    pair.query_index = i;
    pair.template_index = j;
    pair.cosine = cosine(query[static_cast<std::size_t>(i)], templ[static_cast<std::size_t>(j)]);
    float diff = 0.0f;
    for (int d = 0; d < 32; ++d)
      diff += std::abs(query[static_cast<std::size_t>(i)].desc[static_cast<std::size_t>(d)] -
                       templ[static_cast<std::size_t>(j)].desc[static_cast<std::size_t>(d)]);
    pair.mean_abs_diff = diff / 32.0f;
    const float dx = query[static_cast<std::size_t>(i)].x - templ[static_cast<std::size_t>(j)].x;
    const float dy = query[static_cast<std::size_t>(i)].y - templ[static_cast<std::size_t>(j)].y;
    pair.displacement = std::sqrt(dx * dx + dy * dy) / std::max(1e-6f, patch_diag);
    cos_sum += pair.cosine;
    out.pairs.push_back(pair);
  }
  if (!out.pairs.empty()) {
    const float frac =
        static_cast<float>(out.pairs.size()) / static_cast<float>(std::max(nq, nt));
    const float mean_cos =
        static_cast<float>(cos_sum / static_cast<double>(out.pairs.size()));
    out.score = std::clamp(frac * std::max(0.0f, mean_cos), 0.0f, 1.0f);
  }
  return out;
}

std::pair<float, float> aggregate_patches(const std::vector<float>& match_scores,
                                          const std::vector<float>& compare_scores,
                                          const std::vector<bool>& usable) {
  if (match_scores.size() != usable.size() || compare_scores.size() != usable.size())
    throw std::invalid_argument("aggregate_patches: size mismatch");
  std::vector<float> m;
  double cmp_sum = 0.0;
  for (std::size_t i = 0; i < usable.size(); ++i)
    if (usable[i]) {
      m.push_back(match_scores[i]);
      cmp_sum += compare_scores[i];
    }
  if (m.empty()) throw std::runtime_error("aggregate_patches: no usable patches");
  const std::size_t k = (m.size() + 1) / 2;
  std::sort(m.begin(), m.end(), std::greater<float>());
  double match_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) match_sum += m[i];
  return {static_cast<float>(match_sum / static_cast<double>(k)),
          static_cast<float>(cmp_sum / static_cast<double>(m.size()))};
}

// ---- comparison feature and classifier ----

std::array<float, 16> comparison_feature(const std::vector<PatchMatch>& matches,
                                         int usable_patches, int total_patches,
                                         int k_per_patch) {
  std::array<float, 16> f{};
  std::vector<const MatchedPair*> pairs;
  for (const auto& m : matches)
    for (const auto& p : m.pairs) pairs.push_back(&p);
  if (!pairs.empty()) {
    double dsum = 0.0, dmax = 0.0, csum = 0.0, dispsum = 0.0;
    double cmin = 1.0;
    for (const auto* p : pairs) {
      dsum += p->mean_abs_diff;
      dmax = std::max(dmax, static_cast<double>(p->mean_abs_diff));
      csum += p->cosine;
      cmin = std::min(cmin, static_cast<double>(p->cosine));
      dispsum += p->displacement;
      int bin = static_cast<int>((p->cosine + 1.0f) * 4.0f);  // [-1,1] -> 8 bins
      bin = std::clamp(bin, 0, 7);
      f[static_cast<std::size_t>(5 + bin)] += 1.0f;
    }
    const double n = static_cast<double>(pairs.size());
    f[0] = static_cast<float>(dsum / n);
    f[1] = static_cast<float>(dmax);
    double var = 0.0;
    for (const auto* p : pairs) var += (p->mean_abs_diff - f[0]) * (p->mean_abs_diff - f[0]);
    f[2] = static_cast<float>(std::sqrt(var / n));
    f[3] = static_cast<float>(csum / n);
    f[4] = static_cast<float>(cmin);
    for (int i = 5; i < 13; ++i) f[static_cast<std::size_t>(i)] /= static_cast<float>(n);
    f[13] = static_cast<float>(n / std::max(1, total_patches * k_per_patch));
    f[14] = static_cast<float>(dispsum / n);
  }
  f[15] = total_patches > 0
              ? static_cast<float>(usable_patches) / static_cast<float>(total_patches)
              : 0.0f;
  return f;
}

float CompareClassifier::score(const std::array<float, 16>& feature) const {
  float z = b;
  for (int i = 0; i < 16; ++i) z += w[static_cast<std::size_t>(i)] * feature[static_cast<std::size_t>(i)];
  return 1.0f / (1.0f + std::exp(-z));
}

CompareClassifier train_compare_classifier(
    const std::vector<std::array<float, 16>>& features, const std::vector<int>& labels,
    int iterations, float lr) {
  if (features.size() != labels.size() || features.empty())
    throw std::invalid_argument("train_compare_classifier: bad training set");
  CompareClassifier clf;
  const double n = static_cast<double>(features.size());
  for (int it = 0; it < iterations; ++it) {
    std::array<double, 16> gw{};
    double gb = 0.0;
    for (std::size_t s = 0; s < features.size(); ++s) {
      const double err = clf.score(features[s]) - labels[s];
      for (int i = 0; i < 16; ++i) gw[static_cast<std::size_t>(i)] += err * features[s][static_cast<std::size_t>(i)];
      gb += err;
    }
    for (int i = 0; i < 16; ++i)
      clf.w[static_cast<std::size_t>(i)] -= static_cast<float>(lr * gw[static_cast<std::size_t>(i)] / n);
    clf.b -= static_cast<float>(lr * gb / n);
  }
  return clf;
}

CompareScore compare_liveness_score(const std::vector<PatchMatch>& matches,
                                    int usable_patches, int total_patches,
                                    const CompareClassifier& clf) {
  bool any = false;
  for (const auto& m : matches)
    if (!m.pairs.empty()) any = true;
  if (!any) return {0.5f, true};
  return {clf.score(comparison_feature(matches, usable_patches, total_patches)), false};
}

// ---- liveness and fusion ----

float normal_liveness_score(nn::LivenessModel& model, const Tensor& image) {
  Tensor batch = image;
  if (batch.shape.size() == 3) batch.shape.insert(batch.shape.begin(), 1);
  auto f = model.forward(batch, false);
  return f.probs.data[0];
}

float normal_liveness_score(train::EnsembleModel& ensemble, const Tensor& image) {
  return train::ensemble_predict(ensemble, image)[0];
}

IMScore fuse_im(float match, float compare_liveness, float normal_liveness,
                const FusionWeights& weights, float tau_match, float tau_im) {
  const float ws = weights.match + weights.compare + weights.normal;
  if (weights.match < 0.0f || weights.compare < 0.0f || weights.normal < 0.0f ||
      std::abs(ws - 1.0f) > 1e-5f)
    throw std::invalid_argument("fuse_im: weights must be nonnegative and sum to 1");
  for (float v : {match, compare_liveness, normal_liveness})
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("fuse_im: scores must be in [0,1]");
  IMScore s;
  s.match = match;
  s.compare_liveness = compare_liveness;
  s.normal_liveness = normal_liveness;
  s.fused = static_cast<float>(static_cast<double>(weights.match) * match +
                               static_cast<double>(weights.compare) * compare_liveness +
                               static_cast<double>(weights.normal) * normal_liveness);
  s.accept = match >= tau_match && s.fused >= tau_im;
  return s;
}

// ---- enrollment ----

Template enroll(const std::vector<ImageSample>& images, nn::LivenessModel& model,
                const PatchGrid& grid) {
  if (images.empty()) throw std::invalid_argument("enroll: no enrollment images");

  int best = -1;
  int best_kp = -1;
  std::vector<PreprocessResult> pre(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    pre[i] = preprocess(images[i].pixels);
    if (pre[i].low_quality) continue;
    int kp_count = 0;
    for (const auto& patch : split_patches(pre[i].image, grid))
      kp_count += static_cast<int>(extract_keypoints(patch.pixels).size());
    if (kp_count > best_kp) {
      best_kp = kp_count;
      best = static_cast<int>(i);
    }
  }
  if (best < 0) throw std::runtime_error("enroll: all enrollment images low-quality");

  Template t;
  t.subject = images[static_cast<std::size_t>(best)].subject;
  t.finger = images[static_cast<std::size_t>(best)].finger;
  t.grid = grid;
  for (const auto& patch : split_patches(pre[static_cast<std::size_t>(best)].image, grid)) {
    auto kps = extract_keypoints(patch.pixels);
    t.usable.push_back(kps.empty() ? 0 : 1);
    t.patch_descriptors.push_back(std::move(kps));
  }

  std::vector<double> emb;
  for (const auto& img : images) {
    auto fr = nn::extract_feature(model, img.pixels);
    if (emb.empty()) emb.assign(fr.feature.size(), 0.0);
    for (std::size_t i = 0; i < fr.feature.size(); ++i) emb[i] += fr.feature[i];
  }
  for (double v : emb) t.embedding.push_back(static_cast<float>(v / images.size()));
  return t;
}

// ---- FPTM serialization ----

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void put_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error("load_template: truncated file");
  return v;
}
float get_f32(std::istream& is) {
  float v = 0.0f;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error("load_template: truncated file");
  return v;
}
std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw std::runtime_error("load_template: truncated file");
  return s;
}

}  // namespace

void save_template(const std::string& path, const Template& t) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("save_template: cannot open " + tmp);
    os.write("FPTM", 4);
    put_u32(os, 1);
    put_u32(os, static_cast<std::uint32_t>(t.grid.rows));
    put_u32(os, static_cast<std::uint32_t>(t.grid.cols));
    put_f32(os, t.grid.overlap);
    put_str(os, t.subject);
    put_str(os, t.finger);
    put_u32(os, static_cast<std::uint32_t>(t.patch_descriptors.size()));
    for (std::size_t p = 0; p < t.patch_descriptors.size(); ++p) {
      os.put(static_cast<char>(t.usable[p]));
      put_u32(os, static_cast<std::uint32_t>(t.patch_descriptors[p].size()));
      for (const auto& kp : t.patch_descriptors[p]) {
        put_f32(os, kp.x);
        put_f32(os, kp.y);
        put_f32(os, kp.theta);
        for (float v : kp.desc) put_f32(os, v);
      }
    }
    put_u32(os, static_cast<std::uint32_t>(t.embedding.size()));
    for (float v : t.embedding) put_f32(os, v);
    if (!os) throw std::runtime_error("save_template: write failed for " + tmp);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_template: rename failed for " + path);
}

Template load_template(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_template: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FPTM", 4) != 0)
    throw std::runtime_error("load_template: bad magic in " + path);
  if (get_u32(is) != 1) throw std::runtime_error("load_template: unsupported version");
  Template t;
  t.grid.rows = static_cast<int>(get_u32(is));
  t.grid.cols = static_cast<int>(get_u32(is));
  t.grid.overlap = get_f32(is);
  t.subject = get_str(is);
  t.finger = get_str(is);
  const std::uint32_t patches = get_u32(is);
  for (std::uint32_t p = 0; p < patches; ++p) {
    int u = is.get();
    if (u == EOF) throw std::runtime_error("load_template: truncated file");
    t.usable.push_back(static_cast<std::uint8_t>(u));
    const std::uint32_t nk = get_u32(is);
    std::vector<KeypointDescriptor> kps;
    for (std::uint32_t k = 0; k < nk; ++k) {
      KeypointDescriptor kp;
      kp.x = get_f32(is);
      kp.y = get_f32(is);
      kp.theta = get_f32(is);
      for (auto& v : kp.desc) v = get_f32(is);
      kps.push_back(kp);
    }
    t.patch_descriptors.push_back(std::move(kps));
  }
  const std::uint32_t ne = get_u32(is);
  for (std::uint32_t i = 0; i < ne; ++i) t.embedding.push_back(get_f32(is));
  return t;
}

// ---- verification pipeline ----

MatchOutcome match_query(const Tensor& query, const Template& templ) {
  MatchOutcome out;
  auto pre = preprocess(query);
  out.low_quality = pre.low_quality;
  auto patches = split_patches(pre.image, templ.grid);
  if (patches.size() != templ.patch_descriptors.size())
    throw std::invalid_argument("match_query: template grid mismatch");
  out.total_patches = static_cast<int>(patches.size());

  for (std::size_t p = 0; p < patches.size(); ++p) {
    const auto& tk = templ.patch_descriptors[p];
    if (!templ.usable[p] || tk.empty()) {
      out.patch_scores.push_back(0.0f);
      out.usable.push_back(false);
      continue;
    }
    const float diag = std::sqrt(
        static_cast<float>(patches[p].pixels.shape[1] * patches[p].pixels.shape[1] +
                           patches[p].pixels.shape[2] * patches[p].pixels.shape[2]));
    auto qk = extract_keypoints(patches[p].pixels);
    auto pm = match_patch(qk, tk, diag);
    out.patch_scores.push_back(pm.score);
    out.usable.push_back(true);
    ++out.usable_count;
    out.matches.push_back(std::move(pm));
  }
  std::vector<float> dummy(out.patch_scores.size(), 0.0f);
  out.match_score = aggregate_patches(out.patch_scores, dummy, out.usable).first;
  return out;
}

VerifyResult verify(const Tensor& query, const Template& templ,
                    nn::LivenessModel& model, const CompareClassifier& clf,
                    const FusionWeights& weights, float tau_match, float tau_im) {
  VerifyResult res;
  auto out = match_query(query, templ);
  res.low_quality = out.low_quality;

  // per-patch compare scores aggregated over usable patches
  std::vector<float> compare_scores(out.patch_scores.size(), 0.5f);
  std::size_t mi = 0;
  for (std::size_t p = 0; p < out.usable.size(); ++p)
    if (out.usable[p])
      compare_scores[p] = compare_liveness_score({out.matches[mi++]}, 1, 1, clf).value;
  auto [match, compare] =
      aggregate_patches(out.patch_scores, compare_scores, out.usable);
  auto overall =
      compare_liveness_score(out.matches, out.usable_count, out.total_patches, clf);
  res.low_confidence = overall.low_confidence;
  const float normal = normal_liveness_score(model, query);
  res.score = fuse_im(match, compare, normal, weights, tau_match, tau_im);
  return res;
}

// ---- trial protocol CSV ----

void write_trials(const std::string& path, const std::vector<TrialRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_trials: cannot open " + path);
  os << "trial_id,query_path,template_id,type\n";
  for (const auto& r : rows)
    os << r.trial_id << "," << r.query_path << "," << r.template_id << "," << r.type << "\n";
  if (!os) throw std::runtime_error("write_trials: write failed for " + path);
}

std::vector<TrialRow> read_trials(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_trials: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "trial_id,query_path,template_id,type")
    throw std::runtime_error("read_trials: bad header in " + path);
  std::vector<TrialRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    TrialRow r;
    if (!std::getline(ss, r.trial_id, ',') || !std::getline(ss, r.query_path, ',') ||
        !std::getline(ss, r.template_id, ',') || !std::getline(ss, r.type, ','))
      throw std::runtime_error("read_trials: malformed row: " + line);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace fpl::rec
