#include "fpl/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fpl::synth {

namespace fs = std::filesystem;
static constexpr float kPi = 3.14159265358979f;
static constexpr float kTwoPi = 6.28318530717959f;

float FingerIdentity::phase(float nx, float ny, int size) const {
  const float s = static_cast<float>(size);
  float p = ridge_freq * s * (nx * std::cos(theta0) + ny * std::sin(theta0));
  for (const auto& w : waves)
    p += w.amp * std::sin(kTwoPi * (w.ux * nx + w.uy * ny) + w.phase);
  return p;
}

float FingerIdentity::orientation(float nx, float ny, int size) const {
  // analytic gradient of phase w.r.t. pixel coordinates
  const float s = static_cast<float>(size);
  float gx = ridge_freq * std::cos(theta0);
  float gy = ridge_freq * std::sin(theta0);
  for (const auto& w : waves) {
    const float c = w.amp * std::cos(kTwoPi * (w.ux * nx + w.uy * ny) + w.phase) * kTwoPi / s;
    gx += c * w.ux;
    gy += c * w.uy;
  }
  float theta = std::atan2(gy, gx);
  while (theta < 0.0f) theta += kPi;
  while (theta >= kPi) theta -= kPi;
  return theta;
}

FingerIdentity synth_finger(std::uint64_t identity_seed) {
  RngStream rng(identity_seed, 0xf1279ULL);
  FingerIdentity f;
  f.identity_seed = identity_seed;
  f.theta0 = rng.uniform(0.0f, kPi);
  const int n_waves = 4;
  for (int i = 0; i < n_waves; ++i) {
    FingerIdentity::Wave w;
    w.ux = rng.uniform(-2.0f, 2.0f);
    w.uy = rng.uniform(-2.0f, 2.0f);
    w.amp = rng.uniform(0.4f, 1.2f);
    w.phase = rng.uniform(0.0f, kTwoPi);
    f.waves.push_back(w);
  }
  const int n_pores = 40;
  for (int i = 0; i < n_pores; ++i) {
    FingerIdentity::Pore p;
    p.x = rng.next_float();
    p.y = rng.next_float();
    p.radius = rng.uniform(0.8f, 1.4f);  // pixels at 64px scale
    f.pores.push_back(p);
  }
  return f;
}

std::vector<ScannerProfile> make_scanners(int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("make_scanners: count must be >= 1");
  std::vector<ScannerProfile> out;
  out.push_back({"scannerA", 1.0f, 0.0f, 0.5f, 0.02f, 0.08f});
  if (count >= 2) out.push_back({"scannerB", 0.85f, 0.10f, 0.8f, 0.04f, 0.25f});
  RngStream rng(seed, 0x5ca2ULL);
  for (int k = 2; k < count; ++k) {
    ScannerProfile s;
    s.name = "scanner" + std::string(1, static_cast<char>('A' + k));
    s.gain = rng.uniform(0.8f, 1.1f);
    s.offset = rng.uniform(-0.05f, 0.12f);
    s.blur_sigma = rng.uniform(0.4f, 0.9f);
    s.noise_sigma = rng.uniform(0.01f, 0.05f);
    s.vignette = rng.uniform(0.0f, 0.3f);
    out.push_back(s);
  }
  out.resize(static_cast<std::size_t>(count));
  return out;
}

std::vector<MaterialProfile> default_materials() {
  return {
      {"live", true, 0.0f, 0.25f, 1.0f, 0.0f},
      {"silica", false, 0.22f, 0.28f, 0.72f, 0.6f},
      {"gelatin", false, 0.18f, 0.22f, 0.78f, 0.45f},
      {"latex", false, 0.26f, 0.31f, 0.68f, 0.7f},
  };
}

MaterialProfile material_by_name(const std::string& name) {
  for (const auto& m : default_materials())
    if (m.name == name) return m;
  throw std::invalid_argument("unknown material: " + name);
}

static void gaussian_blur(std::vector<float>& img, int size, float sigma) {
  if (sigma <= 0.05f) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(2.5f * sigma)));
  std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
  float norm = 0.0f;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] =
        std::exp(-0.5f * i * i / (sigma * sigma));
    norm += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= norm;
  std::vector<float> tmp(img.size());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) {
        int xx = std::clamp(x + i, 0, size - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               img[static_cast<std::size_t>(y) * size + xx];
      }
      tmp[static_cast<std::size_t>(y) * size + x] = acc;
    }
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float acc = 0.0f;
      for (int i = -radius; i <= radius; ++i) {
        int yy = std::clamp(y + i, 0, size - 1);
        acc += kernel[static_cast<std::size_t>(i + radius)] *
               tmp[static_cast<std::size_t>(yy) * size + x];
      }
      img[static_cast<std::size_t>(y) * size + x] = acc;
    }
}

ImageSample render_impression(const FingerIdentity& finger, const ScannerProfile& scanner,
                              const MaterialProfile& material, RngStream& rng,
                              int size) {
  if (size < 8) throw std::invalid_argument("render_impression: size too small");
  std::vector<float> img(static_cast<std::size_t>(size) * size);

  // ridge pattern from the identity's phase field
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float nx = static_cast<float>(x) / size, ny = static_cast<float>(y) / size;
      const float p = finger.phase(nx, ny, size);
      img[static_cast<std::size_t>(y) * size + x] =
          0.5f + 0.5f * std::tanh(2.5f * std::sin(kTwoPi * p));
    }

  // pores: bright dots; spoofs lose a seeded fraction of them
  for (const auto& pore : finger.pores) {
    if (material.pore_dropout > 0.0f && rng.bernoulli(material.pore_dropout)) continue;
    const float px = pore.x * size, py = pore.y * size;
    const float r = pore.radius * size / 64.0f;
    const int x0 = std::max(0, static_cast<int>(px - 3 * r));
    const int x1 = std::min(size - 1, static_cast<int>(px + 3 * r));
    const int y0 = std::max(0, static_cast<int>(py - 3 * r));
    const int y1 = std::min(size - 1, static_cast<int>(py + 3 * r));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const float d2 = (x - px) * (x - px) + (y - py) * (y - py);
        img[static_cast<std::size_t>(y) * size + x] +=
            0.45f * std::exp(-0.5f * d2 / (r * r));
      }
  }

  if (!material.live) {
    const float beta = rng.uniform(0.0f, kPi);
    const float cb = std::cos(beta), sb = std::sin(beta);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        float& v = img[static_cast<std::size_t>(y) * size + x];
        v = 0.5f + (v - 0.5f) * material.contrast_compress;
        v += material.artifact_amp *
             std::sin(kTwoPi * material.artifact_freq * (x * cb + y * sb));
      }
  }

  // scanner transform: blur, gain/offset, vignette, noise
  gaussian_blur(img, size, scanner.blur_sigma);
  const float c = (size - 1) * 0.5f;
  const float dmax2 = 2.0f * c * c;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float& v = img[static_cast<std::size_t>(y) * size + x];
      v = scanner.gain * v + scanner.offset;
      const float d2 = (x - c) * (x - c) + (y - c) * (y - c);
      v *= 1.0f - scanner.vignette * d2 / dmax2;
      v += scanner.noise_sigma * rng.normal();
      v = std::clamp(v, 0.0f, 1.0f);
    }

  ImageSample s;
  s.pixels = Tensor({1, size, size}, std::move(img));
  s.set_hard_label(material.live ? Label::live : Label::spoof);
  s.material = material.name;
  s.scanner = scanner.name;
  return s;
}

SplitMode split_mode_from_name(const std::string& s) {
  if (s == "random" || s == "random_image") return SplitMode::random_image;
  if (s == "subject_disjoint") return SplitMode::subject_disjoint;
  if (s == "scanner_holdout") return SplitMode::scanner_holdout;
  throw std::invalid_argument("unknown split mode: " + s);
}

void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
  os << "path,label,material,scanner,subject,finger,split\n";
  for (const auto& r : m.rows)
    os << r.path << "," << r.label << "," << r.material << "," << r.scanner << ","
       << r.subject << "," << r.finger << "," << r.split << "\n";
  if (!os) throw std::runtime_error("write_manifest: write failed for " + path);
}

Manifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) ||
      line != "path,label,material,scanner,subject,finger,split")
    throw std::runtime_error("read_manifest: bad header in " + path);
  Manifest m;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestRow r;
    if (!std::getline(ss, r.path, ',') || !std::getline(ss, r.label, ',') ||
        !std::getline(ss, r.material, ',') || !std::getline(ss, r.scanner, ',') ||
        !std::getline(ss, r.subject, ',') || !std::getline(ss, r.finger, ',') ||
        !std::getline(ss, r.split, ','))
      throw std::runtime_error("read_manifest: malformed row: " + line);
    m.rows.push_back(std::move(r));
  }
  return m;
}

Manifest build_dataset(const DatasetConfig& cfg) {
  if (cfg.subjects < 1 || cfg.fingers_per_subject < 1 || cfg.impressions < 1 ||
      cfg.scanners < 1 || cfg.materials.empty())
    throw std::invalid_argument("build_dataset: counts must be >= 1");
  if (cfg.out_dir.empty()) throw std::invalid_argument("build_dataset: out_dir required");
  fs::create_directories(fs::path(cfg.out_dir) / "images");

  auto scanners = make_scanners(cfg.scanners, cfg.seed);
  std::vector<MaterialProfile> materials;
  for (const auto& name : cfg.materials) materials.push_back(material_by_name(name));

  Manifest m;
  std::vector<std::string> subjects_of;  // per row, for the split pass
  int image_index = 0;
  for (int subj = 0; subj < cfg.subjects; ++subj)
    for (int fing = 0; fing < cfg.fingers_per_subject; ++fing) {
      const std::uint64_t identity_seed =
          cfg.seed * 1000003ULL + static_cast<std::uint64_t>(subj) * 101ULL + fing;
      auto finger = synth_finger(identity_seed);
      for (const auto& scanner : scanners)
        for (const auto& material : materials)
          for (int imp = 0; imp < cfg.impressions; ++imp) {
            // per-image stream keyed by global image index
            RngStream rng = RngStream(cfg.seed, 0x1a6e5ULL)
                                .substream(static_cast<std::uint64_t>(image_index));
            auto sample = render_impression(finger, scanner, material, rng, cfg.image_size);
            char buf[32];
            std::snprintf(buf, sizeof buf, "images/img%06d.pgm", image_index);
            write_pgm((fs::path(cfg.out_dir) / buf).string(), sample.pixels);
            ManifestRow row;
            row.path = buf;
            row.label = label_name(sample.label);
            row.material = material.name;
            row.scanner = scanner.name;
            row.subject = "s" + std::to_string(subj);
            row.finger = "f" + std::to_string(fing);
            row.split = "train";
            m.rows.push_back(std::move(row));
            ++image_index;
          }
    }

  // 2/3 - 1/3 split, floor for val
  RngStream split_rng(cfg.seed, 0x59137ULL);
  const std::size_t n = m.rows.size();
  if (cfg.split == SplitMode::random_image) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[split_rng.next_below(i)]);
    const std::size_t n_val = n / 3;
    for (std::size_t i = 0; i < n_val; ++i) m.rows[idx[i]].split = "val";
  } else if (cfg.split == SplitMode::subject_disjoint) {
    std::vector<int> subj(cfg.subjects);
    std::iota(subj.begin(), subj.end(), 0);
    for (std::size_t i = subj.size(); i > 1; --i)
      std::swap(subj[i - 1], subj[split_rng.next_below(i)]);
    const int n_val_subj = std::max(1, cfg.subjects / 3);
    std::vector<std::string> val_subjects;
    for (int i = 0; i < n_val_subj; ++i) val_subjects.push_back("s" + std::to_string(subj[i]));
    for (auto& row : m.rows)
      if (std::find(val_subjects.begin(), val_subjects.end(), row.subject) !=
          val_subjects.end())
        row.split = "val";
  } else {  // scanner_holdout: last scanner is the unseen domain
    const std::string holdout = scanners.back().name;
    for (auto& row : m.rows)
      if (row.scanner == holdout) row.split = "val";
  }

  write_manifest((fs::path(cfg.out_dir) / "manifest.csv").string(), m);
  return m;
}

std::vector<ImageSample> load_samples(const Manifest& m, const std::string& base_dir,
                                      const std::string& split_filter) {
  std::vector<ImageSample> out;
  for (const auto& r : m.rows) {
    if (!split_filter.empty() && r.split != split_filter) continue;
    ImageSample s;
    s.pixels = read_pgm((fs::path(base_dir) / r.path).string());
    s.set_hard_label(label_from_name(r.label));
    s.material = r.material;
    s.scanner = r.scanner;
    s.subject = r.subject;
    s.finger = r.finger;
    s.split = r.split;
    s.path = r.path;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fpl::synth
