#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fpl/image.hpp"
#include "fpl/rng.hpp"

namespace fpl::synth {

// Identity-consistent ridge geometry: a dominant ridge direction plus a
// low-frequency phase perturbation, and a fixed pore layout. Everything is
// a pure function of the identity seed.
struct FingerIdentity {
  std::uint64_t identity_seed = 0;
  float ridge_freq = 0.11f;  // cycles per pixel
  float theta0 = 0.0f;       // dominant ridge direction

  struct Wave {
    float ux, uy;  // cycles per image side
    float amp, phase;
  };
  std::vector<Wave> waves;

  struct Pore {
    float x, y;  // normalized [0,1] coords
    float radius;
  };
  std::vector<Pore> pores;

  // Ridge phase and its gradient direction at normalized coords (nx, ny),
  // for an image of side `size` pixels.
  float phase(float nx, float ny, int size) const;
  float orientation(float nx, float ny, int size) const;  // in [0, pi)
};

FingerIdentity synth_finger(std::uint64_t identity_seed);

struct ScannerProfile {
  std::string name;
  float gain = 1.0f;
  float offset = 0.0f;
  float blur_sigma = 0.6f;
  float noise_sigma = 0.02f;
  float vignette = 0.1f;
};

struct MaterialProfile {
  std::string name;
  bool live = true;
  float artifact_amp = 0.0f;       // high-frequency banding amplitude (0 for live)
  float artifact_freq = 0.25f;     // cycles per pixel
  float contrast_compress = 1.0f;  // <1 flattens contrast
  float pore_dropout = 0.0f;       // fraction of pores removed
};

// First two scanners are fixed references; extras are drawn from documented
// parameter ranges using the seed.
std::vector<ScannerProfile> make_scanners(int count, std::uint64_t seed);
std::vector<MaterialProfile> default_materials();  // live, silica, gelatin, latex
MaterialProfile material_by_name(const std::string& name);

ImageSample render_impression(const FingerIdentity& finger, const ScannerProfile& scanner,
                              const MaterialProfile& material, RngStream& rng,
                              int size = 64);

enum class SplitMode { random_image, subject_disjoint, scanner_holdout };
SplitMode split_mode_from_name(const std::string& s);

struct DatasetConfig {
  int subjects = 10;
  int fingers_per_subject = 2;
  int impressions = 2;  // per (finger, scanner, material)
  int scanners = 2;
  std::vector<std::string> materials = {"live", "silica", "gelatin", "latex"};
  SplitMode split = SplitMode::random_image;
  int image_size = 64;
  std::uint64_t seed = 1;
  std::string out_dir;
};

struct ManifestRow {
  std::string path;  // relative to the manifest directory
  std::string label;
  std::string material;
  std::string scanner;
  std::string subject;
  std::string finger;
  std::string split;
};

struct Manifest {
  std::vector<ManifestRow> rows;
};

// Renders every impression to PGM under out_dir/images/, assigns the
// 2/3-1/3 split (floor for val) and writes out_dir/manifest.csv.
Manifest build_dataset(const DatasetConfig& cfg);

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

// Loads pixel data for manifest rows; paths resolve against base_dir.
std::vector<ImageSample> load_samples(const Manifest& m, const std::string& base_dir,
                                      const std::string& split_filter = "");

}  // namespace fpl::synth
