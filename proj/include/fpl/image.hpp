#pragma once

#include <array>
#include <string>

#include "fpl/tensor.hpp"

namespace fpl {

// Class index 0 = bona fide (live), index 1 = attack (spoof).
enum class Label { live, spoof };

inline const char* label_name(Label l) { return l == Label::live ? "live" : "spoof"; }
Label label_from_name(const std::string& s);

struct ImageSample {
  Tensor pixels;  // [C,H,W] grayscale (C=1), values in [0,1]
  Label label = Label::live;
  std::array<float, 2> target{1.0f, 0.0f};  // soft 2-class target, sums to 1
  std::string subject;
  std::string finger;
  std::string scanner;
  std::string material;
  std::string split;
  std::string path;

  void set_hard_label(Label l) {
    label = l;
    target = l == Label::live ? std::array<float, 2>{1.0f, 0.0f}
                              : std::array<float, 2>{0.0f, 1.0f};
  }
};

// P5 binary PGM, maxval 255. Pixels clamped to [0,1] on write.
void write_pgm(const std::string& path, const Tensor& image);
Tensor read_pgm(const std::string& path);  // returns [1,H,W] in [0,1]

// Bilinear sample with border clamp; (x, y) in pixel coordinates.
float sample_bilinear(const Tensor& image, int channel, float x, float y);

}  // namespace fpl
