#include "fpl/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fpl {

Label label_from_name(const std::string& s) {
  if (s == "live") return Label::live;
  if (s == "spoof") return Label::spoof;
  throw std::invalid_argument("unknown label: " + s);
}

void write_pgm(const std::string& path, const Tensor& image) {
  if (image.rank() == 3) {
    if (image.dim(0) != 1) throw std::invalid_argument("write_pgm: expected 1 channel");
  } else if (image.rank() != 2) {
    throw std::invalid_argument("write_pgm: expected [H,W] or [1,H,W]");
  }
  const int H = image.rank() == 3 ? image.dim(1) : image.dim(0);
  const int W = image.rank() == 3 ? image.dim(2) : image.dim(1);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("write_pgm: cannot open " + path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      float v = image.data[static_cast<std::size_t>(y) * W + x];
      v = std::clamp(v, 0.0f, 1.0f);
      row[static_cast<std::size_t>(x)] =
          static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(row.data()), W);
  }
  if (!os) throw std::runtime_error("write_pgm: write failed for " + path);
}

static int read_pgm_int(std::istream& is) {
  // skips whitespace and '#' comments
  int c = is.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = is.get();
    c = is.get();
  }
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error("read_pgm: malformed header");
  return v;
}

Tensor read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_pgm: cannot open " + path);
  char p, five;
  is.get(p);
  is.get(five);
  if (p != 'P' || five != '5') throw std::runtime_error("read_pgm: not a P5 file: " + path);
  int W = read_pgm_int(is);
  int H = read_pgm_int(is);
  int maxval = read_pgm_int(is);
  if (maxval != 255) throw std::runtime_error("read_pgm: expected maxval 255");
  std::vector<unsigned char> raw(static_cast<std::size_t>(W) * H);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  Tensor t({1, H, W});
  for (std::size_t i = 0; i < raw.size(); ++i)
    t[i] = static_cast<float>(raw[i]) / 255.0f;
  return t;
}

float sample_bilinear(const Tensor& image, int channel, float x, float y) {
  const int H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  x = std::clamp(x, 0.0f, static_cast<float>(W - 1));
  y = std::clamp(y, 0.0f, static_cast<float>(H - 1));
  const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
  const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  const float fx = x - x0, fy = y - y0;
  const std::size_t base = static_cast<std::size_t>(channel) * H * W;
  auto px = [&](int yy, int xx) {
    return image.data[base + static_cast<std::size_t>(yy) * W + xx];
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
         fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
}

}  // namespace fpl
