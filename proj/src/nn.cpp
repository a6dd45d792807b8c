#include "fpl/nn.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>

namespace fpl::nn {

using ad::NodePtr;

ad::NodePtr BatchNorm2d::forward(const ad::NodePtr& x, bool train) {
  const Tensor& xv = x->value;
  if (xv.rank() != 4) throw std::invalid_argument("batchnorm2d: expected NCHW");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (C != gamma->value.dim(0)) throw std::invalid_argument("batchnorm2d: channel mismatch");
  if (train && N < 2) throw std::invalid_argument("batchnorm2d: train mode needs batch >= 2");
  const int HW = H * W;
  const std::size_t m = static_cast<std::size_t>(N) * HW;

  auto mean_c = std::make_shared<std::vector<float>>(C);
  auto inv_std = std::make_shared<std::vector<float>>(C);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < HW; ++i) s += xv.data[(static_cast<std::size_t>(n) * C + c) * HW + i];
      const float mu = static_cast<float>(s / m);
      double v = 0.0;
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < HW; ++i) {
          float d = xv.data[(static_cast<std::size_t>(n) * C + c) * HW + i] - mu;
          v += static_cast<double>(d) * d;
        }
      const float var = static_cast<float>(v / m);
      (*mean_c)[c] = mu;
      (*inv_std)[c] = 1.0f / std::sqrt(var + eps);
      running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * mu;
      running_var[c] = (1.0f - momentum) * running_var[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean_c)[c] = running_mean[c];
      (*inv_std)[c] = 1.0f / std::sqrt(running_var[c] + eps);
    }
  }

  Tensor out(xv.shape);
  auto xhat = std::make_shared<Tensor>(xv.shape);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
      const float mu = (*mean_c)[c], is = (*inv_std)[c];
      const float g = gamma->value[c], b = beta->value[c];
      for (int i = 0; i < HW; ++i) {
        float xh = (xv[base + i] - mu) * is;
        (*xhat)[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }

  return ad::custom(
      std::move(out), {x, gamma, beta},
      [xhat, inv_std, train, N, C, HW, m](ad::Node& self) {
        auto& x = *self.parents[0];
        auto& gamma = *self.parents[1];
        auto& beta = *self.parents[2];
        for (int c = 0; c < C; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
              const float dy = self.grad[base + i];
              sum_dy += dy;
              sum_dy_xh += static_cast<double>(dy) * (*xhat)[base + i];
            }
          }
          if (gamma.requires_grad) {
            gamma.ensure_grad();
            gamma.grad[c] += static_cast<float>(sum_dy_xh);
          }
          if (beta.requires_grad) {
            beta.ensure_grad();
            beta.grad[c] += static_cast<float>(sum_dy);
          }
          if (x.requires_grad) {
            x.ensure_grad();
            const float g_is = gamma.value[c] * (*inv_std)[c];
            const float mdy = static_cast<float>(sum_dy / static_cast<double>(m));
            const float mdyxh = static_cast<float>(sum_dy_xh / static_cast<double>(m));
            for (int n = 0; n < N; ++n) {
              const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
              for (int i = 0; i < HW; ++i) {
                float dy = self.grad[base + i];
                if (train)
                  x.grad[base + i] += g_is * (dy - mdy - (*xhat)[base + i] * mdyxh);
                else
                  x.grad[base + i] += g_is * dy;
              }
            }
          }
        }
      },
      "batchnorm2d");
}

ad::NodePtr SEBlock::forward(const ad::NodePtr& x) const {
  if (x->value.dim(1) != channels)
    throw std::invalid_argument("se_block: channel mismatch");
  if (channels % reduction != 0)
    throw std::invalid_argument("se_block: channels not divisible by reduction");
  auto squeezed = ad::global_avg_pool(x);          // [N, C]
  auto hidden = ad::relu(fc1.forward(squeezed));   // [N, C/r]
  auto gate = ad::sigmoid(fc2.forward(hidden));    // [N, C] in (0,1)
  return ad::channel_scale(x, gate);
}

Preset preset_from_name(const std::string& name) {
  if (name == "tiny") return Preset::tiny;
  if (name == "small") return Preset::small;
  if (name == "base") return Preset::base;
  throw std::invalid_argument("unknown preset: " + name);
}

const char* preset_name(Preset p) {
  switch (p) {
    case Preset::tiny: return "tiny";
    case Preset::small: return "small";
    case Preset::base: return "base";
  }
  return "?";
}

std::vector<int> preset_widths(Preset p) {
  switch (p) {
    case Preset::tiny: return {14, 28, 56};
    case Preset::small: return {32, 64, 128};
    case Preset::base: return {64, 128, 256};
  }
  throw std::invalid_argument("unknown preset");
}

static Tensor kaiming_uniform(std::vector<int> shape, int fan_in, RngStream& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

static Linear make_linear(int in, int out, RngStream& rng) {
  Linear l;
  l.w = ad::param(kaiming_uniform({in, out}, in, rng));
  l.b = ad::param(Tensor::zeros({out}));
  return l;
}

LivenessModel build_model(Preset preset, int embedding_dim, std::uint64_t seed) {
  if (embedding_dim <= 0) throw std::invalid_argument("embedding dim must be positive");
  RngStream rng(seed, 0x6d6f64656cULL);  // init stream fixed per model
  LivenessModel m;
  m.preset = preset;
  m.embedding_dim = embedding_dim;
  auto widths = preset_widths(preset);
  int in_ch = 1;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    ConvBlock blk;
    const int out_ch = widths[i];
    blk.conv.w = ad::param(kaiming_uniform({out_ch, in_ch, 3, 3}, in_ch * 9, rng));
    blk.conv.b = ad::param(Tensor::zeros({out_ch}));
    blk.conv.stride = 1;
    blk.conv.padding = 1;
    blk.bn.gamma = ad::param(Tensor::full({out_ch}, 1.0f));
    blk.bn.beta = ad::param(Tensor::zeros({out_ch}));
    blk.bn.running_mean = Tensor::zeros({out_ch});
    blk.bn.running_var = Tensor::full({out_ch}, 1.0f);
    blk.has_se = i > 0;
    if (blk.has_se) {
      blk.se.channels = out_ch;
      blk.se.reduction = 4;
      blk.se.fc1 = make_linear(out_ch, out_ch / 4, rng);
      blk.se.fc2 = make_linear(out_ch / 4, out_ch, rng);
    }
    m.blocks.push_back(std::move(blk));
    in_ch = out_ch;
  }
  m.embed = make_linear(in_ch, embedding_dim, rng);
  m.head = make_linear(embedding_dim, 2, rng);
  return m;
}

ForwardResult LivenessModel::forward(const Tensor& images, bool train, RngStream* rng) {
  if (images.rank() != 4 || images.dim(1) != 1)
    throw std::invalid_argument("forward: expected [N,1,H,W] input");
  auto h = ad::constant(images);
  for (auto& blk : blocks) {
    h = blk.conv.forward(h);
    h = blk.bn.forward(h, train);
    h = ad::relu(h);
    if (blk.has_se) h = blk.se.forward(h);
    h = ad::maxpool2d(h, 2, 2);
  }
  h = ad::global_avg_pool(h);
  h = ad::reshape(h, {h->value.dim(0), h->value.dim(1)});
  ForwardResult r;
  r.embedding = embed.forward(h);
  auto pre_head = r.embedding;
  if (train && dropout_p > 0.0f && rng) pre_head = ad::dropout(pre_head, dropout_p, *rng);
  r.logits = head.forward(pre_head);
  r.probs = ad::softmax_rows(r.logits->value);
  return r;
}

std::vector<NodePtr> LivenessModel::parameters() const {
  std::vector<NodePtr> ps;
  for (const auto& blk : blocks) {
    ps.push_back(blk.conv.w);
    ps.push_back(blk.conv.b);
    ps.push_back(blk.bn.gamma);
    ps.push_back(blk.bn.beta);
    if (blk.has_se) {
      ps.push_back(blk.se.fc1.w);
      ps.push_back(blk.se.fc1.b);
      ps.push_back(blk.se.fc2.w);
      ps.push_back(blk.se.fc2.b);
    }
  }
  ps.push_back(embed.w);
  ps.push_back(embed.b);
  ps.push_back(head.w);
  ps.push_back(head.b);
  return ps;
}

std::size_t LivenessModel::param_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p->value.numel();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> LivenessModel::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& blk = blocks[i];
    std::string p = "block" + std::to_string(i + 1) + ".";
    out.emplace_back(p + "conv.w", &blk.conv.w->value);
    out.emplace_back(p + "conv.b", &blk.conv.b->value);
    out.emplace_back(p + "bn.gamma", &blk.bn.gamma->value);
    out.emplace_back(p + "bn.beta", &blk.bn.beta->value);
    out.emplace_back(p + "bn.running_mean", &blk.bn.running_mean);
    out.emplace_back(p + "bn.running_var", &blk.bn.running_var);
    if (blk.has_se) {
      out.emplace_back(p + "se.fc1.w", &blk.se.fc1.w->value);
      out.emplace_back(p + "se.fc1.b", &blk.se.fc1.b->value);
      out.emplace_back(p + "se.fc2.w", &blk.se.fc2.w->value);
      out.emplace_back(p + "se.fc2.b", &blk.se.fc2.b->value);
    }
  }
  out.emplace_back("embed.w", &embed.w->value);
  out.emplace_back("embed.b", &embed.b->value);
  out.emplace_back("head.w", &head.w->value);
  out.emplace_back("head.b", &head.b->value);
  return out;
}

FeatureResult extract_feature(LivenessModel& model, const Tensor& image) {
  Tensor batch = image;
  if (batch.rank() == 3) batch.shape = {1, batch.dim(0), batch.dim(1), batch.dim(2)};
  if (batch.rank() != 4 || batch.dim(0) != 1)
    throw std::invalid_argument("extract_feature: expected a single image");
  auto t0 = std::chrono::steady_clock::now();
  auto r = model.forward(batch, /*train=*/false);
  auto t1 = std::chrono::steady_clock::now();
  FeatureResult fr;
  fr.feature = r.embedding->value.data;
  fr.elapsed_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return fr;
}

static void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
static std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4))
    throw std::runtime_error("checkpoint: truncated file");
  return v;
}

void save_checkpoint(const std::string& path, LivenessModel& model) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp);
    os.write("FPLM", 4);
    write_u32(os, 1);
    write_u32(os, static_cast<std::uint32_t>(model.preset));
    write_u32(os, static_cast<std::uint32_t>(model.embedding_dim));
    for (auto& [name, t] : model.named_tensors()) {
      write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_u32(os, static_cast<std::uint32_t>(t->rank()));
      for (int d : t->shape) write_u32(os, static_cast<std::uint32_t>(d));
      os.write(reinterpret_cast<const char*>(t->data.data()),
               static_cast<std::streamsize>(t->data.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("checkpoint: rename failed for " + path);
}

LivenessModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FPLM", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t version = read_u32(is);
  if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
  auto preset = static_cast<Preset>(read_u32(is));
  int dim = static_cast<int>(read_u32(is));
  LivenessModel model = build_model(preset, dim, 0);
  auto named = model.named_tensors();
  std::size_t loaded = 0;
  while (true) {
    std::uint32_t nlen = 0;
    if (!is.read(reinterpret_cast<char*>(&nlen), 4)) break;  // clean EOF
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw std::runtime_error("checkpoint: truncated name");
    std::uint32_t rank = read_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_u32(is));
    Tensor* dst = nullptr;
    for (auto& [n, t] : named)
      if (n == name) dst = t;
    if (!dst) throw std::runtime_error("checkpoint: unknown tensor " + name);
    if (dst->shape != shape) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    if (!is.read(reinterpret_cast<char*>(dst->data.data()),
                 static_cast<std::streamsize>(dst->data.size() * sizeof(float))))
      throw std::runtime_error("checkpoint: truncated data for " + name);
    ++loaded;
  }
  if (loaded != named.size())
    throw std::runtime_error("checkpoint: missing tensors in " + path);
  return model;
}

}  // namespace fpl::nn
