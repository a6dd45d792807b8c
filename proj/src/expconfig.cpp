#include "fpl/expconfig.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fpl::cfg {

namespace {

struct KeySpec {
  const char* key;
  const char* def;
  const char* doc;
};

// The complete key registry; defaults here are the single source of truth.
const std::vector<KeySpec>& registry() {
  static const std::vector<KeySpec> keys = {
      {"seed", "1", "master seed for generation and training"},
      {"out.dir", "out", "output directory for run artifacts"},
      {"dataset.dir", "data", "dataset root (manifest.csv + images/)"},
      {"gen.subjects", "25", "subjects to synthesize"},
      {"gen.fingers", "2", "fingers per subject"},
      {"gen.impressions", "2", "impressions per finger/scanner/material"},
      {"gen.scanners", "2", "scanner profiles"},
      {"gen.materials", "live,silica,gelatin,latex", "material list"},
      {"gen.split", "random", "random | subject_disjoint | scanner_holdout"},
      {"gen.image_size", "64", "square image side in pixels"},
      {"recipe.name", "baseline", "baseline | strong-aug | mutual | style | distill | ensemble"},
      {"model.preset", "small", "tiny | small | base"},
      {"model.embedding_dim", "192", "liveness feature dimension"},
      {"model.checkpoint", "", "checkpoint path for eval/extract/match"},
      {"train.epochs", "20", "training epochs"},
      {"train.batch_size", "32", "minibatch size"},
      {"train.lr", "0.05", "initial learning rate (cosine decay)"},
      {"train.momentum", "0.9", "SGD momentum"},
      {"train.weight_decay", "0", "L2 weight decay"},
      {"train.stop_at_val_auc", "-1", "early stop once val AUC reached; <0 disables"},
      {"aug.fmix_prob", "-1", "FMix pair probability; <0 keeps the recipe default"},
      {"aug.style_prob", "-1", "style-swap pair probability; <0 keeps the recipe default"},
      {"distill.temperature", "5", "distillation softmax temperature"},
      {"distill.alpha", "0.5", "distillation KL weight"},
      {"metrics.threshold_policy", "max_accuracy", "max_accuracy | bpcer_at_apcer"},
      {"metrics.apcer_target", "0.05", "APCER target for the bpcer_at_apcer policy"},
      {"fuse.w_match", "0.4", "IM fusion weight: match"},
      {"fuse.w_compare", "0.3", "IM fusion weight: compare-liveness"},
      {"fuse.w_normal", "0.3", "IM fusion weight: normal-liveness"},
      {"match.tau_match", "0.2", "match-score gate threshold"},
      {"match.tau_im", "0.5", "fused IM-score threshold"},
      {"extract.count", "100", "images to time in the extract command"},
  };
  return keys;
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
  for (const auto& k : registry()) values_[k.key] = k.def;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  it->second = value;
}

static std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void ExperimentConfig::apply_override(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
  set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

int ExperimentConfig::get_int(const std::string& key) const {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " must be an integer, got '" + get(key) + "'");
  }
}

double ExperimentConfig::get_double(const std::string& key) const {
  try {
    std::size_t pos = 0;
    const double v = std::stod(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " must be a number, got '" + get(key) + "'");
  }
}

std::uint64_t ExperimentConfig::get_u64(const std::string& key) const {
  try {
    std::size_t pos = 0;
    const std::uint64_t v = std::stoull(get(key), &pos);
    if (pos != get(key).size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " must be an unsigned integer, got '" +
                      get(key) + "'");
  }
}

std::vector<std::string> ExperimentConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void ExperimentConfig::write_resolved(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write resolved config: " + path);
  for (const auto& [k, v] : values_) os << k << " = " << v << "\n";
  if (!os) throw DataError("write failed for " + path);
}

void ExperimentConfig::write_reference(const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write config reference: " + path);
  for (const auto& k : registry())
    os << k.key << " = " << k.def << "  # " << k.doc << "\n";
  if (!os) throw DataError("write failed for " + path);
}

// ---- FPLV feature files ----

void write_features(const std::string& path, const std::vector<std::vector<float>>& vecs) {
  const std::uint32_t count = static_cast<std::uint32_t>(vecs.size());
  const std::uint32_t dim = count ? static_cast<std::uint32_t>(vecs[0].size()) : 0;
  for (const auto& v : vecs)
    if (v.size() != dim) throw DataError("write_features: inconsistent dimensions");
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("write_features: cannot open " + tmp);
    os.write("FPLV", 4);
    const std::uint32_t version = 1;
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&count), 4);
    os.write(reinterpret_cast<const char*>(&dim), 4);
    for (const auto& v : vecs)
      os.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(float)));
    if (!os) throw DataError("write_features: write failed for " + tmp);
  }
  std::remove(path.c_str());
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("write_features: rename failed for " + path);
}

std::vector<std::vector<float>> read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("read_features: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FPLV", 4) != 0)
    throw DataError("read_features: bad magic in " + path);
  std::uint32_t version = 0, count = 0, dim = 0;
  if (!is.read(reinterpret_cast<char*>(&version), 4) || version != 1)
    throw DataError("read_features: unsupported version in " + path);
  if (!is.read(reinterpret_cast<char*>(&count), 4) ||
      !is.read(reinterpret_cast<char*>(&dim), 4))
    throw DataError("read_features: truncated header in " + path);
  std::vector<std::vector<float>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<float> v(dim);
    if (!is.read(reinterpret_cast<char*>(v.data()),
                 static_cast<std::streamsize>(dim * sizeof(float))))
      throw DataError("read_features: truncated data in " + path);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace fpl::cfg
