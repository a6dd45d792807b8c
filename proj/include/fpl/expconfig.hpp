#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fpl::cfg {

// Exit-code taxonomy for the command-line tool.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat dotted-key configuration. Every key has a documented default;
// unknown keys are rejected at parse time.
class ExperimentConfig {
 public:
  ExperimentConfig();  // all defaults

  // `key = value` lines, '#' comments; throws ConfigError on unknown keys.
  void load_file(const std::string& path);
  void apply_override(const std::string& key_equals_value);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;  // comma-split

  // Fully resolved key=value echo, sorted; sufficient to reproduce the run.
  void write_resolved(const std::string& path) const;
  // All keys with their defaults and one-line descriptions.
  static void write_reference(const std::string& path);

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// "FPLV" feature file: magic, version u32, count u32, dim u32, then
// count*dim f32 little-endian. Bit-exact round trip.
void write_features(const std::string& path, const std::vector<std::vector<float>>& vecs);
std::vector<std::vector<float>> read_features(const std::string& path);

}  // namespace fpl::cfg
