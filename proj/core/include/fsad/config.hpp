#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fsad/attacks.hpp"
#include "fsad/data.hpp"
#include "fsad/detection.hpp"
#include "fsad/filters.hpp"
#include "fsad/models.hpp"

namespace fsad::config {

enum class Command { gen_data, train_model, train_ae, attack, detect, evaluate, report };

std::string to_string(Command c);
Command command_from_string(const std::string& name);
const std::vector<Command>& all_commands();

/// Where a configuration value came from.
enum class Source { default_value, file, env, flag };
std::string to_string(Source s);

/// Carries the dotted key path of the offending value.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message);
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Environment variable that replaces the configured output root.
inline constexpr const char* kOutputRootEnv = "FSAD_OUTPUT_ROOT";

/// Default value of every recognised key. The tree doubles as the schema:
/// keys absent here are rejected and user values must match the types here.
const nlohmann::json& default_values();

/// Parses a decimal number or a fraction such as "12/255".
double parse_number(const std::string& text);

/// Reads a JSON or YAML file into a JSON tree. YAML scalars are typed as
/// integers, floats or booleans when they parse as such.
nlohmann::json load_config_file(const std::filesystem::path& path);
nlohmann::json yaml_to_json(const std::string& text);

struct Override {
  std::string key;    // dotted path, e.g. "attack.epsilon"
  std::string value;  // raw text; lists are comma separated
};

struct ParseInput {
  Command command = Command::gen_data;
  std::optional<std::filesystem::path> config_file;
  std::vector<Override> overrides;
  /// Value of the output-root environment variable, if set.
  std::optional<std::string> env_output_root;
};

/// Validated settings for one command. Every leaf of `values` has an entry
/// in `provenance`.
struct RunConfig {
  Command command = Command::gen_data;
  nlohmann::json values;
  std::map<std::string, Source> provenance;

  std::uint64_t seed() const;
  std::filesystem::path output_root() const;
  /// Explicit `run_dir` when set, otherwise <output_root>/<hash>.
  std::filesystem::path run_dir() const;
  /// Hash of every value except the output location.
  std::string hash() const;

  data::SyntheticSpec synthetic() const;
  std::vector<models::HeadKind> heads() const;
  models::ModelConfig model_config(models::HeadKind head, const Shape& input_shape) const;
  models::TrainConfig train_config(models::HeadKind head) const;
  std::vector<filters::LossVariant> ae_variants() const;
  filters::AutoencoderConfig ae_config(models::HeadKind head, const Shape& input_shape) const;
  filters::AutoencoderTrainConfig ae_train_config(models::HeadKind head, filters::LossVariant variant) const;
  std::vector<attacks::AttackConfig> attacks() const;
  std::vector<filters::FilterKind> detect_filters() const;
  std::vector<detection::Statistic> statistics() const;

  /// Values with their provenance, for manifests.
  nlohmann::json snapshot() const;
};

/// Layers defaults < file < environment < flags, then validates types,
/// ranges and cross-key requirements.
RunConfig parse_config(const ParseInput& input);

}  // namespace fsad::config
