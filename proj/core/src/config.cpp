#include "fsad/config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "fsad/archive.hpp"
#include "fsad/random.hpp"

namespace fsad::config {
namespace {

using nlohmann::json;

const std::vector<std::pair<Command, const char*>> kCommandNames{
    {Command::gen_data, "gen-data"}, {Command::train_model, "train-model"}, {Command::train_ae, "train-ae"},
    {Command::attack, "attack"},     {Command::detect, "detect"},           {Command::evaluate, "evaluate"},
    {Command::report, "report"}};

// Keys holding filesystem paths; relative values in a file resolve against
// the file's directory.
const std::set<std::string> kPathKeys{"output_root", "run_dir", "data.path", "data.splits"};

std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

std::string describe(const json& v) {
  if (v.is_string()) return "'" + v.get<std::string>() + "'";
  return v.dump();
}

const char* type_name(const json& schema) {
  if (schema.is_boolean()) return "a boolean";
  if (schema.is_number_integer()) return "an integer";
  if (schema.is_number()) return "a number";
  if (schema.is_string()) return "a string";
  if (schema.is_array()) return "a list";
  return "a mapping";
}

std::optional<long long> parse_integer(const std::string& s) {
  long long v = 0;
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) return std::nullopt;
  return v;
}

json element_schema(const std::string& path, const json& schema) {
  if (!schema.empty()) return schema.front();
  if (path == "attack.target_classes") return 0;
  return "";
}

json coerce(const json& v, const json& schema, const std::string& path);

json coerce_scalar(const json& v, const json& schema, const std::string& path) {
  const auto mismatch = [&] {
    return ConfigError(path, std::string("expected ") + type_name(schema) + ", got " + describe(v));
  };
  if (schema.is_boolean()) {
    if (v.is_boolean()) return v;
    if (v.is_string() && (v == "true" || v == "false")) return v == "true";
    throw mismatch();
  }
  if (schema.is_number_integer()) {
    if (v.is_number_integer()) return v;
    if (v.is_number_float()) {
      const double d = v.get<double>();
      if (std::floor(d) == d && std::abs(d) < 9e15) return static_cast<long long>(d);
      throw mismatch();
    }
    if (v.is_string()) {
      if (auto i = parse_integer(v.get<std::string>())) return *i;
    }
    throw mismatch();
  }
  if (schema.is_number()) {
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) {
      try {
        return parse_number(v.get<std::string>());
      } catch (const std::invalid_argument&) {
      }
    }
    throw mismatch();
  }
  if (schema.is_string()) {
    if (v.is_string()) return v;
    throw mismatch();
  }
  throw mismatch();
}

json coerce(const json& v, const json& schema, const std::string& path) {
  if (!schema.is_array()) return coerce_scalar(v, schema, path);
  const json elem = element_schema(path, schema);
  json out = json::array();
  if (v.is_string()) {
    std::stringstream ss(v.get<std::string>());
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) out.push_back(coerce_scalar(item, elem, path));
    }
    return out;
  }
  if (!v.is_array()) throw ConfigError(path, "expected a list, got " + describe(v));
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(coerce_scalar(v[i], elem, path + "[" + std::to_string(i) + "]"));
  return out;
}

void merge(json& target, const json& user, const json& schema, const std::string& base, Source src,
           std::map<std::string, Source>& provenance, const std::filesystem::path& rel_dir) {
  if (!user.is_object()) throw ConfigError(base.empty() ? "<root>" : base, "expected a mapping, got " + describe(user));
  for (const auto& [key, value] : user.items()) {
    const std::string path = join(base, key);
    if (!schema.contains(key)) throw ConfigError(path, "unknown key");
    if (schema[key].is_object()) {
      merge(target[key], value, schema[key], path, src, provenance, rel_dir);
      continue;
    }
    json v = coerce(value, schema[key], path);
    if (kPathKeys.count(path) && !v.get<std::string>().empty()) {
      std::filesystem::path p = v.get<std::string>();
      if (p.is_relative()) p = rel_dir / p;
      v = std::filesystem::weakly_canonical(p).string();
    }
    target[key] = std::move(v);
    provenance[path] = src;
  }
}

void set_override(json& values, const Override& o, Source src, std::map<std::string, Source>& provenance) {
  const json& schema = default_values();
  json user = json::object();
  json* cursor = &user;
  const json* sc = &schema;
  std::stringstream ss(o.key);
  std::vector<std::string> parts;
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty()) throw ConfigError(o.key, "empty key");
  std::string path;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    path = join(path, parts[i]);
    if (!sc->is_object() || !sc->contains(parts[i])) throw ConfigError(path, "unknown key");
    sc = &(*sc)[parts[i]];
    if (i + 1 < parts.size()) {
      cursor = &(*cursor)[parts[i]];
    } else {
      if (sc->is_object()) throw ConfigError(path, "names a section, not a value");
      (*cursor)[parts[i]] = o.value;
    }
  }
  merge(values, user, schema, "", src, provenance, std::filesystem::current_path());
}

void record_defaults(const json& node, const std::string& base, std::map<std::string, Source>& provenance) {
  for (const auto& [key, value] : node.items()) {
    const std::string path = join(base, key);
    if (value.is_object()) {
      record_defaults(value, path, provenance);
    } else {
      provenance[path] = Source::default_value;
    }
  }
}

const json& at_path(const json& values, const std::string& path) {
  const json* cur = &values;
  std::stringstream ss(path);
  for (std::string p; std::getline(ss, p, '.');) cur = &cur->at(p);
  return *cur;
}

long long geti(const json& v, const std::string& path) { return at_path(v, path).get<long long>(); }
double getd(const json& v, const std::string& path) { return at_path(v, path).get<double>(); }
std::string gets(const json& v, const std::string& path) { return at_path(v, path).get<std::string>(); }

void require_int(const json& v, const std::string& path, long long lo, long long hi = (1LL << 40)) {
  const long long x = geti(v, path);
  if (x < lo || x > hi) {
    throw ConfigError(path, "value " + std::to_string(x) + " out of range [" + std::to_string(lo) + ", " +
                                (hi == (1LL << 40) ? std::string("inf") : std::to_string(hi)) + "]");
  }
}

void require_real(const json& v, const std::string& path, double lo, double hi, bool lo_open = false) {
  const double x = getd(v, path);
  if (!std::isfinite(x) || x < lo || x > hi || (lo_open && x == lo)) {
    std::ostringstream m;
    m << "value " << x << " out of range " << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
    throw ConfigError(path, m.str());
  }
}

template <typename Fn>
void require_names(const json& v, const std::string& path, Fn parse, bool non_empty) {
  const json& list = at_path(v, path);
  if (non_empty && list.empty()) throw ConfigError(path, "must not be empty");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < list.size(); ++i) {
    const auto name = list[i].get<std::string>();
    try {
      parse(name);
    } catch (const std::exception& e) {
      throw ConfigError(path + "[" + std::to_string(i) + "]", e.what());
    }
    if (!seen.insert(name).second) throw ConfigError(path, "duplicate entry '" + name + "'");
  }
}

void validate(const RunConfig& cfg) {
  const json& v = cfg.values;
  const std::string source = gets(v, "data.source");
  if (source != "synthetic" && source != "folder") {
    throw ConfigError("data.source", "expected 'synthetic' or 'folder', got '" + source + "'");
  }
  if (source == "folder") {
    for (const char* key : {"data.path", "data.splits"}) {
      if (gets(v, key).empty()) throw ConfigError(key, "is required when data.source is 'folder'");
    }
    if (cfg.command == Command::gen_data) {
      if (!std::filesystem::is_directory(gets(v, "data.path"))) {
        throw ConfigError("data.path", "directory does not exist: " + gets(v, "data.path"));
      }
      if (!std::filesystem::is_regular_file(gets(v, "data.splits"))) {
        throw ConfigError("data.splits", "file does not exist: " + gets(v, "data.splits"));
      }
    }
  }
  if (gets(v, "output_root").empty() && gets(v, "run_dir").empty()) throw ConfigError("output_root", "must not be empty");

  require_int(v, "episode.ways", 2);
  require_int(v, "episode.shots", 2);
  require_int(v, "episode.queries_per_class", 1);
  const long long ways = geti(v, "episode.ways");
  const long long per_class = geti(v, "episode.shots") + geti(v, "episode.queries_per_class");

  require_int(v, "data.image_size", 4);
  require_int(v, "data.channels", 1, 3);
  if (geti(v, "data.channels") == 2) throw ConfigError("data.channels", "must be 1 or 3");
  for (const char* key : {"data.train_classes", "data.val_classes", "data.test_classes"}) require_int(v, key, ways);
  require_int(v, "data.synthetic.samples_per_class", per_class);
  require_real(v, "data.synthetic.signal", 0.0, 1e6);
  require_real(v, "data.synthetic.noise_std", 0.0, 1e6);

  require_names(v, "model.heads", models::head_from_string, true);
  for (const char* key : {"model.channels", "model.relation_channels", "model.relation_hidden", "model.epochs",
                          "model.episodes_per_epoch", "model.val_episodes"}) {
    require_int(v, key, 1);
  }
  require_real(v, "model.lr", 0.0, 10.0, true);

  require_names(v, "ae.variants", filters::variant_from_string, false);
  for (const char* key : {"ae.hidden", "ae.bottleneck", "ae.batch_size", "ae.lr_step"}) require_int(v, key, 1);
  require_int(v, "ae.levels", 1, 2);
  require_int(v, "ae.pretrain_epochs", 0);
  require_int(v, "ae.finetune_epochs", 0);
  require_real(v, "ae.pretrain_lr", 0.0, 10.0, true);
  require_real(v, "ae.finetune_lr", 0.0, 10.0, true);
  require_real(v, "ae.weight_decay", 0.0, 1.0);
  require_real(v, "ae.lr_gamma", 0.0, 1.0, true);
  const long long divisor = 1LL << geti(v, "ae.levels");
  if (geti(v, "data.image_size") % divisor != 0) {
    throw ConfigError("ae.levels", "image size " + std::to_string(geti(v, "data.image_size")) +
                                       " is not divisible by 2^levels");
  }

  require_names(v, "attack.kinds", attacks::attack_from_string, true);
  require_real(v, "attack.epsilon", 0.0, 1.0);
  require_real(v, "attack.eta", 0.0, 1e6, true);
  require_int(v, "attack.iterations", 1);
  require_real(v, "attack.kappa", 0.0, 1e6);
  require_real(v, "attack.const", 0.0, 1e6);
  require_int(v, "attack.perturbation_sets", 1);
  const json& targets = at_path(v, "attack.target_classes");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const long long c = targets[i].get<long long>();
    if (c < 0 || c >= geti(v, "data.test_classes")) {
      throw ConfigError("attack.target_classes[" + std::to_string(i) + "]",
                        "class " + std::to_string(c) + " is not a test class index");
    }
  }

  require_names(v, "detect.filters", filters::filter_from_string, true);
  require_names(v, "detect.statistics", detection::statistic_from_string, true);
  const auto variants = cfg.ae_variants();
  for (auto kind : cfg.detect_filters()) {
    if (!filters::needs_weights(kind)) continue;
    const bool present = std::any_of(variants.begin(), variants.end(),
                                     [&](filters::LossVariant lv) { return filters::filter_kind(lv) == kind; });
    if (!present) {
      throw ConfigError("detect.filters",
                        "filter '" + filters::to_string(kind) + "' needs its autoencoder listed in ae.variants");
    }
  }

  require_int(v, "evaluate.eval_episodes", 1);
  require_int(v, "evaluate.asr_episodes", 1);
  const std::string level = gets(v, "log_level");
  if (level != "debug" && level != "info" && level != "warn" && level != "error") {
    throw ConfigError("log_level", "expected debug, info, warn or error");
  }
}

json yaml_node_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Sequence: {
      json arr = json::array();
      for (const auto& item : node) arr.push_back(yaml_node_to_json(item));
      return arr;
    }
    case YAML::NodeType::Map: {
      json obj = json::object();
      for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_node_to_json(kv.second);
      return obj;
    }
    case YAML::NodeType::Scalar: break;
  }
  const std::string s = node.Scalar();
  if (node.Tag() == "!") return s;  // quoted
  if (s == "true" || s == "false") return s == "true";
  if (auto i = parse_integer(s)) return *i;
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (!s.empty() && end == s.c_str() + s.size()) return d;
  return s;
}

std::uint64_t head_tag(models::HeadKind h) { return static_cast<std::uint64_t>(h) + 1; }

}  // namespace

ConfigError::ConfigError(std::string key, const std::string& message)
    : std::runtime_error("config key '" + key + "': " + message), key_(std::move(key)) {}

std::string to_string(Command c) {
  for (const auto& [cmd, name] : kCommandNames) {
    if (cmd == c) return name;
  }
  throw std::invalid_argument("unknown command");
}

Command command_from_string(const std::string& name) {
  for (const auto& [cmd, n] : kCommandNames) {
    if (name == n) return cmd;
  }
  throw std::invalid_argument("unknown command '" + name + "'");
}

const std::vector<Command>& all_commands() {
  static const std::vector<Command> cmds = [] {
    std::vector<Command> out;
    for (const auto& [cmd, name] : kCommandNames) out.push_back(cmd);
    return out;
  }();
  return cmds;
}

std::string to_string(Source s) {
  switch (s) {
    case Source::default_value: return "default";
    case Source::file: return "file";
    case Source::env: return "env";
    case Source::flag: return "flag";
  }
  return "?";
}

const json& default_values() {
  static const json defaults = json{
      {"seed", 0},
      {"output_root", "runs"},
      {"run_dir", ""},
      {"log_level", "info"},
      {"data",
       {{"source", "synthetic"},
        {"path", ""},
        {"splits", ""},
        {"image_size", 16},
        {"channels", 3},
        {"train_classes", 64},
        {"val_classes", 16},
        {"test_classes", 20},
        {"synthetic", {{"samples_per_class", 40}, {"signal", 1.0}, {"noise_std", 0.03}}}}},
      {"episode", {{"ways", 5}, {"shots", 5}, {"queries_per_class", 15}}},
      {"model",
       {{"heads", {"relation", "cross_attention"}},
        {"channels", 16},
        {"relation_channels", 32},
        {"relation_hidden", 8},
        {"epochs", 30},
        {"episodes_per_epoch", 20},
        {"val_episodes", 20},
        {"lr", 1e-3}}},
      {"ae",
       {{"variants", {"standard_ae", "fpa", "fpa_prime"}},
        {"hidden", 32},
        {"bottleneck", 16},
        {"levels", 1},
        {"pretrain_epochs", 30},
        {"finetune_epochs", 20},
        {"batch_size", 25},
        {"pretrain_lr", 1e-3},
        {"finetune_lr", 1e-3},
        {"weight_decay", 1e-4},
        {"lr_step", 10},
        {"lr_gamma", 0.1}}},
      {"attack",
       {{"kinds", {"pgd", "cw_sgd"}},
        {"epsilon", 12.0 / 255.0},
        {"eta", 0.05},
        {"iterations", 100},
        {"kappa", 0.1},
        {"const", 1.0},
        {"target_classes", json::array()},
        {"perturbation_sets", 10}}},
      {"detect",
       {{"filters", {"identity", "noise", "median_2x2", "autoencoder", "fpa", "fpa_prime"}},
        {"statistics", {"logits_l1", "hard_label"}}}},
      {"evaluate", {{"eval_episodes", 200}, {"asr_episodes", 20}}}};
  return defaults;
}

double parse_number(const std::string& text) {
  const auto parse_plain = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("not a number: '" + text + "'");
    }
    if (used != s.size()) throw std::invalid_argument("not a number: '" + text + "'");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return parse_plain(text);
  const double num = parse_plain(text.substr(0, slash));
  const double den = parse_plain(text.substr(slash + 1));
  if (den == 0.0) throw std::invalid_argument("zero denominator in '" + text + "'");
  return num / den;
}

json yaml_to_json(const std::string& text) {
  try {
    return yaml_node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ConfigError("<file>", std::string("invalid YAML: ") + e.what());
  }
}

json load_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("<file>", "cannot read " + path.string());
  const std::string text = read_file(path);
  if (path.extension() == ".json") {
    try {
      return json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError("<file>", path.string() + ": invalid JSON: " + e.what());
    }
  }
  json j = yaml_to_json(text);
  if (j.is_null()) j = json::object();
  return j;
}

RunConfig parse_config(const ParseInput& input) {
  RunConfig cfg;
  cfg.command = input.command;
  cfg.values = default_values();
  record_defaults(cfg.values, "", cfg.provenance);
  // Relative defaults resolve against the working directory.
  cfg.values["output_root"] = std::filesystem::weakly_canonical(cfg.values["output_root"].get<std::string>()).string();
  if (input.config_file) {
    const auto dir = std::filesystem::absolute(*input.config_file).parent_path();
    merge(cfg.values, load_config_file(*input.config_file), default_values(), "", Source::file, cfg.provenance, dir);
  }
  if (input.env_output_root && !input.env_output_root->empty()) {
    set_override(cfg.values, {"output_root", *input.env_output_root}, Source::env, cfg.provenance);
  }
  for (const auto& o : input.overrides) set_override(cfg.values, o, Source::flag, cfg.provenance);
  validate(cfg);
  for (const auto& a : cfg.attacks()) {
    try {
      a.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("attack", e.what());
    }
  }
  return cfg;
}

std::uint64_t RunConfig::seed() const { return values.at("seed").get<std::uint64_t>(); }

std::filesystem::path RunConfig::output_root() const { return values.at("output_root").get<std::string>(); }

std::filesystem::path RunConfig::run_dir() const {
  const auto explicit_dir = values.at("run_dir").get<std::string>();
  if (!explicit_dir.empty()) return explicit_dir;
  return output_root() / hash().substr(0, 16);
}

std::string RunConfig::hash() const {
  json v = values;
  v.erase("output_root");
  v.erase("run_dir");
  v.erase("log_level");
  return sha256_hex(v.dump());
}

data::SyntheticSpec RunConfig::synthetic() const {
  data::SyntheticSpec s;
  const json& d = values.at("data");
  s.n_classes = d.at("train_classes").get<int>() + d.at("val_classes").get<int>() + d.at("test_classes").get<int>();
  s.samples_per_class = d.at("synthetic").at("samples_per_class").get<int>();
  const int size = d.at("image_size").get<int>();
  s.image_shape = {d.at("channels").get<int>(), size, size};
  s.class_signal_strength = d.at("synthetic").at("signal").get<double>();
  s.noise_std = d.at("synthetic").at("noise_std").get<double>();
  s.seed = derive_seed(seed(), {0xda7a});
  return s;
}

std::vector<models::HeadKind> RunConfig::heads() const {
  std::vector<models::HeadKind> out;
  for (const auto& n : values.at("model").at("heads")) out.push_back(models::head_from_string(n.get<std::string>()));
  return out;
}

models::ModelConfig RunConfig::model_config(models::HeadKind head, const Shape& input_shape) const {
  const json& m = values.at("model");
  models::ModelConfig c;
  c.head = head;
  c.input_shape = input_shape;
  c.channels = m.at("channels").get<int>();
  c.relation_channels = m.at("relation_channels").get<int>();
  c.relation_hidden = m.at("relation_hidden").get<int>();
  c.seed = derive_seed(seed(), {0x30de1, head_tag(head)});
  return c;
}

models::TrainConfig RunConfig::train_config(models::HeadKind head) const {
  const json& m = values.at("model");
  const json& e = values.at("episode");
  models::TrainConfig c;
  c.epochs = m.at("epochs").get<int>();
  c.episodes_per_epoch = m.at("episodes_per_epoch").get<int>();
  c.val_episodes = m.at("val_episodes").get<int>();
  c.learning_rate = m.at("lr").get<double>();
  c.ways = e.at("ways").get<int>();
  c.shots = e.at("shots").get<int>();
  c.queries_per_class = e.at("queries_per_class").get<int>();
  c.seed = derive_seed(seed(), {0x7a1, head_tag(head)});
  return c;
}

std::vector<filters::LossVariant> RunConfig::ae_variants() const {
  std::vector<filters::LossVariant> out;
  for (const auto& n : values.at("ae").at("variants")) out.push_back(filters::variant_from_string(n.get<std::string>()));
  return out;
}

filters::AutoencoderConfig RunConfig::ae_config(models::HeadKind head, const Shape& input_shape) const {
  const json& a = values.at("ae");
  filters::AutoencoderConfig c;
  c.input_shape = input_shape;
  c.hidden = a.at("hidden").get<int>();
  c.bottleneck = a.at("bottleneck").get<int>();
  c.levels = a.at("levels").get<int>();
  c.seed = derive_seed(seed(), {0xae, head_tag(head)});
  return c;
}

filters::AutoencoderTrainConfig RunConfig::ae_train_config(models::HeadKind head, filters::LossVariant variant) const {
  const json& a = values.at("ae");
  const json& e = values.at("episode");
  filters::AutoencoderTrainConfig c;
  c.pretrain_epochs = a.at("pretrain_epochs").get<int>();
  c.finetune_epochs = a.at("finetune_epochs").get<int>();
  c.batch_size = a.at("batch_size").get<int>();
  c.pretrain_lr = a.at("pretrain_lr").get<double>();
  c.finetune_lr = a.at("finetune_lr").get<double>();
  c.weight_decay = a.at("weight_decay").get<double>();
  c.lr_step = a.at("lr_step").get<int>();
  c.lr_gamma = a.at("lr_gamma").get<double>();
  c.ways = e.at("ways").get<int>();
  c.shots = e.at("shots").get<int>();
  c.seed = derive_seed(seed(), {0xae7, head_tag(head), static_cast<std::uint64_t>(variant)});
  return c;
}

std::vector<attacks::AttackConfig> RunConfig::attacks() const {
  const json& a = values.at("attack");
  std::vector<attacks::AttackConfig> out;
  for (const auto& n : a.at("kinds")) {
    attacks::AttackConfig c;
    c.kind = attacks::attack_from_string(n.get<std::string>());
    c.epsilon = a.at("epsilon").get<double>();
    c.eta = a.at("eta").get<double>();
    c.iterations = a.at("iterations").get<int>();
    c.kappa = a.at("kappa").get<double>();
    c.cw_const = a.at("const").get<double>();
    c.queries_per_class = values.at("episode").at("queries_per_class").get<int>();
    out.push_back(c);
  }
  return out;
}

std::vector<filters::FilterKind> RunConfig::detect_filters() const {
  std::vector<filters::FilterKind> out;
  for (const auto& n : values.at("detect").at("filters")) out.push_back(filters::filter_from_string(n.get<std::string>()));
  return out;
}

std::vector<detection::Statistic> RunConfig::statistics() const {
  std::vector<detection::Statistic> out;
  for (const auto& n : values.at("detect").at("statistics")) {
    out.push_back(detection::statistic_from_string(n.get<std::string>()));
  }
  return out;
}

json RunConfig::snapshot() const {
  json prov = json::object();
  for (const auto& [k, s] : provenance) prov[k] = to_string(s);
  return {{"command", to_string(command)}, {"values", values}, {"provenance", prov}, {"hash", hash()}};
}

}  // namespace fsad::config
