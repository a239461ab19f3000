#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>
#include <map>

#include "fsad/config.hpp"
#include "fsad/pipeline.hpp"

namespace {

using fsad::config::Command;

// Shortcut flag -> config key, per subcommand.
const std::map<Command, std::vector<std::pair<std::string, std::string>>> kShortcuts{
    {Command::gen_data,
     {{"--source", "data.source"},
      {"--data-path", "data.path"},
      {"--splits", "data.splits"},
      {"--image-size", "data.image_size"},
      {"--noise-std", "data.synthetic.noise_std"}}},
    {Command::train_model, {{"--heads", "model.heads"}, {"--epochs", "model.epochs"}, {"--lr", "model.lr"}}},
    {Command::train_ae,
     {{"--variants", "ae.variants"},
      {"--pretrain-epochs", "ae.pretrain_epochs"},
      {"--finetune-epochs", "ae.finetune_epochs"}}},
    {Command::attack,
     {{"--kind", "attack.kinds"},
      {"--epsilon", "attack.epsilon"},
      {"--eta", "attack.eta"},
      {"--iterations", "attack.iterations"},
      {"--kappa", "attack.kappa"},
      {"--const", "attack.const"},
      {"--sets", "attack.perturbation_sets"},
      {"--classes", "attack.target_classes"}}},
    {Command::detect, {{"--filters", "detect.filters"}, {"--statistics", "detect.statistics"}}},
    {Command::evaluate, {{"--eval-episodes", "evaluate.eval_episodes"}, {"--asr-episodes", "evaluate.asr_episodes"}}},
    {Command::report, {}}};

const std::map<Command, std::string> kHelp{
    {Command::gen_data, "Generate or import the train/val/test datasets"},
    {Command::train_model, "Train the few-shot models episodically"},
    {Command::train_ae, "Train the autoencoder and feature-preserving filters"},
    {Command::attack, "Generate adversarial support perturbations"},
    {Command::detect, "Score adversarial and clean supports under each filter"},
    {Command::evaluate, "Baseline accuracy and attack transferability"},
    {Command::report, "Re-aggregate raw scores into tables and figures"}};

struct SubOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::string output_root, run_dir, seed, log_level;
  bool print_config = false;
  std::map<std::string, std::string> shortcut_values;
  std::vector<std::pair<std::string, CLI::Option*>> shortcut_opts;
  CLI::Option *config_opt = nullptr, *output_opt = nullptr, *run_dir_opt = nullptr, *seed_opt = nullptr,
              *level_opt = nullptr;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial support-set attacks and self-similarity detection for few-shot classifiers"};
  app.require_subcommand(1);
  std::map<Command, SubOptions> opts;
  std::map<Command, CLI::App*> subs;
  for (Command c : fsad::config::all_commands()) {
    auto& o = opts[c];
    CLI::App* sub = app.add_subcommand(fsad::config::to_string(c), kHelp.at(c));
    subs[c] = sub;
    o.config_opt = sub->add_option("-c,--config", o.config_file, "JSON or YAML config file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.sets, "Override any key: KEY=VALUE (dotted key path; lists comma separated)");
    o.output_opt = sub->add_option("--output-root", o.output_root, "Root of run directories");
    o.run_dir_opt = sub->add_option("--run-dir", o.run_dir, "Explicit run directory");
    o.seed_opt = sub->add_option("--seed", o.seed, "Global seed");
    o.level_opt = sub->add_option("--log-level", o.log_level, "debug, info, warn or error");
    sub->add_flag("--print-config", o.print_config, "Print the resolved config with provenance and exit");
    o.shortcut_values.clear();
    for (const auto& [flag, key] : kShortcuts.at(c)) {
      auto* opt = sub->add_option(flag, o.shortcut_values[key], "Sets " + key);
      o.shortcut_opts.emplace_back(key, opt);
    }
  }
  CLI11_PARSE(app, argc, argv);

  Command cmd = Command::gen_data;
  for (const auto& [c, sub] : subs) {
    if (sub->parsed()) cmd = c;
  }
  auto& o = opts[cmd];

  fsad::config::ParseInput input;
  input.command = cmd;
  if (o.config_opt->count()) input.config_file = o.config_file;
  if (const char* env = std::getenv(fsad::config::kOutputRootEnv)) input.env_output_root = env;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      std::cerr << "error: --set expects KEY=VALUE, got '" << s << "'\n";
      return 2;
    }
    input.overrides.push_back({s.substr(0, eq), s.substr(eq + 1)});
  }
  for (const auto& [key, opt] : o.shortcut_opts) {
    if (opt->count()) input.overrides.push_back({key, o.shortcut_values.at(key)});
  }
  if (o.output_opt->count()) input.overrides.push_back({"output_root", o.output_root});
  if (o.run_dir_opt->count()) input.overrides.push_back({"run_dir", o.run_dir});
  if (o.seed_opt->count()) input.overrides.push_back({"seed", o.seed});
  if (o.level_opt->count()) input.overrides.push_back({"log_level", o.log_level});

  fsad::config::RunConfig cfg;
  try {
    cfg = fsad::config::parse_config(input);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  spdlog::set_level(spdlog::level::from_str(cfg.values.at("log_level").get<std::string>()));

  if (o.print_config) {
    std::cout << cfg.snapshot().dump(2) << '\n' << "run_dir: " << cfg.run_dir().string() << '\n';
    return 0;
  }

  const auto result = fsad::pipeline::execute(cfg);
  if (result.exit_code != 0) {
    std::cerr << "error: " << result.error << '\n';
    return result.exit_code;
  }
  std::cout << result.run_dir.string() << '\n';
  return 0;
}
