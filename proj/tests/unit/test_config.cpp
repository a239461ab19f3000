#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "fsad/config.hpp"
#include "fsad/pipeline.hpp"

using namespace fsad;
using namespace fsad::config;
namespace fs = std::filesystem;

namespace {

const char* kTinyYaml = R"(seed: 3
data: {train_classes: 10, val_classes: 5, test_classes: 5, synthetic: {samples_per_class: 25}}
model: {heads: [relation], epochs: 2, episodes_per_epoch: 3, val_episodes: 3}
ae: {pretrain_epochs: 1, finetune_epochs: 1}
attack: {kinds: [pgd, cw_sgd], iterations: 3, perturbation_sets: 1, target_classes: [0, 1]}
evaluate: {eval_episodes: 5, asr_episodes: 3}
)";

fs::path write(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

RunConfig parse(Command c, std::vector<Override> overrides = {}, std::optional<fs::path> file = std::nullopt,
                std::optional<std::string> env = std::nullopt) {
  ParseInput in;
  in.command = c;
  in.overrides = std::move(overrides);
  in.config_file = std::move(file);
  in.env_output_root = std::move(env);
  return parse_config(in);
}

std::string error_key(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FSAD_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, AttackShortcutsGiveDefaultSettings) {
  const auto cfg = parse(Command::attack, {{"attack.kinds", "pgd"}, {"attack.epsilon", "12/255"}, {"attack.eta", "0.05"}});
  const auto attacks = cfg.attacks();
  ASSERT_EQ(attacks.size(), 1u);
  EXPECT_EQ(attacks[0].kind, attacks::AttackKind::pgd);
  EXPECT_DOUBLE_EQ(attacks[0].epsilon, 12.0 / 255.0);
  EXPECT_DOUBLE_EQ(attacks[0].eta, 0.05);
  EXPECT_EQ(cfg.provenance.at("attack.epsilon"), Source::flag);
  EXPECT_EQ(cfg.provenance.at("attack.iterations"), Source::default_value);
}

TEST(Config, ParseNumberAcceptsFractions) {
  EXPECT_DOUBLE_EQ(parse_number("12/255"), 12.0 / 255.0);
  EXPECT_DOUBLE_EQ(parse_number("0.05"), 0.05);
  EXPECT_DOUBLE_EQ(parse_number("1e-3"), 1e-3);
  EXPECT_THROW(parse_number("abc"), std::invalid_argument);
  EXPECT_THROW(parse_number("1/0"), std::invalid_argument);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_EQ(error_key([] { parse(Command::gen_data, {{"data.source", "folder"}}); }), "data.path");
  EXPECT_EQ(error_key([] { parse(Command::attack, {{"attack.epsilon", "-1"}}); }), "attack.epsilon");
  EXPECT_EQ(error_key([] { parse(Command::attack, {{"attack.nonsense", "1"}}); }), "attack.nonsense");
  EXPECT_EQ(error_key([] { parse(Command::train_model, {{"model.epochs", "many"}}); }), "model.epochs");
  EXPECT_EQ(error_key([] { parse(Command::train_model, {{"model.heads", "relation,transformer"}}); }),
            "model.heads[1]");
  EXPECT_EQ(error_key([] { parse(Command::detect, {{"detect.filters", "fpa"}, {"ae.variants", "standard_ae"}}); }),
            "detect.filters");
  try {
    parse(Command::attack, {{"attack.epsilon", "-1"}});
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("attack.epsilon"), std::string::npos);
  }
}

TEST(Config, YamlAndJsonFilesAgree) {
  const fs::path dir = fsad::testing::temp_dir("cfg-files");
  const auto y = write(dir / "c.yaml", "seed: 9\nattack:\n  iterations: 7\n  kinds: [cw_sgd]\nmodel:\n  lr: 0.002\n");
  const auto j = write(dir / "c.json", R"({"seed": 9, "attack": {"iterations": 7, "kinds": ["cw_sgd"]}, "model": {"lr": 0.002}})");
  const auto a = parse(Command::attack, {}, y);
  const auto b = parse(Command::attack, {}, j);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.seed(), 9u);
  EXPECT_EQ(a.provenance.at("attack.iterations"), Source::file);
  EXPECT_EQ(a.attacks().at(0).kind, attacks::AttackKind::cw_sgd);
  EXPECT_EQ(error_key([&] { parse(Command::attack, {}, write(dir / "bad.yaml", "attack: {iterations: lots}\n")); }),
            "attack.iterations");
  EXPECT_EQ(error_key([&] { parse(Command::attack, {}, write(dir / "bad2.yaml", "atack: {iterations: 3}\n")); }), "atack");
}

TEST(Config, LayersResolveInOrder) {
  const fs::path dir = fsad::testing::temp_dir("cfg-layers");
  const auto y = write(dir / "c.yaml", "output_root: from-file\nattack: {iterations: 7}\n");
  auto cfg = parse(Command::attack, {}, y);
  EXPECT_EQ(cfg.output_root(), fs::weakly_canonical(dir / "from-file"));  // relative to the file
  cfg = parse(Command::attack, {}, y, "/tmp/from-env");
  EXPECT_EQ(cfg.output_root(), fs::path("/tmp/from-env"));
  EXPECT_EQ(cfg.provenance.at("output_root"), Source::env);
  cfg = parse(Command::attack, {{"output_root", "/tmp/from-flag"}, {"attack.iterations", "9"}}, y, "/tmp/from-env");
  EXPECT_EQ(cfg.output_root(), fs::path("/tmp/from-flag"));
  EXPECT_EQ(cfg.provenance.at("output_root"), Source::flag);
  EXPECT_EQ(cfg.attacks().at(0).iterations, 9);
}

TEST(Config, RunDirKeyedByHashExcludingOutputLocation) {
  const auto a = parse(Command::attack, {{"output_root", "/tmp/a"}});
  const auto b = parse(Command::attack, {{"output_root", "/tmp/b"}});
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.run_dir(), fs::path("/tmp/a") / a.hash().substr(0, 16));
  const auto c = parse(Command::attack, {{"output_root", "/tmp/a"}, {"seed", "1"}});
  EXPECT_NE(c.hash(), a.hash());
  EXPECT_EQ(parse(Command::attack, {{"run_dir", "/tmp/x"}}).run_dir(), fs::path("/tmp/x"));
  // every command of one config shares a run directory
  EXPECT_EQ(parse(Command::gen_data, {{"output_root", "/tmp/a"}}).run_dir(), a.run_dir());
}

TEST(Config, SnapshotCarriesProvenanceForEveryLeaf) {
  const auto cfg = parse(Command::detect, {{"detect.statistics", "hard_label"}});
  const auto snap = cfg.snapshot();
  EXPECT_EQ(snap.at("command"), "detect");
  EXPECT_EQ(snap.at("provenance").at("detect.statistics"), "flag");
  EXPECT_EQ(snap.at("provenance").at("seed"), "default");
  EXPECT_EQ(cfg.statistics(), std::vector<detection::Statistic>{detection::Statistic::hard_label});
}

class PipelineTest : public ::testing::Test {
 protected:
  static fs::path tiny_file() {
    static const fs::path p = write(fsad::testing::temp_dir("pipeline-cfg") / "tiny.yaml", kTinyYaml);
    return p;
  }
  static RunConfig tiny(Command c, const fs::path& root) {
    return parse(c, {{"output_root", root.string()}, {"log_level", "warn"}}, tiny_file());
  }
  static std::map<std::string, std::string> run_all(const fs::path& root) {
    std::map<std::string, std::string> hashes;
    for (Command c : all_commands()) {
      const auto res = pipeline::execute(tiny(c, root));
      EXPECT_EQ(res.exit_code, 0) << to_string(c) << ": " << res.error;
      EXPECT_EQ(res.manifest.at("status"), "complete");
      for (const auto& [rel, h] : pipeline::artifact_hashes(res.manifest_path)) hashes[rel] = h;
    }
    return hashes;
  }
};

TEST_F(PipelineTest, FullToyPipelineIsDeterministicAcrossOutputRoots) {
  const fs::path root_a = fsad::testing::temp_dir("pipeline-a");
  const fs::path root_b = fsad::testing::temp_dir("pipeline-b");
  const auto a = run_all(root_a);
  const auto b = run_all(root_b);
  EXPECT_EQ(a, b);
  const fs::path run = tiny(Command::report, root_a).run_dir();
  for (const char* rel : {"data/test.fsad", "checkpoints/relation.model", "checkpoints/relation.fpa.ae",
                          "scores/detection.csv", "tables/transferability.csv", "tables/report.csv",
                          "figures/transferability_asr.svg"}) {
    EXPECT_TRUE(a.count(rel)) << rel;
    EXPECT_TRUE(fs::exists(run / rel)) << rel;
  }
  // append-only: a finished command is refused, nothing is overwritten
  const auto before = pipeline::artifact_hashes(run / "manifests" / "gen-data.json");
  const auto again = pipeline::execute(tiny(Command::gen_data, root_a));
  EXPECT_EQ(again.exit_code, 2);
  EXPECT_EQ(pipeline::artifact_hashes(run / "manifests" / "gen-data.json"), before);
}

TEST_F(PipelineTest, MissingPrerequisiteNamesTheCommand) {
  const fs::path root = fsad::testing::temp_dir("pipeline-order");
  ASSERT_EQ(pipeline::execute(tiny(Command::gen_data, root)).exit_code, 0);
  const auto res = pipeline::execute(tiny(Command::attack, root));
  EXPECT_EQ(res.exit_code, 1);
  EXPECT_NE(res.error.find("train-model"), std::string::npos) << res.error;
  EXPECT_EQ(res.manifest.at("status"), "incomplete");
}

TEST_F(PipelineTest, ReportWithoutScoresFails) {
  const fs::path root = fsad::testing::temp_dir("pipeline-empty");
  const auto res = pipeline::execute(tiny(Command::report, root));
  EXPECT_NE(res.exit_code, 0);
  EXPECT_NE(res.error.find("no scores"), std::string::npos) << res.error;
  // the failed attempt left no artifacts, so it can be retried once inputs exist
  const auto retry = pipeline::execute(tiny(Command::report, root));
  EXPECT_EQ(retry.exit_code, 1);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = fsad::testing::temp_dir("cli");
  EXPECT_EQ(run_cli("attack --print-config --kind pgd --epsilon 12/255 --eta 0.05 --output-root " + dir.string()), 0);
  EXPECT_EQ(run_cli("attack --epsilon -1 --output-root " + dir.string()), 2);
  EXPECT_EQ(run_cli("gen-data --source folder --output-root " + dir.string()), 2);
  EXPECT_EQ(run_cli("attack --set attack.bogus=1 --output-root " + dir.string()), 2);
  EXPECT_NE(run_cli("no-such-command"), 0);
  EXPECT_EQ(run_cli("report --output-root " + dir.string()), 1);
}
