#include "fsad/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

#include "fsad/archive.hpp"
#include "fsad/random.hpp"

namespace fsad::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using config::Command;

// Tracks what a step reads and writes so the manifest can list hashes.
class StepContext {
 public:
  StepContext(const config::RunConfig& cfg, fs::path run_dir) : cfg_(cfg), dir_(std::move(run_dir)) {}

  const config::RunConfig& cfg() const { return cfg_; }
  const fs::path& dir() const { return dir_; }
  fs::path path(const std::string& rel) const { return dir_ / rel; }

  void stage(std::string module) { stage_ = std::move(module); }
  const std::string& stage() const { return stage_; }

  /// Hashes an existing input and checks it against its producer's manifest.
  std::string input(const std::string& rel, Command producer) {
    const fs::path p = path(rel);
    if (!fs::exists(p)) {
      throw PipelineError("missing " + rel + "; run " + config::to_string(producer) + " first");
    }
    const std::string h = file_sha256(p);
    const fs::path manifest = dir_ / "manifests" / (config::to_string(producer) + ".json");
    if (fs::exists(manifest)) {
      const auto recorded = artifact_hashes(manifest);
      const auto it = recorded.find(rel);
      if (it != recorded.end() && it->second != h) {
        throw PipelineError(rel + " does not match the hash recorded by " + config::to_string(producer));
      }
    }
    inputs_[rel] = h;
    return h;
  }

  void write(const std::string& rel, std::string_view bytes) {
    fs::create_directories(path(rel).parent_path());
    write_file_exclusive(path(rel), bytes);
    artifacts_[rel] = sha256_hex(bytes);
  }

  void save(const std::string& rel, const Archive& archive) { write(rel, archive.serialize()); }

  void note_file(const fs::path& abs) {
    artifacts_[fs::relative(abs, dir_).generic_string()] = file_sha256(abs);
  }

  json& extra() { return extra_; }
  const json& extra() const { return extra_; }
  const std::map<std::string, std::string>& inputs() const { return inputs_; }
  const std::map<std::string, std::string>& artifacts() const { return artifacts_; }

 private:
  const config::RunConfig& cfg_;
  fs::path dir_;
  std::string stage_ = "pipeline";
  std::map<std::string, std::string> inputs_, artifacts_;
  json extra_ = json::object();
};

const char* kSplitFiles[] = {"data/train.fsad", "data/val.fsad", "data/test.fsad"};

data::Dataset load_dataset(StepContext& ctx, const std::string& rel) {
  ctx.input(rel, Command::gen_data);
  return data::Dataset::from_archive(Archive::load(ctx.path(rel)));
}

std::string model_rel(models::HeadKind head) { return "checkpoints/" + models::to_string(head) + ".model"; }

std::string ae_rel(models::HeadKind head, filters::FilterKind kind) {
  return "checkpoints/" + models::to_string(head) + "." + filters::to_string(kind) + ".ae";
}

std::string dataset_name(const config::RunConfig& cfg) {
  if (cfg.values.at("data").at("source") == "synthetic") return "synthetic";
  return fs::path(cfg.values.at("data").at("path").get<std::string>()).filename().string();
}

std::string file_label(const std::string& attack) {
  std::string s = attack;
  std::replace(s.begin(), s.end(), '#', '-');
  return s;
}

experiments::ExperimentPlan plan_from(StepContext& ctx) {
  const auto& cfg = ctx.cfg();
  experiments::ExperimentPlan plan;
  plan.dataset_name = dataset_name(cfg);
  plan.test = std::make_shared<const data::Dataset>(load_dataset(ctx, "data/test.fsad"));
  const auto filters = cfg.detect_filters();
  for (auto head : cfg.heads()) {
    experiments::ModelBundle b;
    b.name = models::to_string(head);
    ctx.input(model_rel(head), Command::train_model);
    b.model = std::make_shared<const models::FewShotModel>(
        models::FewShotModel::from_archive(Archive::load(ctx.path(model_rel(head)), "fsad.model")));
    for (auto kind : filters) {
      if (!filters::needs_weights(kind)) continue;
      ctx.input(ae_rel(head, kind), Command::train_ae);
      b.autoencoders[kind] = std::make_shared<const filters::Autoencoder>(
          filters::Autoencoder::from_archive(Archive::load(ctx.path(ae_rel(head, kind)), "fsad.autoencoder")));
    }
    plan.models.push_back(std::move(b));
  }
  const json& a = cfg.values.at("attack");
  plan.target_classes = a.at("target_classes").get<std::vector<int>>();
  plan.attacks = cfg.attacks();
  plan.filters = filters;
  plan.statistics = cfg.statistics();
  plan.perturbation_sets = a.at("perturbation_sets").get<int>();
  plan.eval_episodes = cfg.values.at("evaluate").at("eval_episodes").get<int>();
  plan.asr_episodes = cfg.values.at("evaluate").at("asr_episodes").get<int>();
  const json& e = cfg.values.at("episode");
  plan.ways = e.at("ways").get<int>();
  plan.shots = e.at("shots").get<int>();
  plan.queries_per_class = e.at("queries_per_class").get<int>();
  plan.seed = derive_seed(cfg.seed(), {0x91a});
  plan.validate();
  ctx.extra()["plan"] = {{"hash", plan.hash()}, {"dataset", plan.dataset_name}};
  return plan;
}

void gen_data(StepContext& ctx) {
  const auto& cfg = ctx.cfg();
  const json& d = cfg.values.at("data");
  ctx.stage("data");
  data::DatasetSplits splits;
  if (d.at("source") == "synthetic") {
    splits = data::partition(data::generate_synthetic(cfg.synthetic()), d.at("train_classes").get<int>(),
                             d.at("val_classes").get<int>(), d.at("test_classes").get<int>());
  } else {
    data::FolderOptions opt;
    const int size = d.at("image_size").get<int>();
    opt.resize = std::make_pair(size, size);
    opt.channels = d.at("channels").get<int>();
    opt.min_samples_per_class =
        cfg.values.at("episode").at("shots").get<int>() + cfg.values.at("episode").at("queries_per_class").get<int>();
    splits = data::load_image_folder(d.at("path").get<std::string>(),
                                     data::SplitSpec::load(d.at("splits").get<std::string>()), opt);
  }
  const data::Split order[] = {data::Split::train, data::Split::val, data::Split::test};
  for (int i = 0; i < 3; ++i) {
    const auto it = splits.find(order[i]);
    if (it == splits.end()) throw PipelineError("split '" + data::to_string(order[i]) + "' is missing");
    ctx.save(kSplitFiles[i], it->second.to_archive());
    ctx.extra()["datasets"][data::to_string(order[i])] = {{"classes", it->second.num_classes()},
                                                          {"hash", it->second.hash()}};
  }
}

void train_model(StepContext& ctx) {
  const auto& cfg = ctx.cfg();
  ctx.stage("data");
  const auto train = load_dataset(ctx, "data/train.fsad");
  const auto val = load_dataset(ctx, "data/val.fsad");
  for (auto head : cfg.heads()) {
    ctx.stage("models");
    const auto tc = cfg.train_config(head);
    const std::string name = models::to_string(head);
    spdlog::info("training {} for {} epochs", name, tc.epochs);
    auto res = models::train_episodic(models::FewShotModel(cfg.model_config(head, train.image_shape())), train, val,
                                      tc, [&](const models::EpochRecord& r) {
                                        spdlog::info("{} epoch {}: loss {:.4f} val acc {:.4f}", name, r.epoch,
                                                     r.train_loss, r.val_accuracy);
                                      });
    ctx.save(model_rel(head), res.model.to_archive());
    std::ostringstream hist;
    hist << "epoch,train_loss,train_accuracy,val_accuracy\n";
    char buf[128];
    for (const auto& r : res.history) {
      std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.train_accuracy,
                    r.val_accuracy);
      hist << buf;
    }
    ctx.write("checkpoints/" + name + ".history.csv", hist.str());
    ctx.extra()["models"][name] = {
        {"hash", res.model.hash()}, {"best_epoch", res.best_epoch}, {"best_val_accuracy", res.best_val_accuracy}};
  }
}

void train_ae(StepContext& ctx) {
  const auto& cfg = ctx.cfg();
  ctx.stage("data");
  const auto train = load_dataset(ctx, "data/train.fsad");
  const auto val = load_dataset(ctx, "data/val.fsad");
  const auto variants = cfg.ae_variants();
  if (variants.empty()) throw PipelineError("ae.variants is empty; nothing to train");
  for (auto head : cfg.heads()) {
    ctx.stage("models");
    ctx.input(model_rel(head), Command::train_model);
    const auto model = models::FewShotModel::from_archive(Archive::load(ctx.path(model_rel(head)), "fsad.model"));
    const std::string name = models::to_string(head);
    const auto aec = cfg.ae_config(head, train.image_shape());
    ctx.stage("filters");
    auto log_epoch = [&](const filters::AeEpochRecord& r) {
      spdlog::info("{} {} epoch {}: train {:.5f} val {:.5f}", name, r.phase, r.epoch, r.train_loss, r.val_loss);
    };
    auto record = [&](const filters::AeTrainResult& res) {
      const auto kind = filters::filter_kind(res.model.variant());
      ctx.save(ae_rel(head, kind), res.model.to_archive());
      std::ostringstream hist;
      hist << "phase,epoch,train_loss,val_loss,best_val_loss,improved\n";
      char buf[160];
      for (const auto& r : res.history) {
        std::snprintf(buf, sizeof buf, "%s,%d,%.17g,%.17g,%.17g,%d\n", r.phase.c_str(), r.epoch, r.train_loss,
                      r.val_loss, r.best_val_loss, r.improved ? 1 : 0);
        hist << buf;
      }
      ctx.write("checkpoints/" + name + "." + filters::to_string(kind) + ".history.csv", hist.str());
      ctx.extra()["autoencoders"][name + "." + filters::to_string(kind)] = res.model.hash();
    };
    spdlog::info("pretraining the {} autoencoder", name);
    const auto base = filters::train_autoencoder(train, val, model, filters::LossVariant::standard_ae, aec,
                                                 cfg.ae_train_config(head, filters::LossVariant::standard_ae),
                                                 nullptr, log_epoch);
    if (std::find(variants.begin(), variants.end(), filters::LossVariant::standard_ae) != variants.end()) record(base);
    for (auto v : variants) {
      if (v == filters::LossVariant::standard_ae) continue;
      spdlog::info("fine-tuning the {} {} filter", name, filters::to_string(v));
      record(filters::train_autoencoder(train, val, model, v, aec, cfg.ae_train_config(head, v), &base.model,
                                        log_epoch));
    }
  }
}

const char* kIndexHeader = "model,attack,set,class,file";

void attack(StepContext& ctx) {
  ctx.stage("experiments");
  const auto plan = plan_from(ctx);
  ctx.stage("attacks");
  spdlog::info("generating perturbations for {} classes x {} sets", plan.classes().size(), plan.perturbation_sets);
  const auto records = experiments::generate_records(plan, true);
  std::ostringstream index;
  index << kIndexHeader << '\n';
  for (const auto& e : records) {
    const std::string rel = "perturbations/" + e.model + "/" + file_label(e.attack) + "/c" +
                            std::to_string(e.record.target_class) + "_s" + std::to_string(e.set) + ".pert";
    ctx.save(rel, e.record.to_archive());
    index << e.model << ',' << e.attack << ',' << e.set << ',' << e.record.target_class << ',' << rel << '\n';
  }
  ctx.write("perturbations/index.csv", index.str());
}

std::vector<experiments::RecordEntry> load_records(StepContext& ctx) {
  ctx.stage("attacks");
  ctx.input("perturbations/index.csv", Command::attack);
  std::istringstream in(read_file(ctx.path("perturbations/index.csv")));
  std::string line;
  std::getline(in, line);
  if (line != kIndexHeader) throw PipelineError("perturbations/index.csv has an unexpected header");
  std::vector<experiments::RecordEntry> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) throw PipelineError("perturbations/index.csv: malformed line '" + line + "'");
    ctx.input(f[4], Command::attack);
    out.push_back({f[0], f[1], std::stoi(f[2]),
                   attacks::PerturbationRecord::from_archive(Archive::load(ctx.path(f[4]), "fsad.perturbation"))});
  }
  return out;
}

void detect(StepContext& ctx) {
  ctx.stage("experiments");
  const auto plan = plan_from(ctx);
  const auto records = load_records(ctx);
  ctx.stage("detection");
  const auto res = experiments::run_detection_suite(plan, records);
  ctx.write("scores/detection.csv", experiments::score_raw_csv(res.raw));
  ctx.write("tables/detection.csv", res.table.csv());
}

void evaluate(StepContext& ctx) {
  ctx.stage("experiments");
  const auto plan = plan_from(ctx);
  const auto records = load_records(ctx);
  ctx.stage("models");
  const auto base = experiments::run_baseline(plan);
  ctx.write("scores/accuracy.csv", experiments::accuracy_raw_csv(base.raw));
  ctx.write("tables/baseline.csv", base.table.csv());
  ctx.stage("attacks");
  const auto tr = experiments::run_transferability(plan, records);
  ctx.write("scores/asr.csv", experiments::asr_raw_csv(tr.raw));
  ctx.write("tables/transferability.csv", tr.table.csv());
}

// Re-aggregates every raw score file, checks the stored tables against the
// result and renders the figures.
void report(StepContext& ctx) {
  ctx.stage("experiments");
  struct Source {
    const char* scores;
    const char* table;
    Command producer;
  };
  const Source sources[] = {{"scores/accuracy.csv", "tables/baseline.csv", Command::evaluate},
                            {"scores/asr.csv", "tables/transferability.csv", Command::evaluate},
                            {"scores/detection.csv", "tables/detection.csv", Command::detect}};
  experiments::ResultsTable all;
  int found = 0;
  for (const auto& s : sources) {
    if (!fs::exists(ctx.path(s.scores))) continue;
    ++found;
    ctx.input(s.scores, s.producer);
    const fs::path manifest = ctx.dir() / "manifests" / (config::to_string(s.producer) + ".json");
    if (!fs::exists(manifest)) throw PipelineError(std::string(s.scores) + " has no producing manifest");
    const json m = json::parse(read_file(manifest));
    if (m.value("status", "") != "complete") {
      throw PipelineError(config::to_string(s.producer) + " did not complete; its scores are partial");
    }
    const std::string plan_hash = m.at("plan").at("hash");
    const std::string dataset = m.at("plan").at("dataset");
    const std::string text = read_file(ctx.path(s.scores));
    experiments::ResultsTable t;
    if (s.producer == Command::detect) {
      t = experiments::aggregate_detection(experiments::parse_score_raw(text), dataset, plan_hash);
    } else if (std::string(s.scores) == "scores/accuracy.csv") {
      t = experiments::aggregate_accuracy(experiments::parse_accuracy_raw(text), dataset, plan_hash);
    } else {
      t = experiments::aggregate_asr(experiments::parse_asr_raw(text), dataset, plan_hash);
    }
    ctx.input(s.table, s.producer);
    if (!(experiments::ResultsTable::read_csv(ctx.path(s.table)) == t)) {
      throw PipelineError(std::string("re-aggregating ") + s.scores + " does not reproduce " + s.table);
    }
    all.append(t);
  }
  if (found == 0) {
    throw PipelineError("no scores in " + ctx.path("scores").string() + "; run evaluate or detect first");
  }
  ctx.write("tables/report.csv", all.csv());
  for (const auto& p : experiments::render_report(all, ctx.path("figures"))) ctx.note_file(p);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json manifest_json(const StepContext& ctx, const std::string& status, double seconds, const std::string& started,
                   const std::string& error) {
  json m = ctx.extra();
  m["command"] = config::to_string(ctx.cfg().command);
  m["status"] = status;
  m["config"] = ctx.cfg().snapshot();
  m["seed"] = ctx.cfg().seed();
  m["inputs"] = ctx.inputs();
  m["artifacts"] = ctx.artifacts();
  m["timings"] = {{"started_at", started}, {"seconds", seconds}};
  if (!error.empty()) m["error"] = error;
  return m;
}

void overwrite(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw PipelineError("cannot write " + p.string());
}

}  // namespace

std::map<std::string, std::string> artifact_hashes(const fs::path& manifest) {
  const json m = json::parse(read_file(manifest));
  return m.at("artifacts").get<std::map<std::string, std::string>>();
}

experiments::ExperimentPlan build_plan(const config::RunConfig& cfg, const fs::path& run_dir) {
  StepContext ctx(cfg, run_dir);
  return plan_from(ctx);
}

std::vector<experiments::RecordEntry> load_perturbations(const config::RunConfig& cfg, const fs::path& run_dir) {
  StepContext ctx(cfg, run_dir);
  return load_records(ctx);
}

ExecutionResult execute(const config::RunConfig& cfg) {
  ExecutionResult result;
  result.run_dir = cfg.run_dir();
  const std::string cmd = config::to_string(cfg.command);
  result.manifest_path = result.run_dir / "manifests" / (cmd + ".json");
  StepContext ctx(cfg, result.run_dir);
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  try {
    fs::create_directories(result.run_dir / "manifests");
    // A failed attempt that wrote nothing may be retried; its manifest is kept
    // under an attempt suffix.
    if (fs::exists(result.manifest_path)) {
      const json old = json::parse(read_file(result.manifest_path));
      if (old.value("status", "") == "incomplete" && old.value("artifacts", json::object()).empty()) {
        int n = 1;
        fs::path moved;
        do {
          moved = result.run_dir / "manifests" / (cmd + ".attempt-" + std::to_string(n++) + ".json");
        } while (fs::exists(moved));
        fs::rename(result.manifest_path, moved);
      }
    }
    write_file_exclusive(result.manifest_path, manifest_json(ctx, "incomplete", 0.0, started, "").dump(2));
  } catch (const std::exception& e) {
    result.exit_code = 2;
    result.error = cmd + ": cannot start in " + result.run_dir.string() + ": " + e.what() +
                   " (run directories are append-only; use a new output root to rerun)";
    return result;
  }
  spdlog::info("{}: run directory {}", cmd, result.run_dir.string());

  std::string error;
  try {
    switch (cfg.command) {
      case Command::gen_data: gen_data(ctx); break;
      case Command::train_model: train_model(ctx); break;
      case Command::train_ae: train_ae(ctx); break;
      case Command::attack: attack(ctx); break;
      case Command::detect: detect(ctx); break;
      case Command::evaluate: evaluate(ctx); break;
      case Command::report: report(ctx); break;
    }
  } catch (const std::exception& e) {
    error = ctx.stage() + ": " + e.what();
  }
  result.manifest = manifest_json(ctx, error.empty() ? "complete" : "incomplete", elapsed(), started, error);
  try {
    overwrite(result.manifest_path, result.manifest.dump(2));
  } catch (const std::exception& e) {
    if (error.empty()) error = std::string("manifest: ") + e.what();
  }
  if (!error.empty()) {
    result.exit_code = 1;
    result.error = cmd + " failed: " + error;
  }
  return result;
}

}  // namespace fsad::pipeline
