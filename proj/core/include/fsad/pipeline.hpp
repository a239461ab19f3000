#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>

#include "fsad/config.hpp"
#include "fsad/experiments.hpp"

namespace fsad::pipeline {

/// Error raised by a pipeline step; the message is prefixed with the module
/// that failed, e.g. "attacks: ...".
class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExecutionResult {
  int exit_code = 0;
  std::filesystem::path run_dir;
  std::filesystem::path manifest_path;
  nlohmann::json manifest;
  std::string error;  // empty on success
};

/// Runs one command inside the run directory of `cfg`. Every file is created
/// exclusively; the command's manifest (config snapshot with provenance,
/// seeds, input and artifact hashes, timing) is written to
/// manifests/<command>.json and stays marked incomplete if the step fails.
/// Never throws for step failures; they are reported through the result.
ExecutionResult execute(const config::RunConfig& cfg);

/// Relative artifact path -> sha256 as recorded in a manifest.
std::map<std::string, std::string> artifact_hashes(const std::filesystem::path& manifest);

/// Plan over the artifacts already in `run_dir` (test split, models and the
/// autoencoders the configured filters need).
experiments::ExperimentPlan build_plan(const config::RunConfig& cfg, const std::filesystem::path& run_dir);

/// Perturbation records written by the attack command, checked against the
/// hashes in its manifest.
std::vector<experiments::RecordEntry> load_perturbations(const config::RunConfig& cfg,
                                                         const std::filesystem::path& run_dir);

}  // namespace fsad::pipeline
