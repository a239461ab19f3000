#include "fixtures.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <unistd.h>

#include "fsad/archive.hpp"

#ifndef FSAD_TEST_CACHE_DIR
#define FSAD_TEST_CACHE_DIR "test-cache"
#endif

namespace fsad::testing {
namespace fs = std::filesystem;

const data::DatasetSplits& toy_splits(double noise_std) {
  static std::map<double, data::DatasetSplits> cache;
  auto it = cache.find(noise_std);
  if (it == cache.end()) {
    data::SyntheticSpec spec;
    spec.noise_std = noise_std;
    it = cache.emplace(noise_std, data::partition(data::generate_synthetic(spec), 64, 16, 20)).first;
  }
  return it->second;
}

const models::FewShotModel& trained_model(models::HeadKind head, double noise_std) {
  static std::map<std::pair<models::HeadKind, double>, std::unique_ptr<models::FewShotModel>> cache;
  auto& slot = cache[{head, noise_std}];
  if (slot) return *slot;
  const auto& splits = toy_splits(noise_std);
  models::ModelConfig mc;
  mc.head = head;
  const models::TrainConfig tc;
  const std::string key = sha256_hex(mc.to_json().dump() + tc.to_json().dump() + splits.at(data::Split::train).hash())
                              .substr(0, 16);
  const fs::path file = fs::path(FSAD_TEST_CACHE_DIR) / (models::to_string(head) + "-" + key + ".model");
  if (fs::exists(file)) {
    slot = std::make_unique<models::FewShotModel>(models::FewShotModel::from_archive(Archive::load(file, "fsad.model")));
    return *slot;
  }
  spdlog::info("training {} test fixture (cached at {})", models::to_string(head), file.string());
  auto res = models::train_episodic(models::FewShotModel(mc), splits.at(data::Split::train),
                                    splits.at(data::Split::val), tc);
  fs::create_directories(file.parent_path());
  const fs::path tmp = file.string() + ".tmp" + std::to_string(::getpid());
  fs::remove(tmp);
  res.model.to_archive().save(tmp);
  fs::rename(tmp, file);
  slot = std::make_unique<models::FewShotModel>(std::move(res.model));
  return *slot;
}

models::FewShotModel random_model(models::HeadKind head, std::uint64_t seed) {
  models::ModelConfig mc;
  mc.head = head;
  mc.seed = seed;
  models::FewShotModel m(mc);
  m.set_trainable(false);
  return m;
}

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::path(FSAD_TEST_CACHE_DIR) / "tmp" / (name + "-" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double central_difference(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace fsad::testing
