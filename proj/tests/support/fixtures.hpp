#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "fsad/data.hpp"
#include "fsad/models.hpp"

namespace fsad::testing {

/// 100-class synthetic data split 64/16/20 (seeded, cached per noise level).
const data::DatasetSplits& toy_splits(double noise_std = 0.03);

/// Model trained with the default TrainConfig on toy_splits(noise_std).
/// Trained once per build tree and cached on disk.
const models::FewShotModel& trained_model(models::HeadKind head, double noise_std = 0.03);

/// Untrained, frozen model with the default architecture.
models::FewShotModel random_model(models::HeadKind head, std::uint64_t seed = 1);

/// Fresh empty directory under the build tree.
std::filesystem::path temp_dir(const std::string& name);

/// Central-difference derivative of f at x along coordinate i.
double central_difference(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t i, double h = 1e-5);

/// |a - b| / max(|a|, |b|, floor)
double relative_error(double a, double b, double floor = 1e-6);

}  // namespace fsad::testing
