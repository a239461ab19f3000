#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "fsad/archive.hpp"
#include "fsad/tensor.hpp"

namespace fsad::data {

enum class Split { train, val, test, pooled };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Immutable labelled image collection. Every image has `image_shape`
/// (C, H, W) with values in [0, 1].
class Dataset {
 public:
  Dataset() = default;
  Dataset(Split split, Shape image_shape, std::vector<std::string> classes, std::vector<std::vector<Tensor>> samples);

  Split split() const { return split_; }
  const Shape& image_shape() const { return image_shape_; }
  int num_classes() const { return static_cast<int>(classes_.size()); }
  const std::vector<std::string>& classes() const { return classes_; }
  const std::string& class_name(int cls) const { return classes_.at(static_cast<std::size_t>(cls)); }
  /// Index of a class by name, or -1.
  int find_class(const std::string& name) const;

  int count(int cls) const { return static_cast<int>(samples_.at(static_cast<std::size_t>(cls)).size()); }
  int min_count() const;
  const Tensor& image(int cls, int index) const {
    return samples_.at(static_cast<std::size_t>(cls)).at(static_cast<std::size_t>(index));
  }
  const std::vector<Tensor>& class_samples(int cls) const { return samples_.at(static_cast<std::size_t>(cls)); }

  /// Stacks the chosen samples of one class into (n, C, H, W).
  Tensor batch(int cls, const std::vector<int>& indices) const;

  Archive to_archive() const;
  static Dataset from_archive(const Archive& archive);
  /// Content hash of the serialised form.
  std::string hash() const;

 private:
  Split split_ = Split::pooled;
  Shape image_shape_;
  std::vector<std::string> classes_;
  std::vector<std::vector<Tensor>> samples_;
};

using DatasetSplits = std::map<Split, Dataset>;

/// Class-name partition per split; the split sets must be disjoint.
struct SplitSpec {
  std::map<Split, std::vector<std::string>> classes;

  static SplitSpec from_json(const nlohmann::json& j);
  static SplitSpec load(const std::filesystem::path& path);
};

struct FolderOptions {
  /// Resize every image to (height, width) when set; otherwise all images
  /// must already share one size.
  std::optional<std::pair<int, int>> resize;
  int channels = 3;
  int min_samples_per_class = 1;
};

/// Reads root/<class>/<file>.{png,jpg,jpeg}. Pixels are scaled to [0, 1].
DatasetSplits load_image_folder(const std::filesystem::path& root, const SplitSpec& spec,
                                const FolderOptions& options = {});

struct SyntheticSpec {
  int n_classes = 100;
  int samples_per_class = 40;
  Shape image_shape{3, 16, 16};
  double class_signal_strength = 1.0;
  double noise_std = 0.03;
  std::uint64_t seed = 7;
};

/// Each class is a seeded low-frequency template scaled by the signal
/// strength plus i.i.d. Gaussian pixel noise, clipped to [0, 1].
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Assigns consecutive classes of a pooled dataset to train/val/test.
DatasetSplits partition(const Dataset& pooled, int train_classes, int val_classes, int test_classes);

/// One K-way N-shot task. Support rows are class-major: rows
/// [k*N, (k+1)*N) belong to slot k. Labels are slots in [0, K).
struct Episode {
  int ways = 0;
  int shots = 0;
  Tensor support;
  Tensor query;
  std::vector<int> query_labels;
  std::vector<int> class_ids;
  // Sample index within its class for each support/query row; -1 for
  // images supplied from outside the dataset.
  std::vector<int> support_sources;
  std::vector<int> query_sources;

  int num_queries() const { return static_cast<int>(query_labels.size()); }
  std::vector<int> support_labels() const;
  /// Support rows of one slot, (N, C, H, W).
  Tensor slot_support(int slot) const;
};

/// Classes drawn uniformly without replacement; queries balanced with
/// `queries / ways` per class and disjoint from the supports.
Episode sample_episode(const Dataset& ds, int ways, int shots, int queries, std::uint64_t seed);

/// Support images for the target slot kept fixed across draws.
struct FixedSupport {
  Tensor images;             // (N, C, H, W)
  std::vector<int> sources;  // dataset indices to keep out of the queries; may be empty
};

/// Like sample_episode but `target_class` always occupies slot 0. Its support
/// is `fixed` when given, otherwise freshly drawn; everything else is redrawn.
Episode sample_episode_with_fixed_target(const Dataset& ds, int ways, int shots, int queries, int target_class,
                                         const std::optional<FixedSupport>& fixed, std::uint64_t seed);

}  // namespace fsad::data
