#include "fsad/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>

#include "fsad/random.hpp"

namespace fsad::data {

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::pooled: return "pooled";
  }
  return "pooled";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  if (name == "pooled") return Split::pooled;
  throw DataError("unknown split '" + name + "'");
}

Dataset::Dataset(Split split, Shape image_shape, std::vector<std::string> classes,
                 std::vector<std::vector<Tensor>> samples)
    : split_(split), image_shape_(std::move(image_shape)), classes_(std::move(classes)), samples_(std::move(samples)) {
  if (classes_.size() != samples_.size()) throw DataError("class name count does not match sample lists");
  if (image_shape_.size() != 3) throw DataError("image shape must be (C, H, W), got " + fsad::to_string(image_shape_));
  for (std::size_t c = 0; c < samples_.size(); ++c) {
    for (const Tensor& img : samples_[c]) {
      if (img.shape() != image_shape_) {
        throw DataError("class '" + classes_[c] + "' has image of shape " + fsad::to_string(img.shape()) +
                        ", expected " + fsad::to_string(image_shape_));
      }
    }
  }
}

int Dataset::find_class(const std::string& name) const {
  auto it = std::find(classes_.begin(), classes_.end(), name);
  return it == classes_.end() ? -1 : static_cast<int>(it - classes_.begin());
}

int Dataset::min_count() const {
  int m = std::numeric_limits<int>::max();
  for (const auto& s : samples_) m = std::min(m, static_cast<int>(s.size()));
  return samples_.empty() ? 0 : m;
}

Tensor Dataset::batch(int cls, const std::vector<int>& indices) const {
  std::vector<Tensor> items;
  items.reserve(indices.size());
  for (int i : indices) items.push_back(image(cls, i));
  return stack(items);
}

Archive Dataset::to_archive() const {
  Archive a("fsad.dataset");
  a.meta()["split"] = to_string(split_);
  a.meta()["image_shape"] = image_shape_;
  a.meta()["classes"] = classes_;
  char key[32];
  for (std::size_t c = 0; c < samples_.size(); ++c) {
    std::snprintf(key, sizeof key, "class/%06zu", c);
    Shape s = image_shape_;
    s.insert(s.begin(), static_cast<int>(samples_[c].size()));
    a.put(key, samples_[c].empty() ? Tensor(s) : stack(samples_[c]));
  }
  return a;
}

Dataset Dataset::from_archive(const Archive& a) {
  if (a.kind() != "fsad.dataset") throw DataError("archive is not a dataset: " + a.kind());
  auto classes = a.meta().at("classes").get<std::vector<std::string>>();
  Shape shape = a.meta().at("image_shape").get<Shape>();
  std::vector<std::vector<Tensor>> samples(classes.size());
  char key[32];
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::snprintf(key, sizeof key, "class/%06zu", c);
    const Tensor& t = a.get(key);
    for (int i = 0; i < t.dim(0); ++i) samples[c].push_back(t.item(i));
  }
  return Dataset(split_from_string(a.meta().at("split").get<std::string>()), shape, std::move(classes),
                 std::move(samples));
}

std::string Dataset::hash() const { return sha256_hex(to_archive().serialize()); }

SplitSpec SplitSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("split spec must be a JSON object mapping split -> class names");
  SplitSpec spec;
  std::set<std::string> seen;
  for (const auto& [key, value] : j.items()) {
    const Split split = split_from_string(key);
    if (split == Split::pooled) throw DataError("split spec may only name train/val/test");
    for (const auto& name : value) {
      const auto cls = name.get<std::string>();
      if (!seen.insert(cls).second) throw DataError("class '" + cls + "' assigned to more than one split");
      spec.classes[split].push_back(cls);
    }
  }
  return spec;
}

SplitSpec SplitSpec::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split spec " + path.string() + ": " + e.what());
  }
}

namespace {

Tensor load_image(const std::filesystem::path& file, const FolderOptions& options) {
  const int flag = options.channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR;
  cv::Mat img = cv::imread(file.string(), flag);
  if (img.empty()) throw DataError("cannot decode image " + file.string());
  if (options.channels == 3) cv::cvtColor(img, img, cv::COLOR_BGR2RGB);
  if (options.resize) {
    cv::resize(img, img, cv::Size(options.resize->second, options.resize->first), 0, 0, cv::INTER_AREA);
  }
  cv::Mat f;
  img.convertTo(f, CV_64F, 1.0 / 255.0);
  const int h = f.rows, w = f.cols, ch = f.channels();
  Tensor t({ch, h, w});
  for (int y = 0; y < h; ++y) {
    const double* row = f.ptr<double>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) t[(static_cast<std::size_t>(c) * h + y) * w + x] = row[x * ch + c];
    }
  }
  return t;
}

bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

}  // namespace

DatasetSplits load_image_folder(const std::filesystem::path& root, const SplitSpec& spec,
                                const FolderOptions& options) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("image folder root does not exist: " + root.string());
  if (options.channels != 1 && options.channels != 3) throw DataError("channels must be 1 or 3");
  DatasetSplits out;
  for (const auto& [split, names] : spec.classes) {
    std::vector<std::vector<Tensor>> samples;
    Shape shape;
    for (const std::string& name : names) {
      const fs::path dir = root / name;
      if (!fs::is_directory(dir)) throw DataError("class '" + name + "': missing directory " + dir.string());
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && is_image_file(entry.path())) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      if (static_cast<int>(files.size()) < std::max(1, options.min_samples_per_class)) {
        throw DataError("class '" + name + "' has " + std::to_string(files.size()) + " images, needs at least " +
                        std::to_string(std::max(1, options.min_samples_per_class)));
      }
      std::vector<Tensor> imgs;
      for (const auto& f : files) {
        imgs.push_back(load_image(f, options));
        if (shape.empty()) shape = imgs.back().shape();
        if (imgs.back().shape() != shape) {
          throw DataError("class '" + name + "': image " + f.filename().string() + " has shape " +
                          fsad::to_string(imgs.back().shape()) + ", expected " + fsad::to_string(shape) +
                          " (set a resize target)");
        }
      }
      samples.push_back(std::move(imgs));
    }
    out.emplace(split, Dataset(split, shape.empty() ? Shape{options.channels, 1, 1} : shape, names,
                               std::move(samples)));
  }
  return out;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes <= 0) throw DataError("synthetic dataset needs at least one class");
  if (spec.samples_per_class <= 0) throw DataError("synthetic dataset needs at least one sample per class");
  if (spec.image_shape.size() != 3 || shape_size(spec.image_shape) == 0) {
    throw DataError("synthetic image shape must be a positive (C, H, W)");
  }
  if (spec.class_signal_strength < 0 || spec.noise_std < 0) throw DataError("signal and noise must be >= 0");
  const int channels = spec.image_shape[0], height = spec.image_shape[1], width = spec.image_shape[2];
  constexpr int kComponents = 3;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  std::vector<std::string> names;
  std::vector<std::vector<Tensor>> samples;
  for (int c = 0; c < spec.n_classes; ++c) {
    char name[32];
    std::snprintf(name, sizeof name, "class_%03d", c);
    names.emplace_back(name);

    Tensor tmpl(spec.image_shape);
    for (int ch = 0; ch < channels; ++ch) {
      Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(ch), 0x7e}));
      std::uniform_int_distribution<int> freq(0, 2);
      std::uniform_real_distribution<double> amp(0.5, 1.0), phase(0.0, kTwoPi);
      double* plane = tmpl.ptr() + static_cast<std::size_t>(ch) * height * width;
      for (int k = 0; k < kComponents; ++k) {
        int fx = freq(rng), fy = freq(rng);
        if (fx == 0 && fy == 0) fx = 1;
        const double a = amp(rng), phi = phase(rng);
        for (int y = 0; y < height; ++y) {
          for (int x = 0; x < width; ++x) {
            plane[y * width + x] +=
                a * std::cos(kTwoPi * (fx * static_cast<double>(x) / width + fy * static_cast<double>(y) / height) + phi);
          }
        }
      }
      const auto [lo, hi] = std::minmax_element(plane, plane + height * width);
      const double low = *lo, range = *hi - *lo;
      for (int i = 0; i < height * width; ++i) plane[i] = range > 1e-12 ? (plane[i] - low) / range : 0.5;
    }

    std::vector<Tensor> imgs;
    imgs.reserve(static_cast<std::size_t>(spec.samples_per_class));
    for (int i = 0; i < spec.samples_per_class; ++i) {
      Rng rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(c), 0x5a, static_cast<std::uint64_t>(i)}));
      std::normal_distribution<double> noise(0.0, 1.0);
      Tensor img(spec.image_shape);
      for (std::size_t p = 0; p < img.size(); ++p) {
        const double n = spec.noise_std > 0 ? spec.noise_std * noise(rng) : 0.0;
        img[p] = std::clamp(spec.class_signal_strength * tmpl[p] + n, 0.0, 1.0);
      }
      imgs.push_back(std::move(img));
    }
    samples.push_back(std::move(imgs));
  }
  return Dataset(Split::pooled, spec.image_shape, std::move(names), std::move(samples));
}

DatasetSplits partition(const Dataset& pooled, int train_classes, int val_classes, int test_classes) {
  if (train_classes < 0 || val_classes < 0 || test_classes < 0 ||
      train_classes + val_classes + test_classes > pooled.num_classes()) {
    throw DataError("partition " + std::to_string(train_classes) + "/" + std::to_string(val_classes) + "/" +
                    std::to_string(test_classes) + " exceeds " + std::to_string(pooled.num_classes()) + " classes");
  }
  DatasetSplits out;
  int next = 0;
  for (auto [split, n] : {std::pair{Split::train, train_classes}, std::pair{Split::val, val_classes},
                          std::pair{Split::test, test_classes}}) {
    std::vector<std::string> names;
    std::vector<std::vector<Tensor>> samples;
    for (int i = 0; i < n; ++i, ++next) {
      names.push_back(pooled.class_name(next));
      samples.push_back(pooled.class_samples(next));
    }
    out.emplace(split, Dataset(split, pooled.image_shape(), std::move(names), std::move(samples)));
  }
  return out;
}

std::vector<int> Episode::support_labels() const {
  std::vector<int> labels;
  for (int k = 0; k < ways; ++k) labels.insert(labels.end(), static_cast<std::size_t>(shots), k);
  return labels;
}

Tensor Episode::slot_support(int slot) const { return support.slice(slot * shots, (slot + 1) * shots); }

namespace {

void check_episode_args(const Dataset& ds, int ways, int shots, int queries) {
  if (ways <= 0 || shots <= 0 || queries < 0) throw DataError("ways and shots must be positive, queries >= 0");
  if (ways > ds.num_classes()) {
    throw DataError(std::to_string(ways) + "-way episode requested from " + to_string(ds.split()) +
                    " split with only " + std::to_string(ds.num_classes()) + " classes");
  }
  if (queries % ways != 0) {
    throw DataError("query count " + std::to_string(queries) + " is not divisible by ways " + std::to_string(ways));
  }
}

// Draws `shots` supports (unless `fixed_sources` given) and per-class queries.
void fill_slot(const Dataset& ds, int cls, int shots, int per_class, const std::vector<int>* exclude, Rng& rng,
               std::vector<int>& support_idx, std::vector<int>& query_idx) {
  std::vector<int> pool;
  for (int i = 0; i < ds.count(cls); ++i) {
    if (!exclude || std::find(exclude->begin(), exclude->end(), i) == exclude->end()) pool.push_back(i);
  }
  const int need = shots + per_class;
  if (static_cast<int>(pool.size()) < need) {
    throw DataError("class '" + ds.class_name(cls) + "' has " + std::to_string(pool.size()) +
                    " usable samples, episode needs " + std::to_string(need));
  }
  std::vector<int> pick = sample_without_replacement(static_cast<int>(pool.size()), need, rng);
  support_idx.clear();
  query_idx.clear();
  for (int i = 0; i < shots; ++i) support_idx.push_back(pool[pick[i]]);
  for (int i = shots; i < need; ++i) query_idx.push_back(pool[pick[i]]);
}

Episode assemble(const Dataset& ds, int ways, int shots, int queries, const std::vector<int>& classes,
                 const std::optional<FixedSupport>& fixed, Rng& rng) {
  const int per_class = queries / ways;
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.class_ids = classes;
  std::vector<Tensor> support_parts, query_parts;
  for (int slot = 0; slot < ways; ++slot) {
    const int cls = classes[slot];
    std::vector<int> s_idx, q_idx;
    if (slot == 0 && fixed) {
      fill_slot(ds, cls, 0, per_class, &fixed->sources, rng, s_idx, q_idx);
      support_parts.push_back(fixed->images);
      if (fixed->sources.empty()) {
        ep.support_sources.insert(ep.support_sources.end(), static_cast<std::size_t>(shots), -1);
      } else {
        ep.support_sources.insert(ep.support_sources.end(), fixed->sources.begin(), fixed->sources.end());
      }
    } else {
      fill_slot(ds, cls, shots, per_class, nullptr, rng, s_idx, q_idx);
      support_parts.push_back(ds.batch(cls, s_idx));
      ep.support_sources.insert(ep.support_sources.end(), s_idx.begin(), s_idx.end());
    }
    if (!q_idx.empty()) query_parts.push_back(ds.batch(cls, q_idx));
    ep.query_sources.insert(ep.query_sources.end(), q_idx.begin(), q_idx.end());
    ep.query_labels.insert(ep.query_labels.end(), q_idx.size(), slot);
  }
  ep.support = concat(support_parts);
  if (query_parts.empty()) {
    Shape s = ds.image_shape();
    s.insert(s.begin(), 0);
    ep.query = Tensor(s);
  } else {
    ep.query = concat(query_parts);
  }
  return ep;
}

}  // namespace

Episode sample_episode(const Dataset& ds, int ways, int shots, int queries, std::uint64_t seed) {
  check_episode_args(ds, ways, shots, queries);
  Rng rng(seed);
  std::vector<int> classes = sample_without_replacement(ds.num_classes(), ways, rng);
  return assemble(ds, ways, shots, queries, classes, std::nullopt, rng);
}

Episode sample_episode_with_fixed_target(const Dataset& ds, int ways, int shots, int queries, int target_class,
                                         const std::optional<FixedSupport>& fixed, std::uint64_t seed) {
  check_episode_args(ds, ways, shots, queries);
  if (target_class < 0 || target_class >= ds.num_classes()) {
    throw DataError("target class " + std::to_string(target_class) + " not in " + to_string(ds.split()) + " split");
  }
  if (fixed) {
    Shape expected = ds.image_shape();
    expected.insert(expected.begin(), shots);
    if (fixed->images.shape() != expected) {
      throw DataError("fixed target support has shape " + fsad::to_string(fixed->images.shape()) + ", expected " +
                      fsad::to_string(expected));
    }
    if (!fixed->sources.empty() && static_cast<int>(fixed->sources.size()) != shots) {
      throw DataError("fixed target support sources must list one index per shot");
    }
  }
  Rng rng(seed);
  std::vector<int> others = sample_without_replacement(ds.num_classes() - 1, ways - 1, rng);
  std::vector<int> classes{target_class};
  for (int o : others) classes.push_back(o >= target_class ? o + 1 : o);
  return assemble(ds, ways, shots, queries, classes, fixed, rng);
}

}  // namespace fsad::data
