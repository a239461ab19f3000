#include "fsad/filters.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "fsad/ops.hpp"
#include "fsad/optim.hpp"
#include "fsad/random.hpp"

namespace fsad::filters {
namespace {

ag::Var he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : t.values()) v = dist(rng);
  return ag::Var(std::move(t), true);
}

ag::Var deep(const ag::Var& v) { return ag::Var(v.value(), v.requires_grad()); }

double median4(std::array<double, 4> v) {
  std::sort(v.begin(), v.end());
  return 0.5 * (v[1] + v[2]);
}

// Sum over samples of |a_i - b_i|^2 / sqrt(dim), divided by the batch size.
ag::Var scaled_sq_error(const ag::Var& a, const ag::Var& b, double weight) {
  const int batch = a.shape()[0];
  const double dim = static_cast<double>(a.value().item_size());
  return ag::scale(ag::sum_squares(ag::sub(a, b)), weight / (std::sqrt(dim) * batch));
}

void check_same(const ag::Var& a, const ag::Var& b, const char* what) {
  if (a.shape() != b.shape() || a.value().rank() < 2) {
    throw ShapeError(std::string("fpa objective: ") + what + " shapes " + fsad::to_string(a.shape()) + " and " +
                     fsad::to_string(b.shape()) + " differ or lack a batch axis");
  }
}

}  // namespace

std::string to_string(FilterKind kind) {
  switch (kind) {
    case FilterKind::identity: return "identity";
    case FilterKind::noise: return "noise";
    case FilterKind::median_2x2: return "median_2x2";
    case FilterKind::autoencoder: return "autoencoder";
    case FilterKind::fpa: return "fpa";
    case FilterKind::fpa_prime: return "fpa_prime";
  }
  return "?";
}

FilterKind filter_from_string(const std::string& name) {
  for (FilterKind k : {FilterKind::identity, FilterKind::noise, FilterKind::median_2x2, FilterKind::autoencoder,
                       FilterKind::fpa, FilterKind::fpa_prime}) {
    if (to_string(k) == name) return k;
  }
  if (name == "median") return FilterKind::median_2x2;
  throw std::invalid_argument("unknown filter kind '" + name +
                              "' (expected identity, noise, median_2x2, autoencoder, fpa or fpa_prime)");
}

bool needs_weights(FilterKind kind) {
  return kind == FilterKind::autoencoder || kind == FilterKind::fpa || kind == FilterKind::fpa_prime;
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::standard_ae: return "standard_ae";
    case LossVariant::fpa: return "fpa";
    case LossVariant::fpa_prime: return "fpa_prime";
  }
  return "?";
}

LossVariant variant_from_string(const std::string& name) {
  if (name == "standard_ae" || name == "autoencoder") return LossVariant::standard_ae;
  if (name == "fpa") return LossVariant::fpa;
  if (name == "fpa_prime") return LossVariant::fpa_prime;
  throw std::invalid_argument("unknown autoencoder loss variant '" + name + "' (expected standard_ae, fpa or fpa_prime)");
}

FilterKind filter_kind(LossVariant v) {
  switch (v) {
    case LossVariant::standard_ae: return FilterKind::autoencoder;
    case LossVariant::fpa: return FilterKind::fpa;
    case LossVariant::fpa_prime: return FilterKind::fpa_prime;
  }
  return FilterKind::autoencoder;
}

Tensor median_filter_2x2(const Tensor& image) {
  if (image.rank() != 3 && image.rank() != 4) {
    throw ShapeError("median filter expects (C, H, W) or (B, C, H, W), got " + fsad::to_string(image.shape()));
  }
  const int h = image.dim(image.rank() - 2);
  const int w = image.dim(image.rank() - 1);
  if (h < 2 || w < 2) throw ShapeError("median filter needs H, W >= 2, got " + fsad::to_string(image.shape()));
  const std::size_t planes = image.size() / static_cast<std::size_t>(h * w);
  Tensor out(image.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = image.ptr() + p * h * w;
    double* dst = out.ptr() + p * h * w;
    for (int y = 0; y < h; ++y) {
      const int y1 = y + 1 < h ? y + 1 : h - 1;
      for (int x = 0; x < w; ++x) {
        const int x1 = x + 1 < w ? x + 1 : w - 1;
        dst[y * w + x] = median4({src[y * w + x], src[y * w + x1], src[y1 * w + x], src[y1 * w + x1]});
      }
    }
  }
  return out;
}

Tensor channel_noise(const Tensor& support, std::uint64_t seed) {
  if (support.rank() != 4) throw ShapeError("noise filter expects (B, C, H, W), got " + fsad::to_string(support.shape()));
  const int b = support.dim(0), c = support.dim(1);
  const std::size_t plane = static_cast<std::size_t>(support.dim(2)) * support.dim(3);
  const double count = static_cast<double>(plane) * b;
  std::vector<double> sd(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < b; ++i) {
      const double* p = support.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        s2 += p[k] * p[k];
      }
    }
    const double mean = s / count;
    sd[static_cast<std::size_t>(ch)] = std::sqrt(std::max(0.0, s2 / count - mean * mean));
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out = support;
  for (int i = 0; i < b; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      double* p = out.ptr() + (static_cast<std::size_t>(i) * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        p[k] = std::clamp(p[k] + sd[static_cast<std::size_t>(ch)] * normal(rng), 0.0, 1.0);
      }
    }
  }
  return out;
}

nlohmann::json AutoencoderConfig::to_json() const {
  return {{"input_shape", input_shape}, {"hidden", hidden}, {"bottleneck", bottleneck}, {"levels", levels}, {"seed", seed}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
  AutoencoderConfig c;
  c.input_shape = j.at("input_shape").get<Shape>();
  c.hidden = j.at("hidden").get<int>();
  c.bottleneck = j.at("bottleneck").get<int>();
  c.levels = j.at("levels").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Autoencoder::Autoencoder(const AutoencoderConfig& config) : config_(config) {
  if (config.levels < 1 || config.levels > 2) throw std::invalid_argument("autoencoder levels must be 1 or 2");
  const int div = 1 << config.levels;
  if (config.input_shape.size() != 3 || config.input_shape[1] % div != 0 || config.input_shape[2] % div != 0) {
    throw ShapeError("autoencoder input must be (C, H, W) with H and W divisible by " + std::to_string(div) +
                     ", got " + fsad::to_string(config.input_shape));
  }
  if (config.hidden < 1 || config.bottleneck < 1) throw std::invalid_argument("autoencoder widths must be >= 1");
  Rng rng(derive_seed(config.seed, {0xae}));
  const int c = config.input_shape[0], h = config.hidden, z = config.bottleneck;
  enc1_w_ = he_normal({h, c, 3, 3}, c * 9, rng);
  enc1_b_ = ag::Var(Tensor({h}), true);
  enc2_w_ = he_normal({z, h, 3, 3}, h * 9, rng);
  enc2_b_ = ag::Var(Tensor({z}), true);
  dec1_w_ = he_normal({h, z, 3, 3}, z * 9, rng);
  dec1_b_ = ag::Var(Tensor({h}), true);
  dec2_w_ = he_normal({c, h, 3, 3}, h * 9, rng);
  dec2_b_ = ag::Var(Tensor({c}), true);
}

Autoencoder::Autoencoder(const Autoencoder& o)
    : config_(o.config_),
      variant_(o.variant_),
      paired_model_hash_(o.paired_model_hash_),
      trained_(o.trained_),
      enc1_w_(deep(o.enc1_w_)),
      enc1_b_(deep(o.enc1_b_)),
      enc2_w_(deep(o.enc2_w_)),
      enc2_b_(deep(o.enc2_b_)),
      dec1_w_(deep(o.dec1_w_)),
      dec1_b_(deep(o.dec1_b_)),
      dec2_w_(deep(o.dec2_w_)),
      dec2_b_(deep(o.dec2_b_)) {}

Autoencoder& Autoencoder::operator=(const Autoencoder& o) {
  if (this != &o) *this = Autoencoder(o);
  return *this;
}

ag::Var Autoencoder::reconstruct(const ag::Var& images) const {
  Shape expected = config_.input_shape;
  if (images.value().rank() != 4 || Shape(images.shape().begin() + 1, images.shape().end()) != expected) {
    throw ShapeError("autoencoder expects (B, " + fsad::to_string(expected).substr(1) + ", got " +
                     fsad::to_string(images.shape()));
  }
  const bool deep = config_.levels == 2;
  ag::Var h = ag::max_pool2(ag::relu(ag::conv2d(images, enc1_w_, enc1_b_, 1)));
  h = ag::relu(ag::conv2d(h, enc2_w_, enc2_b_, 1));
  if (deep) h = ag::max_pool2(h);
  h = ag::relu(ag::conv2d(deep ? ag::upsample2(h) : h, dec1_w_, dec1_b_, 1));
  return ag::sigmoid(ag::conv2d(ag::upsample2(h), dec2_w_, dec2_b_, 1));
}

Tensor Autoencoder::reconstruct(const Tensor& images) const { return reconstruct(ag::Var(images)).value(); }

std::vector<models::NamedVar> Autoencoder::parameters() const {
  return {{"enc1.weight", enc1_w_}, {"enc1.bias", enc1_b_}, {"enc2.weight", enc2_w_}, {"enc2.bias", enc2_b_},
          {"dec1.weight", dec1_w_}, {"dec1.bias", dec1_b_}, {"dec2.weight", dec2_w_}, {"dec2.bias", dec2_b_}};
}

void Autoencoder::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.var.set_requires_grad(trainable);
}

Archive Autoencoder::to_archive() const {
  Archive a("fsad.autoencoder");
  a.meta()["config"] = config_.to_json();
  a.meta()["loss_variant"] = to_string(variant_);
  a.meta()["paired_model_hash"] = paired_model_hash_;
  a.meta()["trained"] = trained_;
  for (const auto& p : parameters()) a.put("param/" + p.name, p.var.value());
  return a;
}

Autoencoder Autoencoder::from_archive(const Archive& a) {
  if (a.kind() != "fsad.autoencoder") throw ArchiveError("archive is not an autoencoder checkpoint: " + a.kind());
  Autoencoder m(AutoencoderConfig::from_json(a.meta().at("config")));
  m.variant_ = variant_from_string(a.meta().at("loss_variant").get<std::string>());
  m.paired_model_hash_ = a.meta().at("paired_model_hash").get<std::string>();
  m.trained_ = a.meta().at("trained").get<bool>();
  for (auto& p : m.parameters()) {
    const Tensor& t = a.get("param/" + p.name);
    require_shape(t, p.var.shape(), "autoencoder parameter " + p.name);
    p.var.mutable_value() = t;
  }
  m.set_trainable(false);
  return m;
}

std::string Autoencoder::hash() const { return sha256_hex(to_archive().serialize()); }

Filter Filter::identity() { return Filter(FilterKind::identity, nullptr); }
Filter Filter::noise() { return Filter(FilterKind::noise, nullptr); }
Filter Filter::median() { return Filter(FilterKind::median_2x2, nullptr); }

Filter Filter::autoencoder(std::shared_ptr<const Autoencoder> model) {
  if (!model) throw FilterError("autoencoder filter needs a model");
  if (!model->trained()) throw FilterError(to_string(model->variant()) + " filter has untrained weights");
  const FilterKind kind = filter_kind(model->variant());
  return Filter(kind, std::move(model));
}

Tensor Filter::apply(const Tensor& support, std::uint64_t seed) const {
  if (support.rank() != 4 || support.dim(0) < 1) {
    throw FilterError("filter input must be a non-empty (B, C, H, W) support, got " + fsad::to_string(support.shape()));
  }
  switch (kind_) {
    case FilterKind::identity: return support;
    case FilterKind::noise: return channel_noise(support, seed);
    case FilterKind::median_2x2: return median_filter_2x2(support);
    default: return ae_->reconstruct(support);
  }
}

ag::Var reconstruction_mse(const ag::Var& x, const ag::Var& x_hat) {
  check_same(x, x_hat, "image");
  return ag::scale(ag::sum_squares(ag::sub(x_hat, x)), 1.0 / static_cast<double>(x.value().size()));
}

ag::Var fpa_objective(const ag::Var& x, const ag::Var& x_hat, const ag::Var& f, const ag::Var& f_hat,
                      const ag::Var* z, const ag::Var* z_hat) {
  check_same(x, x_hat, "image");
  check_same(f, f_hat, "feature");
  if (x.shape()[0] != f.shape()[0]) throw ShapeError("fpa objective: image and feature batch sizes differ");
  ag::Var loss = ag::add(scaled_sq_error(x_hat, x, 0.01), scaled_sq_error(f_hat, f, 1.0));
  if ((z == nullptr) != (z_hat == nullptr)) throw std::invalid_argument("fpa objective: logits must come in pairs");
  if (z != nullptr) {
    check_same(*z, *z_hat, "logit");
    if (z->shape()[0] != x.shape()[0]) throw ShapeError("fpa objective: image and logit batch sizes differ");
    loss = ag::add(loss, scaled_sq_error(*z_hat, *z, 1.0));
  }
  return loss;
}

nlohmann::json AutoencoderTrainConfig::to_json() const {
  return {{"pretrain_epochs", pretrain_epochs}, {"finetune_epochs", finetune_epochs}, {"batch_size", batch_size},
          {"pretrain_lr", pretrain_lr},         {"finetune_lr", finetune_lr},         {"weight_decay", weight_decay},
          {"lr_step", lr_step},                 {"lr_gamma", lr_gamma},               {"ways", ways},
          {"shots", shots},                     {"seed", seed}};
}

namespace {

struct ImageRef {
  int cls;
  int index;
};

std::vector<ImageRef> all_images(const data::Dataset& ds) {
  std::vector<ImageRef> out;
  for (int c = 0; c < ds.num_classes(); ++c) {
    for (int i = 0; i < ds.count(c); ++i) out.push_back({c, i});
  }
  return out;
}

Tensor gather_images(const data::Dataset& ds, std::span<const ImageRef> refs) {
  std::vector<Tensor> items;
  items.reserve(refs.size());
  for (const auto& r : refs) items.push_back(ds.image(r.cls, r.index));
  return stack(items);
}

class Objective {
 public:
  Objective(const models::FewShotModel& few_shot, const data::Dataset& reference_pool, LossVariant variant,
            const AutoencoderTrainConfig& cfg)
      : model_(few_shot), pool_(reference_pool), variant_(variant), cfg_(cfg) {}

  // `key` picks the reference episode for the logits term.
  ag::Var operator()(const Autoencoder& ae, const Tensor& batch, std::uint64_t key) const {
    ag::Var x(batch);
    ag::Var x_hat = ae.reconstruct(x);
    if (variant_ == LossVariant::standard_ae) return reconstruction_mse(x, x_hat);
    ag::Var f(model_.encode(batch));
    ag::Var f_hat = model_.encode(x_hat);
    if (variant_ == LossVariant::fpa) return fpa_objective(x, x_hat, f, f_hat);
    const data::Episode ref = data::sample_episode(pool_, cfg_.ways, cfg_.shots, cfg_.ways, key);
    ag::Var support_features(model_.encode(ref.support));
    ag::Var z(model_.head_logits(support_features, cfg_.ways, cfg_.shots, f).value());
    ag::Var z_hat = model_.head_logits(support_features, cfg_.ways, cfg_.shots, f_hat);
    return fpa_objective(x, x_hat, f, f_hat, &z, &z_hat);
  }

 private:
  const models::FewShotModel& model_;
  const data::Dataset& pool_;
  LossVariant variant_;
  const AutoencoderTrainConfig& cfg_;
};

double validation_loss(const Objective& objective, const Autoencoder& ae, const data::Dataset& val,
                       const std::vector<ImageRef>& refs, int batch_size, std::uint64_t seed) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0, b = 0; start < refs.size(); start += static_cast<std::size_t>(batch_size), ++b) {
    const std::size_t end = std::min(refs.size(), start + static_cast<std::size_t>(batch_size));
    const Tensor batch = gather_images(val, std::span(refs).subspan(start, end - start));
    const double loss = objective(ae, batch, derive_seed(seed, {0x7a1, b})).value()[0];
    total += loss * static_cast<double>(end - start);
    count += end - start;
  }
  return total / static_cast<double>(count);
}

void run_phase(Autoencoder& ae, const Objective& objective, const data::Dataset& train, const data::Dataset& val,
               const AutoencoderTrainConfig& cfg, const std::string& phase, int epochs, double base_lr,
               std::vector<AeEpochRecord>& history, const AeEpochCallback& on_epoch) {
  if (epochs <= 0) return;
  std::vector<ImageRef> train_refs = all_images(train);
  const std::vector<ImageRef> val_refs = all_images(val);
  if (train_refs.empty() || val_refs.empty()) throw FilterError("autoencoder training needs non-empty train and val data");
  const std::uint64_t phase_seed = derive_seed(cfg.seed, {phase == "pretrain" ? 1ULL : 2ULL});
  ae.set_trainable(true);
  std::vector<ag::Var> params;
  for (auto& p : ae.parameters()) params.push_back(p.var);
  Adam opt(params, AdamOptions{base_lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(phase_seed);

  ae.set_trainable(false);
  double best = validation_loss(objective, ae, val, val_refs, cfg.batch_size, phase_seed);
  Autoencoder best_model = ae;
  ae.set_trainable(true);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    opt.set_learning_rate(step_decay(base_lr, epoch, cfg.lr_step, cfg.lr_gamma));
    std::shuffle(train_refs.begin(), train_refs.end(), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, b = 0; start < train_refs.size(); start += static_cast<std::size_t>(cfg.batch_size), ++b) {
      const std::size_t end = std::min(train_refs.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Tensor batch = gather_images(train, std::span(train_refs).subspan(start, end - start));
      opt.zero_grad();
      ag::Var loss = objective(ae, batch, derive_seed(phase_seed, {static_cast<std::uint64_t>(epoch), b}));
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw AeTrainingDiverged("autoencoder " + phase + " loss is " + std::to_string(value) + " at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      ag::backward(loss);
      opt.step();
      total += value * static_cast<double>(end - start);
      seen += end - start;
    }
    ae.set_trainable(false);
    const double val_loss = validation_loss(objective, ae, val, val_refs, cfg.batch_size, phase_seed);
    ae.set_trainable(true);
    AeEpochRecord rec{phase, epoch, total / static_cast<double>(seen), val_loss, best, false};
    if (val_loss < best) {
      best = val_loss;
      best_model = ae;
      rec.improved = true;
    }
    rec.best_val_loss = best;
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  ae = best_model;
  ae.set_trainable(false);
}

}  // namespace

AeTrainResult train_autoencoder(const data::Dataset& train, const data::Dataset& val,
                                const models::FewShotModel& few_shot, LossVariant variant,
                                const AutoencoderConfig& ae_config, const AutoencoderTrainConfig& cfg,
                                const Autoencoder* pretrained, const AeEpochCallback& on_epoch) {
  if (cfg.batch_size < 1) throw std::invalid_argument("autoencoder batch_size must be >= 1");
  if (!few_shot.frozen()) throw FilterError("the few-shot model must be frozen before autoencoder training");
  if (train.image_shape() != ae_config.input_shape) {
    throw ShapeError("autoencoder input shape " + fsad::to_string(ae_config.input_shape) + " differs from data shape " +
                     fsad::to_string(train.image_shape()));
  }
  AeTrainResult result{pretrained ? *pretrained : Autoencoder(ae_config), {}};
  Autoencoder& ae = result.model;
  if (pretrained && pretrained->variant() != LossVariant::standard_ae) {
    throw FilterError("fine-tuning must start from a standard autoencoder, got " + to_string(pretrained->variant()));
  }
  if (!pretrained) {
    const Objective mse(few_shot, train, LossVariant::standard_ae, cfg);
    run_phase(ae, mse, train, val, cfg, "pretrain", cfg.pretrain_epochs, cfg.pretrain_lr, result.history, on_epoch);
  }
  if (variant != LossVariant::standard_ae) {
    const Objective objective(few_shot, train, variant, cfg);
    run_phase(ae, objective, train, val, cfg, "finetune", cfg.finetune_epochs, cfg.finetune_lr, result.history,
              on_epoch);
  }
  ae.set_variant(variant);
  ae.set_paired_model_hash(few_shot.hash());
  ae.mark_trained();
  ae.set_trainable(false);
  return result;
}

}  // namespace fsad::filters
