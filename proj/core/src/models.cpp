#include "fsad/models.hpp"

#include <algorithm>
#include <cmath>

#include "fsad/optim.hpp"
#include "fsad/random.hpp"

namespace fsad::models {
namespace {

ag::Var he_normal(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : t.values()) v = dist(rng);
  return ag::Var(std::move(t), true);
}

ConvBlock make_block(int in_ch, int out_ch, bool pool, Rng& rng) {
  ConvBlock b;
  b.weight = he_normal({out_ch, in_ch, 3, 3}, in_ch * 9, rng);
  b.bias = ag::Var(Tensor({out_ch}, 0.0), true);
  b.gamma = ag::Var(Tensor({out_ch}, 1.0), true);
  b.beta = ag::Var(Tensor({out_ch}, 0.0), true);
  b.stats = {Tensor({out_ch}, 0.0), Tensor({out_ch}, 1.0)};
  b.pool = pool;
  return b;
}

ag::Var deep(const ag::Var& v) { return v.defined() ? ag::Var(v.value(), v.requires_grad()) : ag::Var(); }

ConvBlock deep(const ConvBlock& b) {
  ConvBlock c;
  c.weight = deep(b.weight);
  c.bias = deep(b.bias);
  c.gamma = deep(b.gamma);
  c.beta = deep(b.beta);
  c.stats = b.stats;
  c.pool = b.pool;
  return c;
}

}  // namespace

std::string to_string(HeadKind kind) { return kind == HeadKind::relation ? "relation" : "cross_attention"; }

HeadKind head_from_string(const std::string& name) {
  if (name == "relation" || name == "rn") return HeadKind::relation;
  if (name == "cross_attention" || name == "can") return HeadKind::cross_attention;
  throw std::invalid_argument("unknown head kind '" + name + "' (expected relation or cross_attention)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"head", to_string(head)},
          {"input_shape", input_shape},
          {"channels", channels},
          {"pooled_blocks", pooled_blocks},
          {"relation_channels", relation_channels},
          {"relation_hidden", relation_hidden},
          {"init_temperature", init_temperature},
          {"init_attention_scale", init_attention_scale},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.head = head_from_string(j.at("head").get<std::string>());
  c.input_shape = j.at("input_shape").get<Shape>();
  c.channels = j.at("channels").get<int>();
  c.pooled_blocks = j.at("pooled_blocks").get<int>();
  c.relation_channels = j.at("relation_channels").get<int>();
  c.relation_hidden = j.at("relation_hidden").get<int>();
  c.init_temperature = j.at("init_temperature").get<double>();
  c.init_attention_scale = j.at("init_attention_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

ag::Var ConvBlock::apply(const ag::Var& x, bool training) const {
  ag::Var h = ag::conv2d(x, weight, bias, 1);
  h = training ? ag::batch_norm(h, gamma, beta, stats, true) : ag::batch_norm_eval(h, gamma, beta, stats);
  h = ag::relu(h);
  return pool ? ag::max_pool2(h) : h;
}

FewShotModel::FewShotModel(const ModelConfig& config) : config_(config) {
  if (config_.input_shape.size() != 3) throw ShapeError("input shape must be (C, H, W)");
  if (config_.channels <= 0 || config_.relation_channels <= 0 || config_.relation_hidden <= 0) {
    throw std::invalid_argument("model widths must be positive");
  }
  if (config_.pooled_blocks < 0 || config_.pooled_blocks > 4) throw std::invalid_argument("pooled_blocks in [0, 4]");
  Rng rng(derive_seed(config_.seed, {0x6d6f64656cULL}));
  int ch = config_.input_shape[0], h = config_.input_shape[1], w = config_.input_shape[2];
  for (int i = 0; i < 4; ++i) {
    const bool pool = i < config_.pooled_blocks;
    encoder_.push_back(make_block(ch, config_.channels, pool, rng));
    ch = config_.channels;
    if (pool) {
      h /= 2;
      w /= 2;
      if (h == 0 || w == 0) throw ShapeError("input " + fsad::to_string(config_.input_shape) + " too small for pooling");
    }
  }
  feature_shape_ = {ch, h, w};

  if (config_.head == HeadKind::relation) {
    int rh = h, rw = w, rch = 2 * ch;
    for (int i = 0; i < 2; ++i) {
      const bool pool = rh >= 2 && rw >= 2;
      relation_blocks_.push_back(make_block(rch, config_.relation_channels, pool, rng));
      rch = config_.relation_channels;
      if (pool) {
        rh /= 2;
        rw /= 2;
      }
    }
    const int flat = rch * rh * rw;
    fc1_w_ = he_normal({config_.relation_hidden, flat}, flat, rng);
    fc1_b_ = ag::Var(Tensor({config_.relation_hidden}, 0.0), true);
    fc2_w_ = he_normal({1, config_.relation_hidden}, config_.relation_hidden, rng);
    fc2_b_ = ag::Var(Tensor({1}, 0.0), true);
  } else {
    attention_scale_ = ag::Var(Tensor({1}, config_.init_attention_scale), true);
    temperature_ = ag::Var(Tensor({1}, config_.init_temperature), true);
  }
}

FewShotModel::FewShotModel(const FewShotModel& other)
    : config_(other.config_), feature_shape_(other.feature_shape_), train_config_hash_(other.train_config_hash_) {
  for (const auto& b : other.encoder_) encoder_.push_back(deep(b));
  for (const auto& b : other.relation_blocks_) relation_blocks_.push_back(deep(b));
  fc1_w_ = deep(other.fc1_w_);
  fc1_b_ = deep(other.fc1_b_);
  fc2_w_ = deep(other.fc2_w_);
  fc2_b_ = deep(other.fc2_b_);
  attention_scale_ = deep(other.attention_scale_);
  temperature_ = deep(other.temperature_);
}

FewShotModel& FewShotModel::operator=(const FewShotModel& other) {
  if (this != &other) *this = FewShotModel(other);
  return *this;
}

ag::Var FewShotModel::encode_impl(const ag::Var& images, bool training) const {
  Shape expected = config_.input_shape;
  if (images.value().rank() != 4 || Shape(images.shape().begin() + 1, images.shape().end()) != expected) {
    throw ShapeError("encoder expects images of shape (B, " + fsad::to_string(expected).substr(1) + ", got " +
                     fsad::to_string(images.shape()));
  }
  ag::Var h = images;
  for (const auto& b : encoder_) h = b.apply(h, training);
  return h;
}

ag::Var FewShotModel::encode(const ag::Var& images, Mode mode) { return encode_impl(images, mode == Mode::train); }
ag::Var FewShotModel::encode(const ag::Var& images) const { return encode_impl(images, false); }
Tensor FewShotModel::encode(const Tensor& images) const { return encode_impl(ag::Var(images), false).value(); }

ag::Var FewShotModel::head_impl(const ag::Var& support_features, int ways, int shots, const ag::Var& query_features,
                                bool training) const {
  if (support_features.value().rank() != 4 || support_features.shape()[0] != ways * shots) {
    throw ShapeError("support features " + fsad::to_string(support_features.shape()) + " inconsistent with " +
                     std::to_string(ways) + "-way " + std::to_string(shots) + "-shot");
  }
  ag::Var protos = shots == 1 ? support_features : ag::group_mean(support_features, ways);
  const int nq = query_features.shape()[0];
  if (config_.head == HeadKind::cross_attention) {
    return ag::cross_attention_logits(protos, query_features, attention_scale_, temperature_);
  }
  ag::Var h = ag::pair_concat(protos, query_features);
  for (const auto& b : relation_blocks_) h = b.apply(h, training);
  const int rows = h.shape()[0];
  h = ag::reshape(h, {rows, static_cast<int>(h.value().item_size())});
  h = ag::relu(ag::linear(h, fc1_w_, fc1_b_));
  h = ag::linear(h, fc2_w_, fc2_b_);
  return ag::reshape(h, {nq, ways});
}

ag::Var FewShotModel::head_logits(const ag::Var& s, int ways, int shots, const ag::Var& q, Mode mode) {
  return head_impl(s, ways, shots, q, mode == Mode::train);
}

ag::Var FewShotModel::head_logits(const ag::Var& s, int ways, int shots, const ag::Var& q) const {
  return head_impl(s, ways, shots, q, false);
}

void FewShotModel::check_support(const ag::Var& support, int ways, int shots) const {
  if (ways < 1 || shots < 1 || support.value().rank() != 4 || support.shape()[0] != ways * shots) {
    throw ShapeError("support of shape " + fsad::to_string(support.shape()) + " is not " + std::to_string(ways) +
                     "-way " + std::to_string(shots) + "-shot");
  }
}

ag::Var FewShotModel::classify(const ag::Var& support, int ways, int shots, const ag::Var& queries, Mode mode) {
  check_support(support, ways, shots);
  const bool training = mode == Mode::train;
  return head_impl(encode_impl(support, training), ways, shots, encode_impl(queries, training), training);
}

ag::Var FewShotModel::classify(const ag::Var& support, int ways, int shots, const ag::Var& queries) const {
  check_support(support, ways, shots);
  return head_impl(encode_impl(support, false), ways, shots, encode_impl(queries, false), false);
}

Tensor FewShotModel::classify(const Tensor& support, int ways, int shots, const Tensor& queries) const {
  return classify(ag::Var(support), ways, shots, ag::Var(queries)).value();
}

std::vector<std::pair<std::string, const ConvBlock*>> FewShotModel::blocks() const {
  std::vector<std::pair<std::string, const ConvBlock*>> out;
  for (std::size_t i = 0; i < encoder_.size(); ++i) out.emplace_back("encoder." + std::to_string(i), &encoder_[i]);
  for (std::size_t i = 0; i < relation_blocks_.size(); ++i) {
    out.emplace_back("relation." + std::to_string(i), &relation_blocks_[i]);
  }
  return out;
}

std::vector<NamedVar> FewShotModel::parameters() const {
  std::vector<NamedVar> out;
  for (const auto& [name, b] : blocks()) {
    out.push_back({name + ".weight", b->weight});
    out.push_back({name + ".bias", b->bias});
    out.push_back({name + ".gamma", b->gamma});
    out.push_back({name + ".beta", b->beta});
  }
  if (config_.head == HeadKind::relation) {
    out.push_back({"relation.fc1.weight", fc1_w_});
    out.push_back({"relation.fc1.bias", fc1_b_});
    out.push_back({"relation.fc2.weight", fc2_w_});
    out.push_back({"relation.fc2.bias", fc2_b_});
  } else {
    out.push_back({"attention.scale", attention_scale_});
    out.push_back({"attention.temperature", temperature_});
  }
  return out;
}

void FewShotModel::set_trainable(bool trainable) {
  for (auto& p : parameters()) p.var.set_requires_grad(trainable);
}

bool FewShotModel::frozen() const {
  const auto params = parameters();
  return std::none_of(params.begin(), params.end(), [](const NamedVar& p) { return p.var.requires_grad(); });
}

Archive FewShotModel::to_archive() const {
  Archive a("fsad.model");
  a.meta()["config"] = config_.to_json();
  a.meta()["feature_shape"] = feature_shape_;
  a.meta()["train_config_hash"] = train_config_hash_;
  for (const auto& p : parameters()) a.put("param/" + p.name, p.var.value());
  for (const auto& [name, b] : blocks()) {
    a.put("buffer/" + name + ".running_mean", b->stats.mean);
    a.put("buffer/" + name + ".running_var", b->stats.var);
  }
  return a;
}

FewShotModel FewShotModel::from_archive(const Archive& a) {
  if (a.kind() != "fsad.model") throw ArchiveError("archive is not a few-shot model: " + a.kind());
  FewShotModel m(ModelConfig::from_json(a.meta().at("config")));
  m.train_config_hash_ = a.meta().value("train_config_hash", "");
  for (auto& p : m.parameters()) {
    const Tensor& t = a.get("param/" + p.name);
    require_shape(t, p.var.shape(), "checkpoint parameter " + p.name);
    p.var.mutable_value() = t;
  }
  for (const auto& [name, b] : m.blocks()) {
    b->stats.mean = a.get("buffer/" + name + ".running_mean");
    b->stats.var = a.get("buffer/" + name + ".running_var");
  }
  m.set_trainable(false);
  return m;
}

std::string FewShotModel::hash() const { return sha256_hex(to_archive().serialize()); }

nlohmann::json TrainConfig::to_json() const {
  return {{"episodes_per_epoch", episodes_per_epoch},
          {"epochs", epochs},
          {"ways", ways},
          {"shots", shots},
          {"queries_per_class", queries_per_class},
          {"learning_rate", learning_rate},
          {"val_episodes", val_episodes},
          {"seed", seed}};
}

std::string TrainConfig::hash() const { return sha256_hex(to_json().dump()); }

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows expects (B, K) logits");
  const int rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const double* row = logits.ptr() + static_cast<std::size_t>(r) * cols;
    out[r] = static_cast<int>(std::max_element(row, row + cols) - row);
  }
  return out;
}

namespace {

double accuracy_of(const Tensor& logits, const std::vector<int>& labels) {
  const std::vector<int> pred = argmax_rows(logits);
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return pred.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace

TrainResult train_episodic(FewShotModel model, const data::Dataset& train, const data::Dataset& val,
                           const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs < 0 || cfg.episodes_per_epoch <= 0 || cfg.ways <= 0 || cfg.shots <= 0 ||
      cfg.queries_per_class <= 0 || cfg.learning_rate <= 0 || cfg.val_episodes <= 0) {
    throw std::invalid_argument("train config values must be positive");
  }
  TrainResult result{model, {}, -1, 0.0};
  if (cfg.epochs == 0) return result;

  model.set_trainable(true);
  std::vector<ag::Var> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  Adam adam(params, AdamOptions{.learning_rate = cfg.learning_rate});
  const int queries = cfg.queries_per_class * cfg.ways;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0, acc_sum = 0.0;
    for (int e = 0; e < cfg.episodes_per_epoch; ++e) {
      const auto ep = data::sample_episode(
          train, cfg.ways, cfg.shots, queries,
          derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(e)}));
      adam.zero_grad();
      ag::Var logits = model.classify(ag::Var(ep.support), cfg.ways, cfg.shots, ag::Var(ep.query), Mode::train);
      ag::Var loss = ag::cross_entropy(logits, ep.query_labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("training diverged: loss is " + std::to_string(lv) + " at epoch " +
                               std::to_string(epoch) + ", episode " + std::to_string(e) +
                               " (try a smaller learning rate)");
      }
      ag::backward(loss);
      adam.step();
      loss_sum += lv;
      acc_sum += accuracy_of(logits.value(), ep.query_labels);
    }
    model.set_trainable(false);
    const auto val_report = evaluate_accuracy(model, val, cfg.val_episodes, cfg.ways, cfg.shots, queries,
                                              derive_seed(cfg.seed, {2}));
    model.set_trainable(true);
    EpochRecord rec{epoch, loss_sum / cfg.episodes_per_epoch, acc_sum / cfg.episodes_per_epoch, val_report.mean};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (result.best_epoch < 0 || rec.val_accuracy > result.best_val_accuracy) {
      result.best_epoch = epoch;
      result.best_val_accuracy = rec.val_accuracy;
      result.model = model;
    }
  }
  result.model.set_trainable(false);
  result.model.set_train_config_hash(cfg.hash());
  return result;
}

AccuracyReport evaluate_accuracy(const EpisodeLogits& logits, const data::Dataset& ds, int n_episodes, int ways,
                                 int shots, int queries, std::uint64_t seed) {
  if (n_episodes <= 0) throw std::invalid_argument("n_episodes must be positive");
  AccuracyReport report;
  for (int i = 0; i < n_episodes; ++i) {
    const auto ep = data::sample_episode(ds, ways, shots, queries, derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    report.per_episode.push_back(accuracy_of(logits(ep), ep.query_labels));
  }
  const Summary s = summarize(report.per_episode);
  report.mean = s.mean;
  report.half_width = s.ci95_half_width();
  return report;
}

AccuracyReport evaluate_accuracy(const FewShotModel& model, const data::Dataset& ds, int n_episodes, int ways,
                                 int shots, int queries, std::uint64_t seed) {
  return evaluate_accuracy(
      [&model](const data::Episode& ep) { return model.classify(ep.support, ep.ways, ep.shots, ep.query); }, ds,
      n_episodes, ways, shots, queries, seed);
}

}  // namespace fsad::models
