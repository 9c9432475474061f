#pragma once

// Image-to-parameters regressor: a strided convolutional trunk with a dense
// head, trained on range-normalized targets, plus transfer learning that
// retrains only the final affine layer.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fluxfit/dataset.hpp"
#include "fluxfit/errors.hpp"
#include "fluxfit/nn.hpp"

namespace fluxfit {

struct ConvBlock {
  int channels = 16;
  int kernel = 3;
  int stride = 2;
  friend bool operator==(const ConvBlock&, const ConvBlock&) = default;
};

struct ModelConfig {
  int input_rows = 256;  ///< frequency bins of the raster
  int input_cols = 256;  ///< flux bins of the raster
  int input_pool = 4;    ///< max-pool factor applied to the raster before the trunk
  std::vector<ConvBlock> conv_blocks{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}, {128, 3, 2}};
  std::vector<int> head_widths{64};
  int output_dim = 3;
  std::uint64_t seed = 1;

  int pooled_rows() const { return input_rows / input_pool; }
  int pooled_cols() const { return input_cols / input_pool; }

  void validate() const {
    if (output_dim != 3) throw ConfigError("output_dim must be 3");
    if (head_widths.empty()) throw ConfigError("the head needs at least one hidden layer");
    if (input_pool < 1 || input_rows % input_pool != 0 || input_cols % input_pool != 0)
      throw ConfigError("input_pool must divide both input dimensions");
    if (pooled_rows() < 1 || pooled_cols() < 1) throw ConfigError("input dimensions must be positive");
    for (const auto& b : conv_blocks)
      if (b.channels < 1 || b.kernel < 1 || b.kernel % 2 == 0 || b.stride < 1)
        throw ConfigError("conv blocks need positive channels and stride and an odd kernel");
    for (int w : head_widths)
      if (w < 1) throw ConfigError("head widths must be positive");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline std::vector<nn::LayerSpec> build_layers(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<nn::LayerSpec> layers;
  int c = 1, h = cfg.pooled_rows(), w = cfg.pooled_cols();
  for (const auto& b : cfg.conv_blocks) {
    nn::LayerSpec s;
    s.kind = nn::LayerKind::conv;
    s.conv = nn::conv_geometry(c, h, w, b.channels, b.kernel, b.stride);
    s.in = s.conv.in_size();
    s.out = s.conv.out_size();
    layers.push_back(s);
    c = s.conv.out_c;
    h = s.conv.out_h;
    w = s.conv.out_w;
  }
  int width = c * h * w;
  for (int hw : cfg.head_widths) {
    layers.push_back({nn::LayerKind::dense, {}, width, hw, true});
    width = hw;
  }
  layers.push_back({nn::LayerKind::dense, {}, width, cfg.output_dim, false});
  return layers;
}

enum class Stage : std::uint32_t { pretrained = 0, fine_tuned = 1 };

inline std::string to_string(Stage s) { return s == Stage::pretrained ? "pretrained" : "fine_tuned"; }

struct TrainingProvenance {
  Stage stage = Stage::pretrained;
  int epochs = 0;
  double final_loss = 0.0;
};

struct TrainedModel {
  ModelConfig config;
  ParamRanges target_normalization;
  TrainingProvenance provenance;
  std::vector<double> train_loss;  ///< index 0 is the loss before the first update
  std::vector<double> val_loss;
  nn::Params<float> params;

  nn::Network<float> network() const { return nn::Network<float>(build_layers(config)); }
};

enum class LrPolicy { adaptive_default, fixed };
enum class LossScale { range_normalized, raw_ghz };

inline LrPolicy parse_lr_policy(const std::string& s) {
  if (s == "adaptive" || s == "adaptive_default") return LrPolicy::adaptive_default;
  if (s == "fixed") return LrPolicy::fixed;
  throw ConfigError("unknown lr policy '" + s + "' (expected adaptive or fixed)");
}

inline LossScale parse_loss_scale(const std::string& s) {
  if (s == "normalized" || s == "range_normalized") return LossScale::range_normalized;
  if (s == "raw_ghz" || s == "raw") return LossScale::raw_ghz;
  throw ConfigError("unknown loss scale '" + s + "' (expected normalized or raw_ghz)");
}

struct TrainConfig {
  int batch_size = 32;
  int max_epochs = 60;
  int patience = 10;
  /// adaptive_default: Adam at learning_rate, halved after a stretch of
  /// epochs without validation improvement. fixed: Adam at learning_rate.
  LrPolicy lr_policy = LrPolicy::adaptive_default;
  double learning_rate = 1e-3;
  double validation_fraction = 0.1;
  std::uint64_t seed = 1;
  bool early_stopping = true;  ///< restore the best-validation parameters
  LossScale loss_scale = LossScale::range_normalized;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be non-negative");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (!(validation_fraction > 0.0 && validation_fraction <= 0.5))
      throw ConfigError("validation_fraction must lie in (0, 0.5]");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  }
};

struct Prediction {
  QubitParams params;
  bool clamped = false;
};

struct AccReport {
  double acc_e_c = 0.0;
  double acc_e_l = 0.0;
  double acc_e_j = 0.0;
  double mean_acc = 0.0;
  std::size_t n_test = 0;
  ParamRanges ranges_used;
};

// ---------------------------------------------------------------------------
// Inputs and targets

/// Max-pooled raster as one input column (channel-fastest layout, single channel).
inline nn::Vector<float> encode_input(const RasterGrid& grid, const ModelConfig& cfg) {
  if (grid.rows != cfg.input_rows || grid.cols != cfg.input_cols)
    throw ShapeError("grid is " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + ", model expects " +
                     std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols));
  const int p = cfg.input_pool, h = cfg.pooled_rows(), w = cfg.pooled_cols();
  nn::Vector<float> out(static_cast<Eigen::Index>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float m = 0.0f;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) m = std::max(m, grid.at(y * p + dy, x * p + dx));
      out[y * w + x] = m;
    }
  return out;
}

inline nn::Vector<float> normalize_target(const QubitParams& p, const ParamRanges& r) {
  nn::Vector<float> t(3);
  for (int a = 0; a < 3; ++a) t[a] = static_cast<float>((component(p, a) - r.axis(a).lo) / r.axis(a).width());
  return t;
}

struct EncodedSet {
  nn::Matrix<float> x;
  nn::Matrix<float> y;
};

inline EncodedSet encode_entries(const std::vector<DatasetEntry>& entries, const ModelConfig& cfg,
                                 const ParamRanges& ranges) {
  EncodedSet s;
  const auto n = static_cast<Eigen::Index>(entries.size());
  s.x.resize(static_cast<Eigen::Index>(cfg.pooled_rows()) * cfg.pooled_cols(), n);
  s.y.resize(3, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s.x.col(i) = encode_input(entries[i].grid, cfg);
    s.y.col(i) = normalize_target(entries[i].params, ranges);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Loss

/// Per-axis loss weights: 1 on normalized targets, or range^2 for the raw-GHz form.
inline nn::Vector<float> loss_weights(const ParamRanges& r, LossScale scale) {
  nn::Vector<float> w = nn::Vector<float>::Ones(3);
  if (scale == LossScale::raw_ghz)
    for (int a = 0; a < 3; ++a) w[a] = static_cast<float>(r.axis(a).width() * r.axis(a).width());
  return w;
}

/// Mean over samples and components of w_a (out - target)^2, and its gradient.
template <typename T>
double mse_loss(const nn::Matrix<T>& out, const nn::Matrix<T>& target, const nn::Vector<T>& w,
                nn::Matrix<T>* grad = nullptr) {
  const nn::Matrix<T> diff = out - target;
  const double denom = static_cast<double>(diff.size());
  const double loss = (w.asDiagonal() * diff.cwiseProduct(diff)).template cast<double>().sum() / denom;
  if (grad) *grad = (T(2.0 / denom) * (w.asDiagonal() * diff)).eval();
  return loss;
}

template <typename T>
nn::Matrix<T> forward_chunked(const nn::Network<T>& net, const nn::Params<T>& p, const nn::Matrix<T>& x,
                              std::size_t stop_before = static_cast<std::size_t>(-1), Eigen::Index chunk = 128) {
  const std::size_t last = std::min(stop_before, net.depth());
  const int width = last == 0 ? net.input_size() : net.layers()[last - 1].out;
  nn::Matrix<T> out(width, x.cols());
  for (Eigen::Index s = 0; s < x.cols(); s += chunk) {
    const Eigen::Index n = std::min(chunk, x.cols() - s);
    out.middleCols(s, n) = net.forward(p, x.middleCols(s, n), nullptr, stop_before);
  }
  return out;
}

namespace detail {

inline nn::Matrix<float> gather(const nn::Matrix<float>& m, const std::vector<std::size_t>& idx) {
  nn::Matrix<float> out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[i]));
  return out;
}

struct LoopResult {
  std::vector<double> train_loss, val_loss;
  int epochs = 0;
  double final_loss = 0.0;
};

/// Mini-batch Adam over all layers from `first_layer` on, with seeded
/// shuffling and validation-based early stopping.
inline LoopResult train_loop(const nn::Network<float>& net, nn::Params<float>& params, const EncodedSet& data,
                             const nn::Vector<float>& w, const TrainConfig& tcfg, std::size_t first_layer) {
  const auto n = static_cast<std::size_t>(data.x.cols());
  auto [train_idx, val_idx] = split_indices(n, tcfg.validation_fraction, tcfg.seed);
  if (val_idx.empty()) val_idx = train_idx;
  const nn::Matrix<float> x_val = gather(data.x, val_idx), y_val = gather(data.y, val_idx);
  const nn::Matrix<float> x_tr = gather(data.x, train_idx), y_tr = gather(data.y, train_idx);

  auto eval = [&](const nn::Matrix<float>& x, const nn::Matrix<float>& y) {
    return mse_loss<float>(forward_chunked(net, params, x), y, w);
  };

  LoopResult res;
  res.train_loss.push_back(eval(x_tr, y_tr));
  res.val_loss.push_back(eval(x_val, y_val));
  double best = res.val_loss.back();
  nn::Params<float> best_params = params;
  int since_best = 0;
  double lr = tcfg.learning_rate;
  const int decay_every = std::max(2, tcfg.patience / 3);

  nn::AdamState<float> adam(params);
  std::mt19937_64 rng(tcfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(train_idx.size());
  nn::ForwardCache<float> cache;
  nn::Matrix<float> grad;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    double sum = 0.0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(tcfg.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(tcfg.batch_size));
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(s),
                                           order.begin() + static_cast<std::ptrdiff_t>(e));
      const nn::Matrix<float> xb = gather(x_tr, batch), yb = gather(y_tr, batch);
      const nn::Matrix<float> out = net.forward(params, xb, &cache);
      const double loss = mse_loss<float>(out, yb, w, &grad);
      if (!std::isfinite(loss)) throw TrainingDivergenceError(epoch, "non-finite training loss");
      sum += loss * static_cast<double>(batch.size());
      adam.apply(params, net.backward(params, cache, grad, first_layer), lr, first_layer);
    }
    res.train_loss.push_back(sum / static_cast<double>(order.size()));
    const double val = eval(x_val, y_val);
    if (!std::isfinite(val)) throw TrainingDivergenceError(epoch, "non-finite validation loss");
    res.val_loss.push_back(val);
    res.epochs = epoch;

    if (val < best) {
      best = val;
      best_params = params;
      since_best = 0;
    } else {
      ++since_best;
      if (tcfg.early_stopping && since_best >= tcfg.patience) break;
      if (tcfg.lr_policy == LrPolicy::adaptive_default && since_best % decay_every == 0) lr *= 0.5;
    }
  }
  if (tcfg.early_stopping) {
    params = std::move(best_params);
    res.final_loss = best;
  } else {
    res.final_loss = res.val_loss.back();
  }
  return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training

inline TrainedModel pretrain(const ModelConfig& cfg, const std::vector<DatasetEntry>& entries,
                             const ParamRanges& ranges, const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  ranges.validate();
  if (entries.empty()) throw ConfigError("pretraining dataset is empty");
  TrainedModel model;
  model.config = cfg;
  model.target_normalization = ranges;
  const auto net = model.network();
  model.params = net.initial_params(cfg.seed);
  const auto data = encode_entries(entries, cfg, ranges);
  auto res = detail::train_loop(net, model.params, data, loss_weights(ranges, tcfg.loss_scale), tcfg, 0);
  model.train_loss = std::move(res.train_loss);
  model.val_loss = std::move(res.val_loss);
  model.provenance = {Stage::pretrained, res.epochs, res.final_loss};
  return model;
}

inline TrainedModel pretrain(const ModelConfig& cfg, const Dataset& ds, const TrainConfig& tcfg) {
  return pretrain(cfg, ds.entries, ds.manifest.ranges, tcfg);
}

/// Retrains the final affine layer only; every other parameter is left untouched.
inline TrainedModel fine_tune(const TrainedModel& model, const std::vector<DatasetEntry>& entries,
                              const TrainConfig& tcfg) {
  tcfg.validate();
  if (entries.empty()) throw ConfigError("fine-tuning dataset is empty");
  if (tcfg.max_epochs == 0) return model;
  if (model.provenance.stage == Stage::fine_tuned)
    std::clog << "warning: fine-tuning a model that is already fine-tuned\n";

  const auto net = model.network();
  const std::size_t last = net.depth() - 1;
  const auto data = encode_entries(entries, model.config, model.target_normalization);
  EncodedSet features{forward_chunked(net, model.params, data.x, last), data.y};

  const nn::Network<float> head({net.layers()[last]});
  nn::Params<float> head_params;
  head_params.weights.push_back(model.params.weights[last]);
  head_params.biases.push_back(model.params.biases[last]);
  auto res = detail::train_loop(head, head_params, features,
                                loss_weights(model.target_normalization, tcfg.loss_scale), tcfg, 0);

  TrainedModel out = model;
  out.params.weights[last] = std::move(head_params.weights[0]);
  out.params.biases[last] = std::move(head_params.biases[0]);
  out.train_loss = std::move(res.train_loss);
  out.val_loss = std::move(res.val_loss);
  out.provenance = {Stage::fine_tuned, res.epochs, res.final_loss};
  return out;
}

inline TrainedModel fine_tune(const TrainedModel& model, const Dataset& ds, const TrainConfig& tcfg) {
  return fine_tune(model, ds.entries, tcfg);
}

// ---------------------------------------------------------------------------
// Inference and metrics

inline Prediction denormalize(const TrainedModel& model, const float* out) {
  const auto& r = model.target_normalization;
  Prediction pred;
  for (int a = 0; a < 3; ++a) {
    double v = static_cast<double>(out[a]);
    if (!std::isfinite(v)) v = 0.5;
    component(pred.params, a) = r.axis(a).lo + v * r.axis(a).width();
  }
  pred.clamped = clamp_into(pred.params, r.widened(1.25));
  return pred;
}

/// Initial-guess triple for one raster, clamped to 1.25x the training ranges.
inline Prediction predict(const TrainedModel& model, const RasterGrid& grid) {
  const auto net = model.network();
  const nn::Matrix<float> x = encode_input(grid, model.config);
  const nn::Matrix<float> out = net.forward(model.params, x);
  return denormalize(model, out.data());
}

inline std::vector<Prediction> predict(const TrainedModel& model, const std::vector<DatasetEntry>& entries) {
  const auto net = model.network();
  const auto data = encode_entries(entries, model.config, model.target_normalization);
  const nn::Matrix<float> out = forward_chunked(net, model.params, data.x);
  std::vector<Prediction> preds;
  for (Eigen::Index i = 0; i < out.cols(); ++i) preds.push_back(denormalize(model, out.col(i).data()));
  return preds;
}

/// Loss of the model on a dataset under the configured loss scale.
inline double evaluate_loss(const TrainedModel& model, const std::vector<DatasetEntry>& entries,
                            LossScale scale = LossScale::range_normalized) {
  if (entries.empty()) throw ConfigError("evaluation dataset is empty");
  const auto net = model.network();
  const auto data = encode_entries(entries, model.config, model.target_normalization);
  return mse_loss<float>(forward_chunked(net, model.params, data.x), data.y,
                         loss_weights(model.target_normalization, scale));
}

/// Acc(E) = mean over samples of 1 - |pred - true| / R(E), with R the range widths.
inline AccReport accuracy(const std::vector<QubitParams>& preds, const std::vector<QubitParams>& truths,
                          const ParamRanges& ranges = {}) {
  if (preds.size() != truths.size())
    throw ShapeError("accuracy needs equal-length lists (" + std::to_string(preds.size()) + " vs " +
                     std::to_string(truths.size()) + ")");
  if (preds.empty()) throw ShapeError("accuracy needs at least one sample");
  double acc[3] = {0.0, 0.0, 0.0};
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (int a = 0; a < 3; ++a)
      acc[a] += 1.0 - std::abs(component(preds[i], a) - component(truths[i], a)) / ranges.axis(a).width();
  const double n = static_cast<double>(preds.size());
  AccReport r;
  r.acc_e_c = acc[0] / n;
  r.acc_e_l = acc[1] / n;
  r.acc_e_j = acc[2] / n;
  r.mean_acc = (r.acc_e_c + r.acc_e_l + r.acc_e_j) / 3.0;
  r.n_test = preds.size();
  r.ranges_used = ranges;
  return r;
}

// ---------------------------------------------------------------------------
// Model file: "FXNN", u32 version, config, normalization, provenance, loss
// history, then per layer a weight and a bias tensor, each preceded by its
// shape. Everything little-endian; parameters as f32.

inline constexpr std::uint32_t model_schema_version = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) { buf_.append(s); }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  /// Bounded count read, so a corrupt length cannot trigger a huge allocation.
  std::uint32_t count(std::uint32_t max) {
    const auto n = u32();
    if (n > max) fail("implausible count " + std::to_string(n));
    return n;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw SchemaError(source_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated model file");
  }
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const nn::Matrix<float>& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
}

inline void write_tensor(ByteWriter& w, const nn::Vector<float>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f32(v[i]);
}

}  // namespace detail

inline std::string encode_model(const TrainedModel& m) {
  detail::ByteWriter w;
  w.raw("FXNN");
  w.u32(model_schema_version);
  const auto& c = m.config;
  w.u32(static_cast<std::uint32_t>(c.input_rows));
  w.u32(static_cast<std::uint32_t>(c.input_cols));
  w.u32(static_cast<std::uint32_t>(c.input_pool));
  w.u32(static_cast<std::uint32_t>(c.conv_blocks.size()));
  for (const auto& b : c.conv_blocks) {
    w.u32(static_cast<std::uint32_t>(b.channels));
    w.u32(static_cast<std::uint32_t>(b.kernel));
    w.u32(static_cast<std::uint32_t>(b.stride));
  }
  w.u32(static_cast<std::uint32_t>(c.head_widths.size()));
  for (int h : c.head_widths) w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(c.output_dim));
  w.u64(c.seed);
  for (int a = 0; a < 3; ++a) {
    w.f64(m.target_normalization.axis(a).lo);
    w.f64(m.target_normalization.axis(a).hi);
  }
  w.u32(static_cast<std::uint32_t>(m.provenance.stage));
  w.u32(static_cast<std::uint32_t>(m.provenance.epochs));
  w.f64(m.provenance.final_loss);
  for (const auto* hist : {&m.train_loss, &m.val_loss}) {
    w.u32(static_cast<std::uint32_t>(hist->size()));
    for (double v : *hist) w.f64(v);
  }
  w.u32(static_cast<std::uint32_t>(m.params.weights.size()));
  for (std::size_t l = 0; l < m.params.weights.size(); ++l) {
    detail::write_tensor(w, m.params.weights[l]);
    detail::write_tensor(w, m.params.biases[l]);
  }
  return std::move(w.bytes());
}

/// Encoded parameters of every layer except the final one.
inline std::string backbone_bytes(const TrainedModel& m) {
  detail::ByteWriter w;
  for (std::size_t l = 0; l + 1 < m.params.weights.size(); ++l) {
    detail::write_tensor(w, m.params.weights[l]);
    detail::write_tensor(w, m.params.biases[l]);
  }
  return std::move(w.bytes());
}

inline TrainedModel decode_model(const std::string& bytes, const std::string& source = "model") {
  detail::ByteReader r(bytes, source);
  if (bytes.size() < 4 || r.raw(4) != "FXNN") r.fail("bad magic (not a model file)");
  const auto version = r.u32();
  if (version != model_schema_version)
    r.fail("unsupported model schema version " + std::to_string(version));
  TrainedModel m;
  auto& c = m.config;
  c.input_rows = static_cast<int>(r.count(1u << 16));
  c.input_cols = static_cast<int>(r.count(1u << 16));
  c.input_pool = static_cast<int>(r.count(1u << 16));
  c.conv_blocks.resize(r.count(64));
  for (auto& b : c.conv_blocks) {
    b.channels = static_cast<int>(r.count(1u << 16));
    b.kernel = static_cast<int>(r.count(64));
    b.stride = static_cast<int>(r.count(64));
  }
  c.head_widths.resize(r.count(64));
  for (auto& h : c.head_widths) h = static_cast<int>(r.count(1u << 20));
  c.output_dim = static_cast<int>(r.u32());
  c.seed = r.u64();
  for (int a = 0; a < 3; ++a) {
    m.target_normalization.axis(a).lo = r.f64();
    m.target_normalization.axis(a).hi = r.f64();
  }
  const auto stage = r.u32();
  if (stage > 1) r.fail("unknown training stage");
  m.provenance.stage = static_cast<Stage>(stage);
  m.provenance.epochs = static_cast<int>(r.u32());
  m.provenance.final_loss = r.f64();
  for (auto* hist : {&m.train_loss, &m.val_loss}) {
    hist->resize(r.count(1u << 24));
    for (auto& v : *hist) v = r.f64();
  }

  std::vector<nn::LayerSpec> layers;
  try {
    layers = build_layers(c);
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid model config: ") + e.what());
  }
  const auto n_layers = r.u32();
  if (n_layers != layers.size()) r.fail("layer count disagrees with the config");
  for (const auto& spec : layers) {
    const Eigen::Index rows = spec.kind == nn::LayerKind::conv ? spec.conv.out_c : spec.out;
    const Eigen::Index cols = spec.kind == nn::LayerKind::conv ? spec.conv.patch() : spec.in;
    if (r.u32() != rows || r.u32() != cols) r.fail("weight shape disagrees with the config");
    nn::Matrix<float> wt(rows, cols);
    for (Eigen::Index i = 0; i < wt.size(); ++i) wt.data()[i] = r.f32();
    if (r.u32() != rows) r.fail("bias shape disagrees with the config");
    nn::Vector<float> b(rows);
    for (Eigen::Index i = 0; i < rows; ++i) b[i] = r.f32();
    m.params.weights.push_back(std::move(wt));
    m.params.biases.push_back(std::move(b));
  }
  if (!r.done()) r.fail("trailing bytes after the last tensor");
  if (!m.params.all_finite()) r.fail("non-finite parameter values");
  return m;
}

inline void persist_model(const TrainedModel& m, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_model(m));
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  return decode_model(detail::read_file(path), path.string());
}

}  // namespace fluxfit
