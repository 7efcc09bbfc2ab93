#pragma once

// Forecasting backbone: per-domain embeddings and heads around a shared
// transformer encoder/decoder, plus the seasonal/trend decomposition
// generators, the reconstructor and the momentum copies of both generators.

#include "sedan/dataio.hpp"
#include "sedan/nn.hpp"
#include "sedan/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan {

enum class Domain { source = 0, target = 1 };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

/// How encoder features are split before decoding.
enum class Decomposition {
  contrastive,  // learned generators + reconstructor
  explicit_sum,  // fixed moving-average trend, seasonal = H - trend, reconstructor
  none,          // decoder attends to the raw encoder features
};

struct ModelConfig {
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 1;
  std::size_t d_ff = 64;
  double dropout = 0.05;
  std::size_t d_in_source = 7;
  std::size_t d_in_target = 7;
  std::size_t d_out_source = 7;
  std::size_t d_out_target = 7;
  std::size_t d_time_source = 4;
  std::size_t d_time_target = 4;
  std::size_t tdg_kernel = 3;
  std::size_t tdg_pool = 3;
  std::size_t sdg_hidden = 32;
  double momentum = 0.999;
  std::uint64_t init_seed = 1;

  void validate() const {
    for (std::size_t w : {d_model, n_heads, d_ff, d_in_source, d_in_target, d_out_source, d_out_target, d_time_source,
                          d_time_target, tdg_kernel, tdg_pool, sdg_hidden}) {
      if (w == 0) throw std::invalid_argument("model widths must be >= 1");
    }
    if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("momentum must lie in [0, 1]");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
  }
};

/// Dense tensors for a mini-batch of windows.
struct Batch {
  Tensor enc_input;  // [B, l_x, d]
  Tensor enc_time;   // [B, l_x, d_time]
  Tensor dec_input;  // [B, label_len + l_y, d]
  Tensor dec_time;   // [B, label_len + l_y, d_time]
  Tensor target;     // [B, l_y, d]

  std::size_t size() const { return enc_input.dim(0); }
  std::size_t pred_len() const { return target.dim(1); }
};

namespace detail {
inline Tensor stack_matrices(const std::vector<const Eigen::MatrixXd*>& mats) {
  const auto rows = static_cast<std::size_t>(mats.front()->rows());
  const auto cols = static_cast<std::size_t>(mats.front()->cols());
  std::vector<double> values(mats.size() * rows * cols);
  for (std::size_t b = 0; b < mats.size(); ++b) {
    MatrixMap(values.data() + b * rows * cols, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)) =
        *mats[b];
  }
  return Tensor::from({mats.size(), rows, cols}, std::move(values));
}
}  // namespace detail

inline Batch make_batch(const std::vector<WindowSample>& windows, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  auto gather = [&](auto member) {
    std::vector<const Eigen::MatrixXd*> mats;
    mats.reserve(indices.size());
    for (std::size_t i : indices) mats.push_back(&(windows.at(i).*member));
    return detail::stack_matrices(mats);
  };
  return {gather(&WindowSample::enc_input), gather(&WindowSample::enc_time), gather(&WindowSample::dec_input),
          gather(&WindowSample::dec_time), gather(&WindowSample::target)};
}

inline Tensor positional_encoding(std::size_t length, std::size_t width) {
  std::vector<double> pe(length * width);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * width + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor::from({length, width}, std::move(pe));
}

/// Value projection + time-stamp projection + sinusoidal position code.
struct Embedding {
  Tensor value_weight;  // [d_in, d_model]
  Tensor time_weight;   // [d_time, d_model]

  Embedding() = default;
  Embedding(ParameterSet& params, const std::string& name, std::size_t d_in, std::size_t d_time, std::size_t width,
            Rng& rng)
      : value_weight(params.add(name + ".value", xavier_uniform({d_in, width}, d_in, width, rng))),
        time_weight(params.add(name + ".time", xavier_uniform({d_time, width}, d_time, width, rng))) {}

  Tensor operator()(const Tensor& values, const Tensor& time) const {
    if (values.rank() != 3 || values.dim(2) != value_weight.dim(0)) {
      throw ShapeError("embedding expects values of width " + std::to_string(value_weight.dim(0)) + ", got " +
                       shape_string(values.shape()));
    }
    if (time.rank() != 3 || time.dim(2) != time_weight.dim(0) || time.dim(1) != values.dim(1)) {
      throw ShapeError("embedding expects time features of width " + std::to_string(time_weight.dim(0)) + ", got " +
                       shape_string(time.shape()));
    }
    auto tokens = add(linear(values, value_weight), linear(time, time_weight));
    return add_broadcast(tokens, positional_encoding(values.dim(1), value_weight.dim(1)));
  }
};

struct FeedForward {
  Linear inner, outer;
  FeedForward() = default;
  FeedForward(ParameterSet& params, const std::string& name, std::size_t width, std::size_t hidden, Rng& rng)
      : inner(params, name + ".inner", width, hidden, rng), outer(params, name + ".outer", hidden, width, rng) {}
  Tensor operator()(const Tensor& x) const { return outer(relu(inner(x))); }
};

struct EncoderLayer {
  MultiHeadAttention attention;
  FeedForward feed_forward;
  LayerNorm norm1, norm2;
};

struct DecoderLayer {
  MultiHeadAttention self_attention, cross_attention;
  FeedForward feed_forward;
  LayerNorm norm1, norm2, norm3;
};

/// Position-wise two-layer perceptron producing seasonal features.
struct SeasonalGenerator {
  Linear hidden, output;
  Tensor operator()(const Tensor& h) const { return output(relu(hidden(h))); }
  std::vector<Tensor> parameters() const { return {hidden.weight, hidden.bias, output.weight, output.bias}; }
};

/// Causal convolution followed by trailing average pooling.
struct TrendGenerator {
  Tensor weight;  // [K, D, D]
  Tensor bias;    // [D]
  std::size_t pool = 1;
  Tensor operator()(const Tensor& h) const { return causal_avg_pool(causal_conv1d(h, weight, bias), pool); }
  std::vector<Tensor> parameters() const { return {weight, bias}; }
};

struct Reconstructor {
  Linear hidden, output;
  Tensor operator()(const Tensor& seasonal, const Tensor& trend) const {
    if (seasonal.shape() != trend.shape()) {
      throw ShapeError("reconstruct: " + shape_string(seasonal.shape()) + " vs " + shape_string(trend.shape()));
    }
    return output(relu(hidden(concat({seasonal, trend}, seasonal.rank() - 1))));
  }
};

/// m * momentum + (1 - m) * online, elementwise over congruent lists.
inline void momentum_update(const std::vector<Tensor>& online, std::vector<Tensor>& momentum, double m) {
  if (online.size() != momentum.size()) throw ShapeError("momentum_update: parameter lists differ in length");
  for (std::size_t i = 0; i < online.size(); ++i) {
    if (online[i].shape() != momentum[i].shape()) throw ShapeError("momentum_update: shape mismatch");
  }
  for (std::size_t i = 0; i < online.size(); ++i) {
    auto& dst = momentum[i].mutable_values();
    const auto& src = online[i].values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = m * dst[k] + (1.0 - m) * src[k];
  }
}

/// Fixed causal moving-average trend: a width-`kernel` average followed by a
/// width-`pool` average, matching the receptive field of the trend generator.
inline Tensor moving_average_trend(const Tensor& h, std::size_t kernel, std::size_t pool) {
  return causal_avg_pool(causal_avg_pool(h, kernel), pool);
}

struct ForwardPass {
  Tensor encoded;        // H
  Tensor seasonal;       // H_sea (undefined when decomposition is none)
  Tensor trend;          // H_tre
  Tensor reconstructed;  // H~ (H itself when decomposition is none)
  Tensor forecast;       // [B, l_y, d_out]
};

class SedanModel {
 public:
  explicit SedanModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.init_seed);
    const std::size_t D = config_.d_model;
    for (Domain dom : {Domain::source, Domain::target}) {
      const std::string p = to_string(dom);
      const auto i = static_cast<std::size_t>(dom);
      const std::size_t d_in = dom == Domain::source ? config_.d_in_source : config_.d_in_target;
      const std::size_t d_time = dom == Domain::source ? config_.d_time_source : config_.d_time_target;
      const std::size_t d_out = dom == Domain::source ? config_.d_out_source : config_.d_out_target;
      enc_embed_[i] = Embedding(params_, p + ".enc_embed", d_in, d_time, D, rng);
      dec_embed_[i] = Embedding(params_, p + ".dec_embed", d_in, d_time, D, rng);
      head_[i] = Linear(params_, p + ".head", D, d_out, rng);
    }
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const std::string p = "encoder.layer" + std::to_string(l);
      encoder_.push_back({MultiHeadAttention(params_, p + ".attention", D, config_.n_heads, rng),
                          FeedForward(params_, p + ".ff", D, config_.d_ff, rng), LayerNorm(params_, p + ".norm1", D),
                          LayerNorm(params_, p + ".norm2", D)});
    }
    encoder_norm_ = LayerNorm(params_, "encoder.norm", D);
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const std::string p = "decoder.layer" + std::to_string(l);
      decoder_.push_back({MultiHeadAttention(params_, p + ".self_attention", D, config_.n_heads, rng),
                          MultiHeadAttention(params_, p + ".cross_attention", D, config_.n_heads, rng),
                          FeedForward(params_, p + ".ff", D, config_.d_ff, rng), LayerNorm(params_, p + ".norm1", D),
                          LayerNorm(params_, p + ".norm2", D), LayerNorm(params_, p + ".norm3", D)});
    }
    decoder_norm_ = LayerNorm(params_, "decoder.norm", D);
    sdg_ = {Linear(params_, "sdg.hidden", D, config_.sdg_hidden, rng),
            Linear(params_, "sdg.output", config_.sdg_hidden, D, rng)};
    const std::size_t K = config_.tdg_kernel;
    tdg_ = {params_.add("tdg.weight", xavier_uniform({K, D, D}, K * D, D, rng)), params_.add("tdg.bias", Tensor::zeros({D}, true)),
            config_.tdg_pool};
    reconstructor_ = {Linear(params_, "reconstructor.hidden", 2 * D, D, rng),
                      Linear(params_, "reconstructor.output", D, D, rng)};

    // Momentum copies start equal to the online generators and never
    // receive gradients.
    auto copy = [this](const std::string& name, const Tensor& t) {
      return momentum_params_.add(name, Tensor::from(t.shape(), t.values(), false));
    };
    sdg_momentum_ = sdg_;
    sdg_momentum_.hidden.weight = copy("sdg.hidden.weight", sdg_.hidden.weight);
    sdg_momentum_.hidden.bias = copy("sdg.hidden.bias", sdg_.hidden.bias);
    sdg_momentum_.output.weight = copy("sdg.output.weight", sdg_.output.weight);
    sdg_momentum_.output.bias = copy("sdg.output.bias", sdg_.output.bias);
    tdg_momentum_ = tdg_;
    tdg_momentum_.weight = copy("tdg.weight", tdg_.weight);
    tdg_momentum_.bias = copy("tdg.bias", tdg_.bias);
  }

  SedanModel(const SedanModel&) = delete;
  SedanModel& operator=(const SedanModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  ParameterSet& momentum_parameters() { return momentum_params_; }
  const ParameterSet& momentum_parameters() const { return momentum_params_; }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

  const SeasonalGenerator& seasonal_generator() const { return sdg_; }
  const SeasonalGenerator& seasonal_generator_momentum() const { return sdg_momentum_; }
  const TrendGenerator& trend_generator() const { return tdg_; }
  const TrendGenerator& trend_generator_momentum() const { return tdg_momentum_; }
  const Reconstructor& reconstructor() const { return reconstructor_; }

  Tensor embed(const Tensor& values, const Tensor& time, Domain domain) const {
    return enc_embed_[static_cast<std::size_t>(domain)](values, time);
  }

  Tensor encode(const Tensor& tokens, Rng* rng = nullptr) const {
    for (double v : tokens.values()) {
      if (!std::isfinite(v)) throw std::domain_error("encode: non-finite input token");
    }
    Tensor x = tokens;
    for (const auto& layer : encoder_) {
      x = layer.norm1(add(x, drop(layer.attention(x, x, false), rng)));
      x = layer.norm2(add(x, drop(layer.feed_forward(x), rng)));
    }
    return encoder_norm_(x);
  }

  Tensor sdg_forward(const Tensor& h) const { return sdg_(h); }
  Tensor tdg_forward(const Tensor& h) const { return tdg_(h); }
  Tensor reconstruct(const Tensor& seasonal, const Tensor& trend) const { return reconstructor_(seasonal, trend); }

  /// Decodes against `memory` and returns the last `pred_len` steps through
  /// the domain head.
  Tensor decode(const Tensor& memory, const Tensor& dec_input, const Tensor& dec_time, std::size_t pred_len,
                Domain domain, Rng* rng = nullptr) const {
    if (memory.rank() != 3 || memory.dim(2) != config_.d_model || dec_input.dim(0) != memory.dim(0)) {
      throw ShapeError("decode: memory " + shape_string(memory.shape()) + " incompatible with decoder input " +
                       shape_string(dec_input.shape()));
    }
    if (pred_len == 0 || pred_len > dec_input.dim(1)) throw ShapeError("decode: pred_len exceeds decoder length");
    const auto i = static_cast<std::size_t>(domain);
    Tensor x = dec_embed_[i](dec_input, dec_time);
    for (const auto& layer : decoder_) {
      x = layer.norm1(add(x, drop(layer.self_attention(x, x, true), rng)));
      x = layer.norm2(add(x, drop(layer.cross_attention(x, memory, false), rng)));
      x = layer.norm3(add(x, drop(layer.feed_forward(x), rng)));
    }
    x = decoder_norm_(x);
    const std::size_t len = dec_input.dim(1);
    return head_[i](slice(x, 1, len - pred_len, pred_len));
  }

  ForwardPass forward(const Batch& batch, Domain domain, Decomposition mode, Rng* rng = nullptr) const {
    ForwardPass out;
    out.encoded = encode(embed(batch.enc_input, batch.enc_time, domain), rng);
    switch (mode) {
      case Decomposition::contrastive:
        out.seasonal = sdg_forward(out.encoded);
        out.trend = tdg_forward(out.encoded);
        out.reconstructed = reconstruct(out.seasonal, out.trend);
        break;
      case Decomposition::explicit_sum:
        out.trend = moving_average_trend(out.encoded, config_.tdg_kernel, config_.tdg_pool);
        out.seasonal = sub(out.encoded, out.trend);
        out.reconstructed = reconstruct(out.seasonal, out.trend);
        break;
      case Decomposition::none:
        out.reconstructed = out.encoded;
        break;
    }
    out.forecast = decode(out.reconstructed, batch.dec_input, batch.dec_time, batch.pred_len(), domain, rng);
    return out;
  }

  void momentum_update() {
    auto online = sdg_.parameters();
    auto t = tdg_.parameters();
    online.insert(online.end(), t.begin(), t.end());
    auto momentum = sdg_momentum_.parameters();
    auto tm = tdg_momentum_.parameters();
    momentum.insert(momentum.end(), tm.begin(), tm.end());
    sedan::momentum_update(online, momentum, config_.momentum);
  }

  /// Re-draws the embeddings and head of one domain from a fresh seed.
  void reinitialize_domain(Domain domain, std::uint64_t seed) {
    ModelConfig fresh_cfg = config_;
    fresh_cfg.init_seed = seed;
    SedanModel fresh(fresh_cfg);
    const std::string prefix = std::string(to_string(domain)) + ".";
    for (const auto& [name, t] : params_.entries()) {
      if (name.rfind(prefix, 0) == 0) {
        auto dst = t;
        dst.mutable_values() = fresh.parameters().find(name).values();
      }
    }
  }

 private:
  Tensor drop(const Tensor& x, Rng* rng) const {
    if (!training_ || !rng || config_.dropout <= 0.0) return x;
    return dropout(x, config_.dropout, *rng);
  }

  ModelConfig config_;
  bool training_ = false;
  ParameterSet params_;
  ParameterSet momentum_params_;
  Embedding enc_embed_[2];
  Embedding dec_embed_[2];
  Linear head_[2];
  std::vector<EncoderLayer> encoder_;
  LayerNorm encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  LayerNorm decoder_norm_;
  SeasonalGenerator sdg_;
  SeasonalGenerator sdg_momentum_;
  TrendGenerator tdg_;
  TrendGenerator tdg_momentum_;
  Reconstructor reconstructor_;
};

}  // namespace sedan
