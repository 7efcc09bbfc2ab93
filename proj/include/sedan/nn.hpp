#pragma once

#include "sedan/tensor.hpp"

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sedan {

using Rng = std::mt19937_64;

/// Ordered, named collection of trainable leaves.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Tensor tensor) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, tensor);
    return tensor;
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Tensor find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  /// Copies values (not graph state) from another congruent set.
  void copy_values_from(const ParameterSet& other) {
    if (other.size() != size()) throw ShapeError("parameter sets are not congruent");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      auto dst = entries_[i].second;
      const auto& src = other.entries_[i].second;
      if (dst.shape() != src.shape()) throw ShapeError("parameter shape mismatch at " + entries_[i].first);
      dst.mutable_values() = src.values();
    }
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(t.values());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != entries_.size()) throw ShapeError("snapshot size mismatch");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto t = entries_[i].second;
      if (t.size() != snap[i].size()) throw ShapeError("snapshot entry size mismatch");
      t.mutable_values() = snap[i];
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<double> values(numel(shape));
  for (double& v : values) v = dist(rng);
  return Tensor::from(std::move(shape), std::move(values), true);
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(params.add(name + ".weight", xavier_uniform({in, out}, in, out, rng))),
        bias(params.add(name + ".bias", Tensor::zeros({out}, true))) {}

  Tensor operator()(const Tensor& x) const { return linear(x, weight, &bias); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, std::size_t width)
      : gamma(params.add(name + ".gamma", Tensor::full({width}, 1.0).clone_parameter())),
        beta(params.add(name + ".beta", Tensor::zeros({width}, true))) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

/// Scaled dot-product multi-head attention over [B, T, D] sequences.
struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet& params, const std::string& name, std::size_t width, std::size_t n_heads,
                     Rng& rng)
      : query(params, name + ".query", width, width, rng),
        key(params, name + ".key", width, width, rng),
        value(params, name + ".value", width, width, rng),
        output(params, name + ".output", width, width, rng),
        heads(n_heads) {
    if (n_heads == 0 || width % n_heads != 0) {
      throw std::invalid_argument("attention width must be divisible by the head count");
    }
  }

  Tensor operator()(const Tensor& queries, const Tensor& memory, bool causal) const {
    const std::size_t B = queries.dim(0), Tq = queries.dim(1), D = queries.dim(2), Tk = memory.dim(1);
    const std::size_t dh = D / heads;
    auto split = [&](const Tensor& x, std::size_t T) {
      return reshape(swap_axes12(reshape(x, {B, T, heads, dh})), {B * heads, T, dh});
    };
    auto q = split(query(queries), Tq);
    auto k = split(key(memory), Tk);
    auto v = split(value(memory), Tk);
    auto scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto attended = bmm(softmax(scores, causal), v);
    auto merged = reshape(swap_axes12(reshape(attended, {B, heads, Tq, dh})), {B, Tq, D});
    return output(merged);
  }
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamSettings settings = {}) : settings_(settings) {
    for (const auto& [name, t] : params.entries()) {
      params_.push_back(t);
      first_.emplace_back(t.size(), 0.0);
      second_.emplace_back(t.size(), 0.0);
    }
  }

  void step(double lr) {
    ++steps_;
    const double c1 = 1.0 - std::pow(settings_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(settings_.beta2, static_cast<double>(steps_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      auto& t = params_[p];
      if (t.grad().empty()) continue;
      auto& values = t.mutable_values();
      const auto& g = t.grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        first_[p][i] = settings_.beta1 * first_[p][i] + (1.0 - settings_.beta1) * g[i];
        second_[p][i] = settings_.beta2 * second_[p][i] + (1.0 - settings_.beta2) * g[i] * g[i];
        values[i] -= lr * (first_[p][i] / c1) / (std::sqrt(second_[p][i] / c2) + settings_.eps);
      }
    }
  }

  std::size_t steps() const { return steps_; }

 private:
  AdamSettings settings_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace sedan
