// Parameter registry, initialization, layer helpers and the Adam optimizer.
#pragma once

#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cadre/common.hpp"
#include "cadre/tensor.hpp"

namespace cadre::nn {

// Ordered, named collection of trainable tensors. Registration order is
// part of a model's contract: flattened gradients and checkpoints both
// follow it.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : items_)
      if (n == name) throw InputError("ParamRegistry: duplicate name " + name);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const {
    return items_;
  }

  std::size_t count() const { return items_.size(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

  Tensor find(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw InputError("ParamRegistry: no parameter named " + name);
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  std::vector<double> flatten_values() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& [_, t] : items_)
      out.insert(out.end(), t.value().begin(), t.value().end());
    return out;
  }

  std::vector<double> flatten_grads() const {
    std::vector<double> out;
    out.reserve(total_size());
    for (const auto& [_, t] : items_)
      out.insert(out.end(), t.grad().begin(), t.grad().end());
    return out;
  }

  void load_values(const std::vector<double>& flat) {
    if (flat.size() != total_size())
      throw DimensionError("load_values: got " + std::to_string(flat.size()) +
                           " values, registry holds " +
                           std::to_string(total_size()));
    std::size_t off = 0;
    for (auto& [_, t] : items_) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()),
                t.value().begin());
      off += t.size();
    }
  }

  void load_grads(const std::vector<double>& flat) {
    if (flat.size() != total_size())
      throw DimensionError("load_grads: size mismatch");
    std::size_t off = 0;
    for (auto& [_, t] : items_) {
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + t.size()),
                t.grad().begin());
      off += t.size();
    }
  }

  // Scales every gradient by c (turns accumulated sums into means).
  void scale_grads(double c) {
    for (auto& [_, t] : items_)
      for (double& g : t.grad()) g *= c;
  }

  // FNV-1a over the exact value bytes, in registration order.
  std::uint64_t value_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : items_) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(t.value().data(), t.value().size() * sizeof(double), h);
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init; biases stay zero.
inline void init_uniform_fanin(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.value()) v = rng.uniform(-bound, bound);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. State lives in the optimizer, aligned with the
// registry's order; a fixed arithmetic sequence keeps steps bit-reproducible.
class Adam {
 public:
  Adam(const ParamRegistry& params, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& [_, t] : params.items()) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void step(ParamRegistry& params) {
    if (params.count() != m_.size())
      throw DimensionError("Adam::step: registry changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (auto& [_, p] : params.items()) {
      auto& m = m_[k];
      auto& v = v_[k];
      Tensor t = p;
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double g = t.grad()[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        t.value()[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
      ++k;
    }
  }

  long steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Layer parameter bundles
// ---------------------------------------------------------------------------

struct LinearLayer {
  Tensor w, b;

  static LinearLayer make(Tape& tape, ParamRegistry& reg,
                          const std::string& name, std::size_t out_dim,
                          std::size_t in_dim, Rng& rng) {
    LinearLayer l;
    l.w = reg.add(name + ".w", tape.parameter({out_dim, in_dim}));
    l.b = reg.add(name + ".b", tape.parameter({out_dim}));
    init_uniform_fanin(l.w, in_dim, rng);
    return l;
  }

  Tensor operator()(const Tensor& x) const { return linear(w, x, b); }
};

struct Conv2dLayer {
  Tensor w, b;
  std::size_t stride = 1, pad = 0;

  static Conv2dLayer make(Tape& tape, ParamRegistry& reg,
                          const std::string& name, std::size_t out_ch,
                          std::size_t in_ch, std::size_t k, std::size_t stride,
                          std::size_t pad, Rng& rng) {
    Conv2dLayer l;
    l.w = reg.add(name + ".w", tape.parameter({out_ch, in_ch, k, k}));
    l.b = reg.add(name + ".b", tape.parameter({out_ch}));
    l.stride = stride;
    l.pad = pad;
    init_uniform_fanin(l.w, in_ch * k * k, rng);
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    return conv2d(x, w, b, stride, pad);
  }
};

struct ConvT2dLayer {
  Tensor w, b;
  std::size_t stride = 2;

  static ConvT2dLayer make(Tape& tape, ParamRegistry& reg,
                           const std::string& name, std::size_t in_ch,
                           std::size_t out_ch, std::size_t k,
                           std::size_t stride, Rng& rng) {
    ConvT2dLayer l;
    l.w = reg.add(name + ".w", tape.parameter({in_ch, out_ch, k, k}));
    l.b = reg.add(name + ".b", tape.parameter({out_ch}));
    l.stride = stride;
    init_uniform_fanin(l.w, in_ch * k * k, rng);
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    return conv_transpose2d(x, w, b, stride);
  }
};

struct LstmState {
  Tensor h, c;
};

// Single LSTM cell with fused gate matrices; gate order is (i, f, g, o).
// Built from primitive ops, so its gradient comes from the tape.
struct LstmCell {
  Tensor wx, wh, b;
  std::size_t hidden = 0;

  static LstmCell make(Tape& tape, ParamRegistry& reg, const std::string& name,
                       std::size_t in_dim, std::size_t hidden, Rng& rng) {
    LstmCell l;
    l.hidden = hidden;
    l.wx = reg.add(name + ".wx", tape.parameter({4 * hidden, in_dim}));
    l.wh = reg.add(name + ".wh", tape.parameter({4 * hidden, hidden}));
    l.b = reg.add(name + ".b", tape.parameter({4 * hidden}));
    init_uniform_fanin(l.wx, in_dim, rng);
    init_uniform_fanin(l.wh, hidden, rng);
    return l;
  }

  LstmState zero_state() const {
    return {Tensor::zeros({hidden}), Tensor::zeros({hidden})};
  }

  LstmState operator()(const Tensor& x, const LstmState& s) const {
    Tensor zb = linear(wx, x, b);
    Tensor z = add(zb, linear(wh, s.h, Tensor::zeros({4 * hidden})));
    Tensor i = sigmoid(slice(z, 0, hidden));
    Tensor f = sigmoid(slice(z, hidden, hidden));
    Tensor g = tanh_op(slice(z, 2 * hidden, hidden));
    Tensor o = sigmoid(slice(z, 3 * hidden, hidden));
    Tensor c = add(mul(f, s.c), mul(i, g));
    Tensor h = mul(o, tanh_op(c));
    return {h, c};
  }
};

}  // namespace cadre::nn
