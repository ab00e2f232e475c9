// PPO actor-critic on top of the frozen perception latent.
//
// The per-step state is ẑ = [scaled measurements, z]; the policy consumes a
// window of the last eight states through an LSTM run from a zero state
// (windows are self-contained, nothing carries across them), then two
// independent categorical heads pick a steer bin and a longitudinal mode
// while a scalar head estimates the value. Training uses plain discounted
// returns, per-batch advantage normalisation, and the clipped surrogate
// objective.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadre/checkpoint.hpp"
#include "cadre/common.hpp"
#include "cadre/nn.hpp"
#include "cadre/obspipe.hpp"
#include "cadre/tensor.hpp"

namespace cadre::agent {

using nn::Tape;
using nn::Tensor;

constexpr int kSteerBins = 33;
constexpr int kLongModes = 3;
constexpr int kFrameWindow = 8;
constexpr int kMeasurementDim = 6;

enum class Longitudinal : int {
  kAccelerate = 0,
  kForward = 1,
  kDecelerate = 2,
};

struct Action {
  int steer_bin = 16;
  int longitudinal = static_cast<int>(Longitudinal::kForward);

  bool operator==(const Action& o) const {
    return steer_bin == o.steer_bin && longitudinal == o.longitudinal;
  }
};

struct Controls {
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

inline void validate_action(const Action& a) {
  if (a.steer_bin < 0 || a.steer_bin >= kSteerBins)
    throw InputError("action: steer bin " + std::to_string(a.steer_bin) +
                     " outside [0, 32]");
  if (a.longitudinal < 0 || a.longitudinal >= kLongModes)
    throw InputError("action: longitudinal mode " +
                     std::to_string(a.longitudinal) + " outside [0, 2]");
}

// 33 steer bins spread evenly over [-1, 1]; three longitudinal modes with
// fixed throttle/brake pairings.
inline Controls decode_action(const Action& a) {
  validate_action(a);
  Controls c;
  c.steer = -1.0 + static_cast<double>(a.steer_bin) / 16.0;
  switch (static_cast<Longitudinal>(a.longitudinal)) {
    case Longitudinal::kAccelerate:
      c.throttle = 0.6;
      c.brake = 0.0;
      break;
    case Longitudinal::kForward:
      c.throttle = 0.0;
      c.brake = 0.0;
      break;
    case Longitudinal::kDecelerate:
      c.throttle = 0.0;
      c.brake = 1.0;
      break;
  }
  return c;
}

inline int action_index(const Action& a) {
  validate_action(a);
  return a.steer_bin * kLongModes + a.longitudinal;
}

inline Action action_from_index(int index) {
  if (index < 0 || index >= kSteerBins * kLongModes)
    throw InputError("action index " + std::to_string(index) +
                     " outside [0, 98]");
  Action a;
  a.steer_bin = index / kLongModes;
  a.longitudinal = index % kLongModes;
  return a;
}

// Measurement entries are brought to unit scale before entering the state:
// controls are already in [-1, 1], speed is divided by the traffic-rule
// ceiling, heading error by 90 degrees and lateral offset by the deviation
// limit.
inline std::vector<double> assemble_state(const obs::Measurements& m,
                                          const std::vector<double>& z) {
  std::vector<double> zhat;
  zhat.reserve(kMeasurementDim + z.size());
  zhat.push_back(m.prev_steer);
  zhat.push_back(m.prev_throttle);
  zhat.push_back(m.prev_brake);
  zhat.push_back(m.v / 8.0);
  zhat.push_back(m.theta_deg / 90.0);
  zhat.push_back(m.d_m / 2.5);
  zhat.insert(zhat.end(), z.begin(), z.end());
  return zhat;
}

// Rolling window of the last eight states. Until eight frames have been
// pushed the missing slots are filled with the first frame, so the window
// is always full once anything is in it.
class FrameBuffer {
 public:
  explicit FrameBuffer(std::size_t dim) : dim_(dim) {
    if (dim_ == 0) throw ConfigError("frame buffer: state dim must be > 0");
  }

  std::size_t dim() const { return dim_; }
  bool empty() const { return frames_.empty(); }

  void reset() { frames_.clear(); }

  void push(const std::vector<double>& zhat) {
    if (zhat.size() != dim_)
      throw DimensionError("frame buffer: state has " +
                           std::to_string(zhat.size()) + " values, expected " +
                           std::to_string(dim_));
    frames_.push_back(zhat);
    if (frames_.size() > static_cast<std::size_t>(kFrameWindow))
      frames_.pop_front();
  }

  // Flattened window, oldest frame first.
  std::vector<double> window() const {
    if (frames_.empty())
      throw InputError("frame buffer: window requested before any frame");
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(kFrameWindow) * dim_);
    const std::size_t pad =
        static_cast<std::size_t>(kFrameWindow) - frames_.size();
    for (std::size_t i = 0; i < pad; ++i)
      out.insert(out.end(), frames_.front().begin(), frames_.front().end());
    for (const auto& f : frames_)
      out.insert(out.end(), f.begin(), f.end());
    return out;
  }

 private:
  std::size_t dim_;
  std::deque<std::vector<double>> frames_;
};

struct PpoConfig {
  double clip_eps = 0.2;
  double gamma = 0.99;
  int epochs = 4;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  int horizon = 512;
  int minibatch = 64;
  double lr = 3e-4;
  double adv_eps = 1e-8;  // variance guard for advantage normalisation
};

inline void validate_ppo_config(const PpoConfig& c) {
  if (!(c.clip_eps > 0.0 && c.clip_eps < 1.0))
    throw ConfigError("ppo: clip epsilon must lie in (0, 1)");
  if (!(c.gamma > 0.0 && c.gamma <= 1.0))
    throw ConfigError("ppo: gamma must lie in (0, 1]");
  if (c.epochs < 1) throw ConfigError("ppo: epochs must be >= 1");
  if (c.horizon < 1) throw ConfigError("ppo: horizon must be >= 1");
  if (c.minibatch < 1) throw ConfigError("ppo: minibatch must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("ppo: lr must be positive");
  if (c.value_coef < 0.0 || c.entropy_coef < 0.0)
    throw ConfigError("ppo: loss coefficients must be non-negative");
}

struct PolicyConfig {
  std::size_t input_dim = 0;  // measurement dim + latent dim
  std::size_t hidden = 64;
  bool use_lstm = true;  // the "basic" ablation replaces the LSTM with an
                         // MLP that sees only the newest frame
};

inline void validate_policy_config(const PolicyConfig& c) {
  if (c.input_dim == 0) throw ConfigError("policy: input_dim must be > 0");
  if (c.hidden == 0) throw ConfigError("policy: hidden must be > 0");
}

class PolicyNet {
 public:
  explicit PolicyNet(const PolicyConfig& cfg, std::uint64_t seed = 7)
      : cfg_(cfg) {
    validate_policy_config(cfg_);
    Rng rng(derive_seed(seed, "policy_init"));
    if (cfg_.use_lstm) {
      lstm_ = nn::LstmCell::make(tape_, params_, "lstm", cfg_.input_dim,
                                 cfg_.hidden, rng);
    } else {
      trunk_ = nn::LinearLayer::make(tape_, params_, "trunk", cfg_.hidden,
                                     cfg_.input_dim, rng);
    }
    head_steer_ = nn::LinearLayer::make(tape_, params_, "head.steer",
                                        kSteerBins, cfg_.hidden, rng);
    head_long_ = nn::LinearLayer::make(tape_, params_, "head.long", kLongModes,
                                       cfg_.hidden, rng);
    head_value_ = nn::LinearLayer::make(tape_, params_, "head.value", 1,
                                        cfg_.hidden, rng);
  }

  const PolicyConfig& config() const { return cfg_; }
  Tape& tape() { return tape_; }
  nn::ParamRegistry& params() { return params_; }
  const nn::ParamRegistry& params() const { return params_; }

  std::size_t window_size() const {
    return static_cast<std::size_t>(kFrameWindow) * cfg_.input_dim;
  }

  struct Output {
    Tensor steer_logits;  // [33]
    Tensor long_logits;   // [3]
    Tensor value;         // [1]
  };

  // Runs the trunk over one flattened 8-frame window. The LSTM starts from
  // a zero state every call; the heads read its final hidden vector.
  Output forward(const std::vector<double>& window) {
    if (window.size() != window_size())
      throw DimensionError("policy forward: window has " +
                           std::to_string(window.size()) +
                           " values, expected " +
                           std::to_string(window_size()));
    Tensor trunk_out;
    if (cfg_.use_lstm) {
      nn::LstmState st = lstm_.zero_state();
      for (int t = 0; t < kFrameWindow; ++t) {
        std::vector<double> frame(
            window.begin() + static_cast<std::ptrdiff_t>(
                                 static_cast<std::size_t>(t) * cfg_.input_dim),
            window.begin() + static_cast<std::ptrdiff_t>(
                                 static_cast<std::size_t>(t + 1) *
                                 cfg_.input_dim));
        st = lstm_(Tensor::from({cfg_.input_dim}, std::move(frame)), st);
      }
      trunk_out = st.h;
    } else {
      std::vector<double> newest(
          window.end() - static_cast<std::ptrdiff_t>(cfg_.input_dim),
          window.end());
      trunk_out =
          nn::relu(trunk_(Tensor::from({cfg_.input_dim}, std::move(newest))));
    }
    Output out;
    out.steer_logits = head_steer_(trunk_out);
    out.long_logits = head_long_(trunk_out);
    out.value = head_value_(trunk_out);
    return out;
  }

  struct Evaluation {
    std::vector<double> steer_logits;
    std::vector<double> long_logits;
    double value = 0.0;
  };

  // Value-only pass for rollouts: no gradients recorded.
  Evaluation evaluate(const std::vector<double>& window) {
    nn::NoGradGuard guard(&tape_);
    Output out = forward(window);
    Evaluation ev;
    ev.steer_logits = out.steer_logits.value();
    ev.long_logits = out.long_logits.value();
    ev.value = out.value.item();
    return ev;
  }

  nlohmann::json arch_meta() const {
    nlohmann::json m;
    m["arch"] = "agent";
    m["input_dim"] = cfg_.input_dim;
    m["hidden"] = cfg_.hidden;
    m["use_lstm"] = cfg_.use_lstm;
    return m;
  }

  void save(const std::string& base, long global_step) const {
    nn::save_checkpoint(params_, base, global_step, arch_meta());
  }

  nn::CheckpointInfo load(const std::string& base) {
    nn::CheckpointInfo info = nn::load_checkpoint(params_, base);
    PolicyConfig got = config_from_meta(info.meta);
    if (got.input_dim != cfg_.input_dim || got.hidden != cfg_.hidden ||
        got.use_lstm != cfg_.use_lstm)
      throw LoadError("agent checkpoint architecture does not match the "
                      "configured policy");
    return info;
  }

  static PolicyConfig config_from_meta(const nlohmann::json& meta) {
    if (!meta.is_object() || meta.value("arch", std::string()) != "agent")
      throw LoadError("checkpoint meta does not describe an agent policy");
    PolicyConfig cfg;
    try {
      cfg.input_dim = meta.at("input_dim").get<std::size_t>();
      cfg.hidden = meta.at("hidden").get<std::size_t>();
      cfg.use_lstm = meta.at("use_lstm").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(std::string("bad agent checkpoint meta: ") + e.what());
    }
    try {
      validate_policy_config(cfg);
    } catch (const ConfigError& e) {
      throw LoadError(std::string("bad agent checkpoint meta: ") + e.what());
    }
    return cfg;
  }

  static PolicyNet from_checkpoint(const std::string& base,
                                   nn::CheckpointInfo* info_out = nullptr) {
    PolicyConfig cfg = config_from_meta(nn::read_checkpoint_meta(base));
    PolicyNet net(cfg, /*seed=*/0);
    nn::CheckpointInfo info = net.load(base);
    if (info_out) *info_out = info;
    return net;
  }

 private:
  PolicyConfig cfg_;
  Tape tape_;
  nn::ParamRegistry params_;
  nn::LstmCell lstm_;
  nn::LinearLayer trunk_;
  nn::LinearLayer head_steer_, head_long_, head_value_;
};

// ---------------------------------------------------------------------------
// Action sampling
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> log_softmax_values(const std::vector<double>& l) {
  double mx = l[0];
  for (double v : l) mx = std::max(mx, v);
  double acc = 0.0;
  for (double v : l) acc += std::exp(v - mx);
  const double lse = mx + std::log(acc);
  std::vector<double> out(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) out[i] = l[i] - lse;
  return out;
}

inline std::size_t sample_categorical(const std::vector<double>& log_probs,
                                      Rng& rng) {
  const double u = rng.uniform01();
  double cum = 0.0;
  for (std::size_t i = 0; i < log_probs.size(); ++i) {
    cum += std::exp(log_probs[i]);
    if (u < cum) return i;
  }
  return log_probs.size() - 1;
}

inline std::size_t argmax_lowest(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace detail

struct SampledAction {
  Action action;
  double log_prob = 0.0;  // summed over both heads
};

// Draws each head from its categorical (or takes the per-head argmax with
// ties resolved to the lowest index) and returns the summed log-probability
// of the chosen pair under the current policy.
inline SampledAction sample_action(const std::vector<double>& steer_logits,
                                   const std::vector<double>& long_logits,
                                   Rng& rng, bool greedy = false) {
  if (steer_logits.size() != kSteerBins || long_logits.size() != kLongModes)
    throw DimensionError("sample_action: logits have wrong arity");
  for (double v : steer_logits)
    if (!std::isfinite(v)) throw InputError("sample_action: non-finite logit");
  for (double v : long_logits)
    if (!std::isfinite(v)) throw InputError("sample_action: non-finite logit");

  const std::vector<double> lp_s = detail::log_softmax_values(steer_logits);
  const std::vector<double> lp_l = detail::log_softmax_values(long_logits);
  SampledAction out;
  const std::size_t si = greedy ? detail::argmax_lowest(steer_logits)
                                : detail::sample_categorical(lp_s, rng);
  const std::size_t li = greedy ? detail::argmax_lowest(long_logits)
                                : detail::sample_categorical(lp_l, rng);
  out.action.steer_bin = static_cast<int>(si);
  out.action.longitudinal = static_cast<int>(li);
  out.log_prob = lp_s[si] + lp_l[li];
  return out;
}

// ---------------------------------------------------------------------------
// Advantages
// ---------------------------------------------------------------------------

struct Transition {
  std::vector<double> window;  // flattened 8-frame state at decision time
  Action action;
  double log_prob = 0.0;  // behaviour policy
  double value = 0.0;     // V estimate at collection time
  double reward = 0.0;
  bool done = false;
};

struct AdvantageResult {
  std::vector<double> returns;         // discounted G_t
  std::vector<double> raw_advantages;  // G_t - V_t
  std::vector<double> advantages;      // normalised per batch
};

// Plain discounted returns swept backwards; a trajectory cut at the horizon
// (last transition not done) bootstraps with the value of the state after
// it. Advantages are normalised to zero mean and unit variance over the
// whole batch, with an epsilon guard so a constant batch maps to zeros.
inline AdvantageResult compute_advantages(
    const std::vector<Transition>& traj, double gamma,
    double tail_value = 0.0, double adv_eps = 1e-8) {
  if (traj.empty()) throw InputError("compute_advantages: empty trajectory");
  AdvantageResult res;
  const std::size_t n = traj.size();
  res.returns.resize(n);
  res.raw_advantages.resize(n);
  double g = traj.back().done ? 0.0 : tail_value;
  for (std::size_t i = n; i-- > 0;) {
    if (i + 1 < n && traj[i].done) g = 0.0;
    g = traj[i].reward + gamma * g;
    res.returns[i] = g;
    res.raw_advantages[i] = g - traj[i].value;
  }
  double mean = 0.0;
  for (double a : res.raw_advantages) mean += a;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double a : res.raw_advantages) var += (a - mean) * (a - mean);
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + adv_eps);
  res.advantages.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    res.advantages[i] = (res.raw_advantages[i] - mean) * inv_std;
  return res;
}

// ---------------------------------------------------------------------------
// PPO loss
// ---------------------------------------------------------------------------

struct PpoLossBreakdown {
  double policy = 0.0;
  double value = 0.0;
  double entropy = 0.0;
  double total = 0.0;
};

// Clipped surrogate objective over one minibatch. Maximising the clipped
// expectation is implemented as minimising its negation; the value head
// regresses the discounted returns and the entropy of both heads is paid
// back as a bonus.
inline Tensor ppo_loss(PolicyNet& net, const std::vector<Transition>& batch,
                       const std::vector<double>& returns,
                       const std::vector<double>& advantages,
                       const PpoConfig& cfg,
                       PpoLossBreakdown* out = nullptr) {
  validate_ppo_config(cfg);
  if (batch.empty()) throw InputError("ppo_loss: empty batch");
  if (returns.size() != batch.size() || advantages.size() != batch.size())
    throw DimensionError("ppo_loss: returns/advantages do not match batch");

  Tensor policy_sum = Tensor::scalar(0.0);
  Tensor value_sum = Tensor::scalar(0.0);
  Tensor entropy_sum = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Transition& tr = batch[i];
    validate_action(tr.action);
    PolicyNet::Output o = net.forward(tr.window);

    Tensor lp_steer = nn::log_softmax(o.steer_logits);
    Tensor lp_long = nn::log_softmax(o.long_logits);
    Tensor log_new =
        nn::add(nn::pick(lp_steer, static_cast<std::size_t>(
                                       tr.action.steer_bin)),
                nn::pick(lp_long, static_cast<std::size_t>(
                                      tr.action.longitudinal)));
    Tensor ratio = nn::exp_op(nn::add_const(log_new, -tr.log_prob));
    Tensor surr = nn::scale(ratio, advantages[i]);
    Tensor clipped = nn::scale(
        nn::clamp_op(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps),
        advantages[i]);
    policy_sum = nn::add(policy_sum, nn::min_op(surr, clipped));

    value_sum = nn::add(
        value_sum, nn::mse_loss(o.value, Tensor::scalar(returns[i])));

    Tensor ent_s = nn::scale(
        nn::sum_all(nn::mul(nn::softmax(o.steer_logits), lp_steer)), -1.0);
    Tensor ent_l = nn::scale(
        nn::sum_all(nn::mul(nn::softmax(o.long_logits), lp_long)), -1.0);
    entropy_sum = nn::add(entropy_sum, nn::add(ent_s, ent_l));
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Tensor policy_loss = nn::scale(policy_sum, -inv_n);
  Tensor value_loss = nn::scale(value_sum, inv_n);
  Tensor entropy_mean = nn::scale(entropy_sum, inv_n);
  Tensor total = nn::add(policy_loss,
                         nn::scale(value_loss, cfg.value_coef));
  total = nn::add(total, nn::scale(entropy_mean, -cfg.entropy_coef));
  if (out) {
    out->policy = policy_loss.item();
    out->value = value_loss.item();
    out->entropy = entropy_mean.item();
    out->total = total.item();
  }
  return total;
}

}  // namespace cadre::agent
