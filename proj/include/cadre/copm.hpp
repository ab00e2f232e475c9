// Co-attention perception module.
//
// A convolutional backbone with spatial and channel self-attention feeds two
// projection branches: a visual branch supervised by dense map heads (route
// reconstruction, camera segmentation, light state) and a behaviour branch
// supervised by expert controls (steer, throttle). The two branch vectors
// exchange information through an element-wise co-attention block whose
// output z = [z_vis, z_bc] is the latent handed to the driving policy.
//
// The module trains offline on collected datasets and is then frozen; the
// policy only ever calls infer(), which never records gradients and is
// bit-identical to the training-mode forward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadre/checkpoint.hpp"
#include "cadre/common.hpp"
#include "cadre/nn.hpp"
#include "cadre/obspipe.hpp"
#include "cadre/tensor.hpp"

namespace cadre::copm {

using nn::Tape;
using nn::Tensor;

struct LossWeights {
  double rou = 0.5;
  double cam = 1.0;
  double lig = 0.1;
  double ste = 0.1;
  double thro = 0.1;
};

struct CopmConfig {
  int in_channels = obs::kModelChannels;
  int height = 64;
  int width = 96;
  int base_width = 16;  // channel widths run w, 2w, 4w, 8w down the backbone
  int d_att = 64;       // branch vector dimension
  bool no_coatt = false;     // ablation: branch vectors skip the cross block
  bool visual_only = false;  // ablation: no behaviour branch, no control heads
  LossWeights lambda;
};

inline void validate_copm_config(const CopmConfig& c) {
  if (c.in_channels < 1) throw ConfigError("copm: in_channels must be >= 1");
  if (c.height < 16 || c.width < 16 || c.height % 16 != 0 || c.width % 16 != 0)
    throw ConfigError("copm: input height/width must be positive multiples "
                      "of 16, got " + std::to_string(c.height) + "x" +
                      std::to_string(c.width));
  if (c.base_width < 1) throw ConfigError("copm: base_width must be >= 1");
  if (c.d_att < 1) throw ConfigError("copm: d_att must be >= 1");
  if (c.lambda.rou < 0 || c.lambda.cam < 0 || c.lambda.lig < 0 ||
      c.lambda.ste < 0 || c.lambda.thro < 0)
    throw ConfigError("copm: loss weights must be non-negative");
}

struct LossBreakdown {
  double rou = 0.0;
  double cam = 0.0;
  double lig = 0.0;
  double ste = 0.0;
  double thro = 0.0;
  double total = 0.0;
};

class CopmNet {
 public:
  explicit CopmNet(const CopmConfig& cfg, std::uint64_t seed = 7)
      : cfg_(cfg) {
    validate_copm_config(cfg_);
    Rng rng(derive_seed(seed, "copm_init"));
    const std::size_t w = static_cast<std::size_t>(cfg_.base_width);
    const std::size_t cin = static_cast<std::size_t>(cfg_.in_channels);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_att);
    const std::size_t ctop = 8 * w;

    conv1_ = nn::Conv2dLayer::make(tape_, params_, "backbone.conv1", w, cin,
                                   3, 2, 1, rng);
    conv2_ = nn::Conv2dLayer::make(tape_, params_, "backbone.conv2", 2 * w, w,
                                   3, 2, 1, rng);
    conv3_ = nn::Conv2dLayer::make(tape_, params_, "backbone.conv3", 4 * w,
                                   2 * w, 3, 2, 1, rng);
    conv4_ = nn::Conv2dLayer::make(tape_, params_, "backbone.conv4", ctop,
                                   4 * w, 3, 2, 1, rng);

    // Spatial attention queries/keys live in a reduced channel space; the
    // value path keeps full width. Channel attention has no parameters.
    cq_ = std::max<std::size_t>(ctop / 8, 4);
    pos_q_ = nn::LinearLayer::make(tape_, params_, "att.pos.q", cq_, ctop, rng);
    pos_k_ = nn::LinearLayer::make(tape_, params_, "att.pos.k", cq_, ctop, rng);
    pos_v_ = nn::LinearLayer::make(tape_, params_, "att.pos.v", ctop, ctop,
                                   rng);

    proj_vis_ = nn::LinearLayer::make(tape_, params_, "proj.vis", d, ctop, rng);
    if (!cfg_.visual_only)
      proj_bc_ = nn::LinearLayer::make(tape_, params_, "proj.bc", d, ctop, rng);

    // Co-attention k/q/v blocks. The ablations shrink the parameter set so a
    // checkpoint encodes which variant produced it.
    if (!cfg_.visual_only && !cfg_.no_coatt) {
      co_vis_k_ = nn::LinearLayer::make(tape_, params_, "coatt.vis.k", d, d, rng);
      co_vis_q_ = nn::LinearLayer::make(tape_, params_, "coatt.vis.q", d, d, rng);
    }
    co_vis_v_ = nn::LinearLayer::make(tape_, params_, "coatt.vis.v", d, d, rng);
    if (!cfg_.visual_only) {
      if (!cfg_.no_coatt) {
        co_bc_k_ = nn::LinearLayer::make(tape_, params_, "coatt.bc.k", d, d, rng);
        co_bc_q_ = nn::LinearLayer::make(tape_, params_, "coatt.bc.q", d, d, rng);
      }
      co_bc_v_ = nn::LinearLayer::make(tape_, params_, "coatt.bc.v", d, d, rng);
    }

    fuse_f_ = nn::LinearLayer::make(tape_, params_, "dec.fuse_f", ctop, ctop,
                                    rng);
    fuse_z_ = nn::LinearLayer::make(tape_, params_, "dec.fuse_z", ctop, d, rng);
    up1_ = nn::ConvT2dLayer::make(tape_, params_, "dec.up1", ctop, 4 * w, 2, 2,
                                  rng);
    up2_ = nn::ConvT2dLayer::make(tape_, params_, "dec.up2", 4 * w, 2 * w, 2,
                                  2, rng);
    up3_ = nn::ConvT2dLayer::make(tape_, params_, "dec.up3", 2 * w, w, 2, 2,
                                  rng);
    up4_ = nn::ConvT2dLayer::make(tape_, params_, "dec.up4", w, w, 2, 2, rng);
    head_route_ = nn::Conv2dLayer::make(tape_, params_, "head.route", 3, w, 3,
                                        1, 1, rng);
    head_seg_ = nn::Conv2dLayer::make(tape_, params_, "head.seg",
                                      sim::kCamClasses, w, 3, 1, 1, rng);
    head_light_ = nn::LinearLayer::make(tape_, params_, "head.light",
                                        sim::kLightClasses, d, rng);
    if (!cfg_.visual_only) {
      head_steer_ = nn::LinearLayer::make(tape_, params_, "head.steer", 1, d,
                                          rng);
      head_throttle_ = nn::LinearLayer::make(tape_, params_, "head.throttle",
                                             1, d, rng);
    }
  }

  const CopmConfig& config() const { return cfg_; }
  Tape& tape() { return tape_; }
  nn::ParamRegistry& params() { return params_; }
  const nn::ParamRegistry& params() const { return params_; }

  // Latent width seen by the policy: both branches, or one under the
  // visual-only ablation.
  std::size_t z_dim() const {
    const std::size_t d = static_cast<std::size_t>(cfg_.d_att);
    return cfg_.visual_only ? d : 2 * d;
  }

  std::size_t input_size() const {
    return static_cast<std::size_t>(cfg_.in_channels) *
           static_cast<std::size_t>(cfg_.height) *
           static_cast<std::size_t>(cfg_.width);
  }

  // Backbone: four stride-2 conv stages, then spatial and channel
  // self-attention over the coarsest map, summed onto it.
  Tensor backbone(const Tensor& x) {
    Tensor f = nn::relu(conv1_(x));
    f = nn::relu(conv2_(f));
    f = nn::relu(conv3_(f));
    f = nn::relu(conv4_(f));

    const std::size_t c = f.dim(0);
    const std::size_t n = f.dim(1) * f.dim(2);
    Tensor fm = nn::reshape(f, {c, n});

    // Spatial attention: rows of A weight key locations for each query
    // location; out[:, i] is the value map re-mixed for location i.
    Tensor q = nn::add_bias_rows(nn::matmul(pos_q_.w, fm), pos_q_.b);
    Tensor k = nn::add_bias_rows(nn::matmul(pos_k_.w, fm), pos_k_.b);
    Tensor v = nn::add_bias_rows(nn::matmul(pos_v_.w, fm), pos_v_.b);
    Tensor energy = nn::scale(nn::matmul(nn::transpose(q), k),
                              1.0 / std::sqrt(static_cast<double>(cq_)));
    Tensor attn = nn::softmax_rows(energy);
    Tensor pos_out = nn::matmul(v, nn::transpose(attn));

    // Channel attention: soft channel-to-channel mixing from the scaled Gram
    // matrix of the feature map itself.
    Tensor gram = nn::scale(nn::matmul(fm, nn::transpose(fm)),
                            1.0 / std::sqrt(static_cast<double>(n)));
    Tensor ch_out = nn::matmul(nn::softmax_rows(gram), fm);

    Tensor fused = nn::add(nn::add(fm, pos_out), ch_out);
    return nn::reshape(fused, f.shape());
  }

  struct CoAttention {
    Tensor k_vis, q_vis, v_vis;
    Tensor k_bc, q_bc, v_bc;
    Tensor att_vis, att_bc;  // softmax-normalised cross weights
    Tensor z_vis, z_bc, z;
  };

  // Element-wise co-attention between the branch vectors. Each branch is
  // gated by the other branch's query: the weights over z_vis come from
  // q_bc (and vice versa), so a branch highlights the coordinates its
  // counterpart asks about.
  CoAttention coattend(const Tensor& x_vis, const Tensor& x_bc) const {
    CoAttention co;
    co.k_vis = nn::relu(co_vis_k_(x_vis));
    co.q_vis = nn::relu(co_vis_q_(x_vis));
    co.v_vis = nn::relu(co_vis_v_(x_vis));
    co.k_bc = nn::relu(co_bc_k_(x_bc));
    co.q_bc = nn::relu(co_bc_q_(x_bc));
    co.v_bc = nn::relu(co_bc_v_(x_bc));

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d_att));
    co.att_vis = nn::softmax(nn::scale(nn::mul(co.q_bc, co.k_vis), inv_sqrt_d));
    co.att_bc = nn::softmax(nn::scale(nn::mul(co.q_vis, co.k_bc), inv_sqrt_d));
    co.z_vis = nn::add(co.v_vis, nn::mul(co.att_vis, co.v_vis));
    co.z_bc = nn::add(co.v_bc, nn::mul(co.att_bc, co.v_bc));
    co.z = nn::concat(co.z_vis, co.z_bc);
    return co;
  }

  struct Forward {
    Tensor feature;  // attention-fused backbone map [8w, H/16, W/16]
    Tensor x_vis, x_bc;
    Tensor att_vis, att_bc;
    Tensor z_vis, z_bc, z;
    Tensor route;       // [3, H, W], sigmoid
    Tensor seg;         // [kCamClasses, H, W] logits
    Tensor light;       // [kLightClasses] logits
    Tensor steer;       // [1], tanh
    Tensor throttle;    // [1], sigmoid
  };

  // Full forward pass on one sample. The dense decoder is skipped when
  // want_maps is false (policy-side latent extraction); everything up to z
  // is computed identically either way.
  Forward forward(const std::vector<double>& input, bool want_maps = true) {
    if (input.size() != input_size())
      throw DimensionError("copm forward: input has " +
                           std::to_string(input.size()) +
                           " values, expected " +
                           std::to_string(input_size()));
    Forward f;
    Tensor x = Tensor::from({static_cast<std::size_t>(cfg_.in_channels),
                             static_cast<std::size_t>(cfg_.height),
                             static_cast<std::size_t>(cfg_.width)},
                            input);
    f.feature = backbone(x);
    Tensor pooled = nn::global_avg_pool(f.feature);
    f.x_vis = proj_vis_(pooled);

    if (cfg_.visual_only) {
      f.z_vis = nn::relu(co_vis_v_(f.x_vis));
      f.z = f.z_vis;
    } else {
      f.x_bc = proj_bc_(pooled);
      if (cfg_.no_coatt) {
        f.z_vis = nn::relu(co_vis_v_(f.x_vis));
        f.z_bc = nn::relu(co_bc_v_(f.x_bc));
      } else {
        CoAttention co = coattend(f.x_vis, f.x_bc);
        f.att_vis = co.att_vis;
        f.att_bc = co.att_bc;
        f.z_vis = co.z_vis;
        f.z_bc = co.z_bc;
      }
      f.z = nn::concat(f.z_vis, f.z_bc);
    }

    if (want_maps) decode_maps(f);
    if (!cfg_.visual_only) {
      f.steer = nn::tanh_op(head_steer_(f.z_bc));
      f.throttle = nn::sigmoid(head_throttle_(f.z_bc));
    }
    f.light = head_light_(f.z_vis);
    return f;
  }

  // Weighted multi-task loss against one dataset sample. Route and control
  // targets are regression (MSE); segmentation and light state are
  // cross-entropy. The branch split mirrors the heads: dense and light
  // terms pull on z_vis, control terms on z_bc.
  Tensor loss(const Forward& f, const obs::DatasetSample& s,
              LossBreakdown* out = nullptr) const {
    const std::size_t npix = static_cast<std::size_t>(cfg_.height) *
                             static_cast<std::size_t>(cfg_.width);
    if (s.input.size() != input_size())
      throw DimensionError("copm loss: sample input size mismatch");
    if (s.seg.size() != npix)
      throw DimensionError("copm loss: sample seg size mismatch");
    if (s.light >= sim::kLightClasses)
      throw InputError("copm loss: light label out of range");

    std::vector<double> route_target(s.input.begin() +
                                         static_cast<std::ptrdiff_t>(3 * npix),
                                     s.input.begin() +
                                         static_cast<std::ptrdiff_t>(6 * npix));
    Tensor l_rou = nn::mse_loss(
        f.route, Tensor::from({3, static_cast<std::size_t>(cfg_.height),
                               static_cast<std::size_t>(cfg_.width)},
                              std::move(route_target)));
    Tensor l_cam = nn::cross_entropy_map(f.seg, s.seg);
    Tensor l_lig = nn::cross_entropy_logits(f.light, s.light);

    Tensor total = nn::add(nn::scale(l_rou, cfg_.lambda.rou),
                           nn::scale(l_cam, cfg_.lambda.cam));
    total = nn::add(total, nn::scale(l_lig, cfg_.lambda.lig));

    double ste_v = 0.0, thro_v = 0.0;
    if (!cfg_.visual_only) {
      Tensor l_ste = nn::mse_loss(f.steer, Tensor::scalar(s.expert_steer));
      Tensor l_thro =
          nn::mse_loss(f.throttle, Tensor::scalar(s.expert_throttle));
      total = nn::add(total, nn::scale(l_ste, cfg_.lambda.ste));
      total = nn::add(total, nn::scale(l_thro, cfg_.lambda.thro));
      ste_v = l_ste.item();
      thro_v = l_thro.item();
    }
    if (out) {
      out->rou = l_rou.item();
      out->cam = l_cam.item();
      out->lig = l_lig.item();
      out->ste = ste_v;
      out->thro = thro_v;
      out->total = total.item();
    }
    return total;
  }

  // Latent extraction for the policy: no gradient recording, no decoder.
  std::vector<double> infer(const std::vector<double>& input) {
    nn::NoGradGuard guard(&tape_);
    Forward f = forward(input, /*want_maps=*/false);
    return f.z.value();
  }

  struct Prediction {
    std::vector<double> z;
    std::vector<double> route;         // 3*H*W
    std::vector<double> seg_logits;    // kCamClasses*H*W
    std::vector<double> light_logits;  // kLightClasses
    double steer = 0.0;
    double throttle = 0.0;
  };

  // Full inference with dense heads, for evaluation and the perception-only
  // driving mode.
  Prediction predict(const std::vector<double>& input) {
    nn::NoGradGuard guard(&tape_);
    Forward f = forward(input, /*want_maps=*/true);
    Prediction p;
    p.z = f.z.value();
    p.route = f.route.value();
    p.seg_logits = f.seg.value();
    p.light_logits = f.light.value();
    if (!cfg_.visual_only) {
      p.steer = f.steer.item();
      p.throttle = f.throttle.item();
    }
    return p;
  }

  nlohmann::json arch_meta() const {
    nlohmann::json m;
    m["arch"] = "copm";
    m["in_channels"] = cfg_.in_channels;
    m["height"] = cfg_.height;
    m["width"] = cfg_.width;
    m["base_width"] = cfg_.base_width;
    m["d_att"] = cfg_.d_att;
    m["no_coatt"] = cfg_.no_coatt;
    m["visual_only"] = cfg_.visual_only;
    return m;
  }

  void save(const std::string& base, long global_step) const {
    nn::save_checkpoint(params_, base, global_step, arch_meta());
  }

  // Loads parameters into this net, refusing checkpoints written by a
  // different architecture or ablation variant.
  nn::CheckpointInfo load(const std::string& base) {
    nn::CheckpointInfo info = nn::load_checkpoint(params_, base);
    check_meta(info.meta);
    return info;
  }

  // Reconstructs a net from a checkpoint alone.
  static CopmNet from_checkpoint(const std::string& base,
                                 nn::CheckpointInfo* info_out = nullptr) {
    nlohmann::json meta = nn::read_checkpoint_meta(base);
    CopmConfig cfg = config_from_meta(meta);
    CopmNet net(cfg, /*seed=*/0);
    nn::CheckpointInfo info = net.load(base);
    if (info_out) *info_out = info;
    return net;
  }

  static CopmConfig config_from_meta(const nlohmann::json& meta) {
    if (!meta.is_object() || meta.value("arch", std::string()) != "copm")
      throw LoadError("checkpoint meta does not describe a copm model");
    CopmConfig cfg;
    try {
      cfg.in_channels = meta.at("in_channels").get<int>();
      cfg.height = meta.at("height").get<int>();
      cfg.width = meta.at("width").get<int>();
      cfg.base_width = meta.at("base_width").get<int>();
      cfg.d_att = meta.at("d_att").get<int>();
      cfg.no_coatt = meta.at("no_coatt").get<bool>();
      cfg.visual_only = meta.at("visual_only").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(std::string("bad copm checkpoint meta: ") + e.what());
    }
    try {
      validate_copm_config(cfg);
    } catch (const ConfigError& e) {
      throw LoadError(std::string("bad copm checkpoint meta: ") + e.what());
    }
    return cfg;
  }

 private:
  void check_meta(const nlohmann::json& meta) const {
    CopmConfig got = config_from_meta(meta);
    if (got.in_channels != cfg_.in_channels || got.height != cfg_.height ||
        got.width != cfg_.width || got.base_width != cfg_.base_width ||
        got.d_att != cfg_.d_att || got.no_coatt != cfg_.no_coatt ||
        got.visual_only != cfg_.visual_only)
      throw LoadError("copm checkpoint architecture does not match the "
                      "configured model");
  }

  // Dense decoder: the coarse attention map is fused with a broadcast
  // projection of z_vis, then upsampled x16 by four stride-2 transposed
  // convolutions; two conv heads emit the route and segmentation maps.
  void decode_maps(Forward& f) {
    const std::size_t c = f.feature.dim(0);
    const std::size_t n = f.feature.dim(1) * f.feature.dim(2);
    Tensor fm = nn::reshape(f.feature, {c, n});
    Tensor mixed = nn::add_bias_rows(nn::matmul(fuse_f_.w, fm), fuse_f_.b);
    Tensor g = fuse_z_(f.z_vis);
    Tensor d = nn::relu(nn::add_bias_rows(mixed, g));
    d = nn::reshape(d, f.feature.shape());
    d = nn::relu(up1_(d));
    d = nn::relu(up2_(d));
    d = nn::relu(up3_(d));
    d = nn::relu(up4_(d));
    f.route = nn::sigmoid(head_route_(d));
    f.seg = head_seg_(d);
  }

  CopmConfig cfg_;
  Tape tape_;
  nn::ParamRegistry params_;
  std::size_t cq_ = 4;

  nn::Conv2dLayer conv1_, conv2_, conv3_, conv4_;
  nn::LinearLayer pos_q_, pos_k_, pos_v_;
  nn::LinearLayer proj_vis_, proj_bc_;
  nn::LinearLayer co_vis_k_, co_vis_q_, co_vis_v_;
  nn::LinearLayer co_bc_k_, co_bc_q_, co_bc_v_;
  nn::LinearLayer fuse_f_, fuse_z_;
  nn::ConvT2dLayer up1_, up2_, up3_, up4_;
  nn::Conv2dLayer head_route_, head_seg_;
  nn::LinearLayer head_light_, head_steer_, head_throttle_;
};

// ---------------------------------------------------------------------------
// Offline training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::string checkpoint_base;  // empty: train without writing checkpoints
  int checkpoint_every = 0;     // epochs between periodic saves; 0 = final only
};

struct EpochStats {
  int epoch = 0;  // 1-based
  LossBreakdown mean;
};

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::vector<double> step_losses;  // total loss of every minibatch
  long steps = 0;
};

// Minibatch Adam over a seeded shuffle of the dataset. Losses recorded per
// epoch are training losses (computed before each update). Rerunning with
// the same seed and data reproduces the loss curves exactly.
inline TrainResult train_offline(CopmNet& net,
                                 const std::vector<obs::DatasetSample>& data,
                                 const TrainConfig& cfg) {
  if (data.empty()) throw InputError("train_offline: empty dataset");
  if (cfg.epochs < 1) throw ConfigError("train_offline: epochs must be >= 1");
  if (cfg.batch_size < 1)
    throw ConfigError("train_offline: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw ConfigError("train_offline: lr must be positive");
  for (const auto& s : data)
    if (s.input.size() != net.input_size())
      throw DimensionError("train_offline: sample does not match model input");

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  nn::Adam opt(net.params(), ac);
  Rng rng(derive_seed(cfg.seed, "copm_train"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult res;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);

    LossBreakdown acc;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      net.params().zero_grad();
      double batch_total = 0.0;
      for (std::size_t j = begin; j < end; ++j) {
        const obs::DatasetSample& s = data[order[j]];
        LossBreakdown bd;
        CopmNet::Forward f = net.forward(s.input);
        Tensor l = net.loss(f, s, &bd);
        net.tape().backward(l);
        net.tape().clear();
        batch_total += bd.total;
        acc.rou += bd.rou;
        acc.cam += bd.cam;
        acc.lig += bd.lig;
        acc.ste += bd.ste;
        acc.thro += bd.thro;
        acc.total += bd.total;
        ++seen;
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      net.params().scale_grads(inv);
      opt.step(net.params());
      ++res.steps;
      res.step_losses.push_back(batch_total * inv);
    }

    EpochStats st;
    st.epoch = epoch + 1;
    const double inv = 1.0 / static_cast<double>(seen);
    st.mean.rou = acc.rou * inv;
    st.mean.cam = acc.cam * inv;
    st.mean.lig = acc.lig * inv;
    st.mean.ste = acc.ste * inv;
    st.mean.thro = acc.thro * inv;
    st.mean.total = acc.total * inv;
    res.epochs.push_back(st);

    if (!cfg.checkpoint_base.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs)
      net.save(cfg.checkpoint_base + ".e" + std::to_string(epoch + 1),
               res.steps);
  }
  if (!cfg.checkpoint_base.empty()) net.save(cfg.checkpoint_base, res.steps);
  return res;
}

// Fraction of pixels whose argmax segmentation class matches the label.
inline double seg_pixel_accuracy(CopmNet& net,
                                 const std::vector<obs::DatasetSample>& data) {
  if (data.empty()) throw InputError("seg_pixel_accuracy: empty dataset");
  const std::size_t npix = static_cast<std::size_t>(net.config().height) *
                           static_cast<std::size_t>(net.config().width);
  std::size_t hits = 0;
  for (const auto& s : data) {
    CopmNet::Prediction p = net.predict(s.input);
    for (std::size_t px = 0; px < npix; ++px) {
      std::size_t best = 0;
      double best_v = p.seg_logits[px];
      for (std::size_t k = 1; k < sim::kCamClasses; ++k) {
        const double v = p.seg_logits[k * npix + px];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      if (best == s.seg[px]) ++hits;
    }
  }
  return static_cast<double>(hits) /
         static_cast<double>(npix * data.size());
}

// ---------------------------------------------------------------------------
// Perception-only driving
// ---------------------------------------------------------------------------

struct DriveCommand {
  double steer = 0.0;
  double throttle = 0.0;
  double brake = 0.0;
};

// Drives straight off the control heads; brakes hard when the predicted
// throttle collapses while something sits within detection range.
inline DriveCommand copm_drive(const CopmNet::Prediction& p,
                               bool obstacle_in_range,
                               double brake_threshold = 0.1) {
  DriveCommand c;
  c.steer = p.steer;
  c.throttle = p.throttle;
  if (obstacle_in_range && p.throttle < brake_threshold) {
    c.throttle = 0.0;
    c.brake = 1.0;
  }
  return c;
}

}  // namespace cadre::copm
