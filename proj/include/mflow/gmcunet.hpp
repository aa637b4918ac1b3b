#pragma once

// GMCUnet noise predictor: U-Net encoder/decoder whose middle block uses
// convection-dilation-erosion (CDE) residual blocks.

#include "mflow/autodiff/ops.hpp"
#include "mflow/autodiff/optim.hpp"
#include "mflow/morphology.hpp"

#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mflow {

enum class BlockType { cde, resnet };

struct UNetConfig {
  int image_channels = 1;
  int image_side = 28;
  int base_channels = 32;
  std::vector<int> channel_mult = {1, 2};
  int stages = 2;
  bool middle_attention = true;
  int middle_blocks = 2;
  int attention_heads = 1;
  int norm_groups = 8;
  BlockType block = BlockType::cde;
  double k = 2.0;
  int window_radius = 3;
  DistanceMode distance_mode = DistanceMode::euclidean;
  double metric_scale = 1.0;
  double initial_scale = 1.0;  // initial structuring scale t of CDE blocks
  ad::Padding padding = ad::Padding::zero;

  int channels_at(int stage) const { return base_channels * channel_mult.at(static_cast<std::size_t>(stage)); }
  int middle_channels() const { return stages > 0 ? channels_at(stages - 1) : base_channels; }
  int time_dim() const { return 4 * base_channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("UNetConfig: " + m); };
    if (image_channels < 1) fail("image_channels must be >= 1");
    if (base_channels < 2 || base_channels % 2 != 0) fail("base_channels must be even and >= 2");
    if (stages < 0) fail("stages must be >= 0");
    if (static_cast<int>(channel_mult.size()) < stages) fail("need one channel multiplier per stage");
    for (int m : channel_mult) if (m < 1) fail("channel multipliers must be >= 1");
    if (image_side < 1 || image_side % (1 << stages) != 0) fail("image_side must be divisible by 2^stages");
    if (middle_blocks < 0) fail("middle_blocks must be >= 0");
    if (attention_heads < 1 || middle_channels() % attention_heads != 0) {
      fail("middle channels must be divisible by attention_heads");
    }
    if (norm_groups < 1) fail("norm_groups must be >= 1");
    if (!(k > 1.0)) fail("k must be > 1");
    if (window_radius < 1) fail("window_radius must be >= 1");
    if (!(metric_scale > 0.0)) fail("metric_scale must be > 0");
    if (!(initial_scale > 0.0)) fail("initial_scale must be > 0");
  }
};

namespace nn {

using Rng = std::mt19937_64;

template <typename Scalar>
std::vector<Scalar> uniform_init(std::size_t n, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Scalar> v(n);
  for (auto& x : v) x = static_cast<Scalar>(dist(rng));
  return v;
}

/// Largest divisor of `channels` not exceeding `wanted`.
inline int group_count(int channels, int wanted) {
  for (int g = std::min(wanted, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <typename Scalar>
struct Conv2d {
  ad::Tensor<Scalar> weight;
  ad::Tensor<Scalar> bias;
  int stride = 1;
  ad::Padding padding = ad::Padding::zero;

  Conv2d() = default;
  Conv2d(ad::ParameterSet<Scalar>& ps, const std::string& name, int in, int out, int kernel, int stride_,
         ad::Padding pad, Rng& rng, bool zero_init = false, bool with_bias = true)
      : stride(stride_), padding(pad) {
    const std::size_t n = static_cast<std::size_t>(out) * in * kernel * kernel;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = ps.add(name + ".weight", {out, in, kernel, kernel},
                    zero_init ? std::vector<Scalar>(n, Scalar(0)) : uniform_init<Scalar>(n, bound, rng));
    if (with_bias) {
      bias = ps.add(name + ".bias", {out},
                    zero_init ? std::vector<Scalar>(static_cast<std::size_t>(out), Scalar(0))
                              : uniform_init<Scalar>(static_cast<std::size_t>(out), bound, rng));
    }
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x) const { return ad::conv2d(x, weight, bias, stride, padding); }
};

template <typename Scalar>
struct Linear {
  ad::Tensor<Scalar> weight;
  ad::Tensor<Scalar> bias;

  Linear() = default;
  Linear(ad::ParameterSet<Scalar>& ps, const std::string& name, int in, int out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = ps.add(name + ".weight", {out, in}, uniform_init<Scalar>(static_cast<std::size_t>(out) * in, bound, rng));
    bias = ps.add(name + ".bias", {out}, uniform_init<Scalar>(static_cast<std::size_t>(out), bound, rng));
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x) const { return ad::linear(x, weight, bias); }
};

template <typename Scalar>
struct GroupNorm {
  ad::Tensor<Scalar> gamma;
  ad::Tensor<Scalar> beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ad::ParameterSet<Scalar>& ps, const std::string& name, int channels, int wanted_groups)
      : groups(group_count(channels, wanted_groups)) {
    gamma = ps.add(name + ".gamma", {channels}, std::vector<Scalar>(static_cast<std::size_t>(channels), Scalar(1)));
    beta = ps.add(name + ".beta", {channels}, std::vector<Scalar>(static_cast<std::size_t>(channels), Scalar(0)));
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x) const { return ad::group_norm(x, groups, gamma, beta); }
};

/// Sinusoidal features (sin(t w_j), cos(t w_j)), w_j geometric from 1 to 1/10000.
template <typename Scalar>
ad::Tensor<Scalar> sinusoidal_features(const std::vector<int>& steps, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_features: dim must be even");
  const int half = dim / 2;
  std::vector<Scalar> v(steps.size() * static_cast<std::size_t>(dim));
  for (std::size_t b = 0; b < steps.size(); ++b) {
    for (int j = 0; j < half; ++j) {
      const double omega = half > 1 ? std::exp(-std::log(10000.0) * j / (half - 1)) : 1.0;
      const double a = static_cast<double>(steps[b]) * omega;
      v[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)] = static_cast<Scalar>(std::sin(a));
      v[b * static_cast<std::size_t>(dim) + static_cast<std::size_t>(half + j)] = static_cast<Scalar>(std::cos(a));
    }
  }
  return ad::Tensor<Scalar>({static_cast<int>(steps.size()), dim}, std::move(v));
}

/// e_t = MLP(sinusoid(t))
template <typename Scalar>
struct TimeEmbedding {
  int dim = 0;
  Linear<Scalar> first;
  Linear<Scalar> second;

  TimeEmbedding() = default;
  TimeEmbedding(ad::ParameterSet<Scalar>& ps, const std::string& name, int base_dim, int out_dim, Rng& rng)
      : dim(base_dim), first(ps, name + ".fc1", base_dim, out_dim, rng), second(ps, name + ".fc2", out_dim, out_dim, rng) {}

  ad::Tensor<Scalar> operator()(const std::vector<int>& steps) const {
    return second(ad::silu(first(sinusoidal_features<Scalar>(steps, dim))));
  }
};

/// Plain residual block: GN, SiLU, 3x3 conv, time bias, GN, SiLU, 3x3 conv, skip.
template <typename Scalar>
struct ResBlock {
  GroupNorm<Scalar> norm1;
  Conv2d<Scalar> conv1;
  Linear<Scalar> time_proj;
  GroupNorm<Scalar> norm2;
  Conv2d<Scalar> conv2;
  std::unique_ptr<Conv2d<Scalar>> skip;

  ResBlock(ad::ParameterSet<Scalar>& ps, const std::string& name, int in, int out, int time_dim, const UNetConfig& cfg,
           Rng& rng)
      : norm1(ps, name + ".norm1", in, cfg.norm_groups),
        conv1(ps, name + ".conv1", in, out, 3, 1, cfg.padding, rng),
        time_proj(ps, name + ".time", time_dim, out, rng),
        norm2(ps, name + ".norm2", out, cfg.norm_groups),
        conv2(ps, name + ".conv2", out, out, 3, 1, cfg.padding, rng, /*zero_init=*/true) {
    if (in != out) skip = std::make_unique<Conv2d<Scalar>>(ps, name + ".skip", in, out, 1, 1, cfg.padding, rng);
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x, const ad::Tensor<Scalar>& emb) const {
    auto h = conv1(ad::silu(norm1(x)));
    h = ad::add_sample_channel_bias(h, time_proj(ad::silu(emb)));
    h = conv2(ad::silu(norm2(h)));
    return ad::add(skip ? (*skip)(x) : x, h);
  }
};

/// Residual convection-dilation-erosion block:
///   z = convect(GN(W_in x) + proj(e_t))
///   y = x + W_out(l_dil * dilate(z) + l_ero * erode(z) + l_skip * z)
/// with per-channel velocities, structuring scales t = softplus(raw) and mixing weights.
template <typename Scalar>
struct CdeBlock {
  int channels = 0;
  int radius = 1;
  Scalar k = Scalar(2);
  std::vector<Scalar> base_costs;  // b_1^k for each window offset, row-major
  Conv2d<Scalar> w_in;
  GroupNorm<Scalar> norm;
  Linear<Scalar> time_proj;
  ad::Tensor<Scalar> velocity;   // (C, 2)
  ad::Tensor<Scalar> scale_raw;  // (C), t = softplus(scale_raw)
  ad::Tensor<Scalar> lambda_dil;
  ad::Tensor<Scalar> lambda_ero;
  ad::Tensor<Scalar> lambda_skip;
  Conv2d<Scalar> w_out;

  CdeBlock(ad::ParameterSet<Scalar>& ps, const std::string& name, int channels_, int time_dim, const UNetConfig& cfg,
           Rng& rng)
      : channels(channels_),
        radius(cfg.window_radius),
        k(static_cast<Scalar>(cfg.k)),
        base_costs(window_base_costs(cfg)),
        w_in(ps, name + ".w_in", channels_, channels_, 1, 1, cfg.padding, rng),
        norm(ps, name + ".norm", channels_, cfg.norm_groups),
        time_proj(ps, name + ".time", time_dim, channels_, rng) {
    const auto c = static_cast<std::size_t>(channels_);
    velocity = ps.add(name + ".velocity", {channels_, 2}, std::vector<Scalar>(2 * c, Scalar(0)));
    // softplus^-1(t0) = log(exp(t0) - 1)
    const Scalar raw = static_cast<Scalar>(std::log(std::expm1(cfg.initial_scale)));
    scale_raw = ps.add(name + ".scale_raw", {channels_}, std::vector<Scalar>(c, raw));
    lambda_dil = ps.add(name + ".lambda_dil", {channels_}, std::vector<Scalar>(c, Scalar(1) / Scalar(3)));
    lambda_ero = ps.add(name + ".lambda_ero", {channels_}, std::vector<Scalar>(c, Scalar(1) / Scalar(3)));
    lambda_skip = ps.add(name + ".lambda_skip", {channels_}, std::vector<Scalar>(c, Scalar(1) / Scalar(3)));
    w_out = Conv2d<Scalar>(ps, name + ".w_out", channels_, channels_, 1, 1, cfg.padding, rng, /*zero_init=*/true);
  }

  static std::vector<Scalar> window_base_costs(const UNetConfig& cfg) {
    const StructuringSpec<double> spec(cfg.k, 1.0, cfg.window_radius, cfg.distance_mode, cfg.metric_scale);
    const GridGeometry<double> geom(1, 1);
    std::vector<Scalar> out;
    for (const auto& o : structuring_table(spec, geom)) out.push_back(static_cast<Scalar>(o.cost));
    return out;
  }

  ad::Tensor<Scalar> costs() const { return ad::structuring_costs(ad::softplus(scale_raw), base_costs, k); }

  /// Convected, normalized features entering the morphological branches.
  ad::Tensor<Scalar> pre_morphology(const ad::Tensor<Scalar>& x, const ad::Tensor<Scalar>& emb) const {
    auto z = norm(w_in(x));
    z = ad::add_sample_channel_bias(z, time_proj(ad::silu(emb)));
    return ad::bilinear_shift(z, velocity, Scalar(1));
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x, const ad::Tensor<Scalar>& emb) const {
    const auto z = pre_morphology(x, emb);
    const auto b = costs();
    auto mix = ad::mul_channels(ad::window_max(z, b, radius), lambda_dil);
    mix = ad::add(mix, ad::mul_channels(ad::window_min(z, b, radius), lambda_ero));
    mix = ad::add(mix, ad::mul_channels(z, lambda_skip));
    return ad::add(x, w_out(mix));
  }
};

/// Multi-head self-attention over the H*W token grid with a residual path:
///   y = x + W_o V softmax(Q^T K / sqrt(d))^T
template <typename Scalar>
struct AttentionBlock {
  int channels = 0;
  int heads = 1;
  Conv2d<Scalar> wq, wk, wv, wo;

  AttentionBlock(ad::ParameterSet<Scalar>& ps, const std::string& name, int channels_, int heads_, Rng& rng)
      : channels(channels_),
        heads(heads_),
        wq(ps, name + ".q", channels_, channels_, 1, 1, ad::Padding::zero, rng, false, false),
        wk(ps, name + ".k", channels_, channels_, 1, 1, ad::Padding::zero, rng, false, false),
        wv(ps, name + ".v", channels_, channels_, 1, 1, ad::Padding::zero, rng, false, false),
        wo(ps, name + ".o", channels_, channels_, 1, 1, ad::Padding::zero, rng, false, false) {
    if (heads < 1 || channels % heads != 0) throw std::invalid_argument("AttentionBlock: channels not divisible by heads");
  }

  ad::Tensor<Scalar> operator()(const ad::Tensor<Scalar>& x) const {
    const int batch = x.dim(0);
    const int tokens = x.dim(2) * x.dim(3);
    const int d = channels / heads;
    const ad::Shape split{batch * heads, d, tokens};
    const auto q = ad::reshape(wq(x), split);
    const auto k = ad::reshape(wk(x), split);
    const auto v = ad::reshape(wv(x), split);
    const auto attn = ad::softmax(ad::scale(ad::bmm(q, k, true, false), Scalar(1) / std::sqrt(static_cast<Scalar>(d))));
    const auto o = ad::reshape(ad::bmm(v, attn, false, true), x.shape());
    return ad::add(x, wo(o));
  }
};

}  // namespace nn

/// Noise predictor eps_theta(n_t, t).
template <typename Scalar>
class GmcUnet {
 public:
  explicit GmcUnet(const UNetConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    nn::Rng rng(seed);
    const int tdim = cfg_.time_dim();
    time_ = nn::TimeEmbedding<Scalar>(params_, "time", cfg_.base_channels, tdim, rng);
    in_conv_ = nn::Conv2d<Scalar>(params_, "in", cfg_.image_channels, cfg_.base_channels, 3, 1, cfg_.padding, rng);

    int ch = cfg_.base_channels;
    for (int s = 0; s < cfg_.stages; ++s) {
      const std::string p = "enc." + std::to_string(s);
      const int out = cfg_.channels_at(s);
      encoder_.push_back(std::make_unique<nn::ResBlock<Scalar>>(params_, p + ".res", ch, out, tdim, cfg_, rng));
      down_.emplace_back(params_, p + ".down", out, out, 3, 2, cfg_.padding, rng);
      ch = out;
    }

    const int mid_before = (cfg_.middle_blocks + 1) / 2;
    for (int i = 0; i < cfg_.middle_blocks; ++i) {
      const std::string p = "mid." + std::to_string(i);
      auto& list = i < mid_before ? mid_pre_ : mid_post_;
      if (cfg_.block == BlockType::cde) {
        list.push_back({std::make_unique<nn::CdeBlock<Scalar>>(params_, p + ".cde", ch, tdim, cfg_, rng), nullptr});
      } else {
        list.push_back({nullptr, std::make_unique<nn::ResBlock<Scalar>>(params_, p + ".res", ch, ch, tdim, cfg_, rng)});
      }
    }
    if (cfg_.middle_attention) {
      attention_ = std::make_unique<nn::AttentionBlock<Scalar>>(params_, "mid.attn", ch, cfg_.attention_heads, rng);
    }

    for (int s = cfg_.stages - 1; s >= 0; --s) {
      const std::string p = "dec." + std::to_string(s);
      const int out = cfg_.channels_at(s);
      up_.emplace_back(params_, p + ".up", ch, ch, 3, 1, cfg_.padding, rng);
      decoder_.push_back(std::make_unique<nn::ResBlock<Scalar>>(params_, p + ".res", ch + out, out, tdim, cfg_, rng));
      ch = out;
    }
    out_norm_ = nn::GroupNorm<Scalar>(params_, "out.norm", ch, cfg_.norm_groups);
    out_conv_ = nn::Conv2d<Scalar>(params_, "out.conv", ch, cfg_.image_channels, 3, 1, cfg_.padding, rng, /*zero_init=*/true);
  }

  GmcUnet(const GmcUnet&) = delete;
  GmcUnet& operator=(const GmcUnet&) = delete;

  const UNetConfig& config() const { return cfg_; }
  ad::ParameterSet<Scalar>& parameters() { return params_; }
  const ad::ParameterSet<Scalar>& parameters() const { return params_; }

  /// eps_hat for a batch (B, C, H, W) at per-sample steps.
  ad::Tensor<Scalar> forward(const ad::Tensor<Scalar>& x, const std::vector<int>& steps) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.image_channels || x.dim(2) != cfg_.image_side || x.dim(3) != cfg_.image_side) {
      throw std::invalid_argument("GmcUnet::forward: expected (B, " + std::to_string(cfg_.image_channels) + ", " +
                                  std::to_string(cfg_.image_side) + ", " + std::to_string(cfg_.image_side) + "), got " +
                                  ad::shape_string(x.shape()));
    }
    if (static_cast<int>(steps.size()) != x.dim(0)) throw std::invalid_argument("GmcUnet::forward: one step per sample");
    const auto emb = time_(steps);
    auto h = in_conv_(x);
    std::vector<ad::Tensor<Scalar>> skips;
    for (std::size_t s = 0; s < encoder_.size(); ++s) {
      h = (*encoder_[s])(h, emb);
      skips.push_back(h);
      h = down_[s](h);
    }
    h = middle(h, emb);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      h = up_[i](ad::upsample_nearest2x(h));
      h = ad::concat_channels(h, skips[skips.size() - 1 - i]);
      h = (*decoder_[i])(h, emb);
    }
    return out_conv_(ad::silu(out_norm_(h)));
  }

  ad::Tensor<Scalar> forward(const ad::Tensor<Scalar>& x, int step) const {
    return forward(x, std::vector<int>(static_cast<std::size_t>(x.dim(0)), step));
  }

  /// Middle block alone: blocks, attention, blocks.
  ad::Tensor<Scalar> middle(ad::Tensor<Scalar> h, const ad::Tensor<Scalar>& emb) const {
    for (const auto& b : mid_pre_) h = b.cde ? (*b.cde)(h, emb) : (*b.res)(h, emb);
    if (attention_) h = (*attention_)(h);
    for (const auto& b : mid_post_) h = b.cde ? (*b.cde)(h, emb) : (*b.res)(h, emb);
    return h;
  }

  ad::Tensor<Scalar> time_embedding(const std::vector<int>& steps) const { return time_(steps); }

 private:
  struct MiddleBlock {
    std::unique_ptr<nn::CdeBlock<Scalar>> cde;
    std::unique_ptr<nn::ResBlock<Scalar>> res;
  };

  UNetConfig cfg_;
  ad::ParameterSet<Scalar> params_;
  nn::TimeEmbedding<Scalar> time_;
  nn::Conv2d<Scalar> in_conv_;
  std::vector<std::unique_ptr<nn::ResBlock<Scalar>>> encoder_;
  std::vector<nn::Conv2d<Scalar>> down_;
  std::vector<MiddleBlock> mid_pre_;
  std::vector<MiddleBlock> mid_post_;
  std::unique_ptr<nn::AttentionBlock<Scalar>> attention_;
  std::vector<nn::Conv2d<Scalar>> up_;
  std::vector<std::unique_ptr<nn::ResBlock<Scalar>>> decoder_;
  nn::GroupNorm<Scalar> out_norm_;
  nn::Conv2d<Scalar> out_conv_;
};

}  // namespace mflow
