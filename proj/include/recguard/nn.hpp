#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "recguard/tape.hpp"

namespace recguard {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor::zeros(value.shape());
  }
  void zero_grad() {
    ensure_grad();
    grad.fill(0.0f);
  }
};

// A forward pass either learns (params enter the tape with gradients and the
// per-sample grads are pulled back out by the trainer) or is frozen.
struct ParamBinding {
  Param* p;
  int node;
};

class Bindings {
 public:
  int use(Tape& t, Param& p, bool trainable) {
    int id = t.leaf(p.value, trainable);
    if (trainable) list_.push_back({&p, id});
    return id;
  }
  // Pull per-sample parameter gradients off the tape, in registration order.
  void harvest(const Tape& t) {
    for (const auto& b : list_) {
      const Tensor& g = t.grad(b.node);
      if (g.empty()) continue;
      b.p->ensure_grad();
      b.p->grad.add_(g);
    }
  }

 private:
  std::vector<ParamBinding> list_;
};

// ---- layers ----

struct Conv2d {
  Param w, b;
  int stride = 1;
  int pad = 0;
  bool with_bias = true;

  void init(const std::string& name, int in_ch, int out_ch, int kernel, int stride_, Rng& rng,
            float w_std = -1.0f, bool bias = true) {
    stride = stride_;
    pad = kernel / 2;
    with_bias = bias;
    float std_dev = w_std > 0.0f
                        ? w_std
                        : std::sqrt(2.0f / (static_cast<float>(in_ch) * kernel * kernel));
    w = {name + ".w", Tensor::randn({out_ch, in_ch, kernel, kernel}, rng, std_dev), {}};
    if (bias) b = {name + ".b", Tensor::zeros({out_ch}), {}};
  }

  int forward(Tape& t, Bindings& bind, int x, bool trainable) {
    int wi = bind.use(t, w, trainable);
    int bi = with_bias ? bind.use(t, b, trainable) : -1;
    return t.conv2d(x, wi, bi, stride, pad);
  }

  void params(std::vector<Param*>& out) {
    out.push_back(&w);
    if (with_bias) out.push_back(&b);
  }
};

// Per-channel affine normalization. Train mode normalizes by the sample's own
// spatial statistics; frozen mode uses running statistics captured by a
// calibration sweep, so inference is independent of batch composition.
struct ChannelNorm {
  Param gain, bias;
  Tensor run_mean, run_var;
  float eps = 1e-4f;
  // calibration accumulators
  std::vector<double> acc_sum, acc_sq;
  long acc_count = 0;

  void init(const std::string& name, int channels, float gain_init = 1.0f) {
    gain = {name + ".g", Tensor::full({channels}, gain_init), {}};
    bias = {name + ".b", Tensor::zeros({channels}), {}};
    run_mean = Tensor::zeros({channels});
    run_var = Tensor::full({channels}, 1.0f);
  }

  int forward(Tape& t, Bindings& bind, int x, bool train_stats, bool trainable) {
    int gi = bind.use(t, gain, trainable);
    int bi = bind.use(t, bias, trainable);
    if (train_stats) {
      Tensor m, v;
      Tape::stats_of(t.value(x), m, v);
      return t.channel_norm(x, gi, bi, m, v, eps, true);
    }
    return t.channel_norm(x, gi, bi, run_mean, run_var, eps, false);
  }

  void calib_begin() {
    int c = gain.value.dim(0);
    acc_sum.assign(static_cast<std::size_t>(c), 0.0);
    acc_sq.assign(static_cast<std::size_t>(c), 0.0);
    acc_count = 0;
  }
  void calib_observe(const Tensor& x) {
    int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    for (int ci = 0; ci < c; ++ci) {
      const float* row = x.data() + static_cast<std::size_t>(ci) * hw;
      for (int i = 0; i < hw; ++i) {
        acc_sum[static_cast<std::size_t>(ci)] += row[i];
        acc_sq[static_cast<std::size_t>(ci)] += static_cast<double>(row[i]) * row[i];
      }
    }
    acc_count += hw;
  }
  void calib_end() {
    if (acc_count == 0) return;
    int c = gain.value.dim(0);
    for (int ci = 0; ci < c; ++ci) {
      double m = acc_sum[static_cast<std::size_t>(ci)] / static_cast<double>(acc_count);
      double v = acc_sq[static_cast<std::size_t>(ci)] / static_cast<double>(acc_count) - m * m;
      run_mean[static_cast<std::size_t>(ci)] = static_cast<float>(m);
      run_var[static_cast<std::size_t>(ci)] = static_cast<float>(std::max(v, 0.0));
    }
  }

  void params(std::vector<Param*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

struct PReLU {
  Param slope;
  void init(const std::string& name, int channels, float a0 = 0.25f) {
    slope = {name + ".a", Tensor::full({channels}, a0), {}};
  }
  int forward(Tape& t, Bindings& bind, int x, bool trainable) {
    return t.prelu(x, bind.use(t, slope, trainable));
  }
  void params(std::vector<Param*>& out) { out.push_back(&slope); }
};

struct Dense {
  Param w, b;
  bool with_bias = true;
  void init(const std::string& name, int in_dim, int out_dim, Rng& rng, float w_std = -1.0f,
            bool bias = true) {
    with_bias = bias;
    float std_dev = w_std > 0.0f ? w_std : std::sqrt(2.0f / static_cast<float>(in_dim));
    w = {name + ".w", Tensor::randn({out_dim, in_dim}, rng, std_dev), {}};
    if (bias) b = {name + ".b", Tensor::zeros({out_dim}), {}};
  }
  int forward(Tape& t, Bindings& bind, int x, bool trainable) {
    int wi = bind.use(t, w, trainable);
    int bi = with_bias ? bind.use(t, b, trainable) : -1;
    return t.dense(x, wi, bi);
  }
  void params(std::vector<Param*>& out) {
    out.push_back(&w);
    if (with_bias) out.push_back(&b);
  }
};

// Single-head global self-attention over flattened spatial positions with a
// residual skip: every position attends to every other, which is what lets
// the block mix content globally.
struct SelfAttention2d {
  Param wq, wk, wv, wo;
  int channels = 0;

  void init(const std::string& name, int ch, Rng& rng) {
    channels = ch;
    float std_dev = std::sqrt(1.0f / static_cast<float>(ch));
    wq = {name + ".wq", Tensor::randn({ch, ch}, rng, std_dev), {}};
    wk = {name + ".wk", Tensor::randn({ch, ch}, rng, std_dev), {}};
    wv = {name + ".wv", Tensor::randn({ch, ch}, rng, std_dev), {}};
    // zero output projection: the block starts as an identity
    wo = {name + ".wo", Tensor::zeros({ch, ch}), {}};
  }

  int forward(Tape& t, Bindings& bind, int x, bool trainable) {
    const Tensor& vx = t.value(x);
    int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
    int tok = t.chw_to_tokens(x);  // [P, C]
    int q = t.matmul(tok, bind.use(t, wq, trainable));
    int k = t.matmul(tok, bind.use(t, wk, trainable));
    int v = t.matmul(tok, bind.use(t, wv, trainable));
    int att = t.scale(t.matmul(q, t.transpose(k)), 1.0f / std::sqrt(static_cast<float>(c)));
    int a = t.softmax_rows(att);
    int mixed = t.matmul(t.matmul(a, v), bind.use(t, wo, trainable));
    return t.add(x, t.tokens_to_chw(mixed, c, h, w));
  }

  void params(std::vector<Param*>& out) {
    out.push_back(&wq);
    out.push_back(&wk);
    out.push_back(&wv);
    out.push_back(&wo);
  }
};

// ---- optimizers ----

class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Param*> params, float lr, float momentum = 0.0f)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    for (Param* p : params_) velocity_.emplace_back(Tensor::zeros(p->value.shape()));
  }
  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param* p = params_[i];
      p->ensure_grad();
      if (momentum_ > 0.0f) {
        Tensor& v = velocity_[i];
        for (std::size_t j = 0; j < v.numel(); ++j) {
          v[j] = momentum_ * v[j] - lr_ * p->grad[j];
          p->value[j] += v[j];
        }
      } else {
        for (std::size_t j = 0; j < p->value.numel(); ++j) p->value[j] -= lr_ * p->grad[j];
      }
    }
  }
  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param*> params_;
  float lr_;
  float momentum_;
  std::vector<Tensor> velocity_;
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Param*> params, float lr, float b1 = 0.9f, float b2 = 0.999f,
                float eps = 1e-8f)
      : params_(std::move(params)), lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
    for (Param* p : params_) {
      m_.emplace_back(Tensor::zeros(p->value.shape()));
      v_.emplace_back(Tensor::zeros(p->value.shape()));
    }
  }
  void set_lr(float lr) { lr_ = lr; }
  float lr() const { return lr_; }

  void step() {
    ++t_;
    float bc1 = 1.0f - std::pow(b1_, static_cast<float>(t_));
    float bc2 = 1.0f - std::pow(b2_, static_cast<float>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param* p = params_[i];
      p->ensure_grad();
      for (std::size_t j = 0; j < p->value.numel(); ++j) {
        float g = p->grad[j];
        m_[i][j] = b1_ * m_[i][j] + (1.0f - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1.0f - b2_) * g * g;
        float mh = m_[i][j] / bc1;
        float vh = v_[i][j] / bc2;
        p->value[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }
  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param*> params_;
  float lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace recguard
