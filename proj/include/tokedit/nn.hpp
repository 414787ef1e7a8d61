#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tokedit/tensor.hpp"

namespace tokedit::nn {

// Ordered parameter registry. Order is construction order and is part of the
// checkpoint format, so layers must be constructed deterministically.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t, bool decay) {
    names_.push_back(name);
    tensors_.push_back(t);
    decay_.push_back(decay);
    return t;
  }

  size_t size() const { return tensors_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  Tensor& tensor(size_t i) { return tensors_[i]; }
  const Tensor& tensor(size_t i) const { return tensors_[i]; }
  bool decay(size_t i) const { return decay_[i]; }

  size_t param_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
  }

  // Frozen stores stop the tape: downstream graphs treat these tensors as
  // constants, which is how stage-2 training keeps G and the critic fixed.
  void freeze() {
    for (auto& t : tensors_) t.set_requires_grad(false);
  }

  uint64_t value_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tensors_) {
      h = fnv1a(t.data(), t.numel() * sizeof(float), h);
    }
    return h;
  }

  const Tensor* find(const std::string& name) const {
    for (size_t i = 0; i < names_.size(); i++)
      if (names_[i] == name) return &tensors_[i];
    return nullptr;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::vector<bool> decay_;
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int din, int dout, Rng& rng,
         float init_std = -1.0f, bool bias = true) {
    if (init_std < 0.0f) init_std = std::sqrt(2.0f / static_cast<float>(din));
    w = ps.add(name + ".w", Tensor::randn({din, dout}, rng, init_std, true), true);
    if (bias) b = ps.add(name + ".b", Tensor::zeros({dout}, true), false);
  }
  Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv {
  Tensor w, b;
  int stride = 1, pad = 1;
  Conv() = default;
  Conv(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad_,
       Rng& rng)
      : stride(stride_), pad(pad_) {
    float init_std = std::sqrt(2.0f / static_cast<float>(cin * k * k));
    w = ps.add(name + ".w", Tensor::randn({cout, cin, k, k}, rng, init_std, true), true);
    b = ps.add(name + ".b", Tensor::zeros({cout}, true), false);
  }
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int d) {
    gamma = ps.add(name + ".g", Tensor::full({d}, 1.0f, true), false);
    beta = ps.add(name + ".b", Tensor::zeros({d}, true), false);
  }
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct EmbeddingTable {
  Tensor table;
  EmbeddingTable() = default;
  EmbeddingTable(ParamStore& ps, const std::string& name, int vocab, int d, Rng& rng,
                 float init_std = 0.02f) {
    table = ps.add(name, Tensor::randn({vocab, d}, rng, init_std, true), false);
  }
  Tensor operator()(const std::vector<int>& ids) const { return embedding(table, ids); }
};

// AdamW with decoupled weight decay; decay applies only to params registered
// with decay=true.
class AdamW {
 public:
  AdamW(ParamStore& ps, double lr, double beta1, double beta2, double eps = 1e-8,
        double weight_decay = 0.0)
      : ps_(&ps), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
    m_.resize(ps.size());
    v_.resize(ps.size());
    for (size_t i = 0; i < ps.size(); i++) {
      m_[i].assign(ps.tensor(i).numel(), 0.0f);
      v_[i].assign(ps.tensor(i).numel(), 0.0f);
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

  void zero_grad() { ps_->zero_grad(); }

  double global_grad_norm() const {
    double acc = 0.0;
    for (size_t i = 0; i < ps_->size(); i++) {
      const auto& g = ps_->tensor(i).grad();
      for (float x : g) acc += static_cast<double>(x) * x;
    }
    return std::sqrt(acc);
  }

  void clip_global_norm(double max_norm) {
    double n = global_grad_norm();
    if (n <= max_norm || n == 0.0) return;
    float s = static_cast<float>(max_norm / n);
    for (size_t i = 0; i < ps_->size(); i++) {
      auto& t = ps_->tensor(i);
      auto& g = t.grad_mut();
      for (auto& x : g) x *= s;
    }
  }

  void step() {
    t_++;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < ps_->size(); i++) {
      Tensor& p = ps_->tensor(i);
      const auto& g = p.grad();
      if (g.empty()) continue;
      float* pv = p.data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      bool dec = ps_->decay(i) && wd_ > 0.0;
      for (size_t j = 0; j < g.size(); j++) {
        m[j] = static_cast<float>(b1_ * m[j] + (1.0 - b1_) * g[j]);
        v[j] = static_cast<float>(b2_ * v[j] + (1.0 - b2_) * static_cast<double>(g[j]) * g[j]);
        double mh = m[j] / bc1;
        double vh = v[j] / bc2;
        double upd = lr_ * mh / (std::sqrt(vh) + eps_);
        if (dec) upd += lr_ * wd_ * pv[j];
        pv[j] = static_cast<float>(pv[j] - upd);
      }
    }
  }

 private:
  ParamStore* ps_;
  double lr_, b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// Linear ramp to peak_lr over warmup_steps, then halve whenever the epoch
// mean loss fails to improve for `patience` consecutive epochs.
struct WarmupPlateauSchedule {
  double peak_lr = 1e-3;
  int warmup_steps = 100;
  int patience = 5;
  double min_improve = 1e-4;

  double best = 1e30;
  int bad_epochs = 0;
  double factor = 1.0;

  double lr_for_step(int64_t step) const {
    double warm = warmup_steps > 0
                      ? std::min(1.0, static_cast<double>(step + 1) / warmup_steps)
                      : 1.0;
    return peak_lr * warm * factor;
  }

  void observe_epoch(double mean_loss) {
    if (mean_loss < best - min_improve) {
      best = mean_loss;
      bad_epochs = 0;
    } else {
      bad_epochs++;
      if (bad_epochs >= patience) {
        factor *= 0.5;
        bad_epochs = 0;
      }
    }
  }
};

}  // namespace tokedit::nn
