// Copyright Contributors to the SPINE Project
// SPDX-License-Identifier: Apache-2.0
//
// Minimal multilayer perceptron with hand-written reverse mode and an Adam
// optimizer over flat parameter blocks. Shared by the semantic field heads
// and the inverse pose model.

#pragma once

#include "spine/common.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace spine::nn {

struct Dense {
  MatX weight;  // out x in
  VecX bias;    // out

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }

  static Dense zeros(int in, int out) { return {MatX::Zero(out, in), VecX::Zero(out)}; }

  /// Glorot-uniform weights, zero bias.
  static Dense glorot(int in, int out, Rng& rng) {
    Dense d = zeros(in, out);
    const double lim = std::sqrt(6.0 / (in + out));
    for (int r = 0; r < out; ++r)
      for (int c = 0; c < in; ++c) d.weight(r, c) = rng.uniform(-lim, lim);
    return d;
  }
};

/// Fully connected network with tanh between layers and a linear output.
struct Mlp {
  std::vector<Dense> layers;

  int in() const { return layers.front().in(); }
  int out() const { return layers.back().out(); }

  static Mlp glorot(const std::vector<int>& widths, Rng& rng) {
    require(widths.size() >= 2, "Mlp: need at least input and output widths");
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      m.layers.push_back(Dense::glorot(widths[i], widths[i + 1], rng));
    return m;
  }

  /// Same shape, all parameters zero (used as a gradient accumulator).
  Mlp zeros_like() const {
    Mlp m;
    for (const auto& l : layers) m.layers.push_back(Dense::zeros(l.in(), l.out()));
    return m;
  }

  void set_zero() {
    for (auto& l : layers) {
      l.weight.setZero();
      l.bias.setZero();
    }
  }

  /// Activations per layer input; acts[0] is the network input.
  struct Cache {
    std::vector<VecX> acts;
  };

  VecX forward(const VecX& x, Cache* cache = nullptr) const {
    require(x.size() == in(), "Mlp: input dimension mismatch");
    VecX a = x;
    if (cache) cache->acts.assign(1, x);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      VecX z = layers[i].weight * a + layers[i].bias;
      if (i + 1 < layers.size()) z = z.array().tanh().matrix();
      a = std::move(z);
      if (cache && i + 1 < layers.size()) cache->acts.push_back(a);
    }
    return a;
  }

  /// Accumulates parameter gradients into `grad` for upstream gradient
  /// `dy` at the output; returns the gradient w.r.t. the input.
  VecX backward(const Cache& cache, const VecX& dy, Mlp& grad) const {
    VecX g = dy;
    for (std::size_t i = layers.size(); i-- > 0;) {
      const VecX& a = cache.acts[i];
      grad.layers[i].weight.noalias() += g * a.transpose();
      grad.layers[i].bias += g;
      VecX ga = layers[i].weight.transpose() * g;
      if (i > 0) ga.array() *= (1.0 - a.array().square());
      g = std::move(ga);
    }
    return g;
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& l : layers) {
      f(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      f(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
  }
  template <typename F>
  void visit(F&& f) const {
    for (const auto& l : layers) {
      f(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
      f(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
  }
};

/// Adam over an ordered list of parameter blocks. Gradient blocks must be
/// listed in the same order and with the same sizes as at construction.
class Adam {
 public:
  struct Config {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam(std::size_t total, Config cfg) : cfg_(cfg), m_(total, 0.0), v_(total, 0.0) {}

  void step(const std::vector<std::span<double>>& params,
            const std::vector<std::span<const double>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t k = 0;
    for (std::size_t b = 0; b < params.size(); ++b) {
      auto p = params[b];
      auto g = grads[b];
      for (std::size_t i = 0; i < p.size(); ++i, ++k) {
        m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g[i];
        v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.learning_rate * (m_[k] / c1) / (std::sqrt(v_[k] / c2) + cfg_.epsilon);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  Config cfg_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace spine::nn
