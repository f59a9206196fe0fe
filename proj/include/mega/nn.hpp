#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mega/tensor.hpp"

namespace mega {

using Rng = std::mt19937_64;

// Derives an independent generator from a base seed and a stream tag, so
// that e.g. scene generation and weight init never share draws.
Rng make_rng(std::uint64_t seed, std::uint64_t stream);

// A stack of same-padded conv layers with optional ReLU after each.
class ConvStack {
 public:
  struct Layer {
    std::size_t out_channels;
    std::size_t kernel;  // 1 or 3
    bool relu;
  };

  ConvStack() = default;
  // He-normal weights, zero biases.
  ConvStack(std::size_t in_channels, const std::vector<Layer>& layers, Rng& rng);

  // Single 1×1 unit kernel, no bias, no activation.
  static ConvStack identity(std::size_t channels);

  Tensor forward(const Tensor& x) const;
  // Forward returning the activation after every layer.
  std::vector<Tensor> forward_all(const Tensor& x) const;

  std::size_t in_channels() const { return in_channels_; }
  std::size_t out_channels() const;
  std::size_t num_layers() const { return weights_.size(); }
  std::vector<Tensor> parameters() const;

  // Deep copy with fresh parameter leaves.
  ConvStack clone() const;

 private:
  std::size_t in_channels_ = 0;
  std::vector<Layer> layers_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

// Plain SGD with classical momentum: v ← μ·v + g; θ ← θ − lr·v.
class SgdMomentum {
 public:
  SgdMomentum() = default;
  SgdMomentum(std::vector<Tensor> params, double momentum);

  void zero_grad();
  void step(double lr);
  const std::vector<Tensor>& parameters() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_ = 0.0;
};

}  // namespace mega
