#include "mega/nn.hpp"

#include <cmath>

#include "mega/error.hpp"

namespace mega {

Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

ConvStack::ConvStack(std::size_t in_channels, const std::vector<Layer>& layers, Rng& rng)
    : in_channels_(in_channels), layers_(layers) {
  MEGA_CHECK(!layers.empty(), "ConvStack needs at least one layer");
  std::size_t cin = in_channels;
  for (const auto& l : layers) {
    MEGA_CHECK(l.kernel == 1 || l.kernel == 3, "ConvStack: kernel must be 1 or 3");
    MEGA_CHECK(l.out_channels > 0, "ConvStack: zero-width layer");
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * l.kernel * l.kernel));
    std::normal_distribution<double> normal(0.0, stddev);
    std::vector<double> w(l.out_channels * cin * l.kernel * l.kernel);
    for (auto& v : w) v = normal(rng);
    weights_.push_back(Tensor::from({l.out_channels, cin, l.kernel, l.kernel}, std::move(w), true));
    biases_.push_back(Tensor::zeros({l.out_channels}, true));
    cin = l.out_channels;
  }
}

ConvStack ConvStack::identity(std::size_t channels) {
  ConvStack s;
  s.in_channels_ = channels;
  s.layers_ = {{channels, 1, false}};
  std::vector<double> w(channels * channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) w[c * channels + c] = 1.0;
  s.weights_.push_back(Tensor::from({channels, channels, 1, 1}, std::move(w), true));
  s.biases_.push_back(Tensor::zeros({channels}, true));
  return s;
}

std::vector<Tensor> ConvStack::forward_all(const Tensor& x) const {
  MEGA_CHECK(!weights_.empty(), "ConvStack: forward on empty stack");
  std::vector<Tensor> acts;
  Tensor h = x;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    h = conv2d(h, weights_[i], biases_[i]);
    if (layers_[i].relu) h = relu(h);
    acts.push_back(h);
  }
  return acts;
}

Tensor ConvStack::forward(const Tensor& x) const { return forward_all(x).back(); }

std::size_t ConvStack::out_channels() const { return layers_.empty() ? in_channels_ : layers_.back().out_channels; }

std::vector<Tensor> ConvStack::parameters() const {
  std::vector<Tensor> ps;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    ps.push_back(weights_[i]);
    ps.push_back(biases_[i]);
  }
  return ps;
}

ConvStack ConvStack::clone() const {
  ConvStack s;
  s.in_channels_ = in_channels_;
  s.layers_ = layers_;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto& w = weights_[i];
    const auto& b = biases_[i];
    s.weights_.push_back(Tensor::from(w.shape(), {w.data().begin(), w.data().end()}, true));
    s.biases_.push_back(Tensor::from(b.shape(), {b.data().begin(), b.data().end()}, true));
  }
  return s;
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
  for (const auto& p : params_) {
    MEGA_CHECK(p.is_leaf() && p.requires_grad(), "SgdMomentum: parameters must be trainable leaves");
    velocity_.emplace_back(p.size(), 0.0);
  }
}

void SgdMomentum::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void SgdMomentum::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto& v = velocity_[i];
    auto x = p.mutable_data();
    for (std::size_t j = 0; j < x.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      x[j] -= lr * v[j];
    }
  }
}

}  // namespace mega
