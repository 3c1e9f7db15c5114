#pragma once

// Prediction head: feature differencing, bilinear upsampling back to input
// resolution, a small conv decoder to two channels, and the BCE loss.

#include <random>
#include <string>

#include "vct/params.hpp"
#include "vct/tensor.hpp"

namespace vct {

template <class T>
Ptr<T> difference_features(Tape<T>& tape, const Ptr<T>& x1p,
                           const Ptr<T>& x2p) {
  return abs_elem(tape, sub(tape, x1p, x2p));
}

template <class T>
struct HeadParams {
  Ptr<T> w1, b1, w2, b2, w3, b3;
};

template <class T>
HeadParams<T> make_head_params(ParamRegistry<T>& reg, int c,
                               std::mt19937_64& rng) {
  if (c < 2 || c % 2 != 0)
    throw ShapeError("make_head_params: feature width must be even");
  const int ch = c / 2;
  HeadParams<T> p;
  p.w1 = reg.add("head.conv1.w", zeros<T>({3, 3, c, ch}));
  init_he(p.w1, std::size_t(9) * c, rng);
  p.b1 = reg.add("head.conv1.b", zeros<T>({ch}));
  p.w2 = reg.add("head.conv2.w", zeros<T>({3, 3, ch, ch}));
  init_he(p.w2, std::size_t(9) * ch, rng);
  p.b2 = reg.add("head.conv2.b", zeros<T>({ch}));
  p.w3 = reg.add("head.conv3.w", zeros<T>({1, 1, ch, 2}));
  init_he(p.w3, ch, rng);
  p.b3 = reg.add("head.conv3.b", zeros<T>({2}));
  return p;
}

// d is H x W x C; returns (H0*W0) x 2 post-softmax probabilities with
// H0 = H * factor.
template <class T>
Ptr<T> decode(Tape<T>& tape, const Ptr<T>& d, const HeadParams<T>& p,
              int factor) {
  auto u = upsample_bilinear(tape, d, factor);
  auto h = gelu(tape, conv2d(tape, u, p.w1, p.b1, 1, 1));
  h = gelu(tape, conv2d(tape, h, p.w2, p.b2, 1, 1));
  h = conv2d(tape, h, p.w3, p.b3, 1, 0);
  const int pixels = h->shape[0] * h->shape[1];
  return softmax_rows(tape, reshape(tape, h, {pixels, 2}));
}

// one-hot ground truth from a binary mask, channel 1 = changed
template <class T>
Ptr<T> one_hot(const std::vector<std::uint8_t>& labels) {
  auto g = zeros<T>({static_cast<int>(labels.size()), 2});
  for (std::size_t i = 0; i < labels.size(); ++i)
    g->value[i * 2 + (labels[i] ? 1 : 0)] = T(1);
  return g;
}

// mean over pixels of -sum_channels G log P
template <class T>
Ptr<T> bce_loss(Tape<T>& tape, const Ptr<T>& g, const Ptr<T>& p) {
  detail::check_same_shape(g, p, "bce_loss");
  const T pixels = static_cast<T>(p->shape[0]);
  auto ce = mul(tape, g, log_clamped(tape, p, T(1e-12)));
  return scale(tape, sum(tape, ce), T(-1) / pixels);
}

// hard mask: argmax channel per pixel
template <class T>
std::vector<std::uint8_t> hard_mask(const Ptr<T>& probs) {
  std::vector<std::uint8_t> m(probs->shape[0]);
  for (int i = 0; i < probs->shape[0]; ++i)
    m[i] = probs->value[i * 2 + 1] > probs->value[i * 2] ? 1 : 0;
  return m;
}

}  // namespace vct
