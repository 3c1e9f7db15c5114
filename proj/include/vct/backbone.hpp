#pragma once

// Siamese convolutional encoder. Three residual stages, each: conv3x3
// (stride 1, pad 1) -> GELU -> 2x2 mean pool -> residual conv3x3. Both
// branches read the same parameter registry.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "vct/params.hpp"
#include "vct/tensor.hpp"

namespace vct {

struct EncoderConfig {
  std::vector<int> channels = {16, 32, 32};
  int in_channels = 3;

  int downsample_factor() const { return 1 << channels.size(); }
  int out_channels() const { return channels.back(); }
};

// Registers and He-initializes the encoder parameters.
template <class T>
void make_encoder_params(ParamRegistry<T>& reg, const EncoderConfig& cfg,
                         std::mt19937_64& rng) {
  int cin = cfg.in_channels;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const int cs = cfg.channels[s];
    const std::string base = "enc.s" + std::to_string(s) + ".";
    auto w1 = reg.add(base + "conv1.w", zeros<T>({3, 3, cin, cs}));
    init_he(w1, std::size_t(9) * cin, rng);
    reg.add(base + "conv1.b", zeros<T>({cs}));
    auto w2 = reg.add(base + "conv2.w", zeros<T>({3, 3, cs, cs}));
    init_he(w2, std::size_t(9) * cs, rng);
    reg.add(base + "conv2.b", zeros<T>({cs}));
    cin = cs;
  }
}

template <class T>
Ptr<T> encode(Tape<T>& tape, const Ptr<T>& image, const ParamRegistry<T>& reg,
              const EncoderConfig& cfg) {
  if (image->shape.size() != 3 || image->shape[2] != cfg.in_channels)
    throw ShapeError("encode: expected H0 x W0 x " +
                     std::to_string(cfg.in_channels) + " image");
  const int f = cfg.downsample_factor();
  if (image->shape[0] % f != 0 || image->shape[1] % f != 0)
    throw ShapeError("encode: extents not divisible by downsample factor " +
                     std::to_string(f));
  Ptr<T> x = image;
  for (std::size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::string base = "enc.s" + std::to_string(s) + ".";
    auto h = avg_pool2(
        tape, gelu(tape, conv2d(tape, x, reg.find(base + "conv1.w"),
                                reg.find(base + "conv1.b"), 1, 1)));
    x = add(tape, h,
            conv2d(tape, h, reg.find(base + "conv2.w"),
                   reg.find(base + "conv2.b"), 1, 1));
  }
  return x;
}

}  // namespace vct
