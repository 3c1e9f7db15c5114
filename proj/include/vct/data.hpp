#pragma once

// Bitemporal pair ingestion, patch tiling, and the synthetic change-pair
// generator used for desk-scale training.

#include <cstdint>
#include <string>
#include <vector>

namespace vct {

struct ImagePair {
  int height = 0;
  int width = 0;
  std::vector<float> a, b;           // H*W*3, values in [0,1]
  std::vector<std::uint8_t> label;   // H*W, 0/1; empty when unlabeled
  std::string id;

  bool has_label() const { return !label.empty(); }
};

// 8-bit RGB inputs of equal size; label grayscale, binarized at >127.
ImagePair load_pair(const std::string& path_a, const std::string& path_b,
                    const std::string& path_label = "");

// Row-major non-overlapping tiling; remainder rows/cols are dropped with a
// warning on stderr. Tile ids get a "_ty_tx" suffix.
std::vector<ImagePair> tile(const ImagePair& pair, int patch = 256);

// Reassembles a row-major tile list; test support for the tiling round trip.
ImagePair untile(const std::vector<ImagePair>& tiles, int tiles_y,
                 int tiles_x);

struct SyntheticConfig {
  int size = 64;
  int min_shapes = 2;
  int max_shapes = 5;
  double brightness_jitter = 0.1;
  double noise_std = 0.02;
  std::uint64_t seed = 0;
};

enum class ShapePresence { Both, OnlyA, OnlyB };

struct SynthShape {
  bool is_disc = false;
  // rect: [y0,y1) x [x0,x1); disc: center (cy,cx), radius r
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  double cy = 0, cx = 0, r = 0;
  ShapePresence presence = ShapePresence::Both;
  float color[3] = {0, 0, 0};

  bool contains(int y, int x) const {
    if (!is_disc) return y >= y0 && y < y1 && x >= x0 && x < x1;
    const double dy = y - cy, dx = x - cx;
    return dy * dy + dx * dx < r * r;
  }
};

// Deterministic in (cfg.seed, index). The label marks exactly the pixels of
// shapes present in one image only; brightness jitter and noise never enter
// the mask.
ImagePair generate_synthetic_pair(const SyntheticConfig& cfg, int index,
                                  std::vector<SynthShape>* shapes_out = nullptr);

std::vector<ImagePair> generate_synthetic(const SyntheticConfig& cfg, int n);

// Stable id-hash split: 0 = train (8/10), 1 = val (1/10), 2 = test (1/10).
int split_of(const std::string& id);

}  // namespace vct
