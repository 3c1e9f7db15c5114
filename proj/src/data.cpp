#include "vct/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "vct/png_io.hpp"

namespace vct {

namespace {

std::vector<float> to_unit(const ImageU8& img) {
  std::vector<float> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return out;
}

}  // namespace

ImagePair load_pair(const std::string& path_a, const std::string& path_b,
                    const std::string& path_label) {
  const ImageU8 ia = read_png(path_a, 3);
  const ImageU8 ib = read_png(path_b, 3);
  if (ia.height != ib.height || ia.width != ib.width)
    throw std::runtime_error("load_pair: size mismatch between " + path_a +
                             " and " + path_b);
  ImagePair p;
  p.height = ia.height;
  p.width = ia.width;
  p.a = to_unit(ia);
  p.b = to_unit(ib);
  p.id = path_a;
  if (!path_label.empty()) {
    const ImageU8 il = read_png(path_label, 1);
    if (il.height != ia.height || il.width != ia.width)
      throw std::runtime_error("load_pair: label size mismatch for " +
                               path_label);
    p.label.resize(il.pixels.size());
    for (std::size_t i = 0; i < p.label.size(); ++i)
      p.label[i] = il.pixels[i] > 127 ? 1 : 0;
  }
  return p;
}

std::vector<ImagePair> tile(const ImagePair& pair, int patch) {
  if (patch <= 0) throw std::invalid_argument("tile: patch must be positive");
  if (patch > pair.height || patch > pair.width)
    throw std::invalid_argument("tile: patch larger than image");
  const int ty = pair.height / patch, tx = pair.width / patch;
  if (pair.height % patch != 0 || pair.width % patch != 0)
    std::fprintf(stderr,
                 "tile: dropping %dx%d remainder of %s (patch %d)\n",
                 pair.height % patch, pair.width % patch, pair.id.c_str(),
                 patch);
  std::vector<ImagePair> out;
  out.reserve(static_cast<std::size_t>(ty) * tx);
  for (int r = 0; r < ty; ++r)
    for (int c = 0; c < tx; ++c) {
      ImagePair t;
      t.height = t.width = patch;
      t.id = pair.id + "_" + std::to_string(r) + "_" + std::to_string(c);
      t.a.resize(static_cast<std::size_t>(patch) * patch * 3);
      t.b.resize(t.a.size());
      if (pair.has_label())
        t.label.resize(static_cast<std::size_t>(patch) * patch);
      for (int y = 0; y < patch; ++y) {
        const std::size_t src =
            (static_cast<std::size_t>(r * patch + y) * pair.width +
             c * patch);
        const std::size_t dst = static_cast<std::size_t>(y) * patch;
        std::copy_n(pair.a.begin() + src * 3, patch * 3,
                    t.a.begin() + dst * 3);
        std::copy_n(pair.b.begin() + src * 3, patch * 3,
                    t.b.begin() + dst * 3);
        if (pair.has_label())
          std::copy_n(pair.label.begin() + src, patch, t.label.begin() + dst);
      }
      out.push_back(std::move(t));
    }
  return out;
}

ImagePair untile(const std::vector<ImagePair>& tiles, int tiles_y,
                 int tiles_x) {
  if (tiles.empty() ||
      tiles.size() != static_cast<std::size_t>(tiles_y) * tiles_x)
    throw std::invalid_argument("untile: tile count mismatch");
  const int patch = tiles[0].height;
  ImagePair out;
  out.height = tiles_y * patch;
  out.width = tiles_x * patch;
  out.a.resize(static_cast<std::size_t>(out.height) * out.width * 3);
  out.b.resize(out.a.size());
  const bool lab = tiles[0].has_label();
  if (lab) out.label.resize(static_cast<std::size_t>(out.height) * out.width);
  for (int r = 0; r < tiles_y; ++r)
    for (int c = 0; c < tiles_x; ++c) {
      const ImagePair& t = tiles[static_cast<std::size_t>(r) * tiles_x + c];
      for (int y = 0; y < patch; ++y) {
        const std::size_t dst =
            (static_cast<std::size_t>(r * patch + y) * out.width + c * patch);
        const std::size_t src = static_cast<std::size_t>(y) * patch;
        std::copy_n(t.a.begin() + src * 3, patch * 3, out.a.begin() + dst * 3);
        std::copy_n(t.b.begin() + src * 3, patch * 3, out.b.begin() + dst * 3);
        if (lab)
          std::copy_n(t.label.begin() + src, patch, out.label.begin() + dst);
      }
    }
  return out;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

float clamp01(double v) {
  return static_cast<float>(std::min(1.0, std::max(0.0, v)));
}

}  // namespace

ImagePair generate_synthetic_pair(const SyntheticConfig& cfg, int index,
                                  std::vector<SynthShape>* shapes_out) {
  if (cfg.size <= 0 || cfg.min_shapes < 0 || cfg.max_shapes < cfg.min_shapes)
    throw std::invalid_argument("generate_synthetic_pair: bad config");
  const int s = cfg.size;
  std::mt19937_64 rng(splitmix64(cfg.seed) ^
                      splitmix64(static_cast<std::uint64_t>(index) + 1));
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  // textured background: gradient plus one low-frequency sinusoid per channel
  std::vector<float> base(static_cast<std::size_t>(s) * s * 3);
  double b0[3], gy[3], gx[3], amp[3], fy[3], fx[3], ph[3];
  for (int c = 0; c < 3; ++c) {
    b0[c] = 0.25 + 0.4 * uni(rng);
    gy[c] = 0.3 * (uni(rng) - 0.5);
    gx[c] = 0.3 * (uni(rng) - 0.5);
    amp[c] = 0.08 * uni(rng);
    fy[c] = 1.0 + 3.0 * uni(rng);
    fx[c] = 1.0 + 3.0 * uni(rng);
    ph[c] = 6.283185307179586 * uni(rng);
  }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c)
        base[(static_cast<std::size_t>(y) * s + x) * 3 + c] = clamp01(
            b0[c] + gy[c] * y / s + gx[c] * x / s +
            amp[c] * std::sin(6.283185307179586 * (fy[c] * y + fx[c] * x) / s +
                              ph[c]));

  // non-overlapping shapes (overlap rejection keeps the label a plain union)
  std::uniform_int_distribution<int> nshapes(cfg.min_shapes, cfg.max_shapes);
  const int want = nshapes(rng);
  std::vector<SynthShape> shapes;
  for (int i = 0; i < want; ++i) {
    for (int attempt = 0; attempt < 50; ++attempt) {
      SynthShape sh;
      sh.is_disc = uni(rng) < 0.5;
      // keep shapes at least one backbone cell wide so the desk-scale task
      // is resolvable at feature resolution
      const int lo = std::max(4, s / 8);
      const int ext = lo + static_cast<int>(uni(rng) * (s / 4 - lo));
      const int py = static_cast<int>(uni(rng) * (s - ext));
      const int px = static_cast<int>(uni(rng) * (s - ext));
      sh.y0 = py;
      sh.x0 = px;
      sh.y1 = py + ext;
      sh.x1 = px + ext;
      if (sh.is_disc) {
        sh.cy = py + ext / 2.0;
        sh.cx = px + ext / 2.0;
        sh.r = ext / 2.0;
      }
      const double u = uni(rng);
      sh.presence = u < 0.5 ? ShapePresence::Both
                            : (u < 0.75 ? ShapePresence::OnlyA
                                        : ShapePresence::OnlyB);
      for (int c = 0; c < 3; ++c) sh.color[c] = static_cast<float>(uni(rng));
      bool overlaps = false;
      for (const auto& o : shapes)
        if (sh.y0 < o.y1 && o.y0 < sh.y1 && sh.x0 < o.x1 && o.x0 < sh.x1)
          overlaps = true;
      if (!overlaps) {
        shapes.push_back(sh);
        break;
      }
    }
  }

  ImagePair p;
  p.height = p.width = s;
  p.id = "synth_" + std::to_string(cfg.seed) + "_" + std::to_string(index);
  p.a = base;
  p.b = base;
  p.label.assign(static_cast<std::size_t>(s) * s, 0);
  for (const auto& sh : shapes) {
    for (int y = sh.y0; y < sh.y1; ++y)
      for (int x = sh.x0; x < sh.x1; ++x) {
        if (!sh.contains(y, x)) continue;
        const std::size_t pix = static_cast<std::size_t>(y) * s + x;
        if (sh.presence != ShapePresence::OnlyB)
          for (int c = 0; c < 3; ++c) p.a[pix * 3 + c] = sh.color[c];
        if (sh.presence != ShapePresence::OnlyA)
          for (int c = 0; c < 3; ++c) p.b[pix * 3 + c] = sh.color[c];
        if (sh.presence != ShapePresence::Both) p.label[pix] = 1;
      }
  }

  // label-irrelevant nuisances
  const double shift = cfg.brightness_jitter * (2.0 * uni(rng) - 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < p.a.size(); ++i) {
    const double na = cfg.noise_std != 0.0 ? cfg.noise_std * noise(rng) : 0.0;
    const double nb = cfg.noise_std != 0.0 ? cfg.noise_std * noise(rng) : 0.0;
    p.a[i] = clamp01(p.a[i] + na);
    p.b[i] = clamp01(p.b[i] + shift + nb);
  }

  if (shapes_out) *shapes_out = std::move(shapes);
  return p;
}

std::vector<ImagePair> generate_synthetic(const SyntheticConfig& cfg, int n) {
  std::vector<ImagePair> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(generate_synthetic_pair(cfg, i));
  return out;
}

int split_of(const std::string& id) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : id) {
    h ^= c;
    h *= 1099511628211ull;
  }
  const int bucket = static_cast<int>(h % 10);
  return bucket < 8 ? 0 : (bucket == 8 ? 1 : 2);
}

}  // namespace vct
