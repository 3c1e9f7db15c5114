#pragma once

// Reliable token mining: feature difference map, spatial graph + GCN coarse
// change map, top-K most-unchanged selection, and k-means anchors.
//
// The coarse-map path is detached from the encoder: selection indices and
// cluster assignments are constants for differentiation, gradients flow only
// through the gathered feature values and the centroid means.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "vct/tensor.hpp"

namespace vct {

// |x1 - x2| flattened to HW x C. Inputs are H x W x C.
template <class T>
Ptr<T> difference_map(Tape<T>& tape, const Ptr<T>& x1, const Ptr<T>& x2) {
  detail::check_same_shape(x1, x2, "difference_map");
  if (x1->shape.size() != 3)
    throw ShapeError("difference_map: expected HxWxC inputs");
  const int hw = x1->shape[0] * x1->shape[1];
  auto d = abs_elem(tape, sub(tape, x1, x2));
  return reshape(tape, d, {hw, x1->shape[2]});
}

template <class T>
struct SpatialGraph {
  int n = 0;
  // per node: sorted (neighbor, weight) pairs, symmetric, no self-loops
  std::vector<std::vector<std::pair<int, T>>> adj;
};

namespace detail {

inline const std::vector<std::pair<int, int>>& stencil_offsets(int knn) {
  static const std::vector<std::pair<int, int>> four = {
      {-1, 0}, {0, -1}, {0, 1}, {1, 0}};
  static const std::vector<std::pair<int, int>> eight = {
      {-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}};
  static const std::vector<std::pair<int, int>> sixteen = [] {
    // Moore-8 plus the eight knight cells of the radius-2 ring
    std::vector<std::pair<int, int>> v = eight;
    const int knight[8][2] = {{-2, -1}, {-2, 1}, {-1, -2}, {-1, 2},
                              {1, -2},  {1, 2},  {2, -1},  {2, 1}};
    for (auto& k : knight) v.push_back({k[0], k[1]});
    return v;
  }();
  switch (knn) {
    case 4:
      return four;
    case 8:
      return eight;
    case 16:
      return sixteen;
    default:
      throw std::invalid_argument("knn must be one of 4, 8, 16");
  }
}

}  // namespace detail

// A_ij = xbar_i . xbar_j for spatially adjacent nodes on the H x W grid.
template <class T>
SpatialGraph<T> build_adjacency(const std::vector<T>& xbar, int h, int w,
                                int c, int knn) {
  if (xbar.size() != static_cast<std::size_t>(h) * w * c)
    throw ShapeError("build_adjacency: xbar size mismatch");
  const auto& offsets = detail::stencil_offsets(knn);
  SpatialGraph<T> g;
  g.n = h * w;
  g.adj.resize(g.n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int i = y * w + x;
      for (const auto& [dy, dx] : offsets) {
        const int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        T dot = T(0);
        const T* xi = xbar.data() + static_cast<std::size_t>(i) * c;
        const T* xj = xbar.data() + static_cast<std::size_t>(j) * c;
        for (int k = 0; k < c; ++k) dot += xi[k] * xj[k];
        g.adj[i].emplace_back(j, dot);
      }
      std::sort(g.adj[i].begin(), g.adj[i].end());
    }
  return g;
}

// S = D~^{-1/2} (I + A) D~^{-1/2} with D~ the degree matrix of A + I.
template <class T>
SparseMatrix<T> normalized_operator(const SpatialGraph<T>& g) {
  std::vector<T> inv_sqrt_deg(g.n);
  for (int i = 0; i < g.n; ++i) {
    T d = T(1);  // self-loop
    for (const auto& [j, wgt] : g.adj[i]) d += wgt;
    inv_sqrt_deg[i] = T(1) / std::sqrt(d);
  }
  SparseMatrix<T> s;
  s.n = g.n;
  s.row_ptr.assign(g.n + 1, 0);
  for (int i = 0; i < g.n; ++i)
    s.row_ptr[i + 1] = s.row_ptr[i] + static_cast<int>(g.adj[i].size()) + 1;
  s.col.resize(s.row_ptr[g.n]);
  s.val.resize(s.row_ptr[g.n]);
  for (int i = 0; i < g.n; ++i) {
    int e = s.row_ptr[i];
    bool self_done = false;
    auto put_self = [&] {
      s.col[e] = i;
      s.val[e] = inv_sqrt_deg[i] * inv_sqrt_deg[i];
      ++e;
      self_done = true;
    };
    for (const auto& [j, wgt] : g.adj[i]) {
      if (!self_done && j > i) put_self();
      s.col[e] = j;
      s.val[e] = wgt * inv_sqrt_deg[i] * inv_sqrt_deg[j];
      ++e;
    }
    if (!self_done) put_self();
  }
  return s;
}

// GCN stack: relu between layers, logistic sigmoid on the final scalar
// layer, so the coarse map reads as probability. weights[i] maps the i-th
// layer; the last must project to one channel.
template <class T>
Ptr<T> gcn_forward(Tape<T>& tape, const SparseMatrix<T>& op, const Ptr<T>& h0,
                   const std::vector<Ptr<T>>& weights) {
  if (weights.empty()) throw std::invalid_argument("gcn_forward: no layers");
  if (weights.back()->shape[1] != 1)
    throw ShapeError("gcn_forward: final layer must output one channel");
  Ptr<T> h = h0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    h = matmul(tape, spmm(tape, op, h), weights[l]);
    h = (l + 1 == weights.size()) ? sigmoid(tape, h) : relu(tape, h);
  }
  return h;
}

// Indices of the k smallest values; ties broken by value then index.
template <class T>
std::vector<int> select_topk_unchanged(const std::vector<T>& p, int k) {
  if (k < 1 || k > static_cast<int>(p.size()))
    throw std::out_of_range("select_topk_unchanged: k out of range");
  std::vector<int> idx(p.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(),
                   [&p](int a, int b) { return p[a] < p[b]; });
  idx.resize(k);
  return idx;
}

template <class T>
struct KMeansResult {
  std::vector<T> centroids;           // l x dim
  std::vector<std::vector<int>> members;  // per cluster, point indices
  std::vector<int> assignment;        // per point
  int iterations = 0;
};

namespace detail {

// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded to
// the point farthest from its centroid; SSE must not increase between plain
// Lloyd iterations (asserted).
template <class T>
KMeansResult<T> kmeans_once(const std::vector<T>& pts, int count, int dim,
                            int l, int max_iters, std::uint64_t seed) {
  auto dist2 = [&](const T* a, const T* b) {
    T s = T(0);
    for (int d = 0; d < dim; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
    return s;
  };
  auto point = [&](int i) { return pts.data() + static_cast<std::size_t>(i) * dim; };

  KMeansResult<T> res;
  res.centroids.assign(static_cast<std::size_t>(l) * dim, T(0));
  auto center = [&](int j) {
    return res.centroids.data() + static_cast<std::size_t>(j) * dim;
  };

  // k-means++ seeding
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> first(0, count - 1);
  std::copy_n(point(first(rng)), dim, center(0));
  std::vector<double> d2(count);
  for (int j = 1; j < l; ++j) {
    double total = 0;
    for (int i = 0; i < count; ++i) {
      double best = static_cast<double>(dist2(point(i), center(0)));
      for (int jj = 1; jj < j; ++jj)
        best = std::min(best, static_cast<double>(dist2(point(i), center(jj))));
      d2[i] = best;
      total += best;
    }
    int pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0;
      for (int i = 0; i < count; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = first(rng);  // all points coincide; duplicate centers allowed
    }
    std::copy_n(point(pick), dim, center(j));
  }

  res.assignment.assign(count, 0);
  double prev_sse = -1.0;
  bool sse_baseline_valid = false;
  for (int iter = 0; iter < max_iters; ++iter) {
    ++res.iterations;
    bool changed = iter == 0;
    double sse = 0;
    for (int i = 0; i < count; ++i) {
      int best = 0;
      T bd = dist2(point(i), center(0));
      for (int j = 1; j < l; ++j) {
        const T d = dist2(point(i), center(j));
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      if (res.assignment[i] != best) changed = true;
      res.assignment[i] = best;
      sse += static_cast<double>(bd);
    }
    if (sse_baseline_valid) {
      assert(sse <= prev_sse + 1e-9 * (1.0 + prev_sse) &&
             "k-means SSE increased");
      if (sse > prev_sse + 1e-9 * (1.0 + prev_sse))
        throw std::logic_error("kmeans_cluster: SSE increased");
    }
    prev_sse = sse;
    sse_baseline_valid = true;
    if (!changed) break;

    // centroid update
    std::vector<int> counts(l, 0);
    std::fill(res.centroids.begin(), res.centroids.end(), T(0));
    for (int i = 0; i < count; ++i) {
      const int j = res.assignment[i];
      ++counts[j];
      T* cj = center(j);
      const T* pi = point(i);
      for (int d = 0; d < dim; ++d) cj[d] += pi[d];
    }
    for (int j = 0; j < l; ++j)
      if (counts[j] > 0)
        for (int d = 0; d < dim; ++d) center(j)[d] /= static_cast<T>(counts[j]);
    // empty clusters: re-seed to the farthest point from their centroid
    for (int j = 0; j < l; ++j) {
      if (counts[j] > 0) continue;
      int far = 0;
      T fd = dist2(point(0), center(j));
      for (int i = 1; i < count; ++i) {
        const T d = dist2(point(i), center(j));
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      std::copy_n(point(far), dim, center(j));
      sse_baseline_valid = false;  // reseed can move SSE either way
    }
  }

  // Hartigan improvement pass: Lloyd stops at Voronoi-stable configurations
  // that a single-point move can still improve. Moving i from cluster a to b
  // changes SSE by n_b/(n_b+1) d(i,cb)^2 - n_a/(n_a-1) d(i,ca)^2; apply
  // strictly improving moves until none remain.
  {
    std::vector<int> counts(l, 0);
    std::vector<double> sums(static_cast<std::size_t>(l) * dim, 0.0);
    for (int i = 0; i < count; ++i) {
      const int j = res.assignment[i];
      ++counts[j];
      for (int d = 0; d < dim; ++d)
        sums[std::size_t(j) * dim + d] += static_cast<double>(point(i)[d]);
    }
    auto cdist2 = [&](int i, int j) {
      double s = 0;
      for (int d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(point(i)[d]) -
                            sums[std::size_t(j) * dim + d] / counts[j];
        s += diff * diff;
      }
      return s;
    };
    for (int sweep = 0; sweep < 50; ++sweep) {
      bool moved = false;
      for (int i = 0; i < count; ++i) {
        const int a = res.assignment[i];
        if (counts[a] < 2) continue;
        const double lose = double(counts[a]) / (counts[a] - 1) * cdist2(i, a);
        int target = -1;
        double best_gain = -1e-12;
        for (int j = 0; j < l; ++j) {
          if (j == a || counts[j] == 0) continue;
          const double gain =
              double(counts[j]) / (counts[j] + 1) * cdist2(i, j) - lose;
          if (gain < best_gain) {
            best_gain = gain;
            target = j;
          }
        }
        if (target < 0) continue;
        for (int d = 0; d < dim; ++d) {
          const double v = static_cast<double>(point(i)[d]);
          sums[std::size_t(a) * dim + d] -= v;
          sums[std::size_t(target) * dim + d] += v;
        }
        --counts[a];
        ++counts[target];
        res.assignment[i] = target;
        moved = true;
      }
      if (!moved) break;
    }
    for (int j = 0; j < l; ++j)
      if (counts[j] > 0)
        for (int d = 0; d < dim; ++d)
          center(j)[d] = static_cast<T>(sums[std::size_t(j) * dim + d] / counts[j]);
  }

  // final membership; clusters left empty adopt their nearest point so the
  // centroid stays a convex combination of members (duplicates allowed)
  res.members.assign(l, {});
  for (int i = 0; i < count; ++i) res.members[res.assignment[i]].push_back(i);
  for (int j = 0; j < l; ++j) {
    if (!res.members[j].empty()) continue;
    int near = 0;
    T nd = dist2(point(0), center(j));
    for (int i = 1; i < count; ++i) {
      const T d = dist2(point(i), center(j));
      if (d < nd) {
        nd = d;
        near = i;
      }
    }
    res.members[j].push_back(near);
    std::copy_n(point(near), dim, center(j));
  }
  return res;
}

}  // namespace detail

// Restarted Lloyd: a handful of independent k-means++ inits, keep the
// lowest-SSE run. Restart 0 uses the caller's seed unchanged.
template <class T>
KMeansResult<T> kmeans_cluster(const std::vector<T>& pts, int count, int dim,
                               int l, int max_iters, std::uint64_t seed,
                               int restarts = 1) {
  if (l < 1 || l > count)
    throw std::invalid_argument("kmeans_cluster: l out of range");
  if (pts.size() != static_cast<std::size_t>(count) * dim)
    throw ShapeError("kmeans_cluster: point buffer size mismatch");
  if (restarts < 1)
    throw std::invalid_argument("kmeans_cluster: restarts must be >= 1");
  auto run_sse = [&](const KMeansResult<T>& r) {
    double sse = 0;
    for (int i = 0; i < count; ++i)
      for (int d = 0; d < dim; ++d) {
        const double diff =
            static_cast<double>(pts[std::size_t(i) * dim + d]) -
            static_cast<double>(
                r.centroids[std::size_t(r.assignment[i]) * dim + d]);
        sse += diff * diff;
      }
    return sse;
  };
  KMeansResult<T> best;
  double best_sse = 0;
  for (int r = 0; r < restarts; ++r) {
    const std::uint64_t s =
        seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(r);
    auto cand = detail::kmeans_once(pts, count, dim, l, max_iters, s);
    const double sse = run_sse(cand);
    if (r == 0 || sse < best_sse) {
      best = std::move(cand);
      best_sse = sse;
    }
  }
  return best;
}

inline double kmeans_sse(const std::vector<double>& pts, int count, int dim,
                         const std::vector<double>& centroids,
                         const std::vector<int>& assignment) {
  double sse = 0;
  for (int i = 0; i < count; ++i)
    for (int d = 0; d < dim; ++d) {
      const double diff = pts[std::size_t(i) * dim + d] -
                          centroids[std::size_t(assignment[i]) * dim + d];
      sse += diff * diff;
    }
  return sse;
}

struct RtmConfig {
  int topk = 1000;  // clamped to HW
  int clusters = 10;
  int gcn_layers = 1;
  int knn = 8;
  int kmeans_max_iters = 50;
  std::uint64_t seed = 0;
};

template <class T>
struct RtmOutput {
  Ptr<T> t1, t2;            // L x C anchor tokens, tape-connected
  Ptr<T> p;                 // taped HW x 1 coarse map (for aux supervision)
  std::vector<T> coarse;    // HW coarse change confidences
  std::vector<int> indices; // selected positions, shared by both branches
};

namespace detail {

// constant L x K row-averaging matrix from cluster membership
template <class T>
Ptr<T> averaging_matrix(const KMeansResult<T>& km, int l, int k) {
  auto m = zeros<T>({l, k});
  for (int j = 0; j < l; ++j) {
    const T w = T(1) / static_cast<T>(km.members[j].size());
    for (int i : km.members[j]) m->value[static_cast<std::size_t>(j) * k + i] = w;
  }
  return m;
}

}  // namespace detail

// Full RTM pipeline over a pair of H x W x C feature maps. gcn_weights has
// cfg.gcn_layers entries, hidden layers C x C and the last C x 1.
template <class T>
RtmOutput<T> mine_reliable_tokens(Tape<T>& tape, const Ptr<T>& x1,
                                  const Ptr<T>& x2,
                                  const std::vector<Ptr<T>>& gcn_weights,
                                  const RtmConfig& cfg) {
  if (x1->shape.size() != 3)
    throw ShapeError("mine_reliable_tokens: expected HxWxC");
  const int h = x1->shape[0], w = x1->shape[1], c = x1->shape[2];
  const int hw = h * w;
  auto xf1 = reshape(tape, x1, {hw, c});
  auto xf2 = reshape(tape, x2, {hw, c});
  auto dm = difference_map(tape, x1, x2);

  // coarse-map side runs on a detached copy of the difference map
  auto dm_const = tensor<T>(dm->shape, dm->value);
  auto graph = build_adjacency(dm_const->value, h, w, c, cfg.knn);
  auto op = normalized_operator(graph);
  auto p = gcn_forward(tape, op, dm_const, gcn_weights);

  const int k = std::min(cfg.topk, hw);
  RtmOutput<T> out;
  out.p = p;
  out.coarse = p->value;
  out.indices = select_topk_unchanged(out.coarse, k);

  auto f1 = gather_rows(tape, xf1, out.indices);
  auto f2 = gather_rows(tape, xf2, out.indices);
  const int l = std::min(cfg.clusters, k);
  auto km1 = kmeans_cluster(f1->value, k, c, l, cfg.kmeans_max_iters, cfg.seed);
  auto km2 = kmeans_cluster(f2->value, k, c, l, cfg.kmeans_max_iters, cfg.seed);
  out.t1 = matmul(tape, detail::averaging_matrix(km1, l, k), f1);
  out.t2 = matmul(tape, detail::averaging_matrix(km2, l, k), f2);
  return out;
}

}  // namespace vct
