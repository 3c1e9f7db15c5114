#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <numeric>
#include <random>

#include "vct/attention.hpp"
#include "vct/grad_check.hpp"

using D = double;
using vct::AttentionConfig;
using vct::Ptr;
using vct::Tape;

namespace {

Ptr<D> randn(vct::Shape shape, std::mt19937_64& rng, bool requires_grad = false) {
  std::normal_distribution<double> g(0.0, 1.0);
  auto t = vct::zeros<D>(std::move(shape));
  for (auto& v : t->value) v = g(rng);
  t->requires_grad = requires_grad;
  return t;
}

vct::BlockParams<D> rand_block(const AttentionConfig& cfg, int pe_len,
                               std::uint64_t seed,
                               vct::ParamRegistry<D>* reg_out = nullptr) {
  static thread_local std::vector<std::unique_ptr<vct::ParamRegistry<D>>> keep;
  keep.push_back(std::make_unique<vct::ParamRegistry<D>>());
  std::mt19937_64 rng(seed);
  auto p = vct::make_block_params(*keep.back(), "blk.", cfg, pe_len, rng);
  if (reg_out) *reg_out = *keep.back();
  return p;
}

}  // namespace

TEST_CASE("scaled_dot_attention") {
  Tape<D> tape;
  std::mt19937_64 rng(1);
  SUBCASE("single key returns v for any query") {
    auto q = randn({3, 4}, rng);
    auto k = randn({1, 4}, rng);
    auto v = randn({1, 4}, rng);
    auto out = vct::scaled_dot_attention(tape, q, k, v);
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 4; ++c)
        CHECK(out->value[i * 4 + c] == doctest::Approx(v->value[c]));
  }
  SUBCASE("identical keys give the column mean of v") {
    auto q = randn({2, 3}, rng);
    auto k = vct::zeros<D>({4, 3});
    for (int i = 0; i < 4; ++i)
      for (int c = 0; c < 3; ++c) k->value[i * 3 + c] = 0.7 - 0.2 * c;
    auto v = randn({4, 3}, rng);
    auto out = vct::scaled_dot_attention(tape, q, k, v);
    for (int i = 0; i < 2; ++i)
      for (int c = 0; c < 3; ++c) {
        double m = 0;
        for (int j = 0; j < 4; ++j) m += v->value[j * 3 + c];
        CHECK(out->value[i * 3 + c] == doctest::Approx(m / 4));
      }
  }
  SUBCASE("hand oracle m=n=2 d=1") {
    auto q = vct::tensor<D>({2, 1}, {0, 0});
    auto k = vct::tensor<D>({2, 1}, {0, 0});
    auto v = vct::tensor<D>({2, 1}, {1, 3});
    auto out = vct::scaled_dot_attention(tape, q, k, v);
    CHECK(out->value[0] == doctest::Approx(2.0));
    CHECK(out->value[1] == doctest::Approx(2.0));
  }
  SUBCASE("row-stochastic weights and kv permutation invariance") {
    for (int t = 0; t < 200; ++t) {
      std::mt19937_64 r2(100 + t);
      const int m = 1 + int(r2() % 5), n = 1 + int(r2() % 6),
                d = 1 + int(r2() % 4);
      auto q = randn({m, d}, r2);
      auto k = randn({n, d}, r2);
      auto v = randn({n, d}, r2);
      auto w = vct::attention_weights(q, k);
      for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += w[i * n + j];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
      }
      // joint permutation of K and V rows
      std::vector<int> perm(n);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), r2);
      auto kp = vct::zeros<D>({n, d});
      auto vp = vct::zeros<D>({n, d});
      for (int j = 0; j < n; ++j)
        for (int c = 0; c < d; ++c) {
          kp->value[j * d + c] = k->value[perm[j] * d + c];
          vp->value[j * d + c] = v->value[perm[j] * d + c];
        }
      Tape<D> t1, t2;
      auto a = vct::scaled_dot_attention(t1, q, k, v);
      auto b = vct::scaled_dot_attention(t2, q, kp, vp);
      for (std::size_t i = 0; i < a->value.size(); ++i)
        CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(1e-9));
    }
  }
  SUBCASE("dimension mismatch throws") {
    CHECK_THROWS(vct::scaled_dot_attention(tape, vct::zeros<D>({2, 3}),
                                           vct::zeros<D>({2, 4}),
                                           vct::zeros<D>({2, 4})));
  }
}

TEST_CASE("multi_head") {
  std::mt19937_64 rng(7);
  AttentionConfig cfg;
  cfg.heads = 4;
  cfg.model_dim = 8;
  vct::ParamRegistry<D> reg;
  auto p = vct::make_block_params(reg, "a.", cfg, 0, rng);
  Tape<D> tape;
  auto x = randn({6, 8}, rng);

  SUBCASE("shape preserved") {
    auto y = vct::multi_head(tape, x, x, x, p.attn, cfg);
    CHECK(y->shape == vct::Shape{6, 8});
  }
  SUBCASE("heads=1 equals single-head composition") {
    AttentionConfig one = cfg;
    one.heads = 1;
    auto y = vct::multi_head(tape, x, x, x, p.attn, one);
    auto q = vct::matmul(tape, x, p.attn.wq);
    auto k = vct::matmul(tape, x, p.attn.wk);
    auto v = vct::matmul(tape, x, p.attn.wv);
    auto ref = vct::matmul(tape, vct::scaled_dot_attention(tape, q, k, v),
                           p.attn.wo);
    for (std::size_t i = 0; i < ref->value.size(); ++i)
      CHECK(y->value[i] == doctest::Approx(ref->value[i]).epsilon(1e-12));
  }
  SUBCASE("zero wq/wk gives the uniform-weights mean oracle") {
    std::fill(p.attn.wq->value.begin(), p.attn.wq->value.end(), 0.0);
    std::fill(p.attn.wk->value.begin(), p.attn.wk->value.end(), 0.0);
    auto y = vct::multi_head(tape, x, x, x, p.attn, cfg);
    // mean over rows of x, projected through wv then wo
    auto xbar = vct::zeros<D>({1, 8});
    for (int i = 0; i < 6; ++i)
      for (int c = 0; c < 8; ++c) xbar->value[c] += x->value[i * 8 + c] / 6;
    auto ref = vct::matmul(tape, vct::matmul(tape, xbar, p.attn.wv), p.attn.wo);
    for (int i = 0; i < 6; ++i)
      for (int c = 0; c < 8; ++c)
        CHECK(y->value[i * 8 + c] ==
              doctest::Approx(ref->value[c]).epsilon(1e-10));
  }
  SUBCASE("invalid config rejected") {
    AttentionConfig bad = cfg;
    bad.heads = 3;
    CHECK_THROWS(vct::multi_head(tape, x, x, x, p.attn, bad));
  }
}

TEST_CASE("transformer_block") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.model_dim = 6;
  const int two_l = 4;
  std::mt19937_64 rng(11);

  SUBCASE("residual passthrough with zero output projections") {
    auto p = rand_block(cfg, two_l, 21);
    std::fill(p.attn.wo->value.begin(), p.attn.wo->value.end(), 0.0);
    std::fill(p.mlp_w2->value.begin(), p.mlp_w2->value.end(), 0.0);
    std::fill(p.mlp_b2->value.begin(), p.mlp_b2->value.end(), 0.0);
    auto t = randn({two_l, 6}, rng);
    Tape<D> tape;
    auto y = vct::transformer_block(tape, t, p, cfg);
    for (std::size_t i = 0; i < t->value.size(); ++i)
      CHECK(y->value[i] ==
            doctest::Approx(t->value[i] + p.pe->value[i]).epsilon(1e-12));
  }
  SUBCASE("shape contract and wrong length") {
    auto p = rand_block(cfg, two_l, 22);
    auto t = randn({two_l, 6}, rng);
    Tape<D> tape;
    CHECK(vct::transformer_block(tape, t, p, cfg)->shape ==
          vct::Shape{two_l, 6});
    CHECK_THROWS(vct::transformer_block(tape, randn({3, 6}, rng), p, cfg));
  }
  SUBCASE("half-swap equivariance with PE zeroed") {
    auto p = rand_block(cfg, two_l, 23);
    std::fill(p.pe->value.begin(), p.pe->value.end(), 0.0);
    auto t = randn({two_l, 6}, rng);
    auto swapped = vct::zeros<D>({two_l, 6});
    const int half = two_l / 2 * 6;
    std::copy(t->value.begin() + half, t->value.end(),
              swapped->value.begin());
    std::copy(t->value.begin(), t->value.begin() + half,
              swapped->value.begin() + half);
    Tape<D> t1, t2;
    auto y = vct::transformer_block(t1, t, p, cfg);
    auto ys = vct::transformer_block(t2, swapped, p, cfg);
    for (int i = 0; i < half; ++i) {
      CHECK(y->value[i] == doctest::Approx(ys->value[half + i]).epsilon(1e-9));
      CHECK(y->value[half + i] == doctest::Approx(ys->value[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("cross_attention_exchange") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.model_dim = 6;
  std::mt19937_64 rng(13);
  auto p = rand_block(cfg, 0, 31);

  SUBCASE("equal inputs give equal outputs") {
    auto t = randn({3, 6}, rng);
    Tape<D> tape;
    auto [a, b] = vct::cross_attention_exchange(tape, t, t, p, cfg);
    CHECK(a->value == b->value);
  }
  SUBCASE("swap symmetry") {
    auto t1 = randn({3, 6}, rng);
    auto t2 = randn({3, 6}, rng);
    Tape<D> ta, tb;
    auto [x1, x2] = vct::cross_attention_exchange(ta, t1, t2, p, cfg);
    auto [y1, y2] = vct::cross_attention_exchange(tb, t2, t1, p, cfg);
    CHECK(x1->value == y2->value);
    CHECK(x2->value == y1->value);
  }
  SUBCASE("L=1 attention term is the other branch's projected value") {
    std::fill(p.mlp_w2->value.begin(), p.mlp_w2->value.end(), 0.0);
    std::fill(p.mlp_b2->value.begin(), p.mlp_b2->value.end(), 0.0);
    auto t1 = randn({1, 6}, rng);
    auto t2 = randn({1, 6}, rng);
    Tape<D> tape;
    auto [a, b] = vct::cross_attention_exchange(tape, t1, t2, p, cfg);
    auto n2 = vct::layer_norm(tape, t2, p.ln1_g, p.ln1_b, 1e-5);
    auto ref = vct::matmul(tape, vct::matmul(tape, n2, p.attn.wv), p.attn.wo);
    for (int c = 0; c < 6; ++c)
      CHECK(a->value[c] ==
            doctest::Approx(t1->value[c] + ref->value[c]).epsilon(1e-10));
  }
  SUBCASE("length mismatch throws") {
    Tape<D> tape;
    CHECK_THROWS(vct::cross_attention_exchange(tape, randn({2, 6}, rng),
                                               randn({3, 6}, rng), p, cfg));
  }
}

TEST_CASE("anchor_primary_block") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.model_dim = 6;
  std::mt19937_64 rng(17);
  auto p = rand_block(cfg, 0, 41);

  SUBCASE("shape contract") {
    auto x = randn({64, 6}, rng);
    auto t = randn({10, 6}, rng);
    Tape<D> tape;
    CHECK(vct::anchor_primary_block(tape, x, t, p, cfg)->shape ==
          vct::Shape{64, 6});
  }
  SUBCASE("L=1: attention term identical across pixels") {
    std::fill(p.mlp_w2->value.begin(), p.mlp_w2->value.end(), 0.0);
    std::fill(p.mlp_b2->value.begin(), p.mlp_b2->value.end(), 0.0);
    auto x = randn({5, 6}, rng);
    auto t = randn({1, 6}, rng);
    Tape<D> tape;
    auto y = vct::anchor_primary_block(tape, x, t, p, cfg);
    for (int i = 0; i < 5; ++i)
      for (int c = 0; c < 6; ++c)
        CHECK(y->value[i * 6 + c] - x->value[i * 6 + c] ==
              doctest::Approx(y->value[c] - x->value[c]).epsilon(1e-10));
  }
  SUBCASE("per-pixel independence") {
    auto x = randn({6, 6}, rng);
    auto t = randn({3, 6}, rng);
    Tape<D> t1;
    auto y = vct::anchor_primary_block(t1, x, t, p, cfg);
    auto x2 = vct::tensor<D>(x->shape, x->value);
    for (int c = 0; c < 6; ++c) x2->value[5 * 6 + c] += 0.37;  // pixel 5 only
    Tape<D> t2;
    auto y2 = vct::anchor_primary_block(t2, x2, t, p, cfg);
    for (int i = 0; i < 5; ++i)
      for (int c = 0; c < 6; ++c)
        CHECK(y->value[i * 6 + c] == y2->value[i * 6 + c]);
  }
  SUBCASE("attention term lies in the projected-value hull") {
    std::fill(p.mlp_w2->value.begin(), p.mlp_w2->value.end(), 0.0);
    std::fill(p.mlp_b2->value.begin(), p.mlp_b2->value.end(), 0.0);
    std::fill(p.attn.wo->value.begin(), p.attn.wo->value.end(), 0.0);
    for (int i = 0; i < 6; ++i) p.attn.wo->value[i * 6 + i] = 1.0;  // identity
    AttentionConfig single = cfg;
    single.heads = 1;
    auto x = randn({8, 6}, rng);
    auto t = randn({4, 6}, rng);
    Tape<D> tape;
    auto y = vct::anchor_primary_block(tape, x, t, p, single);
    auto vn = vct::matmul(
        tape, vct::layer_norm(tape, t, p.ln1_g, p.ln1_b, 1e-5), p.attn.wv);
    for (int c = 0; c < 6; ++c) {
      double lo = 1e300, hi = -1e300;
      for (int j = 0; j < 4; ++j) {
        lo = std::min(lo, vn->value[j * 6 + c]);
        hi = std::max(hi, vn->value[j * 6 + c]);
      }
      for (int i = 0; i < 8; ++i) {
        const double term = y->value[i * 6 + c] - x->value[i * 6 + c];
        CHECK(term >= lo - 1e-10);
        CHECK(term <= hi + 1e-10);
      }
    }
  }
}

TEST_CASE("gradient checks through all three blocks") {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.model_dim = 4;
  std::mt19937_64 rng(19);

  SUBCASE("transformer_block wrt input and PE") {
    auto p = rand_block(cfg, 4, 51);
    auto t = randn({4, 4}, rng, true);
    auto rep = vct::grad_check<D>(
        [&](Tape<D>& tp, const Ptr<D>& x) {
          auto y = vct::transformer_block(tp, x, p, cfg);
          return vct::sum(tp, vct::mul(tp, y, y));
        },
        t, 1e-4);
    CHECK(rep.passed);
    p.pe->requires_grad = true;
    auto rep2 = vct::grad_check<D>(
        [&](Tape<D>& tp, const Ptr<D>&) {
          auto y = vct::transformer_block(tp, t, p, cfg);
          return vct::sum(tp, vct::mul(tp, y, y));
        },
        p.pe, 1e-4);
    CHECK(rep2.passed);
  }
  SUBCASE("cross exchange wrt one branch") {
    auto p = rand_block(cfg, 0, 52);
    auto t2 = randn({3, 4}, rng);
    auto t1 = randn({3, 4}, rng, true);
    auto rep = vct::grad_check<D>(
        [&](Tape<D>& tp, const Ptr<D>& x) {
          auto [a, b] = vct::cross_attention_exchange(tp, x, t2, p, cfg);
          return vct::sum(tp, vct::mul(tp, a, b));
        },
        t1, 1e-4);
    CHECK(rep.passed);
  }
  SUBCASE("anchor-primary wrt anchors and weights") {
    auto p = rand_block(cfg, 0, 53);
    auto x = randn({6, 4}, rng);
    auto t = randn({2, 4}, rng, true);
    auto rep = vct::grad_check<D>(
        [&](Tape<D>& tp, const Ptr<D>& anchors) {
          auto y = vct::anchor_primary_block(tp, x, anchors, p, cfg);
          return vct::sum(tp, vct::mul(tp, y, y));
        },
        t, 1e-4);
    CHECK(rep.passed);
    auto repw = vct::grad_check<D>(
        [&](Tape<D>& tp, const Ptr<D>&) {
          auto y = vct::anchor_primary_block(tp, x, t, p, cfg);
          return vct::sum(tp, vct::mul(tp, y, y));
        },
        p.attn.wq, 1e-4);
    CHECK(repw.passed);
  }
}
