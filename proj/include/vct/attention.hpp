#pragma once

// The three attention stages: self-attention over the 2L concatenated
// anchors, cross-attention exchanging the branch halves, and anchor-primary
// attention from every pixel onto the L refined anchors. All use the same
// PreNorm residual wrapping: x + MSA(LN x, LN y, LN y); x + MLP(LN x).

#include <cmath>
#include <random>
#include <string>

#include "vct/params.hpp"
#include "vct/tensor.hpp"

namespace vct {

struct AttentionConfig {
  int heads = 8;
  int model_dim = 32;

  int head_dim() const { return model_dim / heads; }
  int mlp_hidden() const { return 2 * model_dim; }

  void validate() const {
    if (heads < 1 || model_dim % heads != 0)
      throw ShapeError("AttentionConfig: model_dim must divide by heads");
  }
};

template <class T>
Ptr<T> scaled_dot_attention(Tape<T>& tape, const Ptr<T>& q, const Ptr<T>& k,
                            const Ptr<T>& v) {
  if (q->shape.size() != 2 || k->shape.size() != 2 || v->shape.size() != 2 ||
      q->shape[1] != k->shape[1] || k->shape[0] != v->shape[0])
    throw ShapeError("scaled_dot_attention: dimension mismatch");
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q->shape[1]));
  auto logits = scale(tape, matmul_nt(tape, q, k), inv_sqrt_d);
  return matmul(tape, softmax_rows(tape, logits), v);
}

// Attention weight rows for inspection; forward values only.
template <class T>
std::vector<T> attention_weights(const Ptr<T>& q, const Ptr<T>& k) {
  Tape<T> scratch;
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q->shape[1]));
  auto a = softmax_rows(scratch,
                        scale(scratch, matmul_nt(scratch, q, k), inv_sqrt_d));
  return a->value;
}

template <class T>
struct AttnParams {
  Ptr<T> wq, wk, wv, wo;
};

template <class T>
Ptr<T> multi_head(Tape<T>& tape, const Ptr<T>& q_in, const Ptr<T>& k_in,
                  const Ptr<T>& v_in, const AttnParams<T>& p,
                  const AttentionConfig& cfg) {
  cfg.validate();
  auto q = matmul(tape, q_in, p.wq);
  auto k = matmul(tape, k_in, p.wk);
  auto v = matmul(tape, v_in, p.wv);
  const int d = cfg.head_dim();
  std::vector<Ptr<T>> heads;
  heads.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h)
    heads.push_back(scaled_dot_attention(
        tape, slice_cols(tape, q, h * d, (h + 1) * d),
        slice_cols(tape, k, h * d, (h + 1) * d),
        slice_cols(tape, v, h * d, (h + 1) * d)));
  return matmul(tape, concat_cols(tape, heads), p.wo);
}

template <class T>
struct BlockParams {
  AttnParams<T> attn;
  Ptr<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Ptr<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  Ptr<T> pe;  // null when the block carries no positional table
};

template <class T>
BlockParams<T> make_block_params(ParamRegistry<T>& reg,
                                 const std::string& prefix,
                                 const AttentionConfig& cfg, int pe_len,
                                 std::mt19937_64& rng) {
  cfg.validate();
  const int c = cfg.model_dim, hdn = cfg.mlp_hidden();
  BlockParams<T> p;
  auto mat = [&](const std::string& name, int rows, int cols) {
    auto t = reg.add(prefix + name, zeros<T>({rows, cols}));
    init_he(t, rows, rng);
    return t;
  };
  p.attn.wq = mat("wq", c, c);
  p.attn.wk = mat("wk", c, c);
  p.attn.wv = mat("wv", c, c);
  p.attn.wo = mat("wo", c, c);
  p.ln1_g = reg.add(prefix + "ln1.g", zeros<T>({c}));
  p.ln1_b = reg.add(prefix + "ln1.b", zeros<T>({c}));
  p.ln2_g = reg.add(prefix + "ln2.g", zeros<T>({c}));
  p.ln2_b = reg.add(prefix + "ln2.b", zeros<T>({c}));
  for (auto& v : p.ln1_g->value) v = T(1);
  for (auto& v : p.ln2_g->value) v = T(1);
  p.mlp_w1 = mat("mlp.w1", c, hdn);
  p.mlp_b1 = reg.add(prefix + "mlp.b1", zeros<T>({hdn}));
  p.mlp_w2 = mat("mlp.w2", hdn, c);
  p.mlp_b2 = reg.add(prefix + "mlp.b2", zeros<T>({c}));
  if (pe_len > 0) {
    p.pe = reg.add(prefix + "pe", zeros<T>({pe_len, c}));
    init_he(p.pe, c, rng);
  }
  return p;
}

namespace detail {

constexpr double kLnEps = 1e-5;

// x + MSA(LN x, LN kv, LN kv), then x + MLP(LN x)
template <class T>
Ptr<T> prenorm_unit(Tape<T>& tape, const Ptr<T>& x, const Ptr<T>& kv,
                    const BlockParams<T>& p, const AttentionConfig& cfg) {
  auto qn = layer_norm(tape, x, p.ln1_g, p.ln1_b, T(kLnEps));
  auto kn = kv == x ? qn : layer_norm(tape, kv, p.ln1_g, p.ln1_b, T(kLnEps));
  auto h = add(tape, x, multi_head(tape, qn, kn, kn, p.attn, cfg));
  auto hn = layer_norm(tape, h, p.ln2_g, p.ln2_b, T(kLnEps));
  auto m = add_rowvec(tape, matmul(tape, hn, p.mlp_w1), p.mlp_b1);
  m = add_rowvec(tape, matmul(tape, gelu(tape, m), p.mlp_w2), p.mlp_b2);
  return add(tape, h, m);
}

}  // namespace detail

// Self-attention over the 2L concatenated anchors; adds the learned PE.
template <class T>
Ptr<T> transformer_block(Tape<T>& tape, const Ptr<T>& t,
                         const BlockParams<T>& p, const AttentionConfig& cfg) {
  if (!p.pe)
    throw std::invalid_argument("transformer_block: block has no PE table");
  detail::check_same_shape(t, p.pe, "transformer_block");
  auto x = add(tape, t, p.pe);
  return detail::prenorm_unit(tape, x, x, p, cfg);
}

// Both cross directions with the same weights; no PE.
template <class T>
std::pair<Ptr<T>, Ptr<T>> cross_attention_exchange(Tape<T>& tape,
                                                   const Ptr<T>& t1s,
                                                   const Ptr<T>& t2s,
                                                   const BlockParams<T>& p,
                                                   const AttentionConfig& cfg) {
  detail::check_same_shape(t1s, t2s, "cross_attention_exchange");
  return {detail::prenorm_unit(tape, t1s, t2s, p, cfg),
          detail::prenorm_unit(tape, t2s, t1s, p, cfg)};
}

// HW queries against the L refined anchors of the same branch; no PE.
template <class T>
Ptr<T> anchor_primary_block(Tape<T>& tape, const Ptr<T>& xflat,
                            const Ptr<T>& t, const BlockParams<T>& p,
                            const AttentionConfig& cfg) {
  if (xflat->shape.size() != 2 || t->shape.size() != 2 ||
      xflat->shape[1] != t->shape[1])
    throw ShapeError("anchor_primary_block: channel mismatch");
  return detail::prenorm_unit(tape, xflat, t, p, cfg);
}

}  // namespace vct
