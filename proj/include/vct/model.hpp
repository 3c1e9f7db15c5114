#pragma once

// Full VcT assembly: siamese encoder, reliable token mining, the token
// transformer (self + cross attention), anchor-primary refinement, and the
// prediction head. Ablation switches gate each stage while preserving the
// output contract.

#include <random>
#include <string>
#include <vector>

#include "vct/attention.hpp"
#include "vct/backbone.hpp"
#include "vct/head.hpp"
#include "vct/params.hpp"
#include "vct/rtm.hpp"
#include "vct/tensor.hpp"

namespace vct {

struct ModelConfig {
  EncoderConfig encoder;
  RtmConfig rtm;
  int heads = 8;
  bool use_rtm = true;
  bool use_te = true;
  bool use_td = true;
  // trains the GCN weights with an auxiliary coarse-map BCE; off by default
  // (fixed random projection)
  bool gcn_aux = false;
  std::uint64_t seed = 0;

  AttentionConfig attention() const {
    AttentionConfig a;
    a.heads = heads;
    a.model_dim = encoder.out_channels();
    return a;
  }
};

template <class T>
struct VctModel {
  ModelConfig cfg;
  ParamRegistry<T> params;
  std::vector<Ptr<T>> gcn_weights;
  BlockParams<T> sa, ca, apa;
  HeadParams<T> head;
};

// Parameter construction order is fixed; it defines the checkpoint layout.
template <class T>
VctModel<T> build_model(const ModelConfig& cfg) {
  cfg.attention().validate();
  VctModel<T> m;
  m.cfg = cfg;
  std::mt19937_64 rng(cfg.seed);
  make_encoder_params(m.params, cfg.encoder, rng);

  const int c = cfg.encoder.out_channels();
  for (int l = 0; l < cfg.rtm.gcn_layers; ++l) {
    const int co = l + 1 == cfg.rtm.gcn_layers ? 1 : c;
    auto w = m.params.add("gcn.l" + std::to_string(l) + ".w",
                          zeros<T>({c, co}));
    init_he(w, c, rng);
    w->requires_grad = cfg.gcn_aux;
    m.gcn_weights.push_back(w);
  }

  m.sa = make_block_params(m.params, "sa.", cfg.attention(),
                           2 * cfg.rtm.clusters, rng);
  m.ca = make_block_params(m.params, "ca.", cfg.attention(), 0, rng);
  m.apa = make_block_params(m.params, "apa.", cfg.attention(), 0, rng);
  m.head = make_head_params(m.params, c, rng);
  return m;
}

template <class T>
struct PipelineTrace {
  Ptr<T> x1, x2;          // backbone features, H x W x C
  Ptr<T> p_node;          // taped coarse map (null when use_rtm = false)
  std::vector<T> coarse;  // RTM coarse map (empty when use_rtm = false)
  std::vector<int> indices;
  Ptr<T> t1, t2;          // mined anchors, L x C
  Ptr<T> t1r, t2r;        // refined anchors after SA + CA
  Ptr<T> x1p, x2p;        // refined features, HW x C
  Ptr<T> probs;           // (H0 W0) x 2 post-softmax
};

// a and b are H0 x W0 x 3 image tensors.
template <class T>
Ptr<T> forward_pipeline(Tape<T>& tape, const VctModel<T>& m, const Ptr<T>& a,
                        const Ptr<T>& b, PipelineTrace<T>* trace = nullptr) {
  const auto& cfg = m.cfg;
  auto x1 = encode(tape, a, m.params, cfg.encoder);
  auto x2 = encode(tape, b, m.params, cfg.encoder);
  const int h = x1->shape[0], w = x1->shape[1], c = x1->shape[2];
  const int hw = h * w, l = cfg.rtm.clusters;
  if (l > hw)
    throw ShapeError("forward_pipeline: more anchors than feature positions");
  auto xf1 = reshape(tape, x1, {hw, c});
  auto xf2 = reshape(tape, x2, {hw, c});

  Ptr<T> t1, t2;
  std::vector<T> coarse;
  std::vector<int> indices;
  if (cfg.use_rtm) {
    auto rtm = mine_reliable_tokens(tape, x1, x2, m.gcn_weights, cfg.rtm);
    t1 = rtm.t1;
    t2 = rtm.t2;
    coarse = std::move(rtm.coarse);
    indices = std::move(rtm.indices);
    if (trace) trace->p_node = rtm.p;
  } else {
    // uniform spatial stride fallback
    indices.resize(l);
    for (int i = 0; i < l; ++i)
      indices[i] = static_cast<int>(static_cast<long long>(i) * hw / l);
    t1 = gather_rows(tape, xf1, indices);
    t2 = gather_rows(tape, xf2, indices);
  }

  Ptr<T> t1r = t1, t2r = t2;
  if (cfg.use_te) {
    auto t = transformer_block(tape, concat_rows(tape, t1, t2), m.sa,
                               cfg.attention());
    auto t1s = slice_rows(tape, t, 0, l);
    auto t2s = slice_rows(tape, t, l, 2 * l);
    std::tie(t1r, t2r) =
        cross_attention_exchange(tape, t1s, t2s, m.ca, cfg.attention());
  }

  Ptr<T> x1p = xf1, x2p = xf2;
  if (cfg.use_td) {
    x1p = anchor_primary_block(tape, xf1, t1r, m.apa, cfg.attention());
    x2p = anchor_primary_block(tape, xf2, t2r, m.apa, cfg.attention());
  }

  auto d = difference_features(tape, reshape(tape, x1p, {h, w, c}),
                               reshape(tape, x2p, {h, w, c}));
  auto probs = decode(tape, d, m.head, cfg.encoder.downsample_factor());
  if (trace) {
    trace->x1 = x1;
    trace->x2 = x2;
    trace->coarse = std::move(coarse);
    trace->indices = std::move(indices);
    trace->t1 = t1;
    trace->t2 = t2;
    trace->t1r = t1r;
    trace->t2r = t2r;
    trace->x1p = x1p;
    trace->x2p = x2p;
    trace->probs = probs;
  }
  return probs;
}

}  // namespace vct
