#pragma once

// SGD with momentum and weight decay, linear learning-rate decay, and the
// training loop over synthetic or loaded image pairs.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <ostream>

#include "vct/data.hpp"
#include "vct/kernels.hpp"
#include "vct/metrics.hpp"
#include "vct/model.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vct {

struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr0 = 0.01;
  double momentum = 0.99;
  double weight_decay = 0.0005;
  int batch_size = 8;
  int epochs = 30;
  std::uint64_t seed = 0;
  double gcn_aux_weight = 0.1;

  void validate() const {
    if (lr0 < 0) throw std::invalid_argument("lr0 must be >= 0");
    if (momentum < 0 || momentum >= 1)
      throw std::invalid_argument("momentum must be in [0, 1)");
    if (batch_size < 1 || epochs < 1)
      throw std::invalid_argument("batch_size and epochs must be positive");
  }
};

inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw std::out_of_range("lr_at: epoch out of range");
  return cfg.lr0 * (1.0 - static_cast<double>(epoch) / cfg.epochs);
}

template <class T>
struct SgdState {
  std::vector<std::vector<T>> velocity;  // aligned to trainable params
};

template <class T>
std::vector<Ptr<T>> trainable_params(const ParamRegistry<T>& reg) {
  std::vector<Ptr<T>> out;
  for (const auto& [name, p] : reg.items())
    if (p->requires_grad) out.push_back(p);
  return out;
}

// v <- momentum v + g + wd p;  p <- p - lr v
template <class T>
void sgd_step(const std::vector<Ptr<T>>& params,
              const std::vector<std::vector<T>>& grads, SgdState<T>& state,
              const TrainConfig& cfg, double lr) {
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      state.velocity[i].assign(params[i]->value.size(), T(0));
  }
  if (grads.size() != params.size())
    throw std::invalid_argument("sgd_step: gradient list mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->value.size())
      throw std::invalid_argument("sgd_step: gradient shape mismatch");
    auto& v = state.velocity[i];
    auto& p = params[i]->value;
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = static_cast<T>(cfg.momentum) * v[j] + grads[i][j] +
             static_cast<T>(cfg.weight_decay) * p[j];
      p[j] -= static_cast<T>(lr) * v[j];
    }
  }
}

template <class T>
Ptr<T> image_tensor(const std::vector<float>& pixels, int h, int w) {
  auto t = zeros<T>({h, w, 3});
  for (std::size_t i = 0; i < t->value.size(); ++i)
    t->value[i] = static_cast<T>(pixels[i]);
  return t;
}

namespace detail {

// majority-vote downsample of the label to the coarse H x W grid
inline std::vector<std::uint8_t> coarse_label(
    const std::vector<std::uint8_t>& label, int h0, int w0, int factor) {
  const int h = h0 / factor, w = w0 / factor;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int changed = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx)
          changed += label[std::size_t(y * factor + dy) * w0 + x * factor + dx];
      out[std::size_t(y) * w + x] = changed * 2 > factor * factor ? 1 : 0;
    }
  return out;
}

}  // namespace detail

// loss for one example; adds the auxiliary coarse-map BCE when enabled
template <class T>
Ptr<T> example_loss(Tape<T>& tape, const VctModel<T>& m, const ImagePair& pair,
                    PipelineTrace<T>* trace = nullptr,
                    double aux_weight = 0.1) {
  auto a = image_tensor<T>(pair.a, pair.height, pair.width);
  auto b = image_tensor<T>(pair.b, pair.height, pair.width);
  PipelineTrace<T> local;
  auto probs = forward_pipeline(tape, m, a, b, &local);
  auto loss = bce_loss(tape, one_hot<T>(pair.label), probs);
  if (m.cfg.gcn_aux && m.cfg.use_rtm && local.p_node) {
    // P is coarse change confidence; binary BCE against the label
    // majority-downsampled to the feature grid, weighted by gcn_aux_weight
    auto cl = detail::coarse_label(pair.label, pair.height, pair.width,
                                   m.cfg.encoder.downsample_factor());
    const int hw = static_cast<int>(cl.size());
    auto g_pos = zeros<T>({hw, 1});
    auto g_neg = zeros<T>({hw, 1});
    for (int i = 0; i < hw; ++i) (cl[i] ? g_pos : g_neg)->value[i] = T(1);
    auto ones = tensor<T>({hw, 1}, std::vector<T>(hw, T(1)));
    auto p = local.p_node;
    auto ce = add(tape, mul(tape, g_pos, log_clamped(tape, p, T(1e-12))),
                  mul(tape, g_neg,
                      log_clamped(tape, sub(tape, ones, p), T(1e-12))));
    auto aux = scale(tape, sum(tape, ce), T(-1) / static_cast<T>(hw));
    loss = add(tape, loss, scale(tape, aux, static_cast<T>(aux_weight)));
  }
  if (trace) *trace = local;
  return loss;
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  MetricReport train_metrics;
  MetricReport val_metrics;
};

template <class T>
MetricReport evaluate(const VctModel<T>& m, const std::vector<ImagePair>& data) {
  ConfusionCounts acc;
  const int n = static_cast<int>(data.size());
  std::vector<ConfusionCounts> partial(n);
#pragma omp parallel for schedule(dynamic) if (num_threads() > 1)
  for (int i = 0; i < n; ++i) {
    Tape<T> tape;
    auto a = image_tensor<T>(data[i].a, data[i].height, data[i].width);
    auto b = image_tensor<T>(data[i].b, data[i].height, data[i].width);
    auto probs = forward_pipeline(tape, m, a, b);
    accumulate(hard_mask(probs), data[i].label, partial[i]);
  }
  for (const auto& c : partial) acc += c;
  return compute(acc);
}

// Per-epoch: seeded shuffle, batches, per-example tapes (parallel), gradient
// summation in example order, SGD step. Aborts on non-finite loss.
template <class T>
std::vector<EpochRecord> train_loop(VctModel<T>& m,
                                    const std::vector<ImagePair>& train_data,
                                    const std::vector<ImagePair>& val_data,
                                    const TrainConfig& cfg,
                                    const std::string& best_ckpt_path = "",
                                    std::ostream* log = nullptr) {
  cfg.validate();
  if (train_data.empty())
    throw std::invalid_argument("train_loop: empty training set");
  auto params = trainable_params(m.params);
  SgdState<T> state;
  std::vector<EpochRecord> history;
  double best_f1 = -1;
  std::vector<int> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::mt19937_64 shuffle_rng(cfg.seed);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = lr_at(epoch, cfg);
    double epoch_loss = 0;
    int seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const int bsz = static_cast<int>(
          std::min<std::size_t>(cfg.batch_size, order.size() - start));
      std::vector<std::vector<std::vector<T>>> grads(bsz);
      std::vector<double> losses(bsz);
#pragma omp parallel for schedule(dynamic) if (num_threads() > 1)
      for (int e = 0; e < bsz; ++e) {
        Tape<T> tape;
        auto loss = example_loss(tape, m, train_data[order[start + e]],
                                 static_cast<PipelineTrace<T>*>(nullptr),
                                 cfg.gcn_aux_weight);
        tape.backward(loss);
        losses[e] = static_cast<double>(loss->value[0]);
        grads[e].resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
          const auto* g = tape.find_grad(params[i]);
          grads[e][i] =
              g ? *g : std::vector<T>(params[i]->value.size(), T(0));
        }
      }
      // deterministic reduction in example order
      std::vector<std::vector<T>> batch_grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i)
        batch_grads[i].assign(params[i]->value.size(), T(0));
      for (int e = 0; e < bsz; ++e) {
        if (!std::isfinite(losses[e]))
          throw NumericFailure("non-finite loss at epoch " +
                               std::to_string(epoch));
        epoch_loss += losses[e];
        ++seen;
        for (std::size_t i = 0; i < params.size(); ++i)
          for (std::size_t j = 0; j < batch_grads[i].size(); ++j)
            batch_grads[i][j] += grads[e][i][j] / static_cast<T>(bsz);
      }
      sgd_step(params, batch_grads, state, cfg, lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = epoch_loss / seen;
    rec.val_metrics = evaluate(m, val_data.empty() ? train_data : val_data);
    history.push_back(rec);
    if (log)
      *log << "epoch " << epoch << " loss " << rec.loss << " val_f1 "
           << rec.val_metrics.f1 << "\n";
    if (!best_ckpt_path.empty() && rec.val_metrics.f1 > best_f1) {
      best_f1 = rec.val_metrics.f1;
      save_checkpoint(m.params, best_ckpt_path);
    }
  }
  return history;
}

}  // namespace vct
