#include "acrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "acrec/adversarial.hpp"
#include "acrec/spatial.hpp"

namespace acrec {

template <typename T>
ag::Var<T> ParamView<T>::operator()(const std::string& name) const {
  const auto& var = store_.at(name);
  const bool trainable = store_.group(name) == ParamGroup::kBackbone ? backbone_ : perturbation_;
  if (trainable) return var;
  auto it = detached_.find(name);
  if (it == detached_.end()) it = detached_.emplace(name, var.detached()).first;
  return it->second;
}

template <typename T>
ag::Var<T> ParamView<T>::optional(const std::string& name) const {
  return store_.contains(name) ? (*this)(name) : ag::Var<T>();
}

template <typename T>
ag::Var<T> embed(const data::SequenceBatch& batch, const ParamView<T>& params, const ModelConfig& cfg) {
  const std::size_t B = batch.size, n = batch.length;
  const ag::Var<T> table = params("item_embedding");
  for (const auto id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.dim(0)) {
      throw std::out_of_range("item id " + std::to_string(id) + " outside the item table");
    }
  }
  auto e = ag::embedding(table, std::span<const std::int64_t>(batch.ids), {B, n}, data::kPaddingId);
  if (cfg.position_mode == PositionMode::kAbsolute) {
    if (n > cfg.n) throw std::invalid_argument("batch length exceeds the position table");
    std::vector<std::int64_t> pos(B * n, -1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i)
        if (batch.valid(b, i)) pos[b * n + i] = static_cast<std::int64_t>(i + (cfg.n - n));
    e = ag::add(e, ag::embedding(params("position_embedding"), std::span<const std::int64_t>(pos), {B, n}, -1));
  }
  return e;
}

template <typename T>
ag::Var<T> feed_forward(const ag::Var<T>& h, const ParamView<T>& params, std::size_t layer) {
  const auto hidden = ag::relu(ag::add(ag::matmul(h, params(layer_param(layer, "ffn.w1"))),
                                       params(layer_param(layer, "ffn.b1"))));
  return ag::add(ag::matmul(hidden, params(layer_param(layer, "ffn.w2"))), params(layer_param(layer, "ffn.b2")));
}

namespace {

template <typename T>
ag::Var<T> maybe_dropout(const ag::Var<T>& x, const ModelConfig& cfg, const ForwardOptions<T>& opts) {
  if (!opts.training || cfg.dropout <= 0.0) return x;
  if (!opts.rng) throw std::invalid_argument("training forward needs a random generator for dropout");
  return ag::dropout(x, static_cast<T>(cfg.dropout), *opts.rng);
}

template <typename T>
ag::Var<T> maybe_norm(const ag::Var<T>& x, const ParamView<T>& params, const ModelConfig& cfg,
                      const std::string& prefix) {
  if (!cfg.layer_norm) return x;
  return ag::layer_norm(x, params(prefix + ".gamma"), params(prefix + ".beta"), static_cast<T>(kLayerNormEps));
}

template <typename T>
ag::Var<T> keep(const ag::Var<T>& v) {
  return v.defined() ? v.detached() : ag::Var<T>();
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const data::SequenceBatch& batch, const ParameterStore<T>& store, const ModelConfig& cfg,
                         const ForwardOptions<T>& opts) {
  const bool lite = cfg.lite_inference && !opts.training;
  if (opts.branch == Branch::kPerturbed) {
    if (!cfg.adversarial_enabled) throw std::invalid_argument("perturbed branch needs the adversarial calibrator");
    if (lite) throw std::invalid_argument("perturbed branch is unavailable under lite inference");
  }
  const bool perturbed = opts.branch == Branch::kPerturbed;
  const ParamView<T> params(store, opts.track_grad && !perturbed, opts.track_grad && perturbed);
  const bool use_spatial = cfg.uses_spatial() && !lite;
  const bool use_adversarial = cfg.adversarial_enabled && !lite && opts.branch != Branch::kClean;
  const auto order_mode =
      cfg.literal_order_penalty ? spatial::OrderPenaltyMode::kLiteral : spatial::OrderPenaltyMode::kLogLikelihood;
  const auto fusion = cfg.fusion_mode == FusionMode::kSum ? adversarial::Fusion::kSum : adversarial::Fusion::kGate;

  ForwardResult<T> out;
  out.attention_masks =
      build_masks<T>(std::span<const std::uint8_t>(batch.valid_mask), batch.size, batch.length);
  const auto& masks = out.attention_masks;

  auto e = embed(batch, params, cfg);
  if (opts.input_grad) e = ag::Var<T>::parameter(e.shape(), std::vector<T>(e.value().begin(), e.value().end()));
  out.embedded = e;
  auto x = maybe_dropout(e, cfg, opts);

  for (std::size_t l = 0; l < cfg.L; ++l) {
    const auto h = maybe_norm(x, params, cfg, "layers." + std::to_string(l) + ".ln1");
    const auto q = ag::split_heads(ag::matmul(h, params(layer_param(l, "attn.w_q"))), cfg.heads);
    const auto k = ag::split_heads(ag::matmul(h, params(layer_param(l, "attn.w_k"))), cfg.heads);
    const auto v = ag::split_heads(ag::matmul(h, params(layer_param(l, "attn.w_v"))), cfg.heads);

    LayerTrace<T> trace;
    const auto logits = attention_logits(q, k, masks);
    const auto attention = softmax_rows(logits, masks);
    ag::Var<T> calibrated = attention;
    if (use_spatial) {
      spatial::SpatialWeights<T> w;
      if (cfg.uses_order()) {
        w.order_wq = params(layer_param(l, "spatial.order_wq"));
        w.order_wk = params(layer_param(l, "spatial.order_wk"));
        w.order_b = params(layer_param(l, "spatial.order_b"));
      }
      if (cfg.uses_distance()) {
        w.dist_wq = params(layer_param(l, "spatial.dist_wq"));
        w.dist_wk = params(layer_param(l, "spatial.dist_wk"));
        w.dist_b = params(layer_param(l, "spatial.dist_b"));
        w.theta = params(layer_param(l, "spatial.dist_theta"));
      }
      const auto penalties = spatial::spatial_penalties(q, k, w, masks, order_mode);
      calibrated = spatial::calibrate_spatial(logits, penalties, masks);
      ++out.calibrator_ops;
    }
    ag::Var<T> applied = calibrated;
    if (use_adversarial) {
      const auto m = adversarial::perturbation_mask(q, k, params(layer_param(l, "adv.w_qp")),
                                                    params(layer_param(l, "adv.w_kp")), masks);
      out.masks.push_back(m);
      trace.mask = m;
      if (perturbed) {
        applied = adversarial::perturb_attention(calibrated, m, masks.uniform);
        trace.perturbed = applied;
      } else {
        const auto corrected = adversarial::correct_attention(calibrated, m);
        const auto g =
            adversarial::gate(q, params(layer_param(l, "adv.gate_w")), params(layer_param(l, "adv.gate_b")));
        applied = adversarial::combine(calibrated, corrected, g, fusion);
        trace.corrected = corrected;
        trace.gate = g;
        trace.combined = applied;
      }
      ++out.calibrator_ops;
    }
    if (opts.hook) opts.hook(l, applied, masks);
    if (opts.keep_trace) {
      trace.logits = logits.detached();
      trace.attention = attention.detached();
      trace.spatial = calibrated.detached();
      trace.mask = keep(trace.mask);
      trace.perturbed = keep(trace.perturbed);
      trace.corrected = keep(trace.corrected);
      trace.gate = keep(trace.gate);
      trace.combined = keep(trace.combined);
      trace.final = applied.detached();
      out.trace.push_back(std::move(trace));
    }

    const auto attended = maybe_dropout(apply_attention(applied, v), cfg, opts);
    x = cfg.residual ? ag::add(x, attended) : attended;
    const auto h2 = maybe_norm(x, params, cfg, "layers." + std::to_string(l) + ".ln2");
    const auto ff = maybe_dropout(feed_forward(h2, params, l), cfg, opts);
    x = cfg.residual ? ag::add(x, ff) : ff;
  }
  out.output = maybe_norm(x, params, cfg, "final_ln");
  return out;
}

template <typename T>
ag::Var<T> item_logits(const ag::Var<T>& output, const ParamView<T>& params) {
  const auto last = ag::select_position(output, output.dim(1) - 1);
  return ag::matmul_nt(last, ag::slice_rows(params("item_embedding"), 1));
}

template <typename T>
std::vector<T> predict_scores(const ag::Var<T>& output, const ParameterStore<T>& params) {
  const ParamView<T> view(params, false, false);
  const auto logits = item_logits(output.detached(), view);
  const std::size_t B = logits.dim(0), I = logits.dim(1);
  std::vector<T> scores(logits.value().begin(), logits.value().end());
  for (std::size_t b = 0; b < B; ++b) {
    T* row = scores.data() + b * I;
    const T mx = *std::max_element(row, row + I);
    T total = 0;
    for (std::size_t c = 0; c < I; ++c) total += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < I; ++c) row[c] /= total;
  }
  return scores;
}

template <typename T>
ag::Var<T> cross_entropy_loss(const ag::Var<T>& logits, std::span<const data::ItemId> targets) {
  std::vector<std::int64_t> cols(targets.size());
  for (std::size_t b = 0; b < targets.size(); ++b) {
    if (targets[b] < 1 || static_cast<std::size_t>(targets[b]) > logits.dim(1)) {
      throw std::out_of_range("target " + std::to_string(targets[b]) + " is not a real item");
    }
    cols[b] = targets[b] - 1;
  }
  return ag::cross_entropy(logits, std::span<const std::int64_t>(cols), static_cast<T>(-std::log(kProbabilityFloor)));
}

template <typename T>
T cross_entropy(std::span<const T> probabilities, data::ItemId target) {
  if (target < 1 || static_cast<std::size_t>(target) > probabilities.size()) {
    throw std::out_of_range("target is not a real item");
  }
  return -std::log(std::max(probabilities[static_cast<std::size_t>(target) - 1], static_cast<T>(kProbabilityFloor)));
}

#define ACREC_INSTANTIATE_MODEL(T)                                                                           \
  template class ParamView<T>;                                                                               \
  template ag::Var<T> embed<T>(const data::SequenceBatch&, const ParamView<T>&, const ModelConfig&);         \
  template ag::Var<T> feed_forward<T>(const ag::Var<T>&, const ParamView<T>&, std::size_t);                  \
  template ForwardResult<T> forward<T>(const data::SequenceBatch&, const ParameterStore<T>&, const ModelConfig&, \
                                       const ForwardOptions<T>&);                                            \
  template ag::Var<T> item_logits<T>(const ag::Var<T>&, const ParamView<T>&);                               \
  template std::vector<T> predict_scores<T>(const ag::Var<T>&, const ParameterStore<T>&);                    \
  template ag::Var<T> cross_entropy_loss<T>(const ag::Var<T>&, std::span<const data::ItemId>);               \
  template T cross_entropy<T>(std::span<const T>, data::ItemId);

ACREC_INSTANTIATE_MODEL(float)
ACREC_INSTANTIATE_MODEL(double)
#undef ACREC_INSTANTIATE_MODEL

}  // namespace acrec
