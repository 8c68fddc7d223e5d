#include "acrec/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace acrec::spatial {

int order_target(std::size_t i, std::size_t j) { return i < j ? 1 : 0; }

double distance_target(std::size_t i, std::size_t j) {
  const double gap = i > j ? static_cast<double>(i - j) : static_cast<double>(j - i);
  return std::log1p(gap);
}

template <typename T>
SpatialPrediction<T> predict_spatial(std::span<const T> q, std::span<const T> k, std::span<const T> order_weight,
                                     T order_bias, std::span<const T> distance_weight, T distance_bias) {
  const std::size_t dh = q.size();
  if (k.size() != dh || order_weight.size() != 2 * dh || distance_weight.size() != 2 * dh) {
    throw std::invalid_argument("predict_spatial: weight size must be 2 * d_h");
  }
  T zo = order_bias, zd = distance_bias;
  for (std::size_t t = 0; t < dh; ++t) {
    zo += order_weight[t] * q[t] + order_weight[dh + t] * k[t];
    zd += distance_weight[t] * q[t] + distance_weight[dh + t] * k[t];
  }
  return {T(1) / (T(1) + std::exp(-zo)), zd};
}

template <typename T>
T order_penalty(T order, T predicted, OrderPenaltyMode mode) {
  const T p = std::clamp(predicted, T(kOrderClamp), T(1) - T(kOrderClamp));
  if (mode == OrderPenaltyMode::kLiteral) return order * std::log(p) + (T(1) - order) * (T(1) - std::log(p));
  return order * std::log(p) + (T(1) - order) * std::log(T(1) - p);
}

template <typename T>
T distance_penalty(T distance, T predicted, T theta) {
  const T diff = distance - predicted;
  return -theta * theta * diff * diff / T(2);
}

namespace {

template <typename T>
ag::Var<T> pair_targets(std::size_t n, bool distance) {
  std::vector<T> v(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      v[i * n + j] = distance ? static_cast<T>(distance_target(i, j)) : static_cast<T>(order_target(i, j));
  return ag::Var<T>::constant({n, n}, std::move(v));
}

// affine([q_i; k_j]) for every pair: [B, H, n, n]
template <typename T>
ag::Var<T> pair_affine(const ag::Var<T>& q, const ag::Var<T>& k, const ag::Var<T>& wq, const ag::Var<T>& wk,
                       const ag::Var<T>& b) {
  return ag::add(ag::outer_add(ag::head_matmul(q, wq), ag::head_matmul(k, wk)), b);
}

}  // namespace

template <typename T>
SpatialPenalties<T> spatial_penalties(const ag::Var<T>& q, const ag::Var<T>& k, const SpatialWeights<T>& w,
                                      const AttentionMasks<T>& masks, OrderPenaltyMode mode) {
  const std::size_t n = masks.length();
  SpatialPenalties<T> out;
  if (w.order_wq.defined()) {
    const auto o = pair_targets<T>(n, false);
    const auto p = ag::clamp(ag::sigmoid(pair_affine(q, k, w.order_wq, w.order_wk, w.order_b)), T(kOrderClamp),
                             T(1) - T(kOrderClamp));
    const auto log_p = ag::log(p);
    const auto not_o = ag::affine(o, T(-1), T(1));
    ag::Var<T> rest = mode == OrderPenaltyMode::kLiteral ? ag::affine(log_p, T(-1), T(1))
                                                         : ag::log(ag::affine(p, T(-1), T(1)));
    out.order = ag::mul(ag::add(ag::mul(o, log_p), ag::mul(not_o, rest)), masks.valid);
  }
  if (w.dist_wq.defined()) {
    const auto target = pair_targets<T>(n, true);
    const auto diff2 = ag::square(ag::sub(target, pair_affine(q, k, w.dist_wq, w.dist_wk, w.dist_b)));
    const auto scale = ag::affine(ag::square(w.theta), T(-0.5), T(0));
    out.distance = ag::mul(ag::mul(diff2, scale), masks.valid);
  }
  return out;
}

template <typename T>
ag::Var<T> calibrate_spatial(const ag::Var<T>& logits, const SpatialPenalties<T>& penalties,
                             const AttentionMasks<T>& masks) {
  ag::Var<T> z = logits;
  if (penalties.order.defined()) z = ag::add(z, penalties.order);
  if (penalties.distance.defined()) z = ag::add(z, penalties.distance);
  return ag::masked_softmax(z, masks.pairs);
}

#define ACREC_INSTANTIATE_SPATIAL(T)                                                                        \
  template SpatialPrediction<T> predict_spatial<T>(std::span<const T>, std::span<const T>, std::span<const T>, \
                                                   T, std::span<const T>, T);                               \
  template T order_penalty<T>(T, T, OrderPenaltyMode);                                                      \
  template T distance_penalty<T>(T, T, T);                                                                  \
  template SpatialPenalties<T> spatial_penalties<T>(const ag::Var<T>&, const ag::Var<T>&,                   \
                                                    const SpatialWeights<T>&, const AttentionMasks<T>&,     \
                                                    OrderPenaltyMode);                                      \
  template ag::Var<T> calibrate_spatial<T>(const ag::Var<T>&, const SpatialPenalties<T>&,                   \
                                           const AttentionMasks<T>&);

ACREC_INSTANTIATE_SPATIAL(float)
ACREC_INSTANTIATE_SPATIAL(double)
#undef ACREC_INSTANTIATE_SPATIAL

}  // namespace acrec::spatial
