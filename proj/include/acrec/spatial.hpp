#pragma once

// Spatial calibration: predicted order and log-distance between query and
// key positions, turned into non-positive penalties on the pre-softmax
// attention logits. Replaces positional embeddings.

#include <cstddef>
#include <span>

#include "acrec/attention.hpp"
#include "acrec/autograd.hpp"

namespace acrec::spatial {

enum class OrderPenaltyMode {
  kLogLikelihood,  // o ln(p) + (1 - o) ln(1 - p)
  kLiteral,        // o ln(p) + (1 - o)(1 - ln(p))
};

// Predicted order probabilities are clamped to [eps, 1 - eps] before the log.
inline constexpr double kOrderClamp = 1e-7;

// 1 when i < j, else 0.
int order_target(std::size_t i, std::size_t j);
// ln(1 + |i - j|)
double distance_target(std::size_t i, std::size_t j);

template <typename T>
struct SpatialPrediction {
  T order;     // sigmoid(w_o . [q; k] + b_o), in (0, 1)
  T distance;  // w_d . [q; k] + b_d
};

// Scalar reference for one (query, key) pair; the weight spans hold the
// 2 * d_h affine weights laid out as [query part; key part].
template <typename T>
SpatialPrediction<T> predict_spatial(std::span<const T> q, std::span<const T> k, std::span<const T> order_weight,
                                     T order_bias, std::span<const T> distance_weight, T distance_bias);

template <typename T>
T order_penalty(T order, T predicted, OrderPenaltyMode mode = OrderPenaltyMode::kLogLikelihood);

// -theta^2 (d - d_hat)^2 / 2
template <typename T>
T distance_penalty(T distance, T predicted, T theta);

// Per-layer calibrator weights; undefined members mean the component is off.
template <typename T>
struct SpatialWeights {
  ag::Var<T> order_wq, order_wk, order_b;   // [H|1, d_h, 1], [H|1, d_h, 1], [H|1, 1, 1]
  ag::Var<T> dist_wq, dist_wk, dist_b;
  ag::Var<T> theta;                         // [1]
};

template <typename T>
struct SpatialPenalties {
  ag::Var<T> order;     // [B, H, n, n], zero on masked entries; undefined when off
  ag::Var<T> distance;  // same
};

// Graph-level penalties from per-head q, k: [B, H, n, d_h].
template <typename T>
SpatialPenalties<T> spatial_penalties(const ag::Var<T>& q, const ag::Var<T>& k, const SpatialWeights<T>& w,
                                      const AttentionMasks<T>& masks, OrderPenaltyMode mode);

// softmax(logits + s_order + s_distance) over valid keys.
template <typename T>
ag::Var<T> calibrate_spatial(const ag::Var<T>& logits, const SpatialPenalties<T>& penalties,
                             const AttentionMasks<T>& masks);

}  // namespace acrec::spatial
