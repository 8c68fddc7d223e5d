#pragma once

// Adversarial calibration: a learned soft mask M mixes attention with a
// uniform reference (perturbation); the complement of M re-weights attention
// toward the entries the mask found decisive (correction), and a per-query
// gate fuses the corrected map with the spatially calibrated one.

#include "acrec/attention.hpp"
#include "acrec/autograd.hpp"

namespace acrec::adversarial {

enum class Fusion { kGate, kSum };

// M = sigmoid((Q W_qp)(K W_kp)^T / sqrt(d_h)) on valid entries, exactly 1
// elsewhere. q, k: [B, H, n, d_h]; w_qp, w_kp: [H|1, d_h, d_h].
template <typename T>
ag::Var<T> perturbation_mask(const ag::Var<T>& q, const ag::Var<T>& k, const ag::Var<T>& w_qp,
                             const ag::Var<T>& w_kp, const AttentionMasks<T>& masks);

// M * A_s + (1 - M) * mu
template <typename T>
ag::Var<T> perturb_attention(const ag::Var<T>& spatial, const ag::Var<T>& mask, const ag::Var<T>& uniform);

// A_s * exp(1 - M)
template <typename T>
ag::Var<T> correct_attention(const ag::Var<T>& spatial, const ag::Var<T>& mask);

// g = sigmoid(Q w_g + b_g): one scalar per head and query, [B, H, n, 1].
template <typename T>
ag::Var<T> gate(const ag::Var<T>& q, const ag::Var<T>& w_g, const ag::Var<T>& b_g);

// gate:  g * A_s + (1 - g) * A_c
// sum:   (A_s + A_c) / 2            (gate ignored)
template <typename T>
ag::Var<T> combine(const ag::Var<T>& spatial, const ag::Var<T>& corrected, const ag::Var<T>& g, Fusion fusion);

}  // namespace acrec::adversarial
