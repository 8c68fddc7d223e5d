#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "acrec/autograd.hpp"

namespace acrec {

// Mask tensors shared by every layer of one forward pass. Entry (b, i, j) is
// valid when key j is a real item and j <= i.
template <typename T>
struct AttentionMasks {
  ag::PairMask pairs;     // [B, n, n]
  ag::Var<T> valid;       // [B, 1, n, n] as 0/1
  ag::Var<T> invalid;     // 1 - valid
  ag::Var<T> uniform;     // mu: 1 / (#valid keys) on valid entries

  std::size_t batch() const { return pairs.batch; }
  std::size_t length() const { return pairs.rows; }
  std::size_t valid_keys(std::size_t b, std::size_t i) const;
};

// `key_valid` is the [B, n] validity mask of the batch.
template <typename T>
AttentionMasks<T> build_masks(std::span<const std::uint8_t> key_valid, std::size_t batch, std::size_t n);

// Scaled per-head dot products q k^T / sqrt(d_h) with masked entries set to
// -infinity. q, k: [B, H, n, d_h] -> [B, H, n, n].
template <typename T>
ag::Var<T> attention_logits(const ag::Var<T>& q, const ag::Var<T>& k, const AttentionMasks<T>& masks);

// Row softmax over valid keys; a query with no valid key attends to itself.
template <typename T>
ag::Var<T> softmax_rows(const ag::Var<T>& logits, const AttentionMasks<T>& masks);

// attention: [B, H, n, n], v: [B, H, n, d_h] -> concatenated heads [B, n, d].
template <typename T>
ag::Var<T> apply_attention(const ag::Var<T>& attention, const ag::Var<T>& v);

}  // namespace acrec
