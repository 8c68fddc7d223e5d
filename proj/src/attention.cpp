#include "acrec/attention.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace acrec {

template <typename T>
std::size_t AttentionMasks<T>::valid_keys(std::size_t b, std::size_t i) const {
  std::size_t c = 0;
  for (std::size_t j = 0; j < pairs.cols; ++j) c += pairs(b, i, j) ? 1 : 0;
  return c;
}

template <typename T>
AttentionMasks<T> build_masks(std::span<const std::uint8_t> key_valid, std::size_t batch, std::size_t n) {
  if (key_valid.size() != batch * n) throw std::invalid_argument("build_masks: mask size mismatch");
  AttentionMasks<T> m;
  m.pairs = {batch, n, n, std::vector<std::uint8_t>(batch * n * n, 0)};
  std::vector<T> valid(batch * n * n, T(0)), invalid(batch * n * n, T(1)), uniform(batch * n * n, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t count = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        if (key_valid[b * n + j]) {
          m.pairs.bits[(b * n + i) * n + j] = 1;
          ++count;
        }
      }
      const std::size_t row = (b * n + i) * n;
      if (count == 0) {
        uniform[row + i] = T(1);
        continue;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        if (key_valid[b * n + j]) {
          valid[row + j] = T(1);
          invalid[row + j] = T(0);
          uniform[row + j] = T(1) / static_cast<T>(count);
        }
      }
    }
  m.valid = ag::Var<T>::constant({batch, 1, n, n}, std::move(valid));
  m.invalid = ag::Var<T>::constant({batch, 1, n, n}, std::move(invalid));
  m.uniform = ag::Var<T>::constant({batch, 1, n, n}, std::move(uniform));
  return m;
}

template <typename T>
ag::Var<T> attention_logits(const ag::Var<T>& q, const ag::Var<T>& k, const AttentionMasks<T>& masks) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.shape().back()));
  return ag::masked_fill(ag::bmm_nt(q, k, scale), masks.pairs, -std::numeric_limits<T>::infinity());
}

template <typename T>
ag::Var<T> softmax_rows(const ag::Var<T>& logits, const AttentionMasks<T>& masks) {
  return ag::masked_softmax(logits, masks.pairs);
}

template <typename T>
ag::Var<T> apply_attention(const ag::Var<T>& attention, const ag::Var<T>& v) {
  return ag::merge_heads(ag::bmm(attention, v));
}

#define ACREC_INSTANTIATE_ATTENTION(T)                                                                    \
  template struct AttentionMasks<T>;                                                                      \
  template AttentionMasks<T> build_masks<T>(std::span<const std::uint8_t>, std::size_t, std::size_t);     \
  template ag::Var<T> attention_logits<T>(const ag::Var<T>&, const ag::Var<T>&, const AttentionMasks<T>&); \
  template ag::Var<T> softmax_rows<T>(const ag::Var<T>&, const AttentionMasks<T>&);                       \
  template ag::Var<T> apply_attention<T>(const ag::Var<T>&, const ag::Var<T>&);

ACREC_INSTANTIATE_ATTENTION(float)
ACREC_INSTANTIATE_ATTENTION(double)
#undef ACREC_INSTANTIATE_ATTENTION

}  // namespace acrec
