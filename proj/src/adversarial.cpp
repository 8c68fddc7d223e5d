#include "acrec/adversarial.hpp"

#include <cmath>

namespace acrec::adversarial {

template <typename T>
ag::Var<T> perturbation_mask(const ag::Var<T>& q, const ag::Var<T>& k, const ag::Var<T>& w_qp,
                             const ag::Var<T>& w_kp, const AttentionMasks<T>& masks) {
  const T scale = T(1) / std::sqrt(static_cast<T>(q.shape().back()));
  const auto z = ag::bmm_nt(ag::head_matmul(q, w_qp), ag::head_matmul(k, w_kp), scale);
  return ag::add(ag::mul(ag::sigmoid(z), masks.valid), masks.invalid);
}

template <typename T>
ag::Var<T> perturb_attention(const ag::Var<T>& spatial, const ag::Var<T>& mask, const ag::Var<T>& uniform) {
  return ag::add(ag::mul(mask, spatial), ag::mul(ag::affine(mask, T(-1), T(1)), uniform));
}

template <typename T>
ag::Var<T> correct_attention(const ag::Var<T>& spatial, const ag::Var<T>& mask) {
  return ag::mul(spatial, ag::exp(ag::affine(mask, T(-1), T(1))));
}

template <typename T>
ag::Var<T> gate(const ag::Var<T>& q, const ag::Var<T>& w_g, const ag::Var<T>& b_g) {
  return ag::sigmoid(ag::add(ag::head_matmul(q, w_g), b_g));
}

template <typename T>
ag::Var<T> combine(const ag::Var<T>& spatial, const ag::Var<T>& corrected, const ag::Var<T>& g, Fusion fusion) {
  if (fusion == Fusion::kSum) return ag::affine(ag::add(spatial, corrected), T(0.5), T(0));
  return ag::add(ag::mul(g, spatial), ag::mul(ag::affine(g, T(-1), T(1)), corrected));
}

#define ACREC_INSTANTIATE_ADVERSARIAL(T)                                                                  \
  template ag::Var<T> perturbation_mask<T>(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&,      \
                                           const ag::Var<T>&, const AttentionMasks<T>&);                  \
  template ag::Var<T> perturb_attention<T>(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&);     \
  template ag::Var<T> correct_attention<T>(const ag::Var<T>&, const ag::Var<T>&);                        \
  template ag::Var<T> gate<T>(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&);                  \
  template ag::Var<T> combine<T>(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&, Fusion);

ACREC_INSTANTIATE_ADVERSARIAL(float)
ACREC_INSTANTIATE_ADVERSARIAL(double)
#undef ACREC_INSTANTIATE_ADVERSARIAL

}  // namespace acrec::adversarial
