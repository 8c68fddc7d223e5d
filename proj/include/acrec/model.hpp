#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "acrec/attention.hpp"
#include "acrec/autograd.hpp"
#include "acrec/config.hpp"
#include "acrec/data.hpp"
#include "acrec/parameters.hpp"

namespace acrec {

// Which attention map feeds the value aggregation:
//   clean      - A_s (A when the spatial calibrator is off)
//   calibrated - A_comb when the adversarial calibrator is on, else A_s
//   perturbed  - A_p (requires the adversarial calibrator)
enum class Branch { kClean, kCalibrated, kPerturbed };

// Per-layer attention artifacts, detached copies. Members that a branch does
// not compute stay undefined.
template <typename T>
struct LayerTrace {
  ag::Var<T> logits;     // [B, H, n, n], -inf on masked entries
  ag::Var<T> attention;  // A
  ag::Var<T> spatial;    // A_s
  ag::Var<T> mask;       // M
  ag::Var<T> perturbed;  // A_p
  ag::Var<T> corrected;  // A_c
  ag::Var<T> combined;   // A_comb
  ag::Var<T> gate;       // g, [B, H, n, 1]
  ag::Var<T> final;      // the map actually applied to the values
};

// Called with the final attention of each layer before it is applied; may
// edit values in place (only meaningful when no gradient is tracked).
template <typename T>
using AttentionHook = std::function<void(std::size_t layer, ag::Var<T>& attention, const AttentionMasks<T>& masks)>;

template <typename T>
struct ForwardOptions {
  Branch branch = Branch::kCalibrated;
  bool training = false;    // dropout active; lite inference never applies
  bool track_grad = false;  // bind the branch's parameter group as trainable
  bool keep_trace = false;
  bool input_grad = false;  // make the input embeddings a gradient leaf
  std::mt19937_64* rng = nullptr;
  AttentionHook<T> hook;
};

template <typename T>
struct ForwardResult {
  ag::Var<T> output;                // F^L: [B, n, d]
  ag::Var<T> embedded;              // input embeddings [B, n, d]
  std::vector<ag::Var<T>> masks;    // graph-connected M per layer (adversarial branches)
  std::vector<LayerTrace<T>> trace;
  AttentionMasks<T> attention_masks;
  std::size_t calibrator_ops = 0;   // spatial + adversarial computations executed
};

// Resolves parameter names to graph nodes: the store's own leaves for
// trainable groups, detached copies for everything else.
template <typename T>
class ParamView {
 public:
  ParamView(const ParameterStore<T>& store, bool backbone_trainable, bool perturbation_trainable)
      : store_(store), backbone_(backbone_trainable), perturbation_(perturbation_trainable) {}

  ag::Var<T> operator()(const std::string& name) const;
  ag::Var<T> optional(const std::string& name) const;  // undefined if absent
  const ParameterStore<T>& store() const { return store_; }

 private:
  const ParameterStore<T>& store_;
  bool backbone_;
  bool perturbation_;
  mutable std::map<std::string, ag::Var<T>> detached_;
};

// Item (plus absolute position) embeddings; padding positions are zero.
template <typename T>
ag::Var<T> embed(const data::SequenceBatch& batch, const ParamView<T>& params, const ModelConfig& cfg);

// ReLU(h W1 + b1) W2 + b2 applied position-wise.
template <typename T>
ag::Var<T> feed_forward(const ag::Var<T>& h, const ParamView<T>& params, std::size_t layer);

template <typename T>
ForwardResult<T> forward(const data::SequenceBatch& batch, const ParameterStore<T>& params, const ModelConfig& cfg,
                         const ForwardOptions<T>& opts = {});

// Scores of real items against the last position: [B, item_count]; column c
// is dense item c + 1.
template <typename T>
ag::Var<T> item_logits(const ag::Var<T>& output, const ParamView<T>& params);

// Softmax of item_logits; rows sum to 1.
template <typename T>
std::vector<T> predict_scores(const ag::Var<T>& output, const ParameterStore<T>& params);

// Cross-entropy from item logits and dense target ids, -log clamped at 1e-12.
template <typename T>
ag::Var<T> cross_entropy_loss(const ag::Var<T>& logits, std::span<const data::ItemId> targets);

// Scalar reference: -log(max(p, 1e-12)).
template <typename T>
T cross_entropy(std::span<const T> probabilities, data::ItemId target);

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kLayerNormEps = 1e-8;

}  // namespace acrec
