#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "acrec/config.hpp"
#include "acrec/data.hpp"
#include "acrec/model.hpp"
#include "acrec/parameters.hpp"
#include "json.hpp"

namespace acrec {

// Scalar losses of one step. perturbed/norm are zero when the adversarial
// calibrator is off.
struct LossBundle {
  double calibrated = 0.0;              // L_C
  double perturbed = 0.0;               // L_P
  double norm = 0.0;                    // L_norm
  double perturbation_objective = 0.0;  // -L_P + alpha * L_norm
  double total = 0.0;                   // perturbation_objective + L_C
};

template <typename T>
struct LossGraph {
  ag::Var<T> calibrated;
  ag::Var<T> perturbed;
  ag::Var<T> norm;
  ag::Var<T> perturbation_objective;  // undefined without the adversarial calibrator
  LossBundle values;
};

struct LossOptions {
  bool training = false;  // dropout on
  bool track_grad = true;
  std::mt19937_64* rng = nullptr;
};

// Cross-entropy of the calibrated branch; gradients reach the backbone only.
template <typename T>
ag::Var<T> calibrated_loss(const data::SequenceBatch& batch, const ParameterStore<T>& params, const ModelConfig& cfg,
                           const LossOptions& opts = {});

// Sum over layers of the batch-mean of sum over heads of ||1 - M|| on valid
// entries.
template <typename T>
ag::Var<T> norm_penalty(const std::vector<ag::Var<T>>& masks, const AttentionMasks<T>& attention_masks);

double perturbation_objective(double perturbed_loss, double norm, double alpha);

// Both branches. The perturbed branch sees the backbone as constants, so its
// objective only reaches the perturbation-mask projections.
template <typename T>
LossGraph<T> compute_losses(const data::SequenceBatch& batch, const ParameterStore<T>& params, const ModelConfig& cfg,
                            const LossOptions& opts = {});

template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Updates every parameter that received a gradient. `grad_clip` > 0 rescales
  // those gradients to a global norm of at most grad_clip first.
  void step(ParameterStore<T>& params, double grad_clip = 0.0);

 private:
  struct Slot {
    std::vector<T> m, v;
    std::size_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, Slot> slots_;
};

struct StepOptions {
  bool update_backbone = true;      // apply L_C
  bool update_perturbation = true;  // apply the perturbation objective
  double grad_clip = 0.0;
};

// One optimisation step on both groups. Throws NumericalError if any loss is
// not finite.
template <typename T>
LossBundle train_step(const data::SequenceBatch& batch, ParameterStore<T>& params, Adam<T>& optimizer,
                      const ModelConfig& cfg, std::mt19937_64& rng, const StepOptions& step = {});

struct EpochRecord {
  std::size_t epoch = 0;
  LossBundle loss;  // example-weighted means over the epoch
  std::map<std::size_t, double> valid_recall;
  std::map<std::size_t, double> valid_ndcg;

  nlohmann::ordered_json to_json() const;
};

template <typename T>
struct TrainResult {
  ParameterStore<T> best;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;  // 0 means the initialisation
  double best_ndcg = -1.0;
};

// Trains from a seeded initialisation; keeps the parameters with the best
// validation NDCG@10 and stops after `patience` epochs without improvement
// when early stopping is on.
template <typename T>
TrainResult<T> train(const data::Dataset& ds, const RunConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {});

struct GradCheckResult {
  std::string name;
  double relative_error = 0.0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  double max_abs_diff = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

// Central differences (step `h`) against the analytic gradient of the
// objective that owns the tensor: the perturbation objective for
// perturbation-mask projections, L_C for everything else. Dropout is off.
GradCheckResult finite_difference_check(ParameterStore<double>& params, const data::SequenceBatch& batch,
                                        const ModelConfig& cfg, const std::string& name, double h = 1e-4);

// Largest |gradient| that crosses groups: d L_C / d theta^P and
// d (perturbation objective) / d theta. Zero when routing holds.
double routing_leak(ParameterStore<double>& params, const data::SequenceBatch& batch, const ModelConfig& cfg);

}  // namespace acrec
