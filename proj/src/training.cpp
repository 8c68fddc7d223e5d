#include "acrec/training.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "acrec/error.hpp"
#include "acrec/evaluation.hpp"

namespace acrec {

template <typename T>
ag::Var<T> calibrated_loss(const data::SequenceBatch& batch, const ParameterStore<T>& params, const ModelConfig& cfg,
                           const LossOptions& opts) {
  ForwardOptions<T> fo;
  fo.branch = Branch::kCalibrated;
  fo.training = opts.training;
  fo.track_grad = opts.track_grad;
  fo.rng = opts.rng;
  const auto result = forward(batch, params, cfg, fo);
  const ParamView<T> view(params, opts.track_grad, false);
  return cross_entropy_loss(item_logits(result.output, view), std::span<const data::ItemId>(batch.targets));
}

template <typename T>
ag::Var<T> norm_penalty(const std::vector<ag::Var<T>>& masks, const AttentionMasks<T>& attention_masks) {
  ag::Var<T> total = ag::Var<T>::constant({1}, {T(0)});
  const T inv_batch = T(1) / static_cast<T>(attention_masks.batch());
  for (const auto& m : masks) {
    const auto norms = ag::masked_l2(ag::affine(m, T(-1), T(1)), attention_masks.pairs);
    total = ag::add(total, ag::affine(ag::sum(norms), inv_batch, T(0)));
  }
  return total;
}

double perturbation_objective(double perturbed_loss, double norm, double alpha) {
  return -perturbed_loss + alpha * norm;
}

template <typename T>
LossGraph<T> compute_losses(const data::SequenceBatch& batch, const ParameterStore<T>& params, const ModelConfig& cfg,
                            const LossOptions& opts) {
  LossGraph<T> g;
  g.calibrated = calibrated_loss(batch, params, cfg, opts);
  g.values.calibrated = static_cast<double>(g.calibrated.item());
  if (cfg.adversarial_enabled) {
    ForwardOptions<T> fo;
    fo.branch = Branch::kPerturbed;
    fo.training = opts.training;
    fo.track_grad = opts.track_grad;
    fo.rng = opts.rng;
    const auto result = forward(batch, params, cfg, fo);
    const ParamView<T> view(params, false, opts.track_grad);
    g.perturbed = cross_entropy_loss(item_logits(result.output, view), std::span<const data::ItemId>(batch.targets));
    g.norm = norm_penalty(result.masks, result.attention_masks);
    g.perturbation_objective =
        ag::add(ag::affine(g.perturbed, T(-1), T(0)), ag::affine(g.norm, static_cast<T>(cfg.alpha), T(0)));
    g.values.perturbed = static_cast<double>(g.perturbed.item());
    g.values.norm = static_cast<double>(g.norm.item());
    g.values.perturbation_objective = static_cast<double>(g.perturbation_objective.item());
  }
  g.values.total = g.values.perturbation_objective + g.values.calibrated;
  return g;
}

template <typename T>
void Adam<T>::step(ParameterStore<T>& params, double grad_clip) {
  double scale = 1.0;
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& e : params.entries())
      for (const T g : e.var.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) scale = grad_clip / norm;
  }
  for (auto& e : params.entries()) {
    const auto grad = e.var.grad();
    if (grad.empty()) continue;
    auto& slot = slots_[e.name];
    if (slot.m.empty()) {
      slot.m.assign(grad.size(), T(0));
      slot.v.assign(grad.size(), T(0));
    }
    ++slot.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(slot.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(slot.t));
    auto value = e.var.mutable_value();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = static_cast<double>(grad[i]) * scale;
      const double m = beta1_ * static_cast<double>(slot.m[i]) + (1.0 - beta1_) * g;
      const double v = beta2_ * static_cast<double>(slot.v[i]) + (1.0 - beta2_) * g * g;
      slot.m[i] = static_cast<T>(m);
      slot.v[i] = static_cast<T>(v);
      value[i] -= static_cast<T>(lr_ * (m / c1) / (std::sqrt(v / c2) + eps_));
    }
  }
}

template <typename T>
LossBundle train_step(const data::SequenceBatch& batch, ParameterStore<T>& params, Adam<T>& optimizer,
                      const ModelConfig& cfg, std::mt19937_64& rng, const StepOptions& step) {
  params.zero_grad();
  LossOptions lo;
  lo.training = true;
  lo.track_grad = true;
  lo.rng = &rng;
  const auto g = compute_losses(batch, params, cfg, lo);
  const auto& v = g.values;
  if (!std::isfinite(v.calibrated) || !std::isfinite(v.perturbed) || !std::isfinite(v.norm)) {
    std::ostringstream os;
    os << "non-finite loss: L_C=" << v.calibrated << " L_P=" << v.perturbed << " L_norm=" << v.norm
       << " batch_size=" << batch.size << " first_user=" << (batch.users.empty() ? 0 : batch.users.front());
    throw NumericalError(os.str());
  }
  if (step.update_backbone) ag::backward(g.calibrated);
  if (step.update_perturbation && g.perturbation_objective.defined()) ag::backward(g.perturbation_objective);
  optimizer.step(params, step.grad_clip);
  return v;
}

nlohmann::ordered_json EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["L_C"] = loss.calibrated;
  j["L_P"] = loss.perturbed;
  j["L_norm"] = loss.norm;
  j["L_P_final"] = loss.perturbation_objective;
  j["L_final"] = loss.total;
  for (const auto& [k, r] : valid_recall) j["valid_recall@" + std::to_string(k)] = r;
  for (const auto& [k, n] : valid_ndcg) j["valid_ndcg@" + std::to_string(k)] = n;
  return j;
}

template <typename T>
TrainResult<T> train(const data::Dataset& ds, const RunConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  if (auto problems = validate(cfg); !problems.empty()) throw ConfigError(std::move(problems));
  const ModelConfig& mc = cfg.model;
  auto params = init_parameters<T>(mc, ds.item_count, cfg.seed);
  TrainResult<T> result{params.clone(), {}, 0, -1.0};
  Adam<T> optimizer(cfg.lr);
  std::mt19937_64 rng(cfg.seed ^ 0x5bd1e995ULL);
  eval::EvalOptions eo;
  eo.ks = {10, 20};
  eo.batch_size = cfg.batch_size;
  eo.workers = cfg.workers;
  eo.repeat_filter = cfg.repeat_filter;

  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    StepOptions so;
    so.grad_clip = cfg.grad_clip;
    if (cfg.update_schedule == UpdateSchedule::kAlternating && mc.adversarial_enabled) {
      so.update_backbone = epoch % 2 == 1;
      so.update_perturbation = !so.update_backbone;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    double weight = 0.0;
    for (const auto& batch : data::batch(ds.split.train, cfg.batch_size, mc.n, cfg.seed + epoch)) {
      const auto v = train_step(batch, params, optimizer, mc, rng, so);
      const double w = static_cast<double>(batch.size);
      rec.loss.calibrated += w * v.calibrated;
      rec.loss.perturbed += w * v.perturbed;
      rec.loss.norm += w * v.norm;
      rec.loss.perturbation_objective += w * v.perturbation_objective;
      rec.loss.total += w * v.total;
      weight += w;
    }
    if (weight > 0.0) {
      rec.loss.calibrated /= weight;
      rec.loss.perturbed /= weight;
      rec.loss.norm /= weight;
      rec.loss.perturbation_objective /= weight;
      rec.loss.total /= weight;
    }
    const auto report = eval::evaluate(ds.split.valid, params, mc, eo);
    rec.valid_recall = report.recall;
    rec.valid_ndcg = report.ndcg;
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);

    const double ndcg = report.ndcg.at(10);
    if (ndcg > result.best_ndcg) {
      result.best_ndcg = ndcg;
      result.best_epoch = epoch;
      result.best = params.clone();
      since_best = 0;
    } else if (cfg.early_stopping && ++since_best >= cfg.patience) {
      break;
    }
  }
  return result;
}

namespace {

double objective_value(const ParameterStore<double>& params, const data::SequenceBatch& batch, const ModelConfig& cfg,
                       bool perturbation) {
  LossOptions lo;
  lo.track_grad = false;
  const auto g = compute_losses(batch, params, cfg, lo);
  return perturbation ? g.values.perturbation_objective : g.values.calibrated;
}

}  // namespace

GradCheckResult finite_difference_check(ParameterStore<double>& params, const data::SequenceBatch& batch,
                                        const ModelConfig& cfg, const std::string& name, double h) {
  const bool perturbation = params.group(name) == ParamGroup::kPerturbation;
  params.zero_grad();
  {
    const auto g = compute_losses(batch, params, cfg, LossOptions{});
    ag::backward(perturbation ? g.perturbation_objective : g.calibrated);
  }
  auto& var = params.at(name);
  const std::vector<double> analytic = var.grad().empty() ? std::vector<double>(var.size(), 0.0)
                                                          : std::vector<double>(var.grad().begin(), var.grad().end());
  std::vector<double> numeric(var.size());
  auto value = var.mutable_value();
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double orig = value[i];
    value[i] = orig + h;
    const double up = objective_value(params, batch, cfg, perturbation);
    value[i] = orig - h;
    const double down = objective_value(params, batch, cfg, perturbation);
    value[i] = orig;
    numeric[i] = (up - down) / (2.0 * h);
  }
  params.zero_grad();

  GradCheckResult r;
  r.name = name;
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff2 += d * d;
    a2 += analytic[i] * analytic[i];
    n2 += numeric[i] * numeric[i];
    r.max_abs_diff = std::max(r.max_abs_diff, std::abs(d));
  }
  r.analytic_norm = std::sqrt(a2);
  r.numeric_norm = std::sqrt(n2);
  const double denom = std::max(r.analytic_norm, r.numeric_norm);
  r.relative_error = denom < 1e-10 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
  return r;
}

double routing_leak(ParameterStore<double>& params, const data::SequenceBatch& batch, const ModelConfig& cfg) {
  double leak = 0.0;
  auto scan = [&](ParamGroup forbidden) {
    for (const auto& e : params.entries()) {
      if (e.group != forbidden) continue;
      for (const double g : e.var.grad()) leak = std::max(leak, std::abs(g));
    }
  };
  params.zero_grad();
  {
    const auto g = compute_losses(batch, params, cfg, LossOptions{});
    ag::backward(g.calibrated);
    scan(ParamGroup::kPerturbation);
    if (g.perturbation_objective.defined()) {
      params.zero_grad();
      ag::backward(g.perturbation_objective);
      scan(ParamGroup::kBackbone);
    }
  }
  params.zero_grad();
  return leak;
}

#define ACREC_INSTANTIATE_TRAINING(T)                                                                          \
  template ag::Var<T> calibrated_loss<T>(const data::SequenceBatch&, const ParameterStore<T>&, const ModelConfig&, \
                                         const LossOptions&);                                                  \
  template ag::Var<T> norm_penalty<T>(const std::vector<ag::Var<T>>&, const AttentionMasks<T>&);               \
  template LossGraph<T> compute_losses<T>(const data::SequenceBatch&, const ParameterStore<T>&, const ModelConfig&, \
                                          const LossOptions&);                                                 \
  template class Adam<T>;                                                                                      \
  template LossBundle train_step<T>(const data::SequenceBatch&, ParameterStore<T>&, Adam<T>&, const ModelConfig&, \
                                    std::mt19937_64&, const StepOptions&);                                     \
  template TrainResult<T> train<T>(const data::Dataset&, const RunConfig&,                                     \
                                   const std::function<void(const EpochRecord&)>&);

ACREC_INSTANTIATE_TRAINING(float)
ACREC_INSTANTIATE_TRAINING(double)
#undef ACREC_INSTANTIATE_TRAINING

}  // namespace acrec
