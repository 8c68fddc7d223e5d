#include "acrec/config.hpp"

#include <set>

#include "acrec/error.hpp"

namespace acrec {

namespace {

const char* name(PositionMode m) { return m == PositionMode::kNone ? "none" : "absolute"; }
const char* name(FusionMode m) { return m == FusionMode::kGate ? "gate" : "sum"; }
const char* name(UpdateSchedule s) { return s == UpdateSchedule::kSimultaneous ? "simultaneous" : "alternating"; }

const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys = {
      "d", "n", "L", "heads", "inner", "dropout", "position_mode", "spatial_enabled", "order_enabled",
      "distance_enabled", "adversarial_enabled", "fusion_mode", "lite_inference", "alpha", "literal_order_penalty",
      "calibrator_per_head", "residual", "layer_norm", "init_std"};
  return keys;
}

const std::vector<std::string>& run_keys() {
  static const std::vector<std::string> keys = {
      "data_dir", "checkpoint_dir", "report_dir", "seed", "epochs", "batch_size", "lr", "patience",
      "early_stopping", "precision", "workers", "update_schedule", "grad_clip", "repeat_filter"};
  return keys;
}

// Reads `key` from `j` into `out` when present, recording type errors.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::vector<std::string>& problems) : j_(j), problems_(problems) {}

  template <typename V>
  void get(const std::string& key, V& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw std::invalid_argument("expected boolean");
        out = it->template get<bool>();
      } else if constexpr (std::is_integral_v<V>) {
        if (!it->is_number_integer()) throw std::invalid_argument("expected integer");
        if (it->is_number_unsigned() || it->template get<long long>() >= 0) {
          out = it->template get<V>();
        } else if constexpr (std::is_signed_v<V>) {
          out = it->template get<V>();
        } else {
          throw std::invalid_argument("expected non-negative integer");
        }
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw std::invalid_argument("expected number");
        out = it->template get<V>();
      } else {
        if (!it->is_string()) throw std::invalid_argument("expected string");
        out = it->template get<std::string>();
      }
    } catch (const std::exception& e) {
      problems_.push_back(key + ": " + e.what());
    }
  }

  template <typename E>
  void get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> options) {
    std::string s;
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!it->is_string()) {
      problems_.push_back(key + ": expected string");
      return;
    }
    s = it->template get<std::string>();
    for (const auto& [label, value] : options) {
      if (s == label) {
        out = value;
        return;
      }
    }
    std::string allowed;
    for (const auto& [label, value] : options) allowed += std::string(allowed.empty() ? "" : "|") + label;
    problems_.push_back(key + ": '" + s + "' is not one of " + allowed);
  }

 private:
  const nlohmann::json& j_;
  std::vector<std::string>& problems_;
};

void read_model(Reader& r, ModelConfig& c) {
  r.get("d", c.d);
  r.get("n", c.n);
  r.get("L", c.L);
  r.get("heads", c.heads);
  r.get("inner", c.inner);
  r.get("dropout", c.dropout);
  r.get_enum("position_mode", c.position_mode, {{"none", PositionMode::kNone}, {"absolute", PositionMode::kAbsolute}});
  r.get("spatial_enabled", c.spatial_enabled);
  r.get("order_enabled", c.order_enabled);
  r.get("distance_enabled", c.distance_enabled);
  r.get("adversarial_enabled", c.adversarial_enabled);
  r.get_enum("fusion_mode", c.fusion_mode, {{"gate", FusionMode::kGate}, {"sum", FusionMode::kSum}});
  r.get("lite_inference", c.lite_inference);
  r.get("alpha", c.alpha);
  r.get("literal_order_penalty", c.literal_order_penalty);
  r.get("calibrator_per_head", c.calibrator_per_head);
  r.get("residual", c.residual);
  r.get("layer_norm", c.layer_norm);
  r.get("init_std", c.init_std);
}

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, std::vector<std::string>& problems) {
  if (!j.is_object()) {
    problems.push_back("configuration must be a JSON object");
    return;
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) problems.push_back(it.key() + ": unknown configuration key");
  }
}

}  // namespace

std::vector<std::string> validate(const ModelConfig& c) {
  std::vector<std::string> p;
  if (c.d == 0) p.push_back("d: must be >= 1");
  if (c.heads == 0) p.push_back("heads: must be >= 1");
  if (c.heads && c.d % c.heads != 0) p.push_back("d: must be divisible by heads");
  if (c.n == 0) p.push_back("n: must be >= 1");
  if (c.L == 0) p.push_back("L: must be >= 1");
  if (c.inner == 0) p.push_back("inner: must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) p.push_back("dropout: must be in [0, 1)");
  if (!(c.alpha >= 0.0)) p.push_back("alpha: must be >= 0");
  if (!(c.init_std > 0.0)) p.push_back("init_std: must be > 0");
  return p;
}

std::vector<std::string> validate(const RunConfig& c) {
  auto p = validate(c.model);
  if (c.batch_size == 0) p.push_back("batch_size: must be >= 1");
  if (!(c.lr > 0.0)) p.push_back("lr: must be > 0");
  if (c.precision != 32 && c.precision != 64) p.push_back("precision: must be 32 or 64");
  if (c.workers == 0) p.push_back("workers: must be >= 1");
  if (!(c.grad_clip >= 0.0)) p.push_back("grad_clip: must be >= 0");
  return p;
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d"] = c.d;
  j["n"] = c.n;
  j["L"] = c.L;
  j["heads"] = c.heads;
  j["inner"] = c.inner;
  j["dropout"] = c.dropout;
  j["position_mode"] = name(c.position_mode);
  j["spatial_enabled"] = c.spatial_enabled;
  j["order_enabled"] = c.order_enabled;
  j["distance_enabled"] = c.distance_enabled;
  j["adversarial_enabled"] = c.adversarial_enabled;
  j["fusion_mode"] = name(c.fusion_mode);
  j["lite_inference"] = c.lite_inference;
  j["alpha"] = c.alpha;
  j["literal_order_penalty"] = c.literal_order_penalty;
  j["calibrator_per_head"] = c.calibrator_per_head;
  j["residual"] = c.residual;
  j["layer_norm"] = c.layer_norm;
  j["init_std"] = c.init_std;
  return j;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j = to_json(c.model);
  j["data_dir"] = c.data_dir;
  j["checkpoint_dir"] = c.checkpoint_dir;
  j["report_dir"] = c.report_dir;
  j["seed"] = c.seed;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["patience"] = c.patience;
  j["early_stopping"] = c.early_stopping;
  j["precision"] = c.precision;
  j["workers"] = c.workers;
  j["update_schedule"] = name(c.update_schedule);
  j["grad_clip"] = c.grad_clip;
  j["repeat_filter"] = c.repeat_filter;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base) {
  std::vector<std::string> problems;
  reject_unknown(j, {model_keys().begin(), model_keys().end()}, problems);
  ModelConfig c = base;
  if (j.is_object()) {
    Reader r(j, problems);
    read_model(r, c);
  }
  auto v = validate(c);
  problems.insert(problems.end(), v.begin(), v.end());
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base) {
  std::vector<std::string> problems;
  std::set<std::string> known(model_keys().begin(), model_keys().end());
  known.insert(run_keys().begin(), run_keys().end());
  reject_unknown(j, known, problems);
  RunConfig c = base;
  if (j.is_object()) {
    Reader r(j, problems);
    read_model(r, c.model);
    r.get("data_dir", c.data_dir);
    r.get("checkpoint_dir", c.checkpoint_dir);
    r.get("report_dir", c.report_dir);
    r.get("seed", c.seed);
    r.get("epochs", c.epochs);
    r.get("batch_size", c.batch_size);
    r.get("lr", c.lr);
    r.get("patience", c.patience);
    r.get("early_stopping", c.early_stopping);
    r.get("precision", c.precision);
    r.get("workers", c.workers);
    r.get_enum("update_schedule", c.update_schedule,
               {{"simultaneous", UpdateSchedule::kSimultaneous}, {"alternating", UpdateSchedule::kAlternating}});
    r.get("grad_clip", c.grad_clip);
    r.get("repeat_filter", c.repeat_filter);
  }
  auto v = validate(c);
  problems.insert(problems.end(), v.begin(), v.end());
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys = model_keys();
  keys.insert(keys.end(), run_keys().begin(), run_keys().end());
  return keys;
}

}  // namespace acrec
