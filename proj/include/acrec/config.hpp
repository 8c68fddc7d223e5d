#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace acrec {

enum class PositionMode { kNone, kAbsolute };
enum class FusionMode { kGate, kSum };
enum class UpdateSchedule { kSimultaneous, kAlternating };

struct ModelConfig {
  std::size_t d = 64;      // embedding size
  std::size_t n = 50;      // max sequence length
  std::size_t L = 2;       // transformer blocks
  std::size_t heads = 2;
  std::size_t inner = 64;  // feed-forward inner size
  double dropout = 0.2;
  PositionMode position_mode = PositionMode::kNone;
  bool spatial_enabled = true;
  bool order_enabled = true;
  bool distance_enabled = true;
  bool adversarial_enabled = true;
  FusionMode fusion_mode = FusionMode::kGate;
  bool lite_inference = false;
  double alpha = 0.03;
  // Reproduce the printed order-penalty expression instead of the
  // log-likelihood form.
  bool literal_order_penalty = false;
  // Calibrator weights per head (true) or shared by all heads of a layer.
  bool calibrator_per_head = true;
  bool residual = true;
  bool layer_norm = true;
  double init_std = 0.02;

  bool uses_order() const { return spatial_enabled && order_enabled; }
  bool uses_distance() const { return spatial_enabled && distance_enabled; }
  bool uses_spatial() const { return uses_order() || uses_distance(); }
  std::size_t head_dim() const { return heads ? d / heads : 0; }
  std::size_t calibrator_heads() const { return calibrator_per_head ? heads : 1; }
};

// Everything a CLI run needs: the model plus paths and optimisation settings.
struct RunConfig {
  ModelConfig model;
  std::string data_dir;
  std::string checkpoint_dir;
  std::string report_dir;
  std::uint64_t seed = 42;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  double lr = 1e-4;
  std::size_t patience = 10;
  bool early_stopping = true;
  int precision = 32;
  std::size_t workers = 1;
  UpdateSchedule update_schedule = UpdateSchedule::kSimultaneous;
  double grad_clip = 0.0;  // global-norm cap, 0 disables
  bool repeat_filter = false;
};

// Lists every violated constraint; empty when valid.
std::vector<std::string> validate(const ModelConfig& cfg);
std::vector<std::string> validate(const RunConfig& cfg);

nlohmann::ordered_json to_json(const ModelConfig& cfg);
nlohmann::ordered_json to_json(const RunConfig& cfg);

// Strict readers: unknown keys and type mismatches are collected and thrown
// together as a ConfigError. Keys absent from `j` keep the values in `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, const ModelConfig& base = {});
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});

// Keys accepted by run_config_from_json (model keys included), in order.
std::vector<std::string> run_config_keys();

}  // namespace acrec
