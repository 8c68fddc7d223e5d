#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "acrec/autograd.hpp"
#include "acrec/config.hpp"

namespace acrec {

// Backbone parameters (theta) are trained on the calibrated loss; the
// perturbation-mask projections (theta^P) on the perturbation objective.
enum class ParamGroup { kBackbone, kPerturbation };

template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    ag::Var<T> var;
  };

  void add(std::string name, ag::Shape shape, ParamGroup group, std::vector<T> values);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const ag::Var<T>& at(const std::string& name) const;
  ag::Var<T>& at(const std::string& name);
  ParamGroup group(const std::string& name) const { return entries_.at(index_.at(name)).group; }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  ParameterStore clone() const;
  template <typename U>
  ParameterStore<U> cast() const;

  // FNV-1a over names, shapes and values; used for reproducibility checks.
  std::uint64_t fingerprint() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Parameter names for one layer.
std::string layer_param(std::size_t layer, const std::string& leaf);

// Creates every tensor the configuration needs: matrices ~ normal(0, init_std),
// biases 0, layer-norm gains 1, distance scale 1. Row 0 of the item table
// (padding) is zero.
template <typename T>
ParameterStore<T> init_parameters(const ModelConfig& cfg, std::size_t item_count, std::uint64_t seed);

// Checkpoint directory layout: manifest.json (name, shape, dtype, byte
// offset per tensor, plus the item count) and weights.bin (row-major
// little-endian float32).
template <typename T>
void save_checkpoint(const ParameterStore<T>& params, std::size_t item_count, const std::filesystem::path& dir);

struct LoadedCheckpoint {
  std::size_t item_count = 0;
  // name -> (shape, values)
  std::map<std::string, std::pair<ag::Shape, std::vector<float>>> tensors;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& dir);

// Copies checkpoint tensors into a freshly initialised store for `cfg`.
// Tensors the configuration does not use (e.g. calibrator weights under lite
// inference) are ignored; a tensor the configuration needs but the checkpoint
// lacks, or a shape mismatch, is an error.
template <typename T>
ParameterStore<T> load_parameters(const LoadedCheckpoint& ckpt, const ModelConfig& cfg);

}  // namespace acrec
