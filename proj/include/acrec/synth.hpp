#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "acrec/data.hpp"

namespace acrec::synth {

enum class Pattern {
  kCycle,   // item i is followed by i + 1 mod n_items
  kMarkov,  // sparse random transition table
};

struct SynthOptions {
  Pattern pattern = Pattern::kCycle;
  std::size_t n_items = 20;
  std::size_t n_users = 500;
  std::size_t min_length = 10;
  std::size_t max_length = 20;
  double noise_rate = 0.0;    // chance that an emitted item is replaced by a uniform draw
  std::size_t branching = 3;  // successors per item in markov mode
  std::uint64_t seed = 0;
};

// Row-stochastic [n_items x n_items] table with `branching` non-zero
// successors per row, stored row-major.
std::vector<double> transition_table(std::size_t n_items, std::size_t branching, std::mt19937_64& rng);

// Raw item labels are 0..n_items-1 as decimal strings; user i is "u<i>". The
// walk follows the true state even when the emitted item is noise.
std::vector<data::InteractionSequence> generate(const SynthOptions& opts);

// `user item timestamp` lines, timestamps counting from 0 per user.
void write_interactions(const std::vector<data::InteractionSequence>& sequences, const std::filesystem::path& path);

// generate() with ids interned in file order, matching what
// load_interactions returns for the written file.
data::Interactions generate_interactions(const SynthOptions& opts);

}  // namespace acrec::synth
