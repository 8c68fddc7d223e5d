#include "acrec/synth.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "acrec/error.hpp"

namespace acrec::synth {

std::vector<double> transition_table(std::size_t n_items, std::size_t branching, std::mt19937_64& rng) {
  if (branching == 0 || branching > n_items) throw std::invalid_argument("branching must be in [1, n_items]");
  std::vector<double> table(n_items * n_items, 0.0);
  std::vector<std::size_t> candidates(n_items);
  std::uniform_real_distribution<double> weight(0.1, 1.0);
  for (std::size_t i = 0; i < n_items; ++i) {
    std::iota(candidates.begin(), candidates.end(), 0);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    double total = 0.0;
    for (std::size_t s = 0; s < branching; ++s) total += (table[i * n_items + candidates[s]] = weight(rng));
    for (std::size_t j = 0; j < n_items; ++j) table[i * n_items + j] /= total;
  }
  return table;
}

std::vector<data::InteractionSequence> generate(const SynthOptions& opts) {
  if (opts.n_items == 0) throw std::invalid_argument("n_items must be >= 1");
  if (!(opts.noise_rate >= 0.0 && opts.noise_rate <= 1.0)) throw std::invalid_argument("noise_rate must be in [0, 1]");
  if (opts.min_length == 0 || opts.min_length > opts.max_length) {
    throw std::invalid_argument("need 1 <= min_length <= max_length");
  }
  std::mt19937_64 rng(opts.seed);
  std::vector<double> table;
  if (opts.pattern == Pattern::kMarkov) table = transition_table(opts.n_items, opts.branching, rng);

  std::uniform_int_distribution<std::size_t> any_item(0, opts.n_items - 1);
  std::uniform_int_distribution<std::size_t> length(opts.min_length, opts.max_length);
  std::bernoulli_distribution noisy(opts.noise_rate);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto next_state = [&](std::size_t s) {
    if (opts.pattern == Pattern::kCycle) return (s + 1) % opts.n_items;
    const double u = unit(rng);
    double acc = 0.0;
    std::size_t last = s;
    for (std::size_t j = 0; j < opts.n_items; ++j) {
      const double p = table[s * opts.n_items + j];
      if (p <= 0.0) continue;
      last = j;
      acc += p;
      if (u < acc) return j;
    }
    return last;
  };

  std::vector<data::InteractionSequence> out(opts.n_users);
  for (std::size_t u = 0; u < opts.n_users; ++u) {
    out[u].user_id = "u" + std::to_string(u);
    const std::size_t len = length(rng);
    std::size_t state = any_item(rng);
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t emitted = noisy(rng) ? any_item(rng) : state;
      out[u].items.push_back(static_cast<data::ItemId>(emitted));
      state = next_state(state);
    }
  }
  return out;
}

void write_interactions(const std::vector<data::InteractionSequence>& sequences, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& seq : sequences) {
    for (std::size_t t = 0; t < seq.items.size(); ++t) os << seq.user_id << ' ' << seq.items[t] << ' ' << t << '\n';
  }
}

data::Interactions generate_interactions(const SynthOptions& opts) {
  data::Interactions result;
  for (const auto& seq : generate(opts)) {
    data::InteractionSequence s;
    s.user_id = seq.user_id;
    result.vocab.intern_user(seq.user_id);
    for (const auto raw : seq.items) s.items.push_back(result.vocab.intern_item(std::to_string(raw)));
    result.sequences.push_back(std::move(s));
  }
  return result;
}

}  // namespace acrec::synth
