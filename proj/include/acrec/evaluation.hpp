#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acrec/config.hpp"
#include "acrec/data.hpp"
#include "acrec/model.hpp"
#include "acrec/parameters.hpp"
#include "json.hpp"

namespace acrec::eval {

// 1-based rank of `target` among all items scored by `scores` (index c is
// item c + 1). Higher scores rank first; ties go to the lower item id.
template <typename T>
std::size_t target_rank(std::span<const T> scores, data::ItemId target);

// Every item id ordered by descending score, ties by ascending id.
template <typename T>
std::vector<data::ItemId> full_rank(std::span<const T> scores);

double recall_at_k(std::size_t rank, std::size_t k);
double ndcg_at_k(std::size_t rank, std::size_t k);

struct SliceReport {
  std::string label;
  double lo = 0.0;
  double hi = 0.0;  // bucket is [lo, hi)
  std::size_t count = 0;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
};

struct MetricsReport {
  std::vector<std::size_t> ks;
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t count = 0;
  std::size_t skipped = 0;
  std::vector<SliceReport> slices;
  std::vector<double> kendall;  // per-layer mean tau-b

  nlohmann::ordered_json to_json() const;
  // Flat rows: section,key,k,value,count
  std::string to_csv() const;
};

// Averages recall/ndcg at each K over the given ranks.
MetricsReport report_from_ranks(std::span<const std::size_t> ranks, const std::vector<std::size_t>& ks);

struct EvalOptions {
  std::vector<std::size_t> ks{10, 20};
  std::size_t batch_size = 256;
  std::size_t workers = 1;
  bool repeat_filter = false;  // drop context items from the candidates
  Branch branch = Branch::kCalibrated;
};

// Target rank of every example under a full ranking of the catalogue.
template <typename T>
std::vector<std::size_t> rank_examples(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                                       const ModelConfig& cfg, const EvalOptions& opts = {},
                                       const AttentionHook<T>& hook = {});

template <typename T>
MetricsReport evaluate(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                       const ModelConfig& cfg, const EvalOptions& opts = {});

// ---- erasing ----

struct EraseOptions {
  std::optional<std::size_t> layer;  // default: last layer
  std::optional<std::size_t> head;   // default: heads averaged for the argmax, entry removed in every head
  bool renormalize = true;           // rescale the row back to its original sum
};

// Zeroes attention[b, h, row, key] (every head unless `head` is set) and
// optionally rescales each touched row to its previous sum. attention:
// [B, H, n, n].
template <typename T>
void erase_entry(ag::Var<T>& attention, std::size_t b, std::size_t row, std::size_t key,
                 std::optional<std::size_t> head, bool renormalize);

// Key with the largest weight in the final query row (heads averaged unless
// `head` is set); ties resolve to the lowest index. Returns nothing when the
// row has fewer than two valid keys.
template <typename T>
std::optional<std::size_t> erase_target(const ag::Var<T>& attention, const AttentionMasks<T>& masks, std::size_t b,
                                        std::optional<std::size_t> head);

struct EraseReport {
  MetricsReport original;  // on the non-skipped examples
  MetricsReport erased;
  std::map<std::size_t, double> relative_change;  // (erased - original) / original recall, per K
  std::size_t skipped = 0;

  nlohmann::ordered_json to_json() const;
};

template <typename T>
EraseReport erase_experiment(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                             const ModelConfig& cfg, const EraseOptions& erase = {}, const EvalOptions& opts = {});

// ---- attention vs. gradient importance ----

// Tie-corrected Kendall tau-b in O(n log n). NaN when either input is
// constant or shorter than two.
double kendall_tau_b(std::span<const double> x, std::span<const double> y);

// Per example: norm of d(target logit)/d(input embedding) at each valid
// position, padding removed (so row b has as many entries as valid keys).
template <typename T>
std::vector<std::vector<double>> gradient_importance(const data::SequenceBatch& batch, const ParameterStore<T>& params,
                                                     const ModelConfig& cfg);

struct KendallReport {
  std::vector<double> mean_tau;           // per layer
  std::vector<std::size_t> counts;        // examples contributing per layer
  std::size_t skipped = 0;                // rows with fewer than two valid keys

  nlohmann::ordered_json to_json() const;
};

template <typename T>
KendallReport kendall_analysis(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                               const ModelConfig& cfg, std::size_t batch_size = 256);

// ---- slicing ----

enum class SliceMode { kLength, kPopularity };

// Groups test examples into [edges[i], edges[i + 1]) buckets by the user's
// training length or the target's training popularity. Values outside every
// bucket are left out of the slices but still count toward the totals.
template <typename T>
MetricsReport sliced_metrics(const data::Dataset& ds, const ParameterStore<T>& params, const ModelConfig& cfg,
                             SliceMode mode, const std::vector<double>& edges, const EvalOptions& opts = {});

// Pure bucketing step, exposed for tests.
MetricsReport slice_ranks(std::span<const std::size_t> ranks, std::span<const double> values,
                          const std::vector<double>& edges, const std::vector<std::size_t>& ks);

}  // namespace acrec::eval
