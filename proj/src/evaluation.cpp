#include "acrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace acrec::eval {

template <typename T>
std::size_t target_rank(std::span<const T> scores, data::ItemId target) {
  if (target < 1 || static_cast<std::size_t>(target) > scores.size()) throw std::out_of_range("target outside catalogue");
  const std::size_t t = static_cast<std::size_t>(target) - 1;
  const T s = scores[t];
  std::size_t rank = 1;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] > s || (scores[c] == s && c < t)) ++rank;
  }
  return rank;
}

template <typename T>
std::vector<data::ItemId> full_rank(std::span<const T> scores) {
  std::vector<data::ItemId> ids(scores.size());
  std::iota(ids.begin(), ids.end(), data::ItemId{1});
  std::stable_sort(ids.begin(), ids.end(), [&](data::ItemId a, data::ItemId b) {
    return scores[static_cast<std::size_t>(a) - 1] > scores[static_cast<std::size_t>(b) - 1];
  });
  return ids;
}

double recall_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::size_t rank, std::size_t k) {
  if (rank < 1) throw std::invalid_argument("rank must be >= 1");
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

namespace {

std::string format_edge(double v) {
  if (std::isinf(v)) return "inf";
  std::ostringstream os;
  os << v;
  return os.str();
}

void fill_metrics(std::span<const std::size_t> ranks, const std::vector<std::size_t>& ks,
                  std::map<std::size_t, double>& recall, std::map<std::size_t, double>& ndcg) {
  for (const auto k : ks) {
    double r = 0.0, g = 0.0;
    for (const auto rank : ranks) {
      r += recall_at_k(rank, k);
      g += ndcg_at_k(rank, k);
    }
    const double denom = ranks.empty() ? 1.0 : static_cast<double>(ranks.size());
    recall[k] = r / denom;
    ndcg[k] = g / denom;
  }
}

nlohmann::ordered_json metric_map(const std::map<std::size_t, double>& m) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

}  // namespace

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["count"] = count;
  j["skipped"] = skipped;
  j["recall"] = metric_map(recall);
  j["ndcg"] = metric_map(ndcg);
  if (!slices.empty()) {
    j["slices"] = nlohmann::ordered_json::array();
    for (const auto& s : slices) {
      nlohmann::ordered_json js;
      js["bucket"] = s.label;
      js["count"] = s.count;
      js["recall"] = metric_map(s.recall);
      js["ndcg"] = metric_map(s.ndcg);
      j["slices"].push_back(js);
    }
  }
  if (!kendall.empty()) j["kendall"] = kendall;
  return j;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os.precision(10);
  os << "section,key,k,value,count\n";
  for (const auto& [k, v] : recall) os << "overall,recall," << k << ',' << v << ',' << count << '\n';
  for (const auto& [k, v] : ndcg) os << "overall,ndcg," << k << ',' << v << ',' << count << '\n';
  for (const auto& s : slices) {
    for (const auto& [k, v] : s.recall) os << "slice:" << s.label << ",recall," << k << ',' << v << ',' << s.count << '\n';
    for (const auto& [k, v] : s.ndcg) os << "slice:" << s.label << ",ndcg," << k << ',' << v << ',' << s.count << '\n';
  }
  for (std::size_t l = 0; l < kendall.size(); ++l) os << "kendall,layer" << l << ",," << kendall[l] << ',' << count << '\n';
  return os.str();
}

MetricsReport report_from_ranks(std::span<const std::size_t> ranks, const std::vector<std::size_t>& ks) {
  MetricsReport r;
  r.ks = ks;
  r.count = ranks.size();
  fill_metrics(ranks, ks, r.recall, r.ndcg);
  return r;
}

template <typename T>
std::vector<std::size_t> rank_examples(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                                       const ModelConfig& cfg, const EvalOptions& opts, const AttentionHook<T>& hook) {
  std::vector<std::size_t> ranks(examples.size(), 0);
  if (examples.empty()) return ranks;
  const std::size_t bs = std::max<std::size_t>(1, opts.batch_size);
  const std::size_t batches = (examples.size() + bs - 1) / bs;

  auto run_batch = [&](std::size_t bi) {
    const std::size_t begin = bi * bs, end = std::min(examples.size(), begin + bs);
    std::vector<const data::SplitExample*> rows;
    for (std::size_t e = begin; e < end; ++e) rows.push_back(&examples[e]);
    const auto batch = data::make_batch(rows, cfg.n);
    ForwardOptions<T> fo;
    fo.branch = opts.branch;
    fo.hook = hook;
    const auto result = forward(batch, params, cfg, fo);
    const ParamView<T> view(params, false, false);
    const auto logits = item_logits(result.output, view);
    const std::size_t items = logits.dim(1);
    std::vector<T> row(items);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      std::copy_n(logits.value().data() + b * items, items, row.data());
      if (opts.repeat_filter) {
        for (const auto id : rows[b]->context) {
          if (id >= 1 && id != rows[b]->target) row[static_cast<std::size_t>(id) - 1] = -std::numeric_limits<T>::infinity();
        }
      }
      ranks[begin + b] = target_rank(std::span<const T>(row), rows[b]->target);
    }
  };

  const std::size_t workers = std::min(std::max<std::size_t>(1, opts.workers), batches);
  if (workers == 1) {
    for (std::size_t bi = 0; bi < batches; ++bi) run_batch(bi);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t bi = w; bi < batches; bi += workers) run_batch(bi);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return ranks;
}

template <typename T>
MetricsReport evaluate(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                       const ModelConfig& cfg, const EvalOptions& opts) {
  const auto ranks = rank_examples(examples, params, cfg, opts);
  return report_from_ranks(ranks, opts.ks);
}

// ---- erasing ----

template <typename T>
void erase_entry(ag::Var<T>& attention, std::size_t b, std::size_t row, std::size_t key,
                 std::optional<std::size_t> head, bool renormalize) {
  const std::size_t H = attention.dim(1), n = attention.dim(2), m = attention.dim(3);
  auto v = attention.mutable_value();
  for (std::size_t h = 0; h < H; ++h) {
    if (head && *head != h) continue;
    T* r = v.data() + ((b * H + h) * n + row) * m;
    T before = 0;
    for (std::size_t j = 0; j < m; ++j) before += r[j];
    r[key] = T(0);
    if (!renormalize) continue;
    T after = 0;
    for (std::size_t j = 0; j < m; ++j) after += r[j];
    if (after > T(0) && after != before) {
      const T scale = before / after;
      for (std::size_t j = 0; j < m; ++j) r[j] *= scale;
    }
  }
}

template <typename T>
std::optional<std::size_t> erase_target(const ag::Var<T>& attention, const AttentionMasks<T>& masks, std::size_t b,
                                        std::optional<std::size_t> head) {
  const std::size_t H = attention.dim(1), n = attention.dim(2);
  const std::size_t row = n - 1;
  if (masks.valid_keys(b, row) < 2) return std::nullopt;
  const auto v = attention.value();
  std::optional<std::size_t> best;
  T best_w = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!masks.pairs(b, row, j)) continue;
    T w = 0;
    if (head) {
      w = v[((b * H + *head) * n + row) * n + j];
    } else {
      for (std::size_t h = 0; h < H; ++h) w += v[((b * H + h) * n + row) * n + j];
      w /= static_cast<T>(H);
    }
    if (!best || w > best_w) {
      best = j;
      best_w = w;
    }
  }
  return best;
}

nlohmann::ordered_json EraseReport::to_json() const {
  nlohmann::ordered_json j;
  j["skipped"] = skipped;
  j["original"] = original.to_json();
  j["erased"] = erased.to_json();
  j["relative_change"] = metric_map(relative_change);
  return j;
}

template <typename T>
EraseReport erase_experiment(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                             const ModelConfig& cfg, const EraseOptions& erase, const EvalOptions& opts) {
  const std::size_t layer = erase.layer.value_or(cfg.L - 1);
  if (layer >= cfg.L) throw std::invalid_argument("erase layer out of range");
  if (erase.head && *erase.head >= cfg.heads) throw std::invalid_argument("erase head out of range");

  EraseReport report;
  std::vector<data::SplitExample> kept;
  for (const auto& ex : examples) {
    if (std::min(ex.context.size(), cfg.n) < 2) {
      ++report.skipped;
    } else {
      kept.push_back(ex);
    }
  }
  const auto original = rank_examples(kept, params, cfg, opts);
  AttentionHook<T> hook = [&](std::size_t l, ag::Var<T>& attention, const AttentionMasks<T>& masks) {
    if (l != layer) return;
    for (std::size_t b = 0; b < masks.batch(); ++b) {
      if (const auto key = erase_target(attention, masks, b, erase.head)) {
        erase_entry(attention, b, masks.length() - 1, *key, erase.head, erase.renormalize);
      }
    }
  };
  const auto erased = rank_examples(kept, params, cfg, opts, hook);
  report.original = report_from_ranks(original, opts.ks);
  report.erased = report_from_ranks(erased, opts.ks);
  report.original.skipped = report.erased.skipped = report.skipped;
  for (const auto k : opts.ks) {
    const double before = report.original.recall.at(k), after = report.erased.recall.at(k);
    report.relative_change[k] = before > 0.0 ? (after - before) / before : 0.0;
  }
  return report;
}

// ---- Kendall tau-b ----

namespace {

// Counts inversions (strictly decreasing pairs) while merge-sorting `v`.
std::int64_t count_inversions(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = count_inversions(v, buf, lo, mid) + count_inversions(v, buf, mid, hi);
  std::size_t i = lo, j = mid, o = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buf[o++] = v[j++];
    } else {
      buf[o++] = v[i++];
    }
  }
  while (i < mid) buf[o++] = v[i++];
  while (j < hi) buf[o++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

std::int64_t tied_pairs(std::int64_t run) { return run * (run - 1) / 2; }

}  // namespace

double kendall_tau_b(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("kendall_tau_b: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]);
  });

  const std::int64_t n0 = tied_pairs(static_cast<std::int64_t>(n));
  std::int64_t n1 = 0, n3 = 0;
  std::int64_t run_x = 1, run_xy = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    const bool same_x = i < n && x[order[i]] == x[order[i - 1]];
    const bool same_xy = same_x && y[order[i]] == y[order[i - 1]];
    if (same_x) {
      ++run_x;
    } else {
      n1 += tied_pairs(run_x);
      run_x = 1;
    }
    if (same_xy) {
      ++run_xy;
    } else {
      n3 += tied_pairs(run_xy);
      run_xy = 1;
    }
  }

  std::vector<double> ys(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];
  const std::int64_t swaps = count_inversions(ys, buf, 0, n);
  std::int64_t n2 = 0, run_y = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && ys[i] == ys[i - 1]) {
      ++run_y;
    } else {
      n2 += tied_pairs(run_y);
      run_y = 1;
    }
  }

  const std::int64_t c_minus_d = n0 - n1 - n2 + n3 - 2 * swaps;
  const std::int64_t untied_x = n0 - n1, untied_y = n0 - n2;
  if (untied_x == 0 || untied_y == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>(c_minus_d) / std::sqrt(static_cast<double>(untied_x) * static_cast<double>(untied_y));
}

template <typename T>
std::vector<std::vector<double>> gradient_importance(const data::SequenceBatch& batch, const ParameterStore<T>& params,
                                                     const ModelConfig& cfg) {
  ForwardOptions<T> fo;
  fo.branch = Branch::kCalibrated;
  fo.input_grad = true;
  const auto result = forward(batch, params, cfg, fo);
  const ParamView<T> view(params, false, false);
  std::vector<std::int64_t> cols(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) cols[b] = batch.targets[b] - 1;
  ag::backward(ag::sum(ag::pick(item_logits(result.output, view), std::span<const std::int64_t>(cols))));

  const std::size_t n = batch.length, d = result.embedded.dim(2);
  const auto grad = result.embedded.grad();
  std::vector<std::vector<double>> out(batch.size);
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!batch.valid(b, i)) continue;
      double s = 0.0;
      if (!grad.empty()) {
        for (std::size_t t = 0; t < d; ++t) {
          const double g = grad[(b * n + i) * d + t];
          s += g * g;
        }
      }
      out[b].push_back(std::sqrt(s));
    }
  }
  return out;
}

nlohmann::ordered_json KendallReport::to_json() const {
  nlohmann::ordered_json j;
  j["mean_tau"] = mean_tau;
  j["counts"] = counts;
  j["skipped"] = skipped;
  return j;
}

template <typename T>
KendallReport kendall_analysis(const std::vector<data::SplitExample>& examples, const ParameterStore<T>& params,
                               const ModelConfig& cfg, std::size_t batch_size) {
  KendallReport report;
  std::vector<double> sums(cfg.L, 0.0);
  report.counts.assign(cfg.L, 0);
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t begin = 0; begin < examples.size(); begin += bs) {
    const std::size_t end = std::min(examples.size(), begin + bs);
    std::vector<const data::SplitExample*> rows;
    for (std::size_t e = begin; e < end; ++e) rows.push_back(&examples[e]);
    const auto batch = data::make_batch(rows, cfg.n);
    const auto importance = gradient_importance(batch, params, cfg);

    ForwardOptions<T> fo;
    fo.branch = Branch::kCalibrated;
    fo.keep_trace = true;
    const auto result = forward(batch, params, cfg, fo);
    const std::size_t n = batch.length, H = cfg.heads;
    for (std::size_t b = 0; b < batch.size; ++b) {
      if (result.attention_masks.valid_keys(b, n - 1) < 2) {
        ++report.skipped;
        continue;
      }
      for (std::size_t l = 0; l < cfg.L; ++l) {
        const auto a = result.trace[l].final.value();
        std::vector<double> row;
        for (std::size_t j = 0; j < n; ++j) {
          if (!batch.valid(b, j)) continue;
          double w = 0.0;
          for (std::size_t h = 0; h < H; ++h) w += a[((b * H + h) * n + (n - 1)) * n + j];
          row.push_back(w / static_cast<double>(H));
        }
        const double tau = kendall_tau_b(row, importance[b]);
        if (std::isnan(tau)) continue;
        sums[l] += tau;
        ++report.counts[l];
      }
    }
  }
  report.mean_tau.resize(cfg.L);
  for (std::size_t l = 0; l < cfg.L; ++l) {
    report.mean_tau[l] = report.counts[l] ? sums[l] / static_cast<double>(report.counts[l]) : 0.0;
  }
  return report;
}

// ---- slicing ----

MetricsReport slice_ranks(std::span<const std::size_t> ranks, std::span<const double> values,
                          const std::vector<double>& edges, const std::vector<std::size_t>& ks) {
  if (ranks.size() != values.size()) throw std::invalid_argument("slice_ranks: length mismatch");
  if (edges.size() < 2) throw std::invalid_argument("slice edges need at least two entries");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("slice edges must be strictly ascending");
  }
  MetricsReport report = report_from_ranks(ranks, ks);
  for (std::size_t s = 0; s + 1 < edges.size(); ++s) {
    SliceReport slice;
    slice.lo = edges[s];
    slice.hi = edges[s + 1];
    slice.label = "[" + format_edge(slice.lo) + "," + format_edge(slice.hi) + ")";
    std::vector<std::size_t> bucket;
    for (std::size_t e = 0; e < ranks.size(); ++e) {
      if (values[e] >= slice.lo && values[e] < slice.hi) bucket.push_back(ranks[e]);
    }
    slice.count = bucket.size();
    fill_metrics(bucket, ks, slice.recall, slice.ndcg);
    report.slices.push_back(std::move(slice));
  }
  return report;
}

template <typename T>
MetricsReport sliced_metrics(const data::Dataset& ds, const ParameterStore<T>& params, const ModelConfig& cfg,
                             SliceMode mode, const std::vector<double>& edges, const EvalOptions& opts) {
  const auto& test = ds.split.test;
  const auto ranks = rank_examples(test, params, cfg, opts);
  std::vector<double> values(test.size());
  if (mode == SliceMode::kLength) {
    const auto lengths = data::training_lengths(ds);
    for (std::size_t e = 0; e < test.size(); ++e) values[e] = static_cast<double>(lengths.at(test[e].user));
  } else {
    const auto pop = data::item_popularity(ds);
    for (std::size_t e = 0; e < test.size(); ++e) values[e] = static_cast<double>(pop.at(static_cast<std::size_t>(test[e].target)));
  }
  return slice_ranks(ranks, values, edges, opts.ks);
}

#define ACREC_INSTANTIATE_EVAL(T)                                                                             \
  template std::size_t target_rank<T>(std::span<const T>, data::ItemId);                                      \
  template std::vector<data::ItemId> full_rank<T>(std::span<const T>);                                        \
  template std::vector<std::size_t> rank_examples<T>(const std::vector<data::SplitExample>&,                  \
                                                     const ParameterStore<T>&, const ModelConfig&,           \
                                                     const EvalOptions&, const AttentionHook<T>&);           \
  template MetricsReport evaluate<T>(const std::vector<data::SplitExample>&, const ParameterStore<T>&,         \
                                     const ModelConfig&, const EvalOptions&);                                \
  template void erase_entry<T>(ag::Var<T>&, std::size_t, std::size_t, std::size_t, std::optional<std::size_t>, \
                               bool);                                                                         \
  template std::optional<std::size_t> erase_target<T>(const ag::Var<T>&, const AttentionMasks<T>&,            \
                                                      std::size_t, std::optional<std::size_t>);              \
  template EraseReport erase_experiment<T>(const std::vector<data::SplitExample>&, const ParameterStore<T>&,   \
                                           const ModelConfig&, const EraseOptions&, const EvalOptions&);     \
  template std::vector<std::vector<double>> gradient_importance<T>(const data::SequenceBatch&,                \
                                                                   const ParameterStore<T>&,                 \
                                                                   const ModelConfig&);                      \
  template KendallReport kendall_analysis<T>(const std::vector<data::SplitExample>&, const ParameterStore<T>&, \
                                             const ModelConfig&, std::size_t);                               \
  template MetricsReport sliced_metrics<T>(const data::Dataset&, const ParameterStore<T>&, const ModelConfig&, \
                                           SliceMode, const std::vector<double>&, const EvalOptions&);

ACREC_INSTANTIATE_EVAL(float)
ACREC_INSTANTIATE_EVAL(double)
#undef ACREC_INSTANTIATE_EVAL

}  // namespace acrec::eval
