// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acrec/evaluation.hpp"
#include "acrec/synth.hpp"
#include "acrec/training.hpp"
#include "test_util.hpp"

using namespace acrec;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

ModelConfig backbone_only(ModelConfig c) {
  c.position_mode = PositionMode::kAbsolute;
  c.spatial_enabled = false;
  c.adversarial_enabled = false;
  return c;
}

// ---- 1: gradients ----

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  ModelConfig cfg = acrec::testing::small_config();
  cfg.init_std = 0.3;
  std::mt19937_64 rng(11);
  const auto batch = acrec::testing::random_batch(3, cfg.n, 6, rng);
  auto params = init_parameters<double>(cfg, 6, 3);
  double worst = 0.0;
  std::string worst_name;
  for (const auto& e : params.entries()) {
    const auto r = finite_difference_check(params, batch, cfg, e.name);
    if (!(r.relative_error <= worst)) {
      worst = r.relative_error;
      worst_name = e.name;
    }
  }
  const double leak = routing_leak(params, batch, cfg);
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && leak == 0.0 && t < 120.0,
          std::to_string(params.size()) + " tensors, max relative error " + fmt(worst) + " (" + worst_name +
              "), routing leak " + fmt(leak) + ", " + fmt(t, 3) + "s"};
}

// ---- 2: attention invariants ----

ModelConfig random_config(std::mt19937_64& rng) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto coin = [&] { return pick(0, 1) == 1; };
  ModelConfig c;
  c.heads = pick(1, 3);
  c.d = c.heads * pick(1, 3);
  c.n = pick(1, 7);
  c.L = pick(1, 3);
  c.inner = pick(1, 8);
  c.dropout = 0.0;
  c.init_std = std::uniform_real_distribution<double>(0.02, 0.5)(rng);
  c.position_mode = coin() ? PositionMode::kAbsolute : PositionMode::kNone;
  c.spatial_enabled = coin() || coin();
  c.order_enabled = coin() || coin();
  c.distance_enabled = coin() || coin();
  c.adversarial_enabled = coin() || coin();
  c.fusion_mode = coin() ? FusionMode::kGate : FusionMode::kSum;
  c.literal_order_penalty = coin();
  c.calibrator_per_head = coin();
  return c;
}

struct InvariantCounts {
  std::size_t violations = 0;
  std::string first;
  void fail(const std::string& what) {
    if (violations++ == 0) first = what;
  }
};

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

void check_rows(const ag::Var<double>& a, const AttentionMasks<double>& masks, std::size_t H, const char* name,
                InvariantCounts& bad) {
  const std::size_t B = masks.batch(), n = masks.length();
  const auto v = a.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double w = v[((b * H + h) * n + i) * n + j];
          if (masks.pairs(b, i, j)) {
            sum += w;
          } else if (w != 0.0 && !(j == i && masks.valid_keys(b, i) == 0)) {
            bad.fail(std::string(name) + " has weight on a masked key");
          }
        }
        if (masks.valid_keys(b, i) > 0 && std::abs(sum - 1.0) > 1e-6)
          bad.fail(std::string(name) + " row sum " + fmt(sum, 10));
      }
}

void check_open_unit(double x, const char* name, InvariantCounts& bad) {
  if (!(x > 0.0 && x < 1.0)) bad.fail(std::string(name) + " value " + fmt(x, 17) + " outside (0,1)");
}

bool within(double x, double lo, double hi) {
  const double tol = 1e-12 * std::max(1.0, std::abs(hi));
  return x >= lo - tol && x <= hi + tol;
}

void check_config(const ModelConfig& cfg, std::mt19937_64& rng, InvariantCounts& bad) {
  const std::size_t items = 7, H = cfg.heads, n = cfg.n;
  const auto params = init_parameters<double>(cfg, items, rng());
  const std::size_t B = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
  auto examples = acrec::testing::random_examples(B, 1, n, items, rng);
  const auto batch = acrec::testing::batch_of(examples, n);

  ForwardOptions<double> fo;
  fo.keep_trace = true;
  const auto calibrated = forward(batch, params, cfg, fo);
  fo.branch = Branch::kPerturbed;
  const auto perturbed = cfg.adversarial_enabled ? forward(batch, params, cfg, fo) : ForwardResult<double>{};
  const auto& masks = calibrated.attention_masks;

  for (std::size_t l = 0; l < cfg.L; ++l) {
    const auto& tr = calibrated.trace[l];
    check_rows(tr.attention, masks, H, "A", bad);
    if (cfg.uses_spatial()) check_rows(tr.spatial, masks, H, "A_s", bad);
    if (!cfg.adversarial_enabled) continue;
    const auto As = tr.spatial.defined() ? tr.spatial.value() : tr.attention.value();
    const auto& ptr = perturbed.trace[l];
    const auto Ac = tr.corrected.value(), Acomb = tr.combined.value(), Ap = ptr.perturbed.value();
    const auto As_p = ptr.spatial.defined() ? ptr.spatial.value() : ptr.attention.value();
    const auto mu = masks.uniform.value(), M = tr.mask.value(), g = tr.gate.value();
    for (std::size_t b = 0; b < batch.size; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < n; ++i) {
          if (batch.valid(b, i)) check_open_unit(g[(b * H + h) * n + i], "g", bad);
          for (std::size_t j = 0; j < n; ++j) {
            if (!masks.pairs(b, i, j)) continue;
            const std::size_t k = ((b * H + h) * n + i) * n + j;
            const double a = As[k], ap = As_p[k], u = mu[(b * n + i) * n + j];
            check_open_unit(M[k], "M", bad);
            if (!within(Ap[k], std::min(ap, u), std::max(ap, u))) bad.fail("A_p outside [min(A_s, mu), max(A_s, mu)]");
            if (!within(Ac[k], a, a * std::exp(1.0))) bad.fail("A_c outside [A_s, e * A_s]");
            if (!within(Acomb[k], std::min(a, Ac[k]), std::max(a, Ac[k]))) bad.fail("A_comb outside [A_s, A_c]");
          }
        }
  }

  // causality: rewrite one later item, every earlier position is unchanged
  const std::size_t b = std::uniform_int_distribution<std::size_t>(0, batch.size - 1)(rng);
  std::vector<std::size_t> real;
  for (std::size_t i = 0; i < n; ++i)
    if (batch.valid(b, i)) real.push_back(i);
  const std::size_t t = real[std::uniform_int_distribution<std::size_t>(0, real.size() - 1)(rng)];
  auto changed = batch;
  changed.ids[b * n + t] = changed.ids[b * n + t] % static_cast<data::ItemId>(items) + 1;
  const auto after = forward(changed, params, cfg);
  const auto before_out = calibrated.output.value(), after_out = after.output.value();
  const std::size_t d = cfg.d;
  for (std::size_t bb = 0; bb < batch.size; ++bb) {
    const std::size_t limit = bb == b ? t : n;
    if (!bit_equal(before_out.subspan(bb * n * d, limit * d), after_out.subspan(bb * n * d, limit * d)))
      bad.fail("causality");
  }

  // padding inertness: the same sequence packed at a shorter batch length
  const auto& ex = examples[b];
  const std::size_t len = std::min(ex.context.size(), n);
  const std::size_t shorter = std::uniform_int_distribution<std::size_t>(len, n)(rng);
  if (shorter < n) {
    const auto solo_full = forward(acrec::testing::batch_of({ex}, n), params, cfg);
    const auto solo_short = forward(acrec::testing::batch_of({ex}, shorter), params, cfg);
    if (!bit_equal(solo_full.output.value().subspan((n - shorter) * d), solo_short.output.value()))
      bad.fail("padding inertness");
  }
}

Outcome attention_invariants() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  InvariantCounts bad;
  const std::size_t configs = 1000;
  for (std::size_t c = 0; c < configs; ++c) check_config(random_config(rng), rng, bad);
  const double t = seconds_since(t0);
  return {bad.violations == 0 && t < 60.0, std::to_string(configs) + " configurations, " +
                                               std::to_string(bad.violations) + " violations" +
                                               (bad.first.empty() ? "" : " (first: " + bad.first + ")") + ", " +
                                               fmt(t, 3) + "s"};
}

// ---- 3: metric oracles ----

std::size_t brute_rank(const std::vector<double>& scores, data::ItemId target) {
  const double s = scores[static_cast<std::size_t>(target) - 1];
  std::size_t rank = 1;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const auto id = static_cast<data::ItemId>(c + 1);
    if (scores[c] > s || (scores[c] == s && id < target)) ++rank;
  }
  return rank;
}

double brute_tau(const std::vector<double>& x, const std::vector<double>& y) {
  long long concordant = 0, discordant = 0, tied_x = 0, tied_y = 0;
  const std::size_t n = x.size();
  long long pairs = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      ++pairs;
      const double dx = x[i] - x[j], dy = y[i] - y[j];
      if (dx == 0) ++tied_x;
      if (dy == 0) ++tied_y;
      if (dx == 0 || dy == 0) continue;
      (dx > 0) == (dy > 0) ? ++concordant : ++discordant;
    }
  return static_cast<double>(concordant - discordant) /
         std::sqrt(static_cast<double>(pairs - tied_x) * static_cast<double>(pairs - tied_y));
}

Outcome metric_oracles() {
  std::mt19937_64 rng(3);
  std::size_t checks = 0, mismatches = 0;
  auto expect = [&](bool ok) {
    ++checks;
    mismatches += !ok;
  };

  // ranking and per-rank metrics on tie-heavy score vectors
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t items = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
    std::vector<double> scores(items);
    for (auto& s : scores) s = static_cast<double>(std::uniform_int_distribution<int>(0, 5)(rng));
    const auto target = std::uniform_int_distribution<data::ItemId>(1, static_cast<data::ItemId>(items))(rng);
    const std::size_t rank = eval::target_rank<double>(scores, target);
    expect(rank == brute_rank(scores, target));
    for (const std::size_t k : {1, 5, 10, 20}) {
      expect(eval::recall_at_k(rank, k) == (rank <= k ? 1.0 : 0.0));
      expect(eval::ndcg_at_k(rank, k) == (rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0));
    }
  }

  // full pipeline against explicit scoring of every item
  const ModelConfig cfg = acrec::testing::small_config();
  const std::size_t items = 9;
  const auto params = init_parameters<double>(cfg, items, 5);
  const auto examples = acrec::testing::random_examples(50, 1, 6, items, rng);
  eval::EvalOptions opts;
  opts.ks = {1, 3, 5};
  const auto ranks = eval::rank_examples(examples, params, cfg, opts);
  std::vector<std::size_t> oracle;
  for (const auto& ex : examples) {
    const auto out = forward(acrec::testing::batch_of({ex}, cfg.n), params, cfg);
    const auto probs = predict_scores(out.output, params);
    oracle.push_back(brute_rank({probs.begin(), probs.end()}, ex.target));
  }
  expect(ranks == oracle);
  const auto report = eval::evaluate(examples, params, cfg, opts);
  for (const std::size_t k : opts.ks) {
    double r = 0.0, g = 0.0;
    for (const std::size_t rank : oracle) {
      r += rank <= k ? 1.0 : 0.0;
      g += rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
    }
    expect(std::abs(report.recall.at(k) - r / static_cast<double>(oracle.size())) <= 1e-15);
    expect(std::abs(report.ndcg.at(k) - g / static_cast<double>(oracle.size())) <= 1e-15);
  }

  // Kendall tau-b against pair enumeration, with ties on both sides
  std::size_t kendall_cases = 0;
  for (std::size_t n = 2; n <= 60; ++n)
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x(n), y(n);
      const int levels = std::uniform_int_distribution<int>(1, 8)(rng);
      for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::uniform_int_distribution<int>(0, levels)(rng);
        y[i] = std::uniform_int_distribution<int>(0, levels)(rng);
      }
      const double a = eval::kendall_tau_b(x, y), b = brute_tau(x, y);
      expect((std::isnan(a) && std::isnan(b)) || a == b);
      ++kendall_cases;
    }

  const bool closed_form = eval::ndcg_at_k(3, 10) == 0.5;
  return {mismatches == 0 && closed_form, std::to_string(checks) + " comparisons (" + std::to_string(kendall_cases) +
                                              " Kendall fixtures), " + std::to_string(mismatches) +
                                              " mismatches, ndcg(rank 3, K 10) = " + fmt(eval::ndcg_at_k(3, 10), 17)};
}

// ---- 4: learnability ----

Outcome learnability() {
  const auto t0 = Clock::now();
  synth::SynthOptions so;
  so.pattern = synth::Pattern::kCycle;
  so.n_items = 20;
  so.n_users = 500;
  so.seed = 1;
  const auto ds = data::make_dataset(synth::generate_interactions(so));
  RunConfig rc;
  rc.model = backbone_only(rc.model);
  rc.model.d = 32;
  rc.model.inner = 32;
  rc.model.n = 20;
  rc.epochs = 30;
  rc.lr = 1e-3;
  rc.batch_size = 256;
  rc.early_stopping = false;
  rc.seed = 1;
  const auto res = train<float>(ds, rc);
  eval::EvalOptions eo;
  eo.ks = {1};
  const double recall = eval::evaluate(ds.split.valid, res.best, rc.model, eo).recall.at(1);
  const double t = seconds_since(t0);
  return {recall >= 0.9 && t < 300.0, "validation Recall@1 " + fmt(recall) + " (best epoch " +
                                          std::to_string(res.best_epoch) + "), " + fmt(t, 3) + "s"};
}

// ---- 5, 6, 7: paired seeded runs on noisy markov data ----

struct PairedRun {
  double recall10[2] = {0, 0};
  double erase20[2] = {0, 0};        // default erase: last layer
  double erase20_first[2] = {0, 0};  // first layer, reported only
  double tau[2] = {0, 0};
};

struct NoisyExperiment {
  std::vector<PairedRun> runs;
  double seconds = 0.0;
};

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t count = 0;
  for (const double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++count;
    }
  return count ? s / static_cast<double>(count) : std::nan("");
}

const NoisyExperiment& noisy_experiment() {
  static const NoisyExperiment result = [] {
    NoisyExperiment ex;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      synth::SynthOptions so;
      so.pattern = synth::Pattern::kMarkov;
      so.n_items = 100;
      so.n_users = 1000;
      so.noise_rate = 0.3;
      so.seed = 100 + seed;
      const auto ds = data::make_dataset(data::kcore_filter(synth::generate_interactions(so), 5));
      PairedRun run;
      for (int ac = 0; ac < 2; ++ac) {
        RunConfig rc;
        rc.model.d = 32;
        rc.model.inner = 32;
        rc.model.n = 20;
        if (!ac) rc.model = backbone_only(rc.model);
        rc.epochs = 20;
        rc.lr = 2e-3;
        rc.batch_size = 128;
        rc.patience = 5;
        rc.seed = seed;
        const auto res = train<float>(ds, rc);
        eval::EvalOptions eo;
        eo.ks = {10, 20};
        run.recall10[ac] = eval::evaluate(ds.split.test, res.best, rc.model, eo).recall.at(10);
        run.erase20[ac] = eval::erase_experiment(ds.split.test, res.best, rc.model, {}, eo).relative_change.at(20);
        eval::EraseOptions first;
        first.layer = 0;
        run.erase20_first[ac] = eval::erase_experiment(ds.split.test, res.best, rc.model, first, eo).relative_change.at(20);
        run.tau[ac] = mean_of(eval::kendall_analysis(ds.split.test, res.best, rc.model).mean_tau);
      }
      std::cout << "  seed " << seed << ": Recall@10 baseline " << fmt(run.recall10[0]) << " AC " << fmt(run.recall10[1])
                << "; erase change @20 baseline " << fmt(run.erase20[0]) << " AC " << fmt(run.erase20[1])
                << " (first layer: baseline " << fmt(run.erase20_first[0]) << " AC " << fmt(run.erase20_first[1]) << ")"
                << "; mean tau baseline " << fmt(run.tau[0]) << " AC " << fmt(run.tau[1]) << std::endl;
      ex.runs.push_back(run);
    }
    ex.seconds = seconds_since(t0);
    return ex;
  }();
  return result;
}

Outcome noise_robustness() {
  const auto& ex = noisy_experiment();
  std::size_t wins = 0;
  double gain = 0.0;
  for (const auto& r : ex.runs) {
    wins += r.recall10[1] >= r.recall10[0];
    gain += r.recall10[1] - r.recall10[0];
  }
  gain /= static_cast<double>(ex.runs.size());
  return {wins == ex.runs.size() && gain > 0.0 && ex.seconds < 1200.0,
          "AC >= baseline in " + std::to_string(wins) + "/" + std::to_string(ex.runs.size()) +
              " seeds, mean Recall@10 gain " + fmt(gain) + ", " + fmt(ex.seconds, 4) + "s"};
}

Outcome erasing_direction() {
  const auto& ex = noisy_experiment();
  std::vector<double> base, ac, base_first, ac_first;
  for (const auto& r : ex.runs) {
    base.push_back(r.erase20[0]);
    ac.push_back(r.erase20[1]);
    base_first.push_back(r.erase20_first[0]);
    ac_first.push_back(r.erase20_first[1]);
  }
  // relative change is negative for a degradation; the verdict uses the
  // default last-layer erase
  const double b = mean_of(base), a = mean_of(ac);
  return {a < b, "mean relative Recall@20 change after erasing at the last layer: AC " + fmt(a) + ", baseline " +
                     fmt(b) + " (first layer, not scored: AC " + fmt(mean_of(ac_first)) + ", baseline " +
                     fmt(mean_of(base_first)) + ")"};
}

Outcome kendall_direction() {
  const auto& ex = noisy_experiment();
  std::vector<double> base, ac;
  for (const auto& r : ex.runs) {
    base.push_back(r.tau[0]);
    ac.push_back(r.tau[1]);
  }
  const double b = mean_of(base), a = mean_of(ac);
  return {a > b, "mean per-layer Kendall tau: AC " + fmt(a) + ", baseline " + fmt(b)};
}

// ---- 8: lite inference ----

data::Dataset small_markov(std::uint64_t seed) {
  synth::SynthOptions so;
  so.pattern = synth::Pattern::kMarkov;
  so.n_items = 30;
  so.n_users = 150;
  so.min_length = 6;
  so.max_length = 12;
  so.noise_rate = 0.3;
  so.seed = seed;
  return data::make_dataset(synth::generate_interactions(so));
}

RunConfig small_run() {
  RunConfig rc;
  rc.model.d = 8;
  rc.model.inner = 8;
  rc.model.n = 10;
  rc.epochs = 2;
  rc.lr = 1e-3;
  rc.batch_size = 64;
  rc.seed = 5;
  return rc;
}

Outcome lite_contract() {
  const auto ds = small_markov(7);
  const RunConfig rc = small_run();
  const auto res = train<float>(ds, rc);
  const fs::path dir = fs::temp_directory_path() / ("acrec_acceptance_lite_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  save_checkpoint(res.best, ds.item_count, dir);

  ModelConfig lite = rc.model;
  lite.lite_inference = true;
  const auto loaded = load_parameters<float>(read_checkpoint(dir), lite);
  fs::remove_all(dir);
  bool unchanged = loaded.size() == res.best.size() && loaded.fingerprint() == res.best.fingerprint();

  std::size_t lite_ops = 0, full_ops = 0;
  for (std::size_t start = 0; start < ds.split.test.size(); start += 64) {
    std::vector<const data::SplitExample*> ptrs;
    for (std::size_t i = start; i < std::min(start + 64, ds.split.test.size()); ++i) ptrs.push_back(&ds.split.test[i]);
    const auto batch = data::make_batch(ptrs, lite.n);
    lite_ops += forward(batch, loaded, lite).calibrator_ops;
    full_ops += forward(batch, loaded, rc.model).calibrator_ops;
  }
  const auto report = eval::evaluate(ds.split.test, loaded, lite);
  bool valid = report.count == ds.split.test.size();
  for (const auto& [k, v] : report.recall) valid = valid && v >= 0.0 && v <= 1.0;
  for (const auto& [k, v] : report.ndcg) valid = valid && v >= 0.0 && v <= report.recall.at(k);
  return {lite_ops == 0 && full_ops > 0 && valid && unchanged,
          "calibrator ops lite " + std::to_string(lite_ops) + " vs full " + std::to_string(full_ops) +
              ", lite Recall@10 " + fmt(report.recall.at(10)) + (valid ? " (valid)" : " (INVALID)") +
              ", checkpoint " + (unchanged ? "loads unchanged" : "CHANGED on load")};
}

// ---- 9: ablation coherence ----

Outcome ablation_coherence() {
  const auto ds = small_markov(8);
  std::vector<std::string> logs;
  std::size_t reproducible = 0, errors = 0;
  for (int mask = 0; mask < 8; ++mask) {
    RunConfig rc = small_run();
    rc.model.order_enabled = mask & 1;
    rc.model.distance_enabled = mask & 2;
    rc.model.spatial_enabled = rc.model.order_enabled || rc.model.distance_enabled;
    rc.model.adversarial_enabled = mask & 4;
    std::string first, second;
    try {
      for (std::string* out : {&first, &second}) {
        for (const auto& rec : train<float>(ds, rc).log) *out += rec.to_json().dump() + "\n";
      }
    } catch (const std::exception& e) {
      ++errors;
      std::cout << "  combination " << mask << " failed: " << e.what() << std::endl;
    }
    reproducible += !first.empty() && first == second;
    logs.push_back(first);
  }
  const std::size_t distinct = std::set<std::string>(logs.begin(), logs.end()).size();
  return {errors == 0 && reproducible == 8 && distinct == 8,
          "8 combinations, " + std::to_string(errors) + " errors, " + std::to_string(reproducible) +
              " reproducible, " + std::to_string(distinct) + " distinct logs"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, gradient_suite},      {2, attention_invariants}, {3, metric_oracles},
      {4, learnability},        {5, noise_robustness},     {6, erasing_direction},
      {7, kendall_direction},   {8, lite_contract},        {9, ablation_coherence}};
  bool all = true;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << "CRITERION " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
