#include "acrec/cli.hpp"

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "acrec/error.hpp"
#include "acrec/evaluation.hpp"
#include "acrec/synth.hpp"
#include "acrec/training.hpp"

namespace acrec::cli {

namespace fs = std::filesystem;

RunConfig resolve_config(const RunConfig& base, const std::optional<fs::path>& config_file,
                         const std::map<std::string, std::string>& overrides) {
  std::vector<std::string> problems;
  nlohmann::json merged = nlohmann::json::object();
  if (config_file) {
    std::ifstream is(*config_file);
    if (!is) {
      problems.push_back("config: cannot open " + config_file->string());
    } else {
      try {
        merged = nlohmann::json::parse(is);
      } catch (const nlohmann::json::exception& e) {
        problems.push_back("config: invalid JSON in " + config_file->string() + ": " + e.what());
        merged = nlohmann::json::object();
      }
    }
  }
  if (!merged.is_object()) {
    problems.push_back("config: top level must be a JSON object");
    merged = nlohmann::json::object();
  }
  const auto defaults = to_json(RunConfig{});
  for (const auto& [key, text] : overrides) {
    const auto it = defaults.find(key);
    if (it == defaults.end()) {
      problems.push_back(key + ": unknown configuration key");
    } else if (it->is_string()) {
      merged[key] = text;
    } else if (it->is_boolean()) {
      if (text == "true" || text == "1") {
        merged[key] = true;
      } else if (text == "false" || text == "0") {
        merged[key] = false;
      } else {
        problems.push_back(key + ": '" + text + "' is not a boolean");
      }
    } else {
      try {
        merged[key] = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception&) {
        problems.push_back(key + ": '" + text + "' is not a number");
      }
    }
  }
  RunConfig cfg = base;
  try {
    cfg = run_config_from_json(merged, base);
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return cfg;
}

std::string run_id(const std::string& command, const RunConfig& cfg) {
  const std::string text = command + "\n" + to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << command << '-' << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

fs::path report_root(const RunConfig& cfg) {
  if (!cfg.report_dir.empty()) return cfg.report_dir;
  if (const char* env = std::getenv("ACREC_REPORT_ROOT"); env && *env) return env;
  return "reports";
}

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size() || v < 1) throw ConfigError({"ks: '" + part + "' is not a positive integer"});
    ks.push_back(static_cast<std::size_t>(v));
  }
  if (ks.empty()) throw ConfigError({"ks: at least one cutoff is required"});
  return ks;
}

std::vector<double> parse_edges(const std::string& text) {
  std::vector<double> edges;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part == "inf") {
      edges.push_back(std::numeric_limits<double>::infinity());
      continue;
    }
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != part.size()) throw ConfigError({"edges: '" + part + "' is not a number"});
    edges.push_back(v);
  }
  if (edges.size() < 2) throw ConfigError({"edges: at least two edges are required"});
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (!(edges[i] > edges[i - 1])) throw ConfigError({"edges: must be strictly ascending"});
  }
  return edges;
}

namespace {

struct ConfigArgs {
  std::string config;
  std::map<std::string, std::string> overrides;
};

void add_config_options(CLI::App* sub, ConfigArgs& args) {
  sub->add_option("--config", args.config, "JSON configuration file");
  for (const auto& key : run_config_keys()) {
    sub->add_option_function<std::string>(
        "--" + key, [&args, key](const std::string& v) { args.overrides[key] = v; }, "override " + key);
  }
}

RunConfig resolve(const RunConfig& base, const ConfigArgs& args) {
  std::optional<fs::path> file;
  if (!args.config.empty()) file = args.config;
  return resolve_config(base, file, args.overrides);
}

// Model settings saved next to a checkpoint become the base for commands
// that read it; explicit config and overrides still win.
RunConfig resolve_with_checkpoint(const RunConfig& base, const ConfigArgs& args) {
  RunConfig cfg = resolve(base, args);
  if (cfg.checkpoint_dir.empty()) throw ConfigError({"checkpoint_dir: required"});
  const fs::path saved = fs::path(cfg.checkpoint_dir) / "config.json";
  if (fs::exists(saved)) {
    std::ifstream is(saved);
    RunConfig with_model = base;
    with_model.model = model_config_from_json(nlohmann::json::parse(is), base.model);
    cfg = resolve(with_model, args);
  }
  return cfg;
}

void require_data_dir(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError({"data_dir: required"});
}

fs::path make_run_dir(const std::string& command, const RunConfig& cfg) {
  const fs::path dir = report_root(cfg) / run_id(command, cfg);
  fs::create_directories(dir);
  std::ofstream os(dir / "resolved_config.json");
  if (!os) throw DataError("cannot write " + (dir / "resolved_config.json").string());
  os << to_json(cfg).dump(2) << '\n';
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
}

template <typename T>
ParameterStore<T> load_model(const RunConfig& cfg, const data::Dataset& ds) {
  const auto ckpt = read_checkpoint(cfg.checkpoint_dir);
  if (ckpt.item_count != ds.item_count) {
    throw DataError("checkpoint has " + std::to_string(ckpt.item_count) + " items but the dataset has " +
                    std::to_string(ds.item_count));
  }
  try {
    return load_parameters<T>(ckpt, cfg.model);
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint does not match the configuration: ") + e.what());
  }
}

const std::vector<data::SplitExample>& pick_split(const data::Dataset& ds, const std::string& split) {
  if (split == "test") return ds.split.test;
  if (split == "valid") return ds.split.valid;
  throw ConfigError({"split: must be test or valid"});
}

eval::EvalOptions eval_options(const RunConfig& cfg, const std::vector<std::size_t>& ks) {
  eval::EvalOptions eo;
  eo.ks = ks;
  eo.batch_size = cfg.batch_size;
  eo.workers = cfg.workers;
  eo.repeat_filter = cfg.repeat_filter;
  return eo;
}

template <typename T>
int do_train(const RunConfig& cfg, std::ostream& out) {
  require_data_dir(cfg);
  if (cfg.checkpoint_dir.empty()) throw ConfigError({"checkpoint_dir: required"});
  const auto ds = data::read_dataset(cfg.data_dir);
  const auto dir = make_run_dir("train", cfg);
  std::ofstream log(dir / "metrics.jsonl");
  if (!log) throw DataError("cannot write " + (dir / "metrics.jsonl").string());
  TrainResult<T> result;
  try {
    result = train<T>(ds, cfg, [&](const EpochRecord& r) {
      const auto line = r.to_json().dump();
      log << line << '\n';
      log.flush();
      out << line << '\n';
    });
  } catch (const NumericalError& e) {
    nlohmann::ordered_json dump;
    dump["error"] = e.what();
    dump["epochs_completed"] = std::count(std::istreambuf_iterator<char>(std::ifstream(dir / "metrics.jsonl").rdbuf()),
                                          std::istreambuf_iterator<char>(), '\n');
    write_text(dir / "failure.json", dump.dump(2) + "\n");
    throw;
  }
  save_checkpoint(result.best, ds.item_count, cfg.checkpoint_dir);
  write_text(fs::path(cfg.checkpoint_dir) / "config.json", to_json(cfg.model).dump(2) + "\n");
  nlohmann::ordered_json summary;
  summary["run_dir"] = dir.string();
  summary["checkpoint_dir"] = cfg.checkpoint_dir;
  summary["best_epoch"] = result.best_epoch;
  summary["best_valid_ndcg@10"] = result.best_ndcg;
  summary["epochs_run"] = result.log.size();
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << summary.dump() << '\n';
  return kOk;
}

template <typename T>
int do_eval(const RunConfig& cfg, const std::vector<std::size_t>& ks, const std::string& split, std::ostream& out) {
  require_data_dir(cfg);
  const auto ds = data::read_dataset(cfg.data_dir);
  const auto params = load_model<T>(cfg, ds);
  const auto report = eval::evaluate(pick_split(ds, split), params, cfg.model, eval_options(cfg, ks));
  const auto dir = make_run_dir("eval", cfg);
  write_text(dir / "metrics.json", report.to_json().dump(2) + "\n");
  write_text(dir / "metrics.csv", report.to_csv());
  out << report.to_json().dump() << '\n';
  return kOk;
}

template <typename T>
int do_erase(const RunConfig& cfg, const std::vector<std::size_t>& ks, const eval::EraseOptions& erase,
             std::ostream& out) {
  require_data_dir(cfg);
  const auto ds = data::read_dataset(cfg.data_dir);
  const auto params = load_model<T>(cfg, ds);
  const auto report = eval::erase_experiment(ds.split.test, params, cfg.model, erase, eval_options(cfg, ks));
  const auto dir = make_run_dir("erase", cfg);
  write_text(dir / "erase.json", report.to_json().dump(2) + "\n");
  std::ostringstream csv;
  csv << "variant,metric,k,value,count\n";
  for (const auto* part : {&report.original, &report.erased}) {
    const char* label = part == &report.original ? "original" : "erased";
    for (const auto& [k, v] : part->recall) csv << label << ",recall," << k << ',' << v << ',' << part->count << '\n';
    for (const auto& [k, v] : part->ndcg) csv << label << ",ndcg," << k << ',' << v << ',' << part->count << '\n';
  }
  for (const auto& [k, v] : report.relative_change) csv << "change,recall," << k << ',' << v << ',' << report.original.count << '\n';
  write_text(dir / "erase.csv", csv.str());
  out << report.to_json().dump() << '\n';
  return kOk;
}

template <typename T>
int do_kendall(const RunConfig& cfg, std::ostream& out) {
  require_data_dir(cfg);
  const auto ds = data::read_dataset(cfg.data_dir);
  const auto params = load_model<T>(cfg, ds);
  const auto report = eval::kendall_analysis(ds.split.test, params, cfg.model, cfg.batch_size);
  const auto dir = make_run_dir("kendall", cfg);
  write_text(dir / "kendall.json", report.to_json().dump(2) + "\n");
  std::ostringstream csv;
  csv << "layer,mean_tau,count\n";
  for (std::size_t l = 0; l < report.mean_tau.size(); ++l) {
    csv << l << ',' << report.mean_tau[l] << ',' << report.counts[l] << '\n';
  }
  write_text(dir / "kendall.csv", csv.str());
  out << report.to_json().dump() << '\n';
  return kOk;
}

template <typename T>
int do_slice(const RunConfig& cfg, const std::vector<std::size_t>& ks, eval::SliceMode mode,
             const std::vector<double>& edges, std::ostream& out) {
  require_data_dir(cfg);
  const auto ds = data::read_dataset(cfg.data_dir);
  const auto params = load_model<T>(cfg, ds);
  const auto report = eval::sliced_metrics(ds, params, cfg.model, mode, edges, eval_options(cfg, ks));
  const auto dir = make_run_dir("slice", cfg);
  write_text(dir / "slice.json", report.to_json().dump(2) + "\n");
  write_text(dir / "slice.csv", report.to_csv());
  out << report.to_json().dump() << '\n';
  return kOk;
}

struct GradcheckArgs {
  std::size_t items = 6;
  std::size_t batch = 3;
  double tolerance = 1e-4;
  double step = 1e-4;
};

// Random left-padded batch over `items` items; row b has n - b real items
// (at least one).
data::SequenceBatch gradcheck_fixture(const ModelConfig& cfg, const GradcheckArgs& args, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<data::ItemId> item(1, static_cast<data::ItemId>(args.items));
  std::vector<data::SplitExample> rows(args.batch);
  for (std::size_t b = 0; b < args.batch; ++b) {
    const std::size_t len = std::max<std::size_t>(1, cfg.n > b ? cfg.n - b : 1);
    for (std::size_t i = 0; i < len; ++i) rows[b].context.push_back(item(rng));
    rows[b].target = item(rng);
    rows[b].user = b;
  }
  std::vector<const data::SplitExample*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  return data::make_batch(ptrs, cfg.n);
}

int do_gradcheck(const RunConfig& cfg, const GradcheckArgs& args, std::ostream& out) {
  if (args.items < 1 || args.batch < 1) throw ConfigError({"items and batch must be >= 1"});
  ModelConfig mc = cfg.model;
  mc.dropout = 0.0;
  mc.lite_inference = false;
  auto params = init_parameters<double>(mc, args.items, cfg.seed);
  const auto batch = gradcheck_fixture(mc, args, cfg.seed + 1);
  nlohmann::ordered_json report;
  report["tolerance"] = args.tolerance;
  report["tensors"] = nlohmann::ordered_json::array();
  bool ok = true;
  out << std::left << std::setw(28) << "tensor" << std::setw(14) << "rel_error" << "max_abs_diff\n";
  for (const auto& e : params.entries()) {
    const std::string name = e.name;
    const auto r = finite_difference_check(params, batch, mc, name, args.step);
    const bool pass = r.relative_error <= args.tolerance;
    ok = ok && pass;
    out << std::setw(28) << name << std::setw(14) << r.relative_error << r.max_abs_diff << (pass ? "" : "  FAIL") << '\n';
    nlohmann::ordered_json t;
    t["name"] = name;
    t["relative_error"] = r.relative_error;
    t["max_abs_diff"] = r.max_abs_diff;
    t["pass"] = pass;
    report["tensors"].push_back(t);
  }
  const double leak = routing_leak(params, batch, mc);
  report["routing_leak"] = leak;
  ok = ok && leak == 0.0;
  report["pass"] = ok;
  out << "routing leak " << leak << '\n' << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  const auto dir = make_run_dir("gradcheck", cfg);
  write_text(dir / "gradcheck.json", report.dump(2) + "\n");
  return ok ? kOk : kNumericalError;
}

data::InputFormat parse_format(const std::string& s) {
  if (s == "auto") return data::InputFormat::kAuto;
  if (s == "triplet") return data::InputFormat::kTriplet;
  if (s == "grouped") return data::InputFormat::kGrouped;
  throw ConfigError({"format: must be auto, triplet or grouped"});
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-calibrated sequential recommender", "acrec"};
  app.require_subcommand(1);

  auto* preprocess = app.add_subcommand("preprocess", "Filter an interaction log and write leave-one-out splits");
  std::string pp_input, pp_output, pp_format = "auto";
  std::size_t pp_min_count = 5;
  preprocess->add_option("--input", pp_input, "interaction file")->required();
  preprocess->add_option("--output", pp_output, "dataset directory")->required();
  preprocess->add_option("--min-count", pp_min_count, "k-core threshold");
  preprocess->add_option("--format", pp_format, "auto | triplet | grouped");

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic interaction log");
  synth::SynthOptions so;
  std::string pattern = "cycle", synth_output;
  synth_cmd->add_option("--pattern", pattern, "cycle | markov");
  synth_cmd->add_option("--n-items", so.n_items);
  synth_cmd->add_option("--n-users", so.n_users);
  synth_cmd->add_option("--noise-rate", so.noise_rate);
  synth_cmd->add_option("--min-length", so.min_length);
  synth_cmd->add_option("--max-length", so.max_length);
  synth_cmd->add_option("--branching", so.branching);
  synth_cmd->add_option("--seed", so.seed);
  synth_cmd->add_option("--output", synth_output, "interaction file to write")->required();

  ConfigArgs train_args, eval_args, erase_args, kendall_args, slice_args, grad_args;
  auto* train_cmd = app.add_subcommand("train", "Train and save the best checkpoint");
  add_config_options(train_cmd, train_args);

  std::string ks_text = "10,20", split = "test";
  auto* eval_cmd = app.add_subcommand("eval", "Full-ranking Recall/NDCG of a checkpoint");
  add_config_options(eval_cmd, eval_args);
  eval_cmd->add_option("--ks", ks_text, "comma-separated cutoffs");
  eval_cmd->add_option("--split", split, "test | valid");

  auto* erase_cmd = app.add_subcommand("erase", "Remove the largest attention weight and compare metrics");
  add_config_options(erase_cmd, erase_args);
  std::optional<std::size_t> erase_layer, erase_head;
  bool no_renormalize = false;
  erase_cmd->add_option("--ks", ks_text, "comma-separated cutoffs");
  erase_cmd->add_option("--layer", erase_layer, "layer to edit (default: last)");
  erase_cmd->add_option("--head", erase_head, "single head to edit (default: all heads)");
  erase_cmd->add_flag("--no-renormalize", no_renormalize, "leave the edited row unnormalised");

  auto* kendall_cmd = app.add_subcommand("kendall", "Kendall tau-b between attention and gradient importance");
  add_config_options(kendall_cmd, kendall_args);

  auto* slice_cmd = app.add_subcommand("slice", "Metrics bucketed by training length or item popularity");
  add_config_options(slice_cmd, slice_args);
  std::string slice_mode = "length", edges_text = "0,5,10,20,inf";
  slice_cmd->add_option("--ks", ks_text, "comma-separated cutoffs");
  slice_cmd->add_option("--mode", slice_mode, "length | popularity");
  slice_cmd->add_option("--edges", edges_text, "ascending bucket edges; inf allowed");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  add_config_options(grad_cmd, grad_args);
  GradcheckArgs gc;
  grad_cmd->add_option("--items", gc.items, "catalogue size of the fixture");
  grad_cmd->add_option("--batch", gc.batch, "fixture batch size");
  grad_cmd->add_option("--tolerance", gc.tolerance, "maximum relative error");
  grad_cmd->add_option("--step", gc.step, "central-difference step");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (preprocess->parsed()) {
      const auto loaded = data::load_interactions(pp_input, parse_format(pp_format));
      const auto filtered = data::kcore_filter(loaded, pp_min_count);
      data::write_dataset(filtered, pp_output);
      const auto s = data::summarize(filtered);
      nlohmann::ordered_json j;
      j["users"] = s.users;
      j["items"] = s.items;
      j["interactions"] = s.interactions;
      j["density"] = s.density;
      out << j.dump() << '\n';
      return kOk;
    }
    if (synth_cmd->parsed()) {
      if (pattern == "cycle") {
        so.pattern = synth::Pattern::kCycle;
      } else if (pattern == "markov") {
        so.pattern = synth::Pattern::kMarkov;
      } else {
        throw ConfigError({"pattern: must be cycle or markov"});
      }
      try {
        synth::write_interactions(synth::generate(so), synth_output);
      } catch (const std::invalid_argument& e) {
        throw ConfigError({e.what()});
      }
      out << "wrote " << synth_output << '\n';
      return kOk;
    }
    if (train_cmd->parsed()) {
      const auto cfg = resolve(RunConfig{}, train_args);
      return cfg.precision == 64 ? do_train<double>(cfg, out) : do_train<float>(cfg, out);
    }
    if (eval_cmd->parsed()) {
      const auto cfg = resolve_with_checkpoint(RunConfig{}, eval_args);
      const auto ks = parse_ks(ks_text);
      return cfg.precision == 64 ? do_eval<double>(cfg, ks, split, out) : do_eval<float>(cfg, ks, split, out);
    }
    if (erase_cmd->parsed()) {
      const auto cfg = resolve_with_checkpoint(RunConfig{}, erase_args);
      const auto ks = parse_ks(ks_text);
      eval::EraseOptions eo;
      eo.layer = erase_layer;
      eo.head = erase_head;
      eo.renormalize = !no_renormalize;
      if (eo.layer && *eo.layer >= cfg.model.L) throw ConfigError({"layer: must be < L"});
      if (eo.head && *eo.head >= cfg.model.heads) throw ConfigError({"head: must be < heads"});
      return cfg.precision == 64 ? do_erase<double>(cfg, ks, eo, out) : do_erase<float>(cfg, ks, eo, out);
    }
    if (kendall_cmd->parsed()) {
      const auto cfg = resolve_with_checkpoint(RunConfig{}, kendall_args);
      return cfg.precision == 64 ? do_kendall<double>(cfg, out) : do_kendall<float>(cfg, out);
    }
    if (slice_cmd->parsed()) {
      const auto cfg = resolve_with_checkpoint(RunConfig{}, slice_args);
      const auto ks = parse_ks(ks_text);
      const auto edges = parse_edges(edges_text);
      eval::SliceMode mode = eval::SliceMode::kLength;
      if (slice_mode == "popularity") {
        mode = eval::SliceMode::kPopularity;
      } else if (slice_mode != "length") {
        throw ConfigError({"mode: must be length or popularity"});
      }
      return cfg.precision == 64 ? do_slice<double>(cfg, ks, mode, edges, out)
                                 : do_slice<float>(cfg, ks, mode, edges, out);
    }
    if (grad_cmd->parsed()) {
      RunConfig base;
      base.model.d = 4;
      base.model.n = 4;
      base.model.L = 2;
      base.model.heads = 2;
      base.model.inner = 4;
      base.model.init_std = 0.3;
      base.precision = 64;
      return do_gradcheck(resolve(base, grad_args), gc, out);
    }
  } catch (const ConfigError& e) {
    err << e.what() << '\n';
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace acrec::cli
