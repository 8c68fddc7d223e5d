#include "acrec/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "acrec/error.hpp"
#include "json.hpp"

namespace acrec::data {

ItemId Vocabulary::intern_item(const std::string& raw) {
  auto [it, inserted] = item_index_.try_emplace(raw, static_cast<ItemId>(items_.size() + 1));
  if (inserted) items_.push_back(raw);
  return it->second;
}

std::size_t Vocabulary::intern_user(const std::string& raw) {
  auto [it, inserted] = user_index_.try_emplace(raw, users_.size());
  if (inserted) users_.push_back(raw);
  return it->second;
}

std::optional<ItemId> Vocabulary::find_item(const std::string& raw) const {
  auto it = item_index_.find(raw);
  if (it == item_index_.end()) return std::nullopt;
  return it->second;
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> cols;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) cols.push_back(tok);
  return cols;
}

std::optional<double> parse_number(const std::string& s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

struct Event {
  std::string item;
  std::string stamp;
  std::size_t order;
};

}  // namespace

Interactions load_interactions(const std::filesystem::path& path, InputFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  std::vector<std::pair<std::size_t, std::vector<std::string>>> rows;
  std::string line;
  std::size_t lineno = 0;
  bool all_three = true;
  while (std::getline(in, line)) {
    ++lineno;
    auto cols = split_ws(line);
    if (cols.empty()) continue;
    if (cols.size() < 2) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed line (need at least 2 columns)");
    }
    all_three = all_three && cols.size() == 3;
    rows.emplace_back(lineno, std::move(cols));
  }
  if (rows.empty()) throw DataError("no interactions in " + path.string());
  if (format == InputFormat::kAuto) format = all_three ? InputFormat::kTriplet : InputFormat::kGrouped;

  // Users keep first-appearance order; per-user events keep file order until sorted.
  std::vector<std::string> user_order;
  std::map<std::string, std::vector<Event>> events;
  std::size_t counter = 0;
  for (const auto& [ln, cols] : rows) {
    if (format == InputFormat::kTriplet && cols.size() != 3) {
      throw DataError(path.string() + ":" + std::to_string(ln) + ": malformed line (expected user item timestamp)");
    }
    auto [it, inserted] = events.try_emplace(cols[0]);
    if (inserted) user_order.push_back(cols[0]);
    if (format == InputFormat::kTriplet) {
      it->second.push_back({cols[1], cols[2], counter++});
    } else {
      for (std::size_t c = 1; c < cols.size(); ++c) it->second.push_back({cols[c], "", counter++});
    }
  }

  bool numeric = true;
  if (format == InputFormat::kTriplet) {
    for (const auto& [u, evs] : events)
      for (const auto& e : evs) numeric = numeric && parse_number(e.stamp).has_value();
  }

  // Sort each user by timestamp (ties by file order), then assign dense ids in
  // file order so ids reflect first appearance in the input.
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> position;  // file order -> (user, slot)
  std::vector<std::vector<Event>> sorted;
  for (std::size_t u = 0; u < user_order.size(); ++u) {
    auto evs = events[user_order[u]];
    if (format == InputFormat::kTriplet) {
      std::stable_sort(evs.begin(), evs.end(), [numeric](const Event& a, const Event& b) {
        if (numeric) return *parse_number(a.stamp) < *parse_number(b.stamp);
        return a.stamp < b.stamp;
      });
    }
    for (std::size_t s = 0; s < evs.size(); ++s) position[evs[s].order] = {u, s};
    sorted.push_back(std::move(evs));
  }

  Interactions out;
  out.sequences.resize(user_order.size());
  for (std::size_t u = 0; u < user_order.size(); ++u) {
    out.vocab.intern_user(user_order[u]);
    out.sequences[u].user_id = user_order[u];
    out.sequences[u].items.assign(sorted[u].size(), kPaddingId);
  }
  for (const auto& [ord, slot] : position) {
    const auto& ev = sorted[slot.first][slot.second];
    out.sequences[slot.first].items[slot.second] = out.vocab.intern_item(ev.item);
  }
  return out;
}

Interactions kcore_filter(const Interactions& input, std::size_t min_count) {
  if (min_count < 1) throw ConfigError({"min_count: must be >= 1"});
  std::vector<InteractionSequence> seqs = input.sequences;
  while (true) {
    std::unordered_map<ItemId, std::size_t> freq;
    for (const auto& s : seqs)
      for (auto it : s.items) ++freq[it];
    bool changed = false;
    std::vector<InteractionSequence> next;
    for (auto& s : seqs) {
      InteractionSequence kept{s.user_id, {}};
      for (auto it : s.items) {
        if (freq[it] >= min_count) kept.items.push_back(it);
      }
      changed = changed || kept.items.size() != s.items.size();
      if (kept.items.size() >= min_count) {
        next.push_back(std::move(kept));
      } else {
        changed = true;
      }
    }
    seqs = std::move(next);
    if (!changed) break;
  }
  if (seqs.empty()) throw DataError("empty after k-core");

  Interactions out;
  for (const auto& s : seqs) {
    InteractionSequence remapped{s.user_id, {}};
    out.vocab.intern_user(s.user_id);
    remapped.items.reserve(s.items.size());
    for (auto it : s.items) remapped.items.push_back(out.vocab.intern_item(input.vocab.raw_item(it)));
    out.sequences.push_back(std::move(remapped));
  }
  return out;
}

Split leave_one_out_split(const std::vector<InteractionSequence>& sequences) {
  Split split;
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    const auto& items = sequences[u].items;
    const std::size_t len = items.size();
    if (len < 3) continue;
    split.test.push_back({u, {items.begin(), items.end() - 1}, items[len - 1], Role::kTest});
    split.valid.push_back({u, {items.begin(), items.end() - 2}, items[len - 2], Role::kValid});
    for (std::size_t k = 1; k + 2 < len; ++k) {
      split.train.push_back({u, {items.begin(), items.begin() + static_cast<std::ptrdiff_t>(k)}, items[k], Role::kTrain});
    }
  }
  return split;
}

PaddedRow pad_truncate(const std::vector<ItemId>& context, std::size_t n) {
  PaddedRow row;
  row.ids.assign(n, kPaddingId);
  row.mask.assign(n, 0);
  const std::size_t keep = std::min(n, context.size());
  const std::size_t offset = context.size() - keep;
  for (std::size_t i = 0; i < keep; ++i) {
    row.ids[n - keep + i] = context[offset + i];
    row.mask[n - keep + i] = 1;
  }
  return row;
}

SequenceBatch make_batch(const std::vector<const SplitExample*>& examples, std::size_t n) {
  SequenceBatch b;
  b.size = examples.size();
  b.length = n;
  b.ids.reserve(b.size * n);
  b.valid_mask.reserve(b.size * n);
  for (const auto* ex : examples) {
    auto row = pad_truncate(ex->context, n);
    b.ids.insert(b.ids.end(), row.ids.begin(), row.ids.end());
    b.valid_mask.insert(b.valid_mask.end(), row.mask.begin(), row.mask.end());
    b.targets.push_back(ex->target);
    b.users.push_back(ex->user);
  }
  return b;
}

std::vector<std::size_t> shuffled_order(std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<SequenceBatch> batch(const std::vector<SplitExample>& examples, std::size_t batch_size,
                                 std::size_t n, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError({"batch_size: must be >= 1"});
  const auto order = shuffled_order(examples.size(), seed);
  std::vector<SequenceBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::vector<const SplitExample*> chunk;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) chunk.push_back(&examples[order[i]]);
    out.push_back(make_batch(chunk, n));
  }
  return out;
}

PreprocessSummary summarize(const Interactions& data) {
  PreprocessSummary s;
  s.users = data.sequences.size();
  s.items = data.vocab.item_count();
  for (const auto& seq : data.sequences) s.interactions += seq.items.size();
  if (s.users && s.items) {
    s.density = static_cast<double>(s.interactions) / (static_cast<double>(s.users) * static_cast<double>(s.items));
  }
  return s;
}

namespace {

void write_line(std::ostream& os, std::size_t user, const std::vector<ItemId>& ctx, ItemId target) {
  os << user;
  for (auto it : ctx) os << ' ' << it;
  os << ' ' << target << '\n';
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write " + p.string());
  return os;
}

}  // namespace

void write_dataset(const Interactions& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const Split split = leave_one_out_split(data.sequences);
  {
    auto os = open_out(dir / "train.txt");
    // Longest training prefix per user; shorter ones are re-expanded on read.
    for (const auto& ex : split.valid) {
      if (ex.context.size() < 2) continue;
      std::vector<ItemId> ctx(ex.context.begin(), ex.context.end() - 1);
      write_line(os, ex.user, ctx, ex.context.back());
    }
  }
  {
    auto os = open_out(dir / "valid.txt");
    for (const auto& ex : split.valid) write_line(os, ex.user, ex.context, ex.target);
  }
  {
    auto os = open_out(dir / "test.txt");
    for (const auto& ex : split.test) write_line(os, ex.user, ex.context, ex.target);
  }
  {
    auto os = open_out(dir / "item_vocab.txt");
    for (std::size_t i = 1; i <= data.vocab.item_count(); ++i)
      os << data.vocab.raw_item(static_cast<ItemId>(i)) << ' ' << i << '\n';
  }
  {
    auto os = open_out(dir / "user_vocab.txt");
    for (std::size_t u = 0; u < data.vocab.user_count(); ++u) os << data.vocab.raw_user(u) << ' ' << u << '\n';
  }
  const auto s = summarize(data);
  nlohmann::ordered_json j;
  j["users"] = s.users;
  j["items"] = s.items;
  j["interactions"] = s.interactions;
  j["density"] = s.density;
  auto os = open_out(dir / "summary.json");
  os << j.dump(2) << '\n';
}

namespace {

std::vector<std::vector<ItemId>> read_rows(const std::filesystem::path& p, std::vector<std::size_t>& users) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<std::vector<ItemId>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto cols = split_ws(line);
    if (cols.empty()) continue;
    if (cols.size() < 3) throw DataError(p.string() + ":" + std::to_string(lineno) + ": need user, context and target");
    std::vector<ItemId> ids;
    std::size_t user = 0;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      long long v = 0;
      auto [ptr, ec] = std::from_chars(cols[c].data(), cols[c].data() + cols[c].size(), v);
      if (ec != std::errc() || ptr != cols[c].data() + cols[c].size() || v < 0 || (c > 0 && v == 0)) {
        throw DataError(p.string() + ":" + std::to_string(lineno) + ": bad id '" + cols[c] + "'");
      }
      if (c == 0) {
        user = static_cast<std::size_t>(v);
      } else {
        ids.push_back(v);
      }
    }
    users.push_back(user);
    rows.push_back(std::move(ids));
  }
  return rows;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line))
    if (!split_ws(line).empty()) ++n;
  return n;
}

}  // namespace

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.item_count = count_lines(dir / "item_vocab.txt");
  ds.user_count = count_lines(dir / "user_vocab.txt");
  auto check_ids = [&](const std::vector<ItemId>& ids, const std::string& file) {
    for (auto id : ids)
      if (static_cast<std::size_t>(id) > ds.item_count) throw DataError(file + ": item id " + std::to_string(id) + " exceeds vocabulary");
  };
  for (auto [name, role] : {std::pair{"valid.txt", Role::kValid}, std::pair{"test.txt", Role::kTest}}) {
    std::vector<std::size_t> users;
    auto rows = read_rows(dir / name, users);
    auto& out = role == Role::kValid ? ds.split.valid : ds.split.test;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      check_ids(rows[r], name);
      out.push_back({users[r], {rows[r].begin(), rows[r].end() - 1}, rows[r].back(), role});
    }
  }
  std::vector<std::size_t> users;
  auto rows = read_rows(dir / "train.txt", users);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    check_ids(rows[r], "train.txt");
    const auto& seq = rows[r];
    for (std::size_t k = 1; k < seq.size(); ++k) {
      ds.split.train.push_back({users[r], {seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(k)}, seq[k], Role::kTrain});
    }
  }
  return ds;
}

Dataset make_dataset(const Interactions& data) {
  Dataset ds;
  ds.item_count = data.vocab.item_count();
  ds.user_count = data.sequences.size();
  ds.split = leave_one_out_split(data.sequences);
  return ds;
}

std::vector<std::size_t> training_lengths(const Dataset& ds) {
  std::vector<std::size_t> len(ds.user_count, 0);
  for (const auto& ex : ds.split.test) {
    if (ex.user >= len.size()) len.resize(ex.user + 1, 0);
    len[ex.user] = ex.context.empty() ? 0 : ex.context.size() - 1;
  }
  return len;
}

std::vector<std::size_t> item_popularity(const Dataset& ds) {
  std::vector<std::size_t> pop(ds.item_count + 1, 0);
  for (const auto& ex : ds.split.test) {
    for (std::size_t i = 0; i + 1 < ex.context.size(); ++i) ++pop[static_cast<std::size_t>(ex.context[i])];
  }
  return pop;
}

}  // namespace acrec::data
