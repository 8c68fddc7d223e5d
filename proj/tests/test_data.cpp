#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "acrec/data.hpp"
#include "acrec/error.hpp"

using namespace acrec;
using namespace acrec::data;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("acrec_data_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path_ / name) << text;
    return path_ / name;
  }

 private:
  fs::path path_;
};

std::vector<std::string> raw_items(const Interactions& data, std::size_t u) {
  std::vector<std::string> out;
  for (auto id : data.sequences[u].items) out.push_back(data.vocab.raw_item(id));
  return out;
}

// Naive k-core: rescan the full raw data until a pass removes nothing.
std::map<std::string, std::vector<std::string>> kcore_oracle(std::map<std::string, std::vector<std::string>> seqs,
                                                             std::size_t k) {
  for (bool changed = true; changed;) {
    changed = false;
    std::map<std::string, std::size_t> count;
    for (const auto& [u, items] : seqs)
      for (const auto& i : items) ++count[i];
    for (auto& [u, items] : seqs) {
      const auto before = items.size();
      items.erase(std::remove_if(items.begin(), items.end(), [&](const std::string& i) { return count[i] < k; }),
                  items.end());
      changed = changed || items.size() != before;
    }
    for (auto it = seqs.begin(); it != seqs.end();) {
      if (it->second.size() < k) {
        it = seqs.erase(it);
        changed = true;
      } else {
        ++it;
      }
    }
  }
  return seqs;
}

}  // namespace

TEST(Data, TripletsSortedByTimestampWithStableTies) {
  TempDir dir;
  const auto p = dir.write("log.txt", "u1 a 30\nu2 b 5\nu1 b 10\nu1 c 10\nu2 a 1\n");
  const auto data = load_interactions(p);
  ASSERT_EQ(data.sequences.size(), 2u);
  EXPECT_EQ(data.sequences[0].user_id, "u1");
  EXPECT_EQ(raw_items(data, 0), (std::vector<std::string>{"b", "c", "a"}));
  EXPECT_EQ(raw_items(data, 1), (std::vector<std::string>{"a", "b"}));
  // dense ids follow first appearance in the file
  EXPECT_EQ(*data.vocab.find_item("a"), 1);
  EXPECT_EQ(*data.vocab.find_item("b"), 2);
  EXPECT_EQ(*data.vocab.find_item("c"), 3);
}

TEST(Data, NumericTimestampsCompareNumerically) {
  TempDir dir;
  const auto data = load_interactions(dir.write("log.txt", "u x 10\nu y 9\nu z 100\n"));
  EXPECT_EQ(raw_items(data, 0), (std::vector<std::string>{"y", "x", "z"}));
}

TEST(Data, GroupedFormat) {
  TempDir dir;
  const auto p = dir.write("log.txt", "u1 a b c d\nu2 c a\n\n");
  const auto data = load_interactions(p);
  ASSERT_EQ(data.sequences.size(), 2u);
  EXPECT_EQ(raw_items(data, 0), (std::vector<std::string>{"a", "b", "c", "d"}));
  EXPECT_EQ(raw_items(data, 1), (std::vector<std::string>{"c", "a"}));
}

TEST(Data, AutodetectPicksTripletsOnlyWhenEveryLineHasThreeColumns) {
  TempDir dir;
  const auto grouped = load_interactions(dir.write("g.txt", "u1 a b c\nu2 a b\n"));
  EXPECT_EQ(raw_items(grouped, 1), (std::vector<std::string>{"a", "b"}));
  const auto forced = load_interactions(dir.write("t.txt", "u1 a b\nu1 c d\n"), InputFormat::kGrouped);
  EXPECT_EQ(raw_items(forced, 0), (std::vector<std::string>{"a", "b", "c", "d"}));
}

TEST(Data, MalformedInputThrows) {
  TempDir dir;
  EXPECT_THROW(load_interactions(dir.path() / "missing.txt"), DataError);
  EXPECT_THROW(load_interactions(dir.write("empty.txt", "\n\n")), DataError);
  EXPECT_THROW(load_interactions(dir.write("one.txt", "u1 a 1\nlonely\n")), DataError);
  EXPECT_THROW(load_interactions(dir.write("tri.txt", "u1 a 1\nu1 b c d\n"), InputFormat::kTriplet), DataError);
}

TEST(Data, KcoreMatchesRepeatedScanOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Interactions data;
    std::map<std::string, std::vector<std::string>> raw;
    std::uniform_int_distribution<int> len(1, 12), item(0, 14);
    for (int u = 0; u < 30; ++u) {
      InteractionSequence s{"u" + std::to_string(u), {}};
      data.vocab.intern_user(s.user_id);
      for (int k = len(rng); k > 0; --k) {
        const std::string name = "i" + std::to_string(item(rng));
        s.items.push_back(data.vocab.intern_item(name));
        raw[s.user_id].push_back(name);
      }
      data.sequences.push_back(s);
    }
    const std::size_t k = 1 + trial % 5;
    const auto expected = kcore_oracle(raw, k);
    if (expected.empty()) {
      EXPECT_THROW(kcore_filter(data, k), DataError);
      continue;
    }
    const auto got = kcore_filter(data, k);
    ASSERT_EQ(got.sequences.size(), expected.size());
    for (std::size_t u = 0; u < got.sequences.size(); ++u) {
      EXPECT_EQ(raw_items(got, u), expected.at(got.sequences[u].user_id));
    }
    // dense ids contiguous 1..count
    std::set<ItemId> ids;
    for (const auto& s : got.sequences) ids.insert(s.items.begin(), s.items.end());
    EXPECT_EQ(ids.size(), got.vocab.item_count());
    EXPECT_EQ(*ids.begin(), 1);
    EXPECT_EQ(*ids.rbegin(), static_cast<ItemId>(got.vocab.item_count()));
  }
}

TEST(Data, LeaveOneOutSplit) {
  const std::vector<InteractionSequence> seqs = {{"a", {1, 2, 3, 4, 5}}, {"b", {6, 7}}, {"c", {8, 9, 10}}};
  const auto split = leave_one_out_split(seqs);
  ASSERT_EQ(split.test.size(), 2u);
  EXPECT_EQ(split.test[0].context, (std::vector<ItemId>{1, 2, 3, 4}));
  EXPECT_EQ(split.test[0].target, 5);
  EXPECT_EQ(split.valid[0].context, (std::vector<ItemId>{1, 2, 3}));
  EXPECT_EQ(split.valid[0].target, 4);
  EXPECT_EQ(split.test[1].user, 2u);
  // user a: prefixes [1]->2, [1,2]->3; user c keeps a single training item
  ASSERT_EQ(split.train.size(), 2u);
  EXPECT_EQ(split.train[1].context, (std::vector<ItemId>{1, 2}));
  EXPECT_EQ(split.train[1].target, 3);
  for (const auto& ex : split.train) EXPECT_EQ(ex.role, Role::kTrain);
}

TEST(Data, PadTruncate) {
  const auto short_row = pad_truncate({7, 8}, 4);
  EXPECT_EQ(short_row.ids, (std::vector<ItemId>{0, 0, 7, 8}));
  EXPECT_EQ(short_row.mask, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  const auto long_row = pad_truncate({1, 2, 3, 4, 5}, 3);
  EXPECT_EQ(long_row.ids, (std::vector<ItemId>{3, 4, 5}));
  EXPECT_EQ(long_row.mask, (std::vector<std::uint8_t>{1, 1, 1}));
  EXPECT_EQ(pad_truncate({}, 2).ids, (std::vector<ItemId>{0, 0}));
}

TEST(Data, BatchingIsDeterministicAndCoversEveryExample) {
  std::vector<SplitExample> examples;
  for (std::size_t i = 0; i < 23; ++i) examples.push_back({i, {static_cast<ItemId>(i + 1)}, static_cast<ItemId>(i + 2)});
  const auto a = batch(examples, 5, 3, 11);
  const auto b = batch(examples, 5, 3, 11);
  const auto c = batch(examples, 5, 3, 12);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a.back().size, 3u);
  std::multiset<std::size_t> users;
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].ids, b[k].ids);
    EXPECT_EQ(a[k].targets, b[k].targets);
    differs = differs || a[k].users != c[k].users;
    users.insert(a[k].users.begin(), a[k].users.end());
    for (std::size_t r = 0; r < a[k].size; ++r) {
      EXPECT_EQ(a[k].id(r, 2), static_cast<ItemId>(a[k].users[r] + 1));
      EXPECT_FALSE(a[k].valid(r, 0));
    }
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(users.size(), 23u);
  EXPECT_EQ(std::set<std::size_t>(users.begin(), users.end()).size(), 23u);
  const auto order = shuffled_order(23, 11);
  EXPECT_EQ(std::set<std::size_t>(order.begin(), order.end()).size(), 23u);
}

TEST(Data, WriteReadRoundTrip) {
  TempDir dir;
  Interactions data;
  for (int u = 0; u < 4; ++u) {
    InteractionSequence s{"user" + std::to_string(u), {}};
    data.vocab.intern_user(s.user_id);
    for (int k = 0; k < 3 + u; ++k) s.items.push_back(data.vocab.intern_item("it" + std::to_string((u + k) % 6)));
    data.sequences.push_back(s);
  }
  write_dataset(data, dir.path());
  for (const char* f : {"train.txt", "valid.txt", "test.txt", "item_vocab.txt", "user_vocab.txt", "summary.json"}) {
    EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  }
  const auto ds = read_dataset(dir.path());
  const auto direct = make_dataset(data);
  EXPECT_EQ(ds.item_count, direct.item_count);
  EXPECT_EQ(ds.user_count, direct.user_count);
  auto same = [](const std::vector<SplitExample>& x, const std::vector<SplitExample>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i].user != y[i].user || x[i].context != y[i].context || x[i].target != y[i].target) return false;
    return true;
  };
  EXPECT_TRUE(same(ds.split.train, direct.split.train));
  EXPECT_TRUE(same(ds.split.valid, direct.split.valid));
  EXPECT_TRUE(same(ds.split.test, direct.split.test));
}

TEST(Data, ReadDatasetRejectsBadFiles) {
  TempDir dir;
  EXPECT_THROW(read_dataset(dir.path()), DataError);
  dir.write("item_vocab.txt", "a\nb\n");
  dir.write("user_vocab.txt", "u\n");
  dir.write("train.txt", "0 1 2\n");
  dir.write("valid.txt", "0 1 2 1\n");
  dir.write("test.txt", "0 1 2 1 7\n");
  EXPECT_THROW(read_dataset(dir.path()), DataError);
  dir.write("test.txt", "0 1 x 1\n");
  EXPECT_THROW(read_dataset(dir.path()), DataError);
}

TEST(Data, SummaryAndStatistics) {
  Interactions data;
  data.sequences = {{"a", {1, 2, 3, 1}}, {"b", {2, 3, 4}}};
  for (const char* i : {"p", "q", "r", "s"}) data.vocab.intern_item(i);
  const auto s = summarize(data);
  EXPECT_EQ(s.users, 2u);
  EXPECT_EQ(s.items, 4u);
  EXPECT_EQ(s.interactions, 7u);
  EXPECT_DOUBLE_EQ(s.density, 7.0 / 8.0);
  const auto ds = make_dataset(data);
  EXPECT_EQ(training_lengths(ds), (std::vector<std::size_t>{2, 1}));
  // training items: a -> 1 2, b -> 2
  EXPECT_EQ(item_popularity(ds), (std::vector<std::size_t>{0, 1, 2, 0, 0}));
}
