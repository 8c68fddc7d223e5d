#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace acrec::data {

// Dense item id. 0 is reserved for padding; real items are 1..item_count.
using ItemId = std::int64_t;
inline constexpr ItemId kPaddingId = 0;

struct InteractionSequence {
  std::string user_id;
  std::vector<ItemId> items;  // chronological
};

// Bidirectional raw <-> dense id maps for items and users.
class Vocabulary {
 public:
  // Returns the dense id, assigning the next free one on first sight.
  ItemId intern_item(const std::string& raw);
  std::size_t intern_user(const std::string& raw);

  std::optional<ItemId> find_item(const std::string& raw) const;
  const std::string& raw_item(ItemId dense) const { return items_.at(static_cast<std::size_t>(dense) - 1); }
  const std::string& raw_user(std::size_t dense) const { return users_.at(dense); }

  std::size_t item_count() const { return items_.size(); }
  std::size_t user_count() const { return users_.size(); }

 private:
  std::vector<std::string> items_;
  std::unordered_map<std::string, ItemId> item_index_;
  std::vector<std::string> users_;
  std::unordered_map<std::string, std::size_t> user_index_;
};

struct Interactions {
  std::vector<InteractionSequence> sequences;
  Vocabulary vocab;
};

enum class InputFormat {
  kAuto,     // triplets when every line has exactly three columns, else grouped
  kTriplet,  // user item timestamp
  kGrouped,  // user item_1 item_2 ...
};

// Reads an interaction log. Per-user sequences are sorted by timestamp (stable,
// so ties keep file order); dense ids follow first appearance in the file.
// Throws DataError on a missing/empty file or a malformed line.
Interactions load_interactions(const std::filesystem::path& path, InputFormat format = InputFormat::kAuto);

// Iterated k-core: drop items with fewer than `min_count` occurrences, then
// users with fewer than `min_count` interactions, until nothing changes.
// Dense ids are reassigned contiguously in first-appearance order.
Interactions kcore_filter(const Interactions& input, std::size_t min_count = 5);

enum class Role { kTrain, kValid, kTest };

struct SplitExample {
  std::size_t user = 0;  // index into the sequence list the split came from
  std::vector<ItemId> context;
  ItemId target = kPaddingId;
  Role role = Role::kTrain;
};

struct Split {
  std::vector<SplitExample> train;
  std::vector<SplitExample> valid;
  std::vector<SplitExample> test;
};

// Leave-one-out: last item is the test target, second-to-last the validation
// target, and every prefix of the remainder yields one training example.
// Sequences shorter than 3 are dropped.
Split leave_one_out_split(const std::vector<InteractionSequence>& sequences);

struct PaddedRow {
  std::vector<ItemId> ids;
  std::vector<std::uint8_t> mask;
};

// Keeps the most recent n items, left-padding with kPaddingId.
PaddedRow pad_truncate(const std::vector<ItemId>& context, std::size_t n);

struct SequenceBatch {
  std::size_t size = 0;    // B
  std::size_t length = 0;  // n
  std::vector<ItemId> ids;                // [B, n], left-padded
  std::vector<std::uint8_t> valid_mask;   // [B, n], true where ids != 0
  std::vector<ItemId> targets;            // [B]
  std::vector<std::size_t> users;         // [B]

  ItemId id(std::size_t b, std::size_t i) const { return ids[b * length + i]; }
  bool valid(std::size_t b, std::size_t i) const { return valid_mask[b * length + i] != 0; }
};

// Packs examples in the given order into one batch.
SequenceBatch make_batch(const std::vector<const SplitExample*>& examples, std::size_t n);

// Deterministic shuffle under `seed`, then consecutive batches of `batch_size`
// (the final partial batch is kept).
std::vector<SequenceBatch> batch(const std::vector<SplitExample>& examples, std::size_t batch_size,
                                 std::size_t n, std::uint64_t seed);

// Permutation used by batch(); exposed for tests.
std::vector<std::size_t> shuffled_order(std::size_t count, std::uint64_t seed);

// ---- preprocessed dataset on disk ----

// Dense-id dataset as written by `preprocess`: split files hold
// `user ctx_1 ... ctx_k target`, train.txt one line per user carrying the
// longest training prefix (all shorter prefixes are implied).
struct Dataset {
  std::size_t item_count = 0;
  std::size_t user_count = 0;
  Split split;
};

struct PreprocessSummary {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t interactions = 0;
  double density = 0.0;
};

PreprocessSummary summarize(const Interactions& data);

// Writes train/valid/test.txt, item_vocab.txt, user_vocab.txt and
// summary.json under `dir`.
void write_dataset(const Interactions& data, const std::filesystem::path& dir);

// Reads a directory produced by write_dataset and re-expands training prefixes.
Dataset read_dataset(const std::filesystem::path& dir);

// Builds a Dataset directly from filtered interactions (no disk round trip).
Dataset make_dataset(const Interactions& data);

// Training-sequence length per user and per-item training popularity, both
// derived from the test contexts (test context minus the validation item).
std::vector<std::size_t> training_lengths(const Dataset& ds);
std::vector<std::size_t> item_popularity(const Dataset& ds);

}  // namespace acrec::data
