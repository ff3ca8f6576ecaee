// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kdforge/model.hpp"
#include "kdforge/rng.hpp"
#include "kdforge/tokenizer.hpp"

namespace kdforge {

struct RawPost {
  std::string title;
  std::string body;
  std::int64_t score = 0;
  std::string subreddit;
  bool removed = false;
};

/// Parses one JSON-lines record with keys title, body, score, subreddit.
/// Null or missing title/body become "". Returns nullopt for malformed lines.
std::optional<RawPost> parse_raw_post(std::string_view line);

/// One text record. Classification labels are stored as integral doubles.
struct LabeledExample {
  std::string text;
  std::optional<std::string> text_b;
  double label = 0.0;

  int class_label() const { return static_cast<int>(label); }
  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct AdhdOptions {
  std::int64_t cap_max = 5;
  std::int64_t mild_threshold = 2;
  std::string subreddit = "ADHD";
};

struct PreprocessStats {
  std::size_t records = 0;
  std::size_t malformed = 0;
  std::size_t other_subreddit = 0;
  std::size_t removed = 0;
  std::size_t kept = 0;
};

struct PreprocessResult {
  std::vector<LabeledExample> examples;
  PreprocessStats stats;
};

/// Filter to the target subreddit, drop removed/deleted posts, join
/// title + " " + body, clamp the score to [0, cap_max] and label it
/// 0 (<= mild_threshold) or 1.
PreprocessResult preprocess_adhd(std::span<const std::string> jsonl_lines, const AdhdOptions& options = {});
PreprocessResult preprocess_adhd(std::span<const RawPost> posts, const AdhdOptions& options = {});

std::map<int, std::size_t> class_counts(std::span<const LabeledExample> examples);

/// Every class is topped up to the majority count by uniform draws with
/// replacement; originals are all kept. The result is shuffled.
std::vector<LabeledExample> balance_upsample(std::span<const LabeledExample> examples, Rng& rng);

struct DatasetSplit {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
  std::map<int, std::size_t> train_counts;
  std::map<int, std::size_t> test_counts;
};

/// Per-class test quotas for N examples: ceil(fraction * N) overall, split by
/// largest remainder with lower class ids winning ties.
std::map<int, std::size_t> split_quotas(const std::map<int, std::size_t>& counts, double test_fraction);

/// Stratified split; records keep their input order within train and test.
DatasetSplit stratified_split(std::span<const LabeledExample> examples, double test_fraction, Rng& rng);

/// A masked MLM row. labels hold the original id at selected positions and
/// kIgnoreLabel elsewhere.
struct MlmRow {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> attention_mask;
  std::vector<std::int32_t> type_ids;
  std::vector<std::int32_t> labels;
  std::vector<std::size_t> positions;
};

/// Selects max(1, round(rate * n)) non-special positions; 80% become MASK,
/// 10% a uniform non-reserved id, 10% stay. Returns nullopt (skip) when the
/// sequence has no maskable token.
std::optional<MlmRow> mask_for_mlm(const TokenizedSequence& seq, Rng& rng, std::size_t vocab_size,
                                   double mask_rate = 0.15);

struct MlmBatch {
  TokenBatch tokens;
  /// Flat b * L + l indices of masked positions and their original ids.
  /// Rows are cut to the longest attended length in the batch.
  std::vector<std::size_t> positions;
  std::vector<std::int32_t> targets;

  static MlmBatch from_rows(std::span<const MlmRow> rows);
};

/// One past the last attended position (at least 1).
std::size_t real_length(std::span<const std::int32_t> attention_mask);

/// Batch of sequences cut to the longest attended length among them.
TokenBatch trimmed_batch(std::span<const TokenizedSequence> seqs);

using Lexicon = std::unordered_map<std::string, std::vector<std::string>>;

/// One entry per line: word TAB comma-separated synonyms.
Lexicon load_lexicon(const std::filesystem::path& path);

/// Replaces each lexicon word with a uniformly chosen synonym with
/// probability `rate`. Whitespace is preserved.
LabeledExample synonym_augment(const LabeledExample& example, const Lexicon& lexicon, double rate, Rng& rng);

struct SyntheticTaskSpec {
  std::size_t classes = 2;
  std::size_t vocab_size = 200;
  std::size_t examples_per_class = 100;
  std::size_t held_out_per_class = 50;
  double signal_strength = 0.8;
  std::size_t words_per_example = 12;
  bool pair = false;
};

struct SyntheticTask {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> held_out;
};

/// Each word is drawn from the class's own word slice with probability
/// signal_strength, otherwise uniformly from the full word list.
SyntheticTask generate_synthetic_task(const SyntheticTaskSpec& spec, Rng& rng);

/// Topic-structured sentences for MLM training: every line keeps to one
/// topic, so content words are predictable from context.
std::vector<std::string> generate_synthetic_corpus(std::size_t lines, Rng& rng);

/// Raw-post JSON lines with the requested number of kept Mild (score <= 2)
/// and Severe (score > 2) ADHD posts plus `noise` records of each filtered
/// kind (other subreddit, removed, deleted, malformed).
std::vector<std::string> generate_synthetic_posts(std::size_t mild, std::size_t severe,
                                                  std::size_t noise, Rng& rng);

// JSON-lines I/O for examples.
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);
std::vector<LabeledExample> read_examples(const std::filesystem::path& path);
void write_examples(const std::filesystem::path& path, std::span<const LabeledExample> examples);
std::string example_to_json(const LabeledExample& example);

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace kdforge
