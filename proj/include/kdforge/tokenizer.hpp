// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace kdforge {

struct SpecialIds {
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t unk = 1;
  static constexpr std::int32_t cls = 2;
  static constexpr std::int32_t sep = 3;
  static constexpr std::int32_t mask = 4;
  static constexpr std::int32_t count = 5;
};

/// Ordered piece list; line number in the vocabulary file is the id.
/// Continuation pieces carry a "##" prefix.
class Vocabulary {
 public:
  /// Reserved tokens only.
  Vocabulary();
  /// `pieces` must start with the five reserved tokens in id order.
  explicit Vocabulary(std::vector<std::string> pieces);

  std::size_t size() const noexcept { return pieces_.size(); }
  const std::vector<std::string>& pieces() const noexcept { return pieces_; }
  std::optional<std::int32_t> find(std::string_view piece) const;
  bool contains(std::string_view piece) const { return find(piece).has_value(); }
  /// Throws a vocab error for out-of-range ids.
  const std::string& piece(std::int32_t id) const;

  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  static const std::vector<std::string>& reserved_pieces();

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.pieces_ == b.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct TokenizedSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> attention_mask;
  std::vector<std::int32_t> type_ids;
  bool overflow = false;
};

/// Lowercases, splits on whitespace, and emits ASCII punctuation as
/// single-character words.
std::vector<std::string> pre_tokenize(std::string_view text);

/// Splits a UTF-8 string into code-point substrings.
std::vector<std::string> utf8_chars(std::string_view word);

/// Frequency-ranked vocabulary. Ties break lexicographically.
Vocabulary build_vocab(std::span<const std::string> corpus_lines, std::size_t target_size,
                       std::size_t min_frequency = 1);

/// Greedy longest-match WordPiece for one pre-tokenized word; the whole word
/// becomes UNK when any remainder has no match.
std::vector<std::int32_t> wordpiece(std::string_view word, const Vocabulary& vocab);

/// Unpadded piece ids of a text.
std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab);

/// [CLS] A [SEP] (B [SEP]) padded to max_len. Pairs are truncated
/// longest-first and keep at least one piece of each non-empty segment.
TokenizedSequence encode(std::string_view text_a, std::optional<std::string_view> text_b,
                         const Vocabulary& vocab, std::size_t max_len);

/// Drops PAD/CLS/SEP and joins "##" continuations onto the previous piece.
std::string decode(std::span<const std::int32_t> ids, const Vocabulary& vocab);

}  // namespace kdforge
