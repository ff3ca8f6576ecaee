// SPDX-License-Identifier: Apache-2.0
#include "kdforge/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "kdforge/error.hpp"

namespace kdforge {

namespace {

constexpr std::size_t kMaxWordChars = 100;

bool is_ascii_punct(unsigned char c) { return c < 128 && std::ispunct(c); }
bool is_ascii_space(unsigned char c) { return c < 128 && std::isspace(c); }

}  // namespace

const std::vector<std::string>& Vocabulary::reserved_pieces() {
  static const std::vector<std::string> r{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return r;
}

Vocabulary::Vocabulary() : Vocabulary(reserved_pieces()) {}

Vocabulary::Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  const auto& reserved = reserved_pieces();
  if (pieces_.size() < reserved.size() ||
      !std::equal(reserved.begin(), reserved.end(), pieces_.begin()))
    throw Error(ErrorKind::vocab, "vocabulary must start with [PAD] [UNK] [CLS] [SEP] [MASK]");
  index_.reserve(pieces_.size());
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw Error(ErrorKind::vocab, "empty piece at id " + std::to_string(i));
    if (!index_.emplace(pieces_[i], static_cast<std::int32_t>(i)).second)
      throw Error(ErrorKind::vocab, "duplicate piece '" + pieces_[i] + "' at id " + std::to_string(i));
  }
}

std::optional<std::int32_t> Vocabulary::find(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::piece(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size())
    throw Error(ErrorKind::vocab, "id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(pieces_.size()));
  return pieces_[static_cast<std::size_t>(id)];
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot read vocabulary " + path.string());
  std::vector<std::string> pieces;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pieces.push_back(line);
  }
  return Vocabulary(std::move(pieces));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write vocabulary " + path.string());
  for (const auto& p : pieces_) out << p << '\n';
}

std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_ascii_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return words;
}

std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

Vocabulary build_vocab(std::span<const std::string> corpus_lines, std::size_t target_size,
                       std::size_t min_frequency) {
  if (target_size < static_cast<std::size_t>(SpecialIds::count))
    throw Error(ErrorKind::config, "vocabulary target size must be >= 5");
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus_lines)
    for (auto& w : pre_tokenize(line)) ++word_freq[w];
  if (word_freq.empty()) throw Error(ErrorKind::input, "cannot build a vocabulary from an empty corpus");

  std::map<std::string, std::size_t> cand;
  for (const auto& [word, f] : word_freq) {
    cand[word] += f;
    const auto chars = utf8_chars(word);
    if (chars.size() <= 1 || chars.size() > kMaxWordChars) continue;
    cand[chars[0]] += f;
    std::string suffix;
    for (std::size_t i = chars.size(); i-- > 1;) {
      cand["##" + chars[i]] += f;
      suffix.insert(0, chars[i]);
      if (i + 1 < chars.size()) cand["##" + suffix] += f;
    }
  }
  for (const auto& r : Vocabulary::reserved_pieces()) cand.erase(r);

  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [piece, f] : cand)
    if (f >= min_frequency) ranked.emplace_back(piece, f);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });

  std::vector<std::string> pieces = Vocabulary::reserved_pieces();
  for (auto& [piece, f] : ranked) {
    if (pieces.size() >= target_size) break;
    pieces.push_back(piece);
  }
  return Vocabulary(std::move(pieces));
}

std::vector<std::int32_t> wordpiece(std::string_view word, const Vocabulary& vocab) {
  const auto chars = utf8_chars(word);
  if (chars.empty()) return {};
  if (chars.size() > kMaxWordChars) return {SpecialIds::unk};
  // Byte offsets of code-point boundaries.
  std::vector<std::size_t> offs{0};
  for (const auto& c : chars) offs.push_back(offs.back() + c.size());

  std::vector<std::int32_t> out;
  std::size_t start = 0;
  while (start < chars.size()) {
    std::optional<std::int32_t> hit;
    std::size_t end = chars.size();
    for (; end > start; --end) {
      std::string sub(word.substr(offs[start], offs[end] - offs[start]));
      if (start > 0) sub.insert(0, "##");
      if ((hit = vocab.find(sub))) break;
    }
    if (!hit) return {SpecialIds::unk};
    out.push_back(*hit);
    start = end;
  }
  return out;
}

std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<std::int32_t> ids;
  for (const auto& w : pre_tokenize(text)) {
    auto pieces = wordpiece(w, vocab);
    ids.insert(ids.end(), pieces.begin(), pieces.end());
  }
  return ids;
}

TokenizedSequence encode(std::string_view text_a, std::optional<std::string_view> text_b,
                         const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw Error(ErrorKind::config, "max_len must be >= 3, got " + std::to_string(max_len));
  if (text_b && max_len < 5)
    throw Error(ErrorKind::config, "pair inputs need max_len >= 5, got " + std::to_string(max_len));

  auto a = tokenize(text_a, vocab);
  std::vector<std::int32_t> b;
  TokenizedSequence seq;
  if (text_b) {
    b = tokenize(*text_b, vocab);
    const std::size_t budget = max_len - 3;
    while (a.size() + b.size() > budget) {
      if (a.size() > b.size())
        a.pop_back();
      else
        b.pop_back();
      seq.overflow = true;
    }
  } else if (a.size() > max_len - 2) {
    a.resize(max_len - 2);
    seq.overflow = true;
  }

  seq.ids.reserve(max_len);
  seq.ids.push_back(SpecialIds::cls);
  seq.ids.insert(seq.ids.end(), a.begin(), a.end());
  seq.ids.push_back(SpecialIds::sep);
  seq.type_ids.assign(seq.ids.size(), 0);
  if (text_b) {
    seq.ids.insert(seq.ids.end(), b.begin(), b.end());
    seq.ids.push_back(SpecialIds::sep);
    seq.type_ids.resize(seq.ids.size(), 1);
  }
  seq.attention_mask.assign(seq.ids.size(), 1);
  seq.ids.resize(max_len, SpecialIds::pad);
  seq.attention_mask.resize(max_len, 0);
  seq.type_ids.resize(max_len, 0);
  return seq;
}

std::string decode(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    const std::string& p = vocab.piece(id);
    if (id == SpecialIds::pad || id == SpecialIds::cls || id == SpecialIds::sep) continue;
    if (p.starts_with("##")) {
      out.append(p, 2);
    } else {
      if (!out.empty()) out.push_back(' ');
      out += p;
    }
  }
  return out;
}

}  // namespace kdforge
