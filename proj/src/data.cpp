// SPDX-License-Identifier: Apache-2.0
#include "kdforge/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "kdforge/error.hpp"
#include "kdforge/ops.hpp"

namespace kdforge {

using nlohmann::json;

// ---------------------------------------------------------------- raw posts

namespace {

bool read_text_field(const json& obj, const char* key, std::string& out) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    out.clear();
    return true;
  }
  if (!it->is_string()) return false;
  out = it->get<std::string>();
  return true;
}

}  // namespace

std::optional<RawPost> parse_raw_post(std::string_view line) {
  const json obj = json::parse(line, nullptr, false);
  if (obj.is_discarded() || !obj.is_object()) return std::nullopt;
  RawPost post;
  if (!read_text_field(obj, "title", post.title) || !read_text_field(obj, "body", post.body))
    return std::nullopt;
  auto score = obj.find("score");
  if (score == obj.end() || !score->is_number_integer()) return std::nullopt;
  post.score = score->get<std::int64_t>();
  auto sub = obj.find("subreddit");
  if (sub == obj.end() || !sub->is_string()) return std::nullopt;
  post.subreddit = sub->get<std::string>();
  post.removed = post.body == "[removed]" || post.body == "[deleted]";
  return post;
}

PreprocessResult preprocess_adhd(std::span<const RawPost> posts, const AdhdOptions& options) {
  if (options.cap_max < 0 || options.mild_threshold < 0)
    throw Error(ErrorKind::config, "score cap and mild threshold must be non-negative");
  PreprocessResult result;
  for (const auto& post : posts) {
    ++result.stats.records;
    if (post.subreddit != options.subreddit) {
      ++result.stats.other_subreddit;
      continue;
    }
    if (post.removed) {
      ++result.stats.removed;
      continue;
    }
    const std::int64_t capped = std::clamp<std::int64_t>(post.score, 0, options.cap_max);
    LabeledExample ex;
    ex.text = post.title + " " + post.body;
    ex.label = capped <= options.mild_threshold ? 0.0 : 1.0;
    result.examples.push_back(std::move(ex));
    ++result.stats.kept;
  }
  return result;
}

PreprocessResult preprocess_adhd(std::span<const std::string> lines, const AdhdOptions& options) {
  std::vector<RawPost> posts;
  std::size_t records = 0, malformed = 0;
  for (const auto& line : lines) {
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    ++records;
    if (auto p = parse_raw_post(line))
      posts.push_back(std::move(*p));
    else
      ++malformed;
  }
  if (records == 0) throw Error(ErrorKind::input, "no raw records");
  if (malformed == records)
    throw Error(ErrorKind::input, "all " + std::to_string(records) + " raw records are malformed");
  auto result = preprocess_adhd(std::span<const RawPost>(posts), options);
  result.stats.records = records;
  result.stats.malformed = malformed;
  return result;
}

std::map<int, std::size_t> class_counts(std::span<const LabeledExample> examples) {
  std::map<int, std::size_t> counts;
  for (const auto& e : examples) ++counts[e.class_label()];
  return counts;
}

// ---------------------------------------------------------------- balance / split

std::vector<LabeledExample> balance_upsample(std::span<const LabeledExample> examples, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < examples.size(); ++i) by_class[examples[i].class_label()].push_back(i);
  if (by_class.size() < 2)
    throw Error(ErrorKind::balance, "upsampling needs at least two classes, found " +
                                        std::to_string(by_class.size()));
  std::size_t majority = 0;
  for (const auto& [c, idx] : by_class) majority = std::max(majority, idx.size());

  std::vector<LabeledExample> out(examples.begin(), examples.end());
  for (const auto& [c, idx] : by_class)
    for (std::size_t k = idx.size(); k < majority; ++k) out.push_back(examples[idx[rng.below(idx.size())]]);
  shuffle_in_place(out, rng);
  return out;
}

std::map<int, std::size_t> split_quotas(const std::map<int, std::size_t>& counts, double test_fraction) {
  if (!(test_fraction > 0 && test_fraction < 1))
    throw Error(ErrorKind::config, "test fraction must be in (0, 1)");
  constexpr double kTol = 1e-9;
  std::size_t n = 0;
  for (const auto& [c, k] : counts) n += k;
  const auto total = static_cast<std::size_t>(std::ceil(test_fraction * static_cast<double>(n) - kTol));

  std::map<int, std::size_t> quota;
  std::vector<std::pair<int, double>> remainders;
  std::size_t assigned = 0;
  for (const auto& [c, k] : counts) {
    const double exact = test_fraction * static_cast<double>(k);
    const auto base = static_cast<std::size_t>(std::floor(exact + kTol));
    quota[c] = base;
    assigned += base;
    remainders.emplace_back(c, std::max(0.0, exact - static_cast<double>(base)));
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (std::abs(a.second - b.second) > kTol) return a.second > b.second;
    return a.first < b.first;
  });
  for (std::size_t i = 0; assigned < total && i < remainders.size(); ++i, ++assigned)
    ++quota[remainders[i].first];
  return quota;
}

DatasetSplit stratified_split(std::span<const LabeledExample> examples, double test_fraction, Rng& rng) {
  const auto counts = class_counts(examples);
  if (counts.size() < 2)
    throw Error(ErrorKind::split, "stratified split needs at least two classes, found " +
                                      std::to_string(counts.size()));
  const auto quota = split_quotas(counts, test_fraction);

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < examples.size(); ++i) by_class[examples[i].class_label()].push_back(i);
  std::vector<char> in_test(examples.size(), 0);
  for (auto& [c, idx] : by_class) {
    const std::size_t q = quota.at(c);
    if (q > idx.size())
      throw Error(ErrorKind::split, "class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                                        " records but needs " + std::to_string(q));
    for (std::size_t i = 0; i < q; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      in_test[idx[i]] = 1;
    }
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto& dst = in_test[i] ? split.test : split.train;
    auto& cnt = in_test[i] ? split.test_counts : split.train_counts;
    dst.push_back(examples[i]);
    ++cnt[examples[i].class_label()];
  }
  return split;
}

// ---------------------------------------------------------------- MLM masking

std::optional<MlmRow> mask_for_mlm(const TokenizedSequence& seq, Rng& rng, std::size_t vocab_size,
                                   double mask_rate) {
  if (!(mask_rate > 0 && mask_rate <= 1)) throw Error(ErrorKind::config, "mask rate must be in (0, 1]");
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const auto id = seq.ids[i];
    if (seq.attention_mask[i] && id != SpecialIds::pad && id != SpecialIds::cls && id != SpecialIds::sep)
      cand.push_back(i);
  }
  if (cand.empty()) return std::nullopt;
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(mask_rate * static_cast<double>(cand.size()))));

  for (std::size_t i = 0; i < k; ++i) std::swap(cand[i], cand[i + rng.below(cand.size() - i)]);
  cand.resize(k);
  std::sort(cand.begin(), cand.end());

  MlmRow row{seq.ids, seq.attention_mask, seq.type_ids,
             std::vector<std::int32_t>(seq.ids.size(), kIgnoreLabel), cand};
  const auto reserved = static_cast<std::size_t>(SpecialIds::count);
  for (auto pos : cand) {
    row.labels[pos] = seq.ids[pos];
    const double u = rng.uniform();
    if (u < 0.8) {
      row.ids[pos] = SpecialIds::mask;
    } else if (u < 0.9) {
      if (vocab_size > reserved)
        row.ids[pos] = static_cast<std::int32_t>(reserved + rng.below(vocab_size - reserved));
    }
  }
  return row;
}

MlmBatch MlmBatch::from_rows(std::span<const MlmRow> rows) {
  if (rows.empty()) throw Error(ErrorKind::empty_batch, "MLM batch has no rows");
  MlmBatch b;
  b.tokens.batch = rows.size();
  const std::size_t padded = rows.front().ids.size();
  for (const auto& row : rows) {
    if (row.ids.size() != padded) throw Error(ErrorKind::dimension, "MLM rows must share one padded length");
    b.tokens.seq_len = std::max(b.tokens.seq_len, real_length(row.attention_mask));
  }
  const auto len = static_cast<std::ptrdiff_t>(b.tokens.seq_len);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    b.tokens.ids.insert(b.tokens.ids.end(), row.ids.begin(), row.ids.begin() + len);
    b.tokens.attention_mask.insert(b.tokens.attention_mask.end(), row.attention_mask.begin(),
                                   row.attention_mask.begin() + len);
    b.tokens.type_ids.insert(b.tokens.type_ids.end(), row.type_ids.begin(), row.type_ids.begin() + len);
    for (auto p : row.positions) {
      b.positions.push_back(r * b.tokens.seq_len + p);
      b.targets.push_back(row.labels[p]);
    }
  }
  return b;
}

std::size_t real_length(std::span<const std::int32_t> attention_mask) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < attention_mask.size(); ++i)
    if (attention_mask[i]) n = i + 1;
  return std::max<std::size_t>(n, 1);
}

TokenBatch trimmed_batch(std::span<const TokenizedSequence> seqs) {
  if (seqs.empty()) throw Error(ErrorKind::empty_batch, "batch has no sequences");
  std::size_t len = 0;
  for (const auto& s : seqs) len = std::max(len, real_length(s.attention_mask));
  std::vector<TokenizedSequence> cut(seqs.begin(), seqs.end());
  for (auto& s : cut) {
    if (s.ids.size() < len) throw Error(ErrorKind::dimension, "batch sequences differ in padded length");
    s.ids.resize(len);
    s.attention_mask.resize(len);
    s.type_ids.resize(len);
  }
  return TokenBatch::from_sequences(cut);
}

// ---------------------------------------------------------------- augmentation

Lexicon load_lexicon(const std::filesystem::path& path) {
  Lexicon lex;
  for (const auto& line : read_lines(path)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    const std::string word = line.substr(0, tab);
    std::vector<std::string> syns;
    std::stringstream ss(line.substr(tab + 1));
    std::string s;
    while (std::getline(ss, s, ','))
      if (!s.empty()) syns.push_back(s);
    if (!word.empty() && !syns.empty()) lex[word] = std::move(syns);
  }
  return lex;
}

namespace {

std::string augment_text(const std::string& text, const Lexicon& lex, double rate, Rng& rng) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (std::isspace(static_cast<unsigned char>(text[i]))) {
      out.push_back(text[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    const std::string word = text.substr(i, j - i);
    auto it = lex.find(word);
    if (it != lex.end() && rng.uniform() < rate)
      out += it->second[rng.below(it->second.size())];
    else
      out += word;
    i = j;
  }
  return out;
}

}  // namespace

LabeledExample synonym_augment(const LabeledExample& example, const Lexicon& lexicon, double rate, Rng& rng) {
  if (!(rate >= 0 && rate <= 1)) throw Error(ErrorKind::config, "augmentation rate must be in [0, 1]");
  if (lexicon.empty() || rate == 0) return example;
  LabeledExample out = example;
  out.text = augment_text(example.text, lexicon, rate, rng);
  if (example.text_b) out.text_b = augment_text(*example.text_b, lexicon, rate, rng);
  return out;
}

// ---------------------------------------------------------------- synthetic data

SyntheticTask generate_synthetic_task(const SyntheticTaskSpec& spec, Rng& rng) {
  if (spec.classes < 2) throw Error(ErrorKind::config, "synthetic task needs at least two classes");
  if (spec.vocab_size < spec.classes) throw Error(ErrorKind::config, "synthetic vocab smaller than class count");
  if (!(spec.signal_strength >= 0 && spec.signal_strength <= 1))
    throw Error(ErrorKind::config, "signal strength must be in [0, 1]");
  if (spec.words_per_example < (spec.pair ? 2u : 1u))
    throw Error(ErrorKind::config, "too few words per example");
  const std::size_t slice = spec.vocab_size / spec.classes;
  const auto draw_words = [&](std::size_t cls, std::size_t n) {
    std::string s;
    for (std::size_t w = 0; w < n; ++w) {
      const std::size_t id = rng.uniform() < spec.signal_strength ? cls * slice + rng.below(slice)
                                                                   : rng.below(spec.vocab_size);
      if (w) s.push_back(' ');
      s += "w" + std::to_string(id);
    }
    return s;
  };
  const auto make = [&](std::size_t per_class) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t c = 0; c < spec.classes; ++c) {
        LabeledExample ex;
        if (spec.pair) {
          const std::size_t na = spec.words_per_example / 2;
          ex.text = draw_words(c, na);
          ex.text_b = draw_words(c, spec.words_per_example - na);
        } else {
          ex.text = draw_words(c, spec.words_per_example);
        }
        ex.label = static_cast<double>(c);
        out.push_back(std::move(ex));
      }
    shuffle_in_place(out, rng);
    return out;
  };
  SyntheticTask task;
  task.train = make(spec.examples_per_class);
  task.held_out = make(spec.held_out_per_class);
  return task;
}

namespace {

std::string pseudo_word(std::size_t index) {
  static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                            "p", "r", "s", "t", "v", "z"};
  static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};
  constexpr std::size_t kSyl = 14 * 5;
  const auto syl = [&](std::size_t s) { return std::string(kOnsets[s / 5]) + kVowels[s % 5]; };
  const std::size_t code = index * 37 + 11;  // spreads neighbours across syllables
  return syl(code % kSyl) + syl((code / kSyl) % kSyl);
}

}  // namespace

std::vector<std::string> generate_synthetic_corpus(std::size_t lines, Rng& rng) {
  constexpr std::size_t kTopics = 8, kNouns = 10, kVerbs = 6, kAdjs = 6;
  constexpr std::size_t kPerTopic = kNouns + kVerbs + kAdjs;
  const auto word = [](std::size_t topic, std::size_t slot) { return pseudo_word(topic * kPerTopic + slot); };
  const auto noun = [&](std::size_t t) { return word(t, rng.below(kNouns)); };
  const auto verb = [&](std::size_t t) { return word(t, kNouns + rng.below(kVerbs)); };
  const auto adj = [&](std::size_t t) { return word(t, kNouns + kVerbs + rng.below(kAdjs)); };

  std::vector<std::string> out;
  out.reserve(lines);
  for (std::size_t i = 0; i < lines; ++i) {
    const std::size_t t = rng.below(kTopics);
    const std::size_t sentences = 2 + rng.below(2);
    std::string line;
    for (std::size_t s = 0; s < sentences; ++s) {
      if (s) line.push_back(' ');
      switch (rng.below(4)) {
        case 0: line += "the " + adj(t) + " " + noun(t) + " " + verb(t) + " the " + noun(t) + " ."; break;
        case 1: line += "a " + noun(t) + " " + verb(t) + " with the " + adj(t) + " " + noun(t) + " ."; break;
        case 2: line += "this " + noun(t) + " is very " + adj(t) + " ."; break;
        default: line += "the " + noun(t) + " of the " + noun(t) + " " + verb(t) + " ."; break;
      }
    }
    out.push_back(std::move(line));
  }
  return out;
}

std::vector<std::string> generate_synthetic_posts(std::size_t mild, std::size_t severe, std::size_t noise, Rng& rng) {
  const auto words = [&](std::size_t n) {
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
      if (i) s.push_back(' ');
      s += pseudo_word(rng.below(200));
    }
    return s;
  };
  const auto post = [&](const std::string& sub, std::int64_t score, const json& body) {
    json j{{"title", words(1 + rng.below(6))}, {"body", body}, {"score", score}, {"subreddit", sub}};
    if (rng.below(20) == 0) j["title"] = nullptr;
    return j.dump();
  };
  const auto body = [&]() -> json {
    switch (rng.below(10)) {
      case 0: return nullptr;
      default: return words(3 + rng.below(20));
    }
  };
  std::vector<std::string> out;
  for (std::size_t i = 0; i < mild; ++i) out.push_back(post("ADHD", static_cast<std::int64_t>(rng.below(3)), body()));
  for (std::size_t i = 0; i < severe; ++i) {
    // Heavy tail up to the observed maximum of 655.
    const std::int64_t score = rng.below(10) == 0 ? 655 : static_cast<std::int64_t>(3 + rng.below(120));
    out.push_back(post("ADHD", score, body()));
  }
  for (std::size_t i = 0; i < noise; ++i) {
    out.push_back(post("depression", static_cast<std::int64_t>(rng.below(50)), body()));
    out.push_back(post("ADHD", static_cast<std::int64_t>(rng.below(50)), "[removed]"));
    out.push_back(post("ADHD", static_cast<std::int64_t>(rng.below(50)), "[deleted]"));
    out.push_back("{\"title\": \"broken\", \"score\": ");
  }
  shuffle_in_place(out, rng);
  return out;
}

// ---------------------------------------------------------------- I/O

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::string example_to_json(const LabeledExample& e) {
  json j;
  if (e.text_b) {
    j["text_a"] = e.text;
    j["text_b"] = *e.text_b;
  } else {
    j["text"] = e.text;
  }
  if (e.label == std::floor(e.label) && std::abs(e.label) < 1e15)
    j["label"] = static_cast<std::int64_t>(e.label);
  else
    j["label"] = e.label;
  return j.dump();
}

std::vector<LabeledExample> read_examples(const std::filesystem::path& path) {
  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const json j = json::parse(line, nullptr, false);
    const auto bad = [&](const std::string& why) {
      throw Error(ErrorKind::input, path.string() + ":" + std::to_string(line_no) + ": " + why);
    };
    if (j.is_discarded() || !j.is_object()) bad("not a JSON object");
    LabeledExample e;
    if (j.contains("text_a")) {
      if (!j["text_a"].is_string() || !j.contains("text_b") || !j["text_b"].is_string())
        bad("pair records need string text_a and text_b");
      e.text = j["text_a"].get<std::string>();
      e.text_b = j["text_b"].get<std::string>();
    } else if (j.contains("text") && j["text"].is_string()) {
      e.text = j["text"].get<std::string>();
    } else {
      bad("missing text field");
    }
    if (!j.contains("label") || !j["label"].is_number()) bad("missing numeric label");
    e.label = j["label"].get<double>();
    out.push_back(std::move(e));
  }
  return out;
}

void write_examples(const std::filesystem::path& path, std::span<const LabeledExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (const auto& e : examples) out << example_to_json(e) << '\n';
}

}  // namespace kdforge
