// SPDX-License-Identifier: Apache-2.0
// Command-line and checkpoint fixtures shared by the CLI tests and the
// acceptance run.
#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "kdforge/checkpoint.hpp"
#include "kdforge/cli.hpp"
#include "kdforge/data.hpp"
#include "kdforge/model.hpp"
#include "kdforge/tokenizer.hpp"

namespace kdforge::testing {

struct CliResult {
  int code = 0;
  std::string out, err;
};

inline CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "kdforge");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Small MLM-headed checkpoint whose vocabulary covers the given texts.
inline void write_small_model(const std::filesystem::path& path, std::span<const std::string> texts,
                              std::uint64_t seed, std::size_t hidden = 32, std::size_t layers = 2) {
  Checkpoint ck;
  const auto vocab = build_vocab(texts, 400);
  ck.config.hidden_size = hidden;
  ck.config.num_hidden_layers = layers;
  ck.config.num_attention_heads = 2;
  ck.config.intermediate_size = 4 * hidden;
  ck.config.max_position_embeddings = 64;
  ck.config.vocab_size = vocab.size();
  ck.heads = HeadSet{true, std::nullopt};
  ck.vocab = vocab.pieces();
  Rng rng(seed);
  ck.params = init_params<float>(ck.config, rng, ck.heads);
  save_checkpoint(path, ck);
}

inline std::vector<std::string> texts_of(std::span<const LabeledExample> examples) {
  std::vector<std::string> t;
  for (const auto& e : examples) {
    t.push_back(e.text);
    if (e.text_b) t.push_back(*e.text_b);
  }
  return t;
}

}  // namespace kdforge::testing
