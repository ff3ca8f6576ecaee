// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kdforge/ops.hpp"
#include "kdforge/rng.hpp"
#include "kdforge/tensor.hpp"
#include "kdforge/tokenizer.hpp"

namespace kdforge {

/// Encoder hyperparameters. Defaults are the 29.8M-parameter student.
struct ModelConfig {
  std::size_t hidden_size = 384;
  std::size_t num_hidden_layers = 6;
  std::size_t num_attention_heads = 6;
  std::size_t intermediate_size = 3072;
  std::size_t vocab_size = 30522;
  std::size_t max_position_embeddings = 512;
  std::size_t type_vocab_size = 2;
  double hidden_dropout = 0.1;
  double attention_dropout = 0.1;
  double layer_norm_eps = 1e-12;
  double initializer_range = 0.02;

  std::size_t head_dim() const { return hidden_size / num_attention_heads; }
  /// Throws a config error on any violated invariant.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class HeadKind { classification, regression };

struct TaskHeadSpec {
  HeadKind kind = HeadKind::classification;
  std::size_t num_labels = 2;

  static TaskHeadSpec classification(std::size_t labels) { return {HeadKind::classification, labels}; }
  static TaskHeadSpec regression() { return {HeadKind::regression, 1}; }
  void validate() const;

  nlohmann::json to_json() const;
  static TaskHeadSpec from_json(const nlohmann::json& j);

  friend bool operator==(const TaskHeadSpec&, const TaskHeadSpec&) = default;
};

/// Which output heads a parameter set carries.
struct HeadSet {
  bool mlm = true;
  std::optional<TaskHeadSpec> task;
};

/// Named parameter tensors in a stable insertion order. Names follow the
/// usual BERT layout ("encoder.layer.3.attention.self.query.weight"); the MLM
/// decoder weight is the word-embedding matrix and has no entry of its own.
template <typename T>
class EncoderParams {
 public:
  using Entry = std::pair<std::string, BasicTensor<T>>;

  void add(std::string name, BasicTensor<T> tensor);
  bool has(std::string_view name) const;
  BasicTensor<T>& get(std::string_view name);
  const BasicTensor<T>& get(std::string_view name) const;
  /// Removes every entry whose name starts with `prefix`.
  void erase_prefix(std::string_view prefix);

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  EncoderParams zeros_like() const;
  void set_zero();

  template <typename U>
  EncoderParams<U> cast() const {
    EncoderParams<U> out;
    for (const auto& [n, t] : entries_) out.add(n, t.template cast<U>());
    return out;
  }

  friend bool operator==(const EncoderParams& a, const EncoderParams& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Name and shape of every tensor the given configuration and heads require.
std::vector<std::pair<std::string, Shape>> expected_param_shapes(const ModelConfig& config,
                                                                 const HeadSet& heads);

/// Truncated normal weights cut at +-2 sigma and scaled so their standard
/// deviation is initializer_range; zero biases, unit layer-norm gains.
template <typename T>
EncoderParams<T> init_params(const ModelConfig& config, Rng& rng, const HeadSet& heads = {});

/// Adds (or replaces) a freshly initialised task head.
template <typename T>
void attach_task_head(EncoderParams<T>& params, const ModelConfig& config,
                      const TaskHeadSpec& head, Rng& rng);

/// Throws a dimension error when a tensor is missing, unexpected, or misshaped.
template <typename T>
void check_param_shapes(const EncoderParams<T>& params, const ModelConfig& config,
                        const HeadSet& heads);

template <typename T>
std::size_t count_parameters(const EncoderParams<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params.entries()) n += t.size();
  return n;
}

/// Whether AdamW applies weight decay to the named tensor. Biases and
/// layer-norm gains/shifts are excluded.
bool decays(std::string_view param_name);

/// Padded token ids for a batch of equal-length sequences.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::int32_t> attention_mask;
  std::vector<std::int32_t> type_ids;

  static TokenBatch from_sequences(std::span<const TokenizedSequence> seqs);
};

/// Projection weights for one attention block. W tensors are [in, out].
template <typename T>
struct AttentionWeights {
  const BasicTensor<T>& wq; const BasicTensor<T>& bq;
  const BasicTensor<T>& wk; const BasicTensor<T>& bk;
  const BasicTensor<T>& wv; const BasicTensor<T>& bv;
  const BasicTensor<T>& wo; const BasicTensor<T>& bo;
};

/// Multi-head scaled dot-product self-attention including the output
/// projection. Masked key positions get -1e9 added before the softmax.
template <typename T>
class MultiHeadAttention {
 public:
  struct Grads {
    BasicTensor<T> x, wq, bq, wk, bk, wv, bv, wo, bo;
  };

  MultiHeadAttention(std::size_t num_heads, double dropout) : heads_(num_heads), dropout_(dropout) {}

  /// x: [B, L, h]; mask: B*L entries of 0/1.
  BasicTensor<T> forward(const BasicTensor<T>& x, const AttentionWeights<T>& w,
                         std::span<const std::int32_t> mask, Rng* rng, bool training);
  Grads backward(const BasicTensor<T>& dy) const;

  /// Post-softmax, pre-dropout weights of the last forward: [B*heads, L, L].
  const BasicTensor<T>& attention_probs() const { return softmax_.output(); }

 private:
  std::size_t heads_;
  double dropout_;
  std::size_t batch_ = 0, len_ = 0, hidden_ = 0;
  Linear<T> q_, k_, v_, o_;
  MatMul<T> scores_, context_;
  Softmax<T> softmax_;
  Dropout<T> drop_;
};

/// BERT-style post-LN encoder with tied MLM head and an optional
/// classification/regression head on the CLS position.
template <typename T>
class Encoder {
 public:
  explicit Encoder(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Final hidden states [B, L, h].
  BasicTensor<T> encode(const TokenBatch& batch, const EncoderParams<T>& params, Rng* rng,
                        bool training);
  /// MLM logits [B, L, vocab].
  BasicTensor<T> forward_mlm(const TokenBatch& batch, const EncoderParams<T>& params, Rng* rng,
                             bool training);
  /// MLM logits [P, vocab] for flat positions b * L + l only.
  BasicTensor<T> forward_mlm_at(const TokenBatch& batch, std::span<const std::size_t> positions,
                                const EncoderParams<T>& params, Rng* rng, bool training);
  /// Task logits [B, num_labels].
  BasicTensor<T> forward_task(const TokenBatch& batch, const EncoderParams<T>& params,
                              const TaskHeadSpec& head, Rng* rng, bool training);

  /// Accumulates d(loss)/d(params) into `grads` for the last forward call.
  void backward(const BasicTensor<T>& dlogits, EncoderParams<T>& grads);

 private:
  struct LayerCache {
    explicit LayerCache(const ModelConfig& c)
        : attn(c.num_attention_heads, c.attention_dropout) {}
    MultiHeadAttention<T> attn;
    Dropout<T> attn_drop;
    LayerNorm<T> ln1;
    Linear<T> ffn_in;
    Gelu<T> act;
    Linear<T> ffn_out;
    Dropout<T> ffn_drop;
    LayerNorm<T> ln2;
  };
  enum class Head { none, mlm, task };

  void backward_encoder(BasicTensor<T> dhidden, EncoderParams<T>& grads);

  ModelConfig config_;
  Head last_head_ = Head::none;
  TokenBatch batch_;
  LayerNorm<T> emb_ln_;
  Dropout<T> emb_drop_;
  std::vector<LayerCache> layers_;
  // MLM head
  std::vector<std::size_t> mlm_rows_;
  Linear<T> mlm_dense_;
  Gelu<T> mlm_act_;
  LayerNorm<T> mlm_ln_;
  MatMul<T> mlm_decoder_;
  // task head
  Dropout<T> task_drop_;
  Linear<T> classifier_;
};

}  // namespace kdforge
