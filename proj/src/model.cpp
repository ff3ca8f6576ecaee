// SPDX-License-Identifier: Apache-2.0
#include "kdforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kdforge/simd/kernels.hpp"

namespace kdforge {

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "model config: " + m); };
  if (hidden_size == 0 || num_attention_heads == 0 || intermediate_size == 0 || vocab_size == 0 ||
      max_position_embeddings == 0 || type_vocab_size == 0)
    fail("all extents must be positive");
  if (hidden_size % num_attention_heads != 0)
    fail("hidden_size " + std::to_string(hidden_size) + " not divisible by num_attention_heads " +
         std::to_string(num_attention_heads));
  if (vocab_size < static_cast<std::size_t>(SpecialIds::count)) fail("vocab_size must cover reserved ids");
  if (!(hidden_dropout >= 0 && hidden_dropout < 1)) fail("hidden dropout must be in [0, 1)");
  if (!(attention_dropout >= 0 && attention_dropout < 1)) fail("attention dropout must be in [0, 1)");
  if (!(layer_norm_eps >= 0)) fail("layer_norm_eps must be >= 0");
  if (!(initializer_range > 0)) fail("initializer_range must be > 0");
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"hidden_size", hidden_size},
      {"num_hidden_layers", num_hidden_layers},
      {"num_attention_heads", num_attention_heads},
      {"intermediate_size", intermediate_size},
      {"vocab_size", vocab_size},
      {"max_position_embeddings", max_position_embeddings},
      {"type_vocab_size", type_vocab_size},
      {"hidden_dropout_prob", hidden_dropout},
      {"attention_probs_dropout_prob", attention_dropout},
      {"layer_norm_eps", layer_norm_eps},
      {"initializer_range", initializer_range},
      {"hidden_act", "gelu"},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.num_hidden_layers = j.value("num_hidden_layers", c.num_hidden_layers);
  c.num_attention_heads = j.value("num_attention_heads", c.num_attention_heads);
  c.intermediate_size = j.value("intermediate_size", c.intermediate_size);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_position_embeddings = j.value("max_position_embeddings", c.max_position_embeddings);
  c.type_vocab_size = j.value("type_vocab_size", c.type_vocab_size);
  c.hidden_dropout = j.value("hidden_dropout_prob", c.hidden_dropout);
  c.attention_dropout = j.value("attention_probs_dropout_prob", c.attention_dropout);
  c.layer_norm_eps = j.value("layer_norm_eps", c.layer_norm_eps);
  c.initializer_range = j.value("initializer_range", c.initializer_range);
  c.validate();
  return c;
}

void TaskHeadSpec::validate() const {
  if (num_labels == 0) throw Error(ErrorKind::config, "task head needs at least one output");
  if (kind == HeadKind::regression && num_labels != 1)
    throw Error(ErrorKind::config, "regression head must have exactly one output");
  if (kind == HeadKind::classification && num_labels < 2)
    throw Error(ErrorKind::config, "classification head needs at least two labels");
}

nlohmann::json TaskHeadSpec::to_json() const {
  return {{"kind", kind == HeadKind::regression ? "regression" : "classification"},
          {"num_labels", num_labels}};
}

TaskHeadSpec TaskHeadSpec::from_json(const nlohmann::json& j) {
  TaskHeadSpec h;
  h.kind = j.at("kind").get<std::string>() == "regression" ? HeadKind::regression
                                                            : HeadKind::classification;
  h.num_labels = j.at("num_labels").get<std::size_t>();
  h.validate();
  return h;
}

// ---------------------------------------------------------------- params

template <typename T>
void EncoderParams<T>::add(std::string name, BasicTensor<T> tensor) {
  if (index_.count(name)) throw Error(ErrorKind::state, "duplicate parameter name " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

template <typename T>
bool EncoderParams<T>::has(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
BasicTensor<T>& EncoderParams<T>::get(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw Error(ErrorKind::state, "no parameter named " + std::string(name));
  return entries_[it->second].second;
}

template <typename T>
const BasicTensor<T>& EncoderParams<T>::get(std::string_view name) const {
  return const_cast<EncoderParams*>(this)->get(name);
}

template <typename T>
void EncoderParams<T>::erase_prefix(std::string_view prefix) {
  std::erase_if(entries_, [&](const Entry& e) { return e.first.starts_with(prefix); });
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].first, i);
}

template <typename T>
EncoderParams<T> EncoderParams<T>::zeros_like() const {
  EncoderParams out;
  for (const auto& [n, t] : entries_) out.add(n, BasicTensor<T>(t.shape()));
  return out;
}

template <typename T>
void EncoderParams<T>::set_zero() {
  for (auto& [n, t] : entries_) t.fill(T(0));
}

namespace {

std::string layer_prefix(std::size_t i) { return "encoder.layer." + std::to_string(i) + "."; }

void append_task_shapes(std::vector<std::pair<std::string, Shape>>& out, const ModelConfig& c,
                        const TaskHeadSpec& head) {
  out.emplace_back("classifier.weight", Shape{c.hidden_size, head.num_labels});
  out.emplace_back("classifier.bias", Shape{head.num_labels});
}

}  // namespace

std::vector<std::pair<std::string, Shape>> expected_param_shapes(const ModelConfig& c,
                                                                 const HeadSet& heads) {
  c.validate();
  const std::size_t h = c.hidden_size, ff = c.intermediate_size;
  std::vector<std::pair<std::string, Shape>> out{
      {"embeddings.word_embeddings.weight", {c.vocab_size, h}},
      {"embeddings.position_embeddings.weight", {c.max_position_embeddings, h}},
      {"embeddings.token_type_embeddings.weight", {c.type_vocab_size, h}},
      {"embeddings.LayerNorm.weight", {h}},
      {"embeddings.LayerNorm.bias", {h}},
  };
  for (std::size_t i = 0; i < c.num_hidden_layers; ++i) {
    const auto p = layer_prefix(i);
    for (const char* proj : {"query", "key", "value"}) {
      out.emplace_back(p + "attention.self." + proj + ".weight", Shape{h, h});
      out.emplace_back(p + "attention.self." + proj + ".bias", Shape{h});
    }
    out.emplace_back(p + "attention.output.dense.weight", Shape{h, h});
    out.emplace_back(p + "attention.output.dense.bias", Shape{h});
    out.emplace_back(p + "attention.output.LayerNorm.weight", Shape{h});
    out.emplace_back(p + "attention.output.LayerNorm.bias", Shape{h});
    out.emplace_back(p + "intermediate.dense.weight", Shape{h, ff});
    out.emplace_back(p + "intermediate.dense.bias", Shape{ff});
    out.emplace_back(p + "output.dense.weight", Shape{ff, h});
    out.emplace_back(p + "output.dense.bias", Shape{h});
    out.emplace_back(p + "output.LayerNorm.weight", Shape{h});
    out.emplace_back(p + "output.LayerNorm.bias", Shape{h});
  }
  if (heads.mlm) {
    out.emplace_back("cls.predictions.transform.dense.weight", Shape{h, h});
    out.emplace_back("cls.predictions.transform.dense.bias", Shape{h});
    out.emplace_back("cls.predictions.transform.LayerNorm.weight", Shape{h});
    out.emplace_back("cls.predictions.transform.LayerNorm.bias", Shape{h});
    out.emplace_back("cls.predictions.bias", Shape{c.vocab_size});
  }
  if (heads.task) {
    heads.task->validate();
    append_task_shapes(out, c, *heads.task);
  }
  return out;
}

bool decays(std::string_view name) {
  return !(name.ends_with(".bias") || name.find("LayerNorm") != std::string_view::npos);
}

namespace {

// Standard deviation of a unit normal cut at +-2.
double truncated_unit_std() {
  const double pdf = std::exp(-2.0) / std::sqrt(2 * std::numbers::pi);
  const double mass = std::erf(2.0 / std::numbers::sqrt2);
  return std::sqrt(1 - 4 * pdf / mass);
}

// The cut at +-2 sigma shrinks the spread by about 12%; the underlying scale
// is widened so the sampled weights have standard deviation `range`.
template <typename T>
BasicTensor<T> init_tensor(const std::string& name, const Shape& shape, double range, Rng& rng) {
  BasicTensor<T> t(shape);
  if (name.find("LayerNorm.weight") != std::string::npos) {
    t.fill(T(1));
  } else if (shape.size() == 2) {
    const double scale = range / truncated_unit_std();
    for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(scale, 2.0));
  }
  return t;
}

}  // namespace

template <typename T>
EncoderParams<T> init_params(const ModelConfig& config, Rng& rng, const HeadSet& heads) {
  EncoderParams<T> p;
  for (const auto& [name, shape] : expected_param_shapes(config, heads))
    p.add(name, init_tensor<T>(name, shape, config.initializer_range, rng));
  return p;
}

template <typename T>
void attach_task_head(EncoderParams<T>& params, const ModelConfig& config,
                      const TaskHeadSpec& head, Rng& rng) {
  head.validate();
  params.erase_prefix("classifier.");
  std::vector<std::pair<std::string, Shape>> shapes;
  append_task_shapes(shapes, config, head);
  for (const auto& [name, shape] : shapes)
    params.add(name, init_tensor<T>(name, shape, config.initializer_range, rng));
}

template <typename T>
void check_param_shapes(const EncoderParams<T>& params, const ModelConfig& config,
                        const HeadSet& heads) {
  const auto expected = expected_param_shapes(config, heads);
  for (const auto& [name, shape] : expected) {
    if (!params.has(name)) throw Error(ErrorKind::dimension, "missing parameter " + name);
    if (params.get(name).shape() != shape)
      throw Error(ErrorKind::dimension, "parameter " + name + " has shape " +
                                            shape_str(params.get(name).shape()) + ", expected " +
                                            shape_str(shape));
  }
  if (params.entries().size() != expected.size())
    throw Error(ErrorKind::dimension, "parameter set has " + std::to_string(params.entries().size()) +
                                          " tensors, expected " + std::to_string(expected.size()));
}

// ---------------------------------------------------------------- batch

TokenBatch TokenBatch::from_sequences(std::span<const TokenizedSequence> seqs) {
  TokenBatch b;
  if (seqs.empty()) throw Error(ErrorKind::empty_batch, "batch has no sequences");
  b.batch = seqs.size();
  b.seq_len = seqs.front().ids.size();
  for (const auto& s : seqs) {
    if (s.ids.size() != b.seq_len || s.attention_mask.size() != b.seq_len ||
        s.type_ids.size() != b.seq_len)
      throw Error(ErrorKind::dimension, "sequences in a batch must share one padded length");
    b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
    b.attention_mask.insert(b.attention_mask.end(), s.attention_mask.begin(), s.attention_mask.end());
    b.type_ids.insert(b.type_ids.end(), s.type_ids.begin(), s.type_ids.end());
  }
  return b;
}

// ---------------------------------------------------------------- attention

namespace {

// [B*L, H*dk] -> [B*H, L, dk]
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t B, std::size_t L, std::size_t H) {
  const std::size_t dk = x.cols() / H;
  BasicTensor<T> out({B * H, L, dk});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t hd = 0; hd < H; ++hd) {
        const T* src = x.ptr() + (b * L + l) * H * dk + hd * dk;
        std::copy(src, src + dk, out.ptr() + ((b * H + hd) * L + l) * dk);
      }
  return out;
}

// [B*H, L, dk] -> [B*L, H*dk]
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t B, std::size_t L, std::size_t H) {
  const std::size_t dk = x.cols();
  BasicTensor<T> out({B * L, H * dk});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t hd = 0; hd < H; ++hd) {
        const T* src = x.ptr() + ((b * H + hd) * L + l) * dk;
        std::copy(src, src + dk, out.ptr() + (b * L + l) * H * dk + hd * dk);
      }
  return out;
}

template <typename T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  simd::axpy(T(1), src.ptr(), dst.ptr(), dst.size());
}

}  // namespace

template <typename T>
BasicTensor<T> MultiHeadAttention<T>::forward(const BasicTensor<T>& x, const AttentionWeights<T>& w,
                                              std::span<const std::int32_t> mask, Rng* rng,
                                              bool training) {
  if (x.rank() != 3) throw Error(ErrorKind::dimension, "attention input must be [B, L, h], got " + shape_str(x.shape()));
  batch_ = x.dim(0);
  len_ = x.dim(1);
  hidden_ = x.dim(2);
  if (hidden_ % heads_ != 0)
    throw Error(ErrorKind::dimension, "hidden size " + std::to_string(hidden_) +
                                          " not divisible by " + std::to_string(heads_) + " heads");
  if (mask.size() != batch_ * len_)
    throw Error(ErrorKind::dimension, "attention mask has " + std::to_string(mask.size()) +
                                          " entries, expected " + std::to_string(batch_ * len_));
  if (training && dropout_ > 0 && !rng) throw Error(ErrorKind::config, "training forward needs an rng");
  const std::size_t B = batch_, L = len_, H = heads_, dk = hidden_ / H;
  const auto x2 = x.reshaped({B * L, hidden_});
  const auto q = split_heads(q_.forward(x2, w.wq, w.bq), B, L, H);
  const auto k = split_heads(k_.forward(x2, w.wk, w.bk), B, L, H);
  const auto v = split_heads(v_.forward(x2, w.wv, w.bv), B, L, H);

  auto scores = scores_.forward(q, k, Transpose::b);
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t hd = 0; hd < H; ++hd)
      for (std::size_t i = 0; i < L; ++i) {
        T* row = scores.ptr() + ((b * H + hd) * L + i) * L;
        for (std::size_t j = 0; j < L; ++j) {
          row[j] *= scale;
          if (mask[b * L + j] == 0) row[j] += T(-1e9);
        }
      }
  const auto probs = softmax_.forward(scores);
  Rng dummy;
  const auto dropped = drop_.forward(probs, dropout_, rng ? *rng : dummy, training);
  const auto ctx = context_.forward(dropped, v);
  return o_.forward(merge_heads(ctx, B, L, H), w.wo, w.bo).reshaped({B, L, hidden_});
}

template <typename T>
typename MultiHeadAttention<T>::Grads MultiHeadAttention<T>::backward(const BasicTensor<T>& dy) const {
  const std::size_t B = batch_, L = len_, H = heads_, dk = hidden_ / H;
  auto go = o_.backward(dy.reshaped({B * L, hidden_}));
  auto dctx = split_heads(go.x, B, L, H);
  auto gc = context_.backward(dctx);
  auto dprobs = drop_.backward(gc.a);
  auto dscores = softmax_.backward(dprobs);
  simd::scale(T(1) / std::sqrt(static_cast<T>(dk)), dscores.ptr(), dscores.size());
  auto gs = scores_.backward(dscores);
  auto gq = q_.backward(merge_heads(gs.a, B, L, H));
  auto gk = k_.backward(merge_heads(gs.b, B, L, H));
  auto gv = v_.backward(merge_heads(gc.b, B, L, H));
  BasicTensor<T> dx = gq.x;
  add_into(dx, gk.x);
  add_into(dx, gv.x);
  return Grads{dx.reshaped({B, L, hidden_}),
               std::move(gq.weight), std::move(gq.bias),
               std::move(gk.weight), std::move(gk.bias),
               std::move(gv.weight), std::move(gv.bias),
               std::move(go.weight), std::move(go.bias)};
}

// ---------------------------------------------------------------- encoder

template <typename T>
Encoder<T>::Encoder(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
}

template <typename T>
BasicTensor<T> Encoder<T>::encode(const TokenBatch& batch, const EncoderParams<T>& p, Rng* rng,
                                  bool training) {
  const auto& c = config_;
  const std::size_t B = batch.batch, L = batch.seq_len, h = c.hidden_size;
  if (B == 0 || L == 0) throw Error(ErrorKind::empty_batch, "empty token batch");
  if (L > c.max_position_embeddings)
    throw Error(ErrorKind::dimension, "sequence length " + std::to_string(L) +
                                          " exceeds max_position_embeddings " +
                                          std::to_string(c.max_position_embeddings));
  if (batch.ids.size() != B * L || batch.attention_mask.size() != B * L || batch.type_ids.size() != B * L)
    throw Error(ErrorKind::dimension, "token batch arrays do not match B*L");
  if (training && !rng) throw Error(ErrorKind::config, "training forward needs an rng");
  for (std::size_t i = 0; i < B * L; ++i) {
    if (batch.ids[i] < 0 || static_cast<std::size_t>(batch.ids[i]) >= c.vocab_size)
      throw Error(ErrorKind::vocab, "token id " + std::to_string(batch.ids[i]) + " at position " +
                                        std::to_string(i) + " outside vocab of " +
                                        std::to_string(c.vocab_size));
    if (batch.type_ids[i] < 0 || static_cast<std::size_t>(batch.type_ids[i]) >= c.type_vocab_size)
      throw Error(ErrorKind::vocab, "type id " + std::to_string(batch.type_ids[i]) + " out of range");
  }
  batch_ = batch;
  last_head_ = Head::none;
  Rng dummy;
  Rng& r = rng ? *rng : dummy;

  const auto& word = p.get("embeddings.word_embeddings.weight");
  const auto& pos = p.get("embeddings.position_embeddings.weight");
  const auto& type = p.get("embeddings.token_type_embeddings.weight");
  BasicTensor<T> emb({B * L, h});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t row = b * L + l;
      T* out = emb.ptr() + row * h;
      const T* w = word.ptr() + static_cast<std::size_t>(batch.ids[row]) * h;
      const T* ps = pos.ptr() + l * h;
      const T* ty = type.ptr() + static_cast<std::size_t>(batch.type_ids[row]) * h;
      for (std::size_t j = 0; j < h; ++j) out[j] = w[j] + ps[j] + ty[j];
    }
  auto x = emb_ln_.forward(emb, p.get("embeddings.LayerNorm.weight"), p.get("embeddings.LayerNorm.bias"),
                           c.layer_norm_eps);
  x = emb_drop_.forward(x, c.hidden_dropout, r, training);

  layers_.clear();
  layers_.reserve(c.num_hidden_layers);
  for (std::size_t i = 0; i < c.num_hidden_layers; ++i) {
    const auto pre = layer_prefix(i);
    const auto g = [&](const std::string& s) -> const BasicTensor<T>& { return p.get(pre + s); };
    auto& lc = layers_.emplace_back(c);
    AttentionWeights<T> w{g("attention.self.query.weight"), g("attention.self.query.bias"),
                          g("attention.self.key.weight"),   g("attention.self.key.bias"),
                          g("attention.self.value.weight"), g("attention.self.value.bias"),
                          g("attention.output.dense.weight"), g("attention.output.dense.bias")};
    auto a = lc.attn.forward(x.reshaped({B, L, h}), w, batch.attention_mask, &r, training);
    a = lc.attn_drop.forward(a.reshaped({B * L, h}), c.hidden_dropout, r, training);
    add_into(a, x);
    auto x1 = lc.ln1.forward(a, g("attention.output.LayerNorm.weight"),
                             g("attention.output.LayerNorm.bias"), c.layer_norm_eps);
    auto f = lc.act.forward(lc.ffn_in.forward(x1, g("intermediate.dense.weight"), g("intermediate.dense.bias")));
    auto f2 = lc.ffn_out.forward(f, g("output.dense.weight"), g("output.dense.bias"));
    f2 = lc.ffn_drop.forward(f2, c.hidden_dropout, r, training);
    add_into(f2, x1);
    x = lc.ln2.forward(f2, g("output.LayerNorm.weight"), g("output.LayerNorm.bias"), c.layer_norm_eps);
  }
  return x.reshaped({B, L, h});
}

template <typename T>
BasicTensor<T> Encoder<T>::forward_mlm(const TokenBatch& batch, const EncoderParams<T>& params,
                                       Rng* rng, bool training) {
  std::vector<std::size_t> all(batch.batch * batch.seq_len);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto logits = forward_mlm_at(batch, all, params, rng, training);
  return logits.reshaped({batch.batch, batch.seq_len, config_.vocab_size});
}

template <typename T>
BasicTensor<T> Encoder<T>::forward_mlm_at(const TokenBatch& batch, std::span<const std::size_t> positions,
                                          const EncoderParams<T>& p, Rng* rng, bool training) {
  if (positions.empty()) throw Error(ErrorKind::empty_batch, "no MLM positions selected");
  const auto hidden = encode(batch, p, rng, training);
  const std::size_t h = config_.hidden_size, n = batch.batch * batch.seq_len;
  BasicTensor<T> sel({positions.size(), h});
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] >= n) throw Error(ErrorKind::dimension, "MLM position out of range");
    std::copy_n(hidden.ptr() + positions[i] * h, h, sel.ptr() + i * h);
  }
  mlm_rows_.assign(positions.begin(), positions.end());
  auto t = mlm_act_.forward(mlm_dense_.forward(sel, p.get("cls.predictions.transform.dense.weight"),
                                               p.get("cls.predictions.transform.dense.bias")));
  t = mlm_ln_.forward(t, p.get("cls.predictions.transform.LayerNorm.weight"),
                      p.get("cls.predictions.transform.LayerNorm.bias"), config_.layer_norm_eps);
  auto logits = mlm_decoder_.forward(t, p.get("embeddings.word_embeddings.weight"), Transpose::b);
  const auto& bias = p.get("cls.predictions.bias");
  for (std::size_t r = 0; r < logits.rows(); ++r)
    simd::axpy(T(1), bias.ptr(), logits.ptr() + r * logits.cols(), logits.cols());
  last_head_ = Head::mlm;
  return logits;
}

template <typename T>
BasicTensor<T> Encoder<T>::forward_task(const TokenBatch& batch, const EncoderParams<T>& p,
                                        const TaskHeadSpec& head, Rng* rng, bool training) {
  head.validate();
  const auto hidden = encode(batch, p, rng, training);
  const std::size_t h = config_.hidden_size, B = batch.batch, L = batch.seq_len;
  BasicTensor<T> cls({B, h});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(hidden.ptr() + b * L * h, h, cls.ptr() + b * h);
  Rng dummy;
  cls = task_drop_.forward(cls, config_.hidden_dropout, rng ? *rng : dummy, training);
  const auto& w = p.get("classifier.weight");
  if (w.dim(1) != head.num_labels)
    throw Error(ErrorKind::dimension, "classifier has " + std::to_string(w.dim(1)) +
                                          " outputs but head expects " + std::to_string(head.num_labels));
  auto logits = classifier_.forward(cls, w, p.get("classifier.bias"));
  last_head_ = Head::task;
  return logits;
}

template <typename T>
void Encoder<T>::backward(const BasicTensor<T>& dlogits, EncoderParams<T>& grads) {
  if (last_head_ == Head::none)
    throw Error(ErrorKind::state, "encoder backward called before a head forward");
  const std::size_t h = config_.hidden_size, B = batch_.batch, L = batch_.seq_len;
  BasicTensor<T> dhidden({B * L, h});
  switch (last_head_) {
    case Head::none:
      break;
    case Head::mlm: {
      auto gd = mlm_decoder_.backward(dlogits.reshaped({mlm_rows_.size(), config_.vocab_size}));
      add_into(grads.get("embeddings.word_embeddings.weight"), gd.b);
      auto& gbias = grads.get("cls.predictions.bias");
      for (std::size_t r = 0; r < gd.a.rows(); ++r)
        simd::axpy(T(1), dlogits.ptr() + r * config_.vocab_size, gbias.ptr(), config_.vocab_size);
      auto gln = mlm_ln_.backward(gd.a);
      add_into(grads.get("cls.predictions.transform.LayerNorm.weight"), gln.gain);
      add_into(grads.get("cls.predictions.transform.LayerNorm.bias"), gln.shift);
      auto gdense = mlm_dense_.backward(mlm_act_.backward(gln.x));
      add_into(grads.get("cls.predictions.transform.dense.weight"), gdense.weight);
      add_into(grads.get("cls.predictions.transform.dense.bias"), gdense.bias);
      for (std::size_t i = 0; i < mlm_rows_.size(); ++i)
        simd::axpy(T(1), gdense.x.ptr() + i * h, dhidden.ptr() + mlm_rows_[i] * h, h);
      break;
    }
    case Head::task: {
      auto gc = classifier_.backward(dlogits);
      add_into(grads.get("classifier.weight"), gc.weight);
      add_into(grads.get("classifier.bias"), gc.bias);
      auto dcls = task_drop_.backward(gc.x);
      for (std::size_t b = 0; b < B; ++b)
        std::copy_n(dcls.ptr() + b * h, h, dhidden.ptr() + b * L * h);
      break;
    }
  }
  backward_encoder(std::move(dhidden), grads);
}

template <typename T>
void Encoder<T>::backward_encoder(BasicTensor<T> dx, EncoderParams<T>& grads) {
  const std::size_t h = config_.hidden_size, B = batch_.batch, L = batch_.seq_len;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    auto& lc = layers_[i];
    const auto pre = layer_prefix(i);
    const auto g = [&](const std::string& s) -> BasicTensor<T>& { return grads.get(pre + s); };

    auto gln2 = lc.ln2.backward(dx);
    add_into(g("output.LayerNorm.weight"), gln2.gain);
    add_into(g("output.LayerNorm.bias"), gln2.shift);
    // gln2.x flows into both the residual (x1) and the FFN branch.
    auto gout = lc.ffn_out.backward(lc.ffn_drop.backward(gln2.x));
    add_into(g("output.dense.weight"), gout.weight);
    add_into(g("output.dense.bias"), gout.bias);
    auto gin = lc.ffn_in.backward(lc.act.backward(gout.x));
    add_into(g("intermediate.dense.weight"), gin.weight);
    add_into(g("intermediate.dense.bias"), gin.bias);
    BasicTensor<T> dx1 = gln2.x;
    add_into(dx1, gin.x);

    auto gln1 = lc.ln1.backward(dx1);
    add_into(g("attention.output.LayerNorm.weight"), gln1.gain);
    add_into(g("attention.output.LayerNorm.bias"), gln1.shift);
    auto da = lc.attn_drop.backward(gln1.x);
    auto ga = lc.attn.backward(da.reshaped({B, L, h}));
    add_into(g("attention.self.query.weight"), ga.wq);
    add_into(g("attention.self.query.bias"), ga.bq);
    add_into(g("attention.self.key.weight"), ga.wk);
    add_into(g("attention.self.key.bias"), ga.bk);
    add_into(g("attention.self.value.weight"), ga.wv);
    add_into(g("attention.self.value.bias"), ga.bv);
    add_into(g("attention.output.dense.weight"), ga.wo);
    add_into(g("attention.output.dense.bias"), ga.bo);
    dx = gln1.x;
    add_into(dx, ga.x.reshaped({B * L, h}));
  }

  auto demb = emb_ln_.backward(emb_drop_.backward(dx));
  add_into(grads.get("embeddings.LayerNorm.weight"), demb.gain);
  add_into(grads.get("embeddings.LayerNorm.bias"), demb.shift);
  auto& gword = grads.get("embeddings.word_embeddings.weight");
  auto& gpos = grads.get("embeddings.position_embeddings.weight");
  auto& gtype = grads.get("embeddings.token_type_embeddings.weight");
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t row = b * L + l;
      const T* d = demb.x.ptr() + row * h;
      simd::axpy(T(1), d, gword.ptr() + static_cast<std::size_t>(batch_.ids[row]) * h, h);
      simd::axpy(T(1), d, gpos.ptr() + l * h, h);
      simd::axpy(T(1), d, gtype.ptr() + static_cast<std::size_t>(batch_.type_ids[row]) * h, h);
    }
}

template class EncoderParams<float>;
template class EncoderParams<double>;
template EncoderParams<float> init_params(const ModelConfig&, Rng&, const HeadSet&);
template EncoderParams<double> init_params(const ModelConfig&, Rng&, const HeadSet&);
template void attach_task_head(EncoderParams<float>&, const ModelConfig&, const TaskHeadSpec&, Rng&);
template void attach_task_head(EncoderParams<double>&, const ModelConfig&, const TaskHeadSpec&, Rng&);
template void check_param_shapes(const EncoderParams<float>&, const ModelConfig&, const HeadSet&);
template void check_param_shapes(const EncoderParams<double>&, const ModelConfig&, const HeadSet&);
template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace kdforge
