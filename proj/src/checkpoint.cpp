// SPDX-License-Identifier: Apache-2.0
#include "kdforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kdforge/error.hpp"

namespace kdforge {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'B', 'K', 'D'};
constexpr std::uint8_t kDtypeF32 = 0;
const std::string kMomentM = "optim.m.";
const std::string kMomentV = "optim.v.";

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void str(const std::string& s) {
    uint<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    uint<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) uint<std::uint64_t>(d);
    uint<std::uint8_t>(kDtypeF32);
    for (float v : t.data()) uint<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n)
      throw Error(ErrorKind::checkpoint_truncated, "checkpoint ends at byte " + std::to_string(in_.size()) +
                                                       ", needed " + std::to_string(n) + " more from " +
                                                       std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str() {
    const auto n = uint<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> tensor() {
    std::string name = str();
    const auto rank = uint<std::uint32_t>();
    if (rank < 1 || rank > 3)
      throw Error(ErrorKind::io, "checkpoint tensor " + name + " has unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = uint<std::uint64_t>();
      if (d == 0) throw Error(ErrorKind::io, "checkpoint tensor " + name + " has a zero extent");
      numel *= d;
    }
    const auto dtype = uint<std::uint8_t>();
    if (dtype != kDtypeF32)
      throw Error(ErrorKind::io, "checkpoint tensor " + name + " has unknown dtype tag " + std::to_string(dtype));
    if (numel > (in_.size() - pos_) / 4) need(numel * 4);
    Tensor t(shape);
    for (auto& v : t.data()) v = std::bit_cast<float>(uint<std::uint32_t>());
    return {std::move(name), std::move(t)};
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  json head;
  head["config"] = c.config.to_json();
  head["mlm_head"] = c.heads.mlm;
  head["task_head"] = c.heads.task ? c.heads.task->to_json() : json(nullptr);
  head["vocab"] = c.vocab;
  head["epoch"] = c.epoch;
  head["best_metric"] = c.best_metric ? json(*c.best_metric) : json(nullptr);
  json rngs = json::object();
  for (const auto& [name, s] : c.rng_states) rngs[name] = s;
  head["rng_states"] = rngs;
  head["optimizer_step"] = c.optimizer ? json(c.optimizer->step) : json(nullptr);
  head["meta"] = c.meta;

  Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.str(head.dump());
  const auto& entries = c.params.entries();
  const std::size_t count = entries.size() * (c.optimizer ? 3 : 1);
  w.uint<std::uint64_t>(count);
  for (const auto& [name, t] : entries) w.tensor(name, t);
  if (c.optimizer) {
    if (c.optimizer->m.size() != entries.size() || c.optimizer->v.size() != entries.size())
      throw Error(ErrorKind::state, "optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < entries.size(); ++i) w.tensor(kMomentM + entries[i].first, c.optimizer->m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) w.tensor(kMomentV + entries[i].first, c.optimizer->v[i]);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    if (bytes.size() < 4 && std::memcmp(bytes.data(), kMagic, bytes.size()) == 0 && !bytes.empty())
      throw Error(ErrorKind::checkpoint_truncated, "checkpoint is shorter than its magic number");
    throw Error(ErrorKind::checkpoint_magic, "not a checkpoint file (bad magic)");
  }
  Reader r(bytes);
  (void)r.uint<std::uint32_t>();
  const auto version = r.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::checkpoint_version, "checkpoint version " + std::to_string(version) +
                                                   " is not supported (expected " +
                                                   std::to_string(kCheckpointVersion) + ")");
  const json head = json::parse(r.str(), nullptr, false);
  if (head.is_discarded() || !head.is_object()) throw Error(ErrorKind::io, "checkpoint header is not valid JSON");

  Checkpoint c;
  try {
    c.config = ModelConfig::from_json(head.at("config"));
    c.heads.mlm = head.at("mlm_head").get<bool>();
    if (!head.at("task_head").is_null()) c.heads.task = TaskHeadSpec::from_json(head.at("task_head"));
    c.vocab = head.at("vocab").get<std::vector<std::string>>();
    c.epoch = head.at("epoch").get<std::uint64_t>();
    if (!head.at("best_metric").is_null()) c.best_metric = head.at("best_metric").get<double>();
    for (const auto& [name, s] : head.at("rng_states").items()) c.rng_states[name] = s.get<Rng::State>();
    if (head.contains("meta")) c.meta = head.at("meta");
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, std::string("checkpoint header is malformed: ") + e.what());
  }

  const auto count = r.uint<std::uint64_t>();
  std::map<std::string, Tensor> m, v;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto [name, t] = r.tensor();
    if (name.starts_with(kMomentM))
      m.emplace(name.substr(kMomentM.size()), std::move(t));
    else if (name.starts_with(kMomentV))
      v.emplace(name.substr(kMomentV.size()), std::move(t));
    else
      c.params.add(std::move(name), std::move(t));
  }
  if (!r.done())
    throw Error(ErrorKind::io, "checkpoint has " + std::to_string(bytes.size() - r.pos()) + " trailing bytes");
  check_param_shapes(c.params, c.config, c.heads);

  if (!head.at("optimizer_step").is_null()) {
    AdamWState<float> st;
    st.step = head.at("optimizer_step").get<std::uint64_t>();
    for (const auto& [name, t] : c.params.entries()) {
      auto im = m.find(name), iv = v.find(name);
      if (im == m.end() || iv == v.end() || im->second.shape() != t.shape() || iv->second.shape() != t.shape())
        throw Error(ErrorKind::io, "checkpoint optimizer moments for " + name + " are missing or misshaped");
      st.m.push_back(std::move(im->second));
      st.v.push_back(std::move(iv->second));
    }
    c.optimizer = std::move(st);
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace kdforge
