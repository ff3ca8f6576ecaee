// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "kdforge/model.hpp"

namespace kdforge {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  void validate() const;
};

template <typename T>
struct AdamWState {
  std::vector<BasicTensor<T>> m;
  std::vector<BasicTensor<T>> v;
  std::uint64_t step = 0;

  static AdamWState for_params(const EncoderParams<T>& params);
};

/// One AdamW update on a flat buffer. `step` is the already-incremented t.
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   w <- w - lr_t * (m_hat / (sqrt(v_hat) + eps) + decay * w)
template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWConfig& config, double lr_t, double decay);

/// Applies adamw_update to every tensor. Tensors for which decays(name) is
/// false get no weight decay.
template <typename T>
void adamw_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamWState<T>& state,
                const AdamWConfig& config, double lr_t);

struct ScheduleConfig {
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;

  void validate() const;
  /// warmup = round(fraction * total), kept below total.
  static ScheduleConfig from_fraction(std::uint64_t total_steps, double warmup_fraction);
};

/// Linear warmup from 0 to base_lr, then linear decay to 0 at total_steps.
double lr_at_step(std::uint64_t step, double base_lr, const ScheduleConfig& schedule);

/// Minimise-mode early stopping: strictly lower metric counts as improvement.
class EarlyStopper {
 public:
  struct Decision {
    bool improved = false;
    bool stop = false;
  };

  explicit EarlyStopper(std::size_t patience = 3);

  Decision update(double metric);

  std::size_t patience() const { return patience_; }
  double best() const { return best_; }
  /// Zero-based index of the best update so far.
  std::size_t best_index() const { return best_index_; }
  std::size_t bad_epochs() const { return bad_; }
  std::size_t updates() const { return updates_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_index_ = 0;
  std::size_t bad_ = 0;
  std::size_t updates_ = 0;
};

}  // namespace kdforge
