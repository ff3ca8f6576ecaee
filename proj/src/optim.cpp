// SPDX-License-Identifier: Apache-2.0
#include "kdforge/optim.hpp"

#include <cmath>
#include <string>

namespace kdforge {

void AdamWConfig::validate() const {
  const auto fail = [](const std::string& m) { throw Error(ErrorKind::config, "adamw: " + m); };
  if (!(lr > 0)) fail("learning rate must be > 0");
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2 must be in [0, 1)");
  if (!(eps > 0)) fail("eps must be > 0");
  if (!(weight_decay >= 0)) fail("weight decay must be >= 0");
}

template <typename T>
AdamWState<T> AdamWState<T>::for_params(const EncoderParams<T>& params) {
  AdamWState s;
  for (const auto& [name, t] : params.entries()) {
    s.m.emplace_back(t.shape());
    s.v.emplace_back(t.shape());
  }
  return s;
}

template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::span<T> m, std::span<T> v,
                  std::uint64_t step, const AdamWConfig& c, double lr_t, double decay) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw Error(ErrorKind::dimension, "adamw: parameter, gradient and moment sizes differ (" +
                                          std::to_string(w.size()) + " vs " + std::to_string(g.size()) + ")");
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(c.beta1, static_cast<double>(step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(c.beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(lr_t), eps = static_cast<T>(c.eps), lambda = static_cast<T>(decay);
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * g[i];
    v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
    const T mhat = m[i] / bc1;
    const T vhat = v[i] / bc2;
    w[i] = w[i] - lr * (mhat / (std::sqrt(vhat) + eps) + lambda * w[i]);
  }
}

template <typename T>
void adamw_step(EncoderParams<T>& params, const EncoderParams<T>& grads, AdamWState<T>& state,
                const AdamWConfig& config, double lr_t) {
  auto& entries = params.entries();
  if (grads.entries().size() != entries.size() || state.m.size() != entries.size())
    throw Error(ErrorKind::dimension, "adamw: parameter/gradient/state tensor counts differ");
  ++state.step;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& [name, w] = entries[i];
    const auto& [gname, g] = grads.entries()[i];
    if (gname != name || g.shape() != w.shape() || state.m[i].shape() != w.shape())
      throw Error(ErrorKind::dimension, "adamw: gradient for " + name + " has shape " +
                                            shape_str(g.shape()) + ", parameter " + shape_str(w.shape()));
    adamw_update<T>(w.data(), g.data(), state.m[i].data(), state.v[i].data(), state.step, config,
                    lr_t, decays(name) ? config.weight_decay : 0.0);
  }
}

void ScheduleConfig::validate() const {
  if (total_steps <= warmup_steps)
    throw Error(ErrorKind::config, "schedule: total_steps (" + std::to_string(total_steps) +
                                       ") must exceed warmup_steps (" + std::to_string(warmup_steps) + ")");
}

ScheduleConfig ScheduleConfig::from_fraction(std::uint64_t total_steps, double warmup_fraction) {
  if (!(warmup_fraction >= 0 && warmup_fraction < 1))
    throw Error(ErrorKind::config, "warmup fraction must be in [0, 1)");
  ScheduleConfig s;
  s.total_steps = std::max<std::uint64_t>(total_steps, 1);
  s.warmup_steps = static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(s.total_steps)));
  if (s.warmup_steps >= s.total_steps) s.warmup_steps = s.total_steps - 1;
  return s;
}

double lr_at_step(std::uint64_t step, double base_lr, const ScheduleConfig& s) {
  s.validate();
  if (step < s.warmup_steps)
    return base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return 0.0;
  return base_lr * static_cast<double>(s.total_steps - step) /
         static_cast<double>(s.total_steps - s.warmup_steps);
}

EarlyStopper::EarlyStopper(std::size_t patience) : patience_(patience) {
  if (patience == 0) throw Error(ErrorKind::config, "early-stopping patience must be >= 1");
}

EarlyStopper::Decision EarlyStopper::update(double metric) {
  if (!std::isfinite(metric))
    throw Error(ErrorKind::divergence, "early stopping received a non-finite metric at update " +
                                           std::to_string(updates_));
  Decision d;
  if (metric < best_) {
    best_ = metric;
    best_index_ = updates_;
    bad_ = 0;
    d.improved = true;
  } else {
    ++bad_;
  }
  ++updates_;
  d.stop = bad_ >= patience_;
  return d;
}

template struct AdamWState<float>;
template struct AdamWState<double>;
template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  std::span<float>, std::uint64_t, const AdamWConfig&, double, double);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::uint64_t, const AdamWConfig&, double, double);
template void adamw_step(EncoderParams<float>&, const EncoderParams<float>&, AdamWState<float>&,
                         const AdamWConfig&, double);
template void adamw_step(EncoderParams<double>&, const EncoderParams<double>&, AdamWState<double>&,
                         const AdamWConfig&, double);

}  // namespace kdforge
