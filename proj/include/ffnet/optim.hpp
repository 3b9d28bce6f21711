#pragma once

#include <cstdint>
#include <vector>

#include "ffnet/layers.hpp"

namespace ffnet {

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // applied to rank >= 2 tensors only
};

/// Adam with decoupled weight decay. Moments are kept per parameter in the
/// order of the StateRefs passed to step().
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void step(const StateRefs<T>& refs, const ad::GradientMap<T>& grads);

  const AdamWOptions& options() const { return opts_; }
  void set_options(const AdamWOptions& opts) { opts_ = opts; }
  std::uint64_t steps() const { return t_; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  /// Restores a saved state; moments must match the parameter shapes.
  void restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v);

 private:
  AdamWOptions opts_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace ffnet
