#include "ffnet/optim.hpp"

#include <cmath>

namespace ffnet {

template <typename T>
void AdamW<T>::step(const StateRefs<T>& refs, const ad::GradientMap<T>& grads) {
  const std::size_t n = refs.params.size();
  if (m_.empty()) {
    for (const auto& p : refs.params) {
      m_.emplace_back(p.param->value().shape());
      v_.emplace_back(p.param->value().shape());
    }
  }
  if (m_.size() != n) throw Error("optimizer state does not match the parameter list");
  ++t_;
  const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < n; ++i) {
    Param<T>& p = *refs.params[i].param;
    const Tensor<T> g = grads.get(p.var());
    Tensor<T>& w = p.value();
    Tensor<T>& m = m_[i];
    Tensor<T>& v = v_[i];
    const double decay = w.rank() >= 2 ? opts_.weight_decay : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      m[k] = static_cast<T>(opts_.beta1 * m[k] + (1 - opts_.beta1) * gk);
      v[k] = static_cast<T>(opts_.beta2 * v[k] + (1 - opts_.beta2) * gk * gk);
      const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + opts_.eps) + decay * w[k];
      w[k] = static_cast<T>(w[k] - opts_.lr * update);
    }
  }
}

template <typename T>
void AdamW<T>::restore(std::uint64_t steps, std::vector<Tensor<T>> m, std::vector<Tensor<T>> v) {
  if (m.size() != v.size()) throw Error("optimizer moment lists differ in length");
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i].shape() != v[i].shape()) throw ShapeError("optimizer moment shapes differ");
  t_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace ffnet
