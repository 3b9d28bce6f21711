#include "ffnet/kvm.hpp"

#include <algorithm>

#include "ffnet/io.hpp"

namespace ffnet {

template <typename T>
Tensor<T> coefficients(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1, Activation act) {
  if (x.rank() != 2 || w1.rank() != 2 || x.dim(1) != w1.dim(1))
    throw ShapeError("coefficients: x " + to_string(x.shape()) + " vs W1 " + to_string(w1.shape()));
  Tensor<T> h = matmul(x, transpose2d(w1));
  if (!b1.empty()) {
    if (b1.size() != w1.dim(0)) throw ShapeError("coefficients: bias has " + std::to_string(b1.size()) + " entries");
    h = add_along(h, b1, 1);
  }
  switch (act) {
    case Activation::gelu: return gelu(h);
    case Activation::relu: return relu(h);
    case Activation::softmax: return softmax(h, 1);
  }
  return h;
}

template <typename T>
double activation_sparsity(const Tensor<T>& pre) {
  if (pre.empty()) throw ShapeError("activation_sparsity of an empty tensor");
  std::size_t n = 0;
  for (std::size_t i = 0; i < pre.size(); ++i) n += pre[i] > T(0);
  return static_cast<double>(n) / static_cast<double>(pre.size());
}

namespace {

template <typename T>
FeatureTrace<T> trace_of(FFNetModel<T>& model, std::size_t layer, const Tensor<T>& images) {
  if (layer >= model.block_count())
    throw ConfigError("layer " + std::to_string(layer) + " out of range (model has " +
                      std::to_string(model.block_count()) + " blocks)");
  FeatureTrace<T> trace;
  ad::NoGradGuard guard;
  forward_features(model, ad::Var<T>::constant(images), &trace);
  return trace;
}

}  // namespace

template <typename T>
Tensor<T> layer_coefficients(FFNetModel<T>& model, std::size_t layer, const Tensor<T>& images) {
  return trace_of(model, layer, images).coefficients.at(layer);
}

template <typename T>
Tensor<T> layer_pre_activations(FFNetModel<T>& model, std::size_t layer, const Tensor<T>& images) {
  return trace_of(model, layer, images).pre_activations.at(layer);
}

template <typename T>
CoefficientStats per_class_key_means(FFNetModel<T>& model, std::size_t layer, const ImageDataset& data,
                                     std::size_t batch_size) {
  data.validate();
  if (data.size() == 0) throw ConfigError("per_class_key_means needs a non-empty dataset");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t k = data.num_classes;
  std::size_t d_m = 0;
  // per class, per key: the spatial means of every sample
  std::vector<std::vector<std::vector<double>>> samples(k);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor<T> c = layer_coefficients(model, layer, data.gather(idx).template cast<T>());
    d_m = c.dim(1);
    const std::size_t hw = c.dim(2) * c.dim(3);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      auto& rows = samples[static_cast<std::size_t>(data.labels[idx[b]])];
      rows.resize(d_m);
      for (std::size_t j = 0; j < d_m; ++j) {
        const T* p = c.data().data() + (b * d_m + j) * hw;
        double s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(p[i]);
        rows[j].push_back(s / static_cast<double>(hw));
      }
    }
  }
  CoefficientStats stats;
  stats.layer = layer;
  stats.per_class_mean = Tensor<double>({k, d_m});
  stats.sample_counts.assign(k, 0);
  for (std::size_t cls = 0; cls < k; ++cls) {
    if (samples[cls].empty()) continue;
    stats.sample_counts[cls] = samples[cls][0].size();
    for (std::size_t j = 0; j < d_m; ++j) {
      auto& v = samples[cls][j];
      std::sort(v.begin(), v.end());
      double s = 0;
      for (double e : v) s += e;
      stats.per_class_mean[cls * d_m + j] = s / static_cast<double>(v.size());
    }
  }
  check_finite(stats.per_class_mean, "per_class_key_means");
  return stats;
}

std::size_t most_activated_key(const CoefficientStats& stats, std::size_t cls) {
  if (cls >= stats.sample_counts.size()) throw ConfigError("class " + std::to_string(cls) + " out of range");
  if (stats.sample_counts[cls] == 0) throw ConfigError("class " + std::to_string(cls) + " has no samples");
  const std::size_t d_m = stats.per_class_mean.dim(1);
  const double* row = stats.per_class_mean.data().data() + cls * d_m;
  return static_cast<std::size_t>(std::max_element(row, row + d_m) - row);
}

template <typename T>
CoefficientMap coefficient_map(FFNetModel<T>& model, std::size_t layer, std::size_t key, const Tensor<float>& image) {
  if (image.rank() != 3) throw ShapeError("coefficient_map expects one [C, H, W] image");
  const Tensor<T> c =
      layer_coefficients(model, layer, reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}).template cast<T>());
  if (key >= c.dim(1))
    throw ConfigError("key " + std::to_string(key) + " out of range (layer has " + std::to_string(c.dim(1)) + ")");
  const std::size_t h = c.dim(2), w = c.dim(3);
  CoefficientMap m;
  m.key = key;
  m.layer = layer;
  m.grid = Tensor<double>({h, w});
  for (std::size_t i = 0; i < h * w; ++i) m.grid[i] = static_cast<double>(c[key * h * w + i]);
  return m;
}

void write_stats_csv(const std::string& path, const CoefficientStats& stats) {
  const std::size_t k = stats.per_class_mean.dim(0), d_m = stats.per_class_mean.dim(1);
  io::CsvRow header{"class", "samples"};
  for (std::size_t j = 0; j < d_m; ++j) header.push_back("key" + std::to_string(j));
  std::vector<io::CsvRow> rows;
  for (std::size_t c = 0; c < k; ++c) {
    io::CsvRow r{std::to_string(c), std::to_string(stats.sample_counts[c])};
    for (std::size_t j = 0; j < d_m; ++j) r.push_back(io::fmt(stats.per_class_mean[c * d_m + j]));
    rows.push_back(std::move(r));
  }
  io::write_csv(path, header, rows);
}

void write_map_pgm(const std::string& path, const CoefficientMap& map) { io::write_pgm16(path, map.grid); }

#define FFNET_INSTANTIATE(T)                                                                                    \
  template Tensor<T> coefficients<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Activation);         \
  template double activation_sparsity<T>(const Tensor<T>&);                                                     \
  template Tensor<T> layer_coefficients<T>(FFNetModel<T>&, std::size_t, const Tensor<T>&);                      \
  template Tensor<T> layer_pre_activations<T>(FFNetModel<T>&, std::size_t, const Tensor<T>&);                   \
  template CoefficientStats per_class_key_means<T>(FFNetModel<T>&, std::size_t, const ImageDataset&,            \
                                                   std::size_t);                                                \
  template CoefficientMap coefficient_map<T>(FFNetModel<T>&, std::size_t, std::size_t, const Tensor<float>&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
