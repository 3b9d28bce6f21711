#pragma once

// Key-value memory introspection of channel mixers: coefficients,
// activation sparsity, per-class key statistics and spatial maps.

#include <string>
#include <vector>

#include "ffnet/ffnet_image.hpp"
#include "ffnet/metamixer.hpp"

namespace ffnet {

/// act(x W1^T + b1) for x [n, d], W1 [d_m, d]; b1 may be empty.
template <typename T>
Tensor<T> coefficients(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& b1,
                       Activation act = Activation::gelu);

/// Fraction of entries with pre-activation > 0.
template <typename T>
double activation_sparsity(const Tensor<T>& pre_activations);

struct CoefficientStats {
  std::size_t layer = 0;
  Tensor<double> per_class_mean;  // [num_classes, d_m]; zero rows for absent classes
  std::vector<std::size_t> sample_counts;
};

/// Coefficients [B, d_m, H, W] and pre-activations of one channel mixer
/// (flat block index).
template <typename T>
Tensor<T> layer_coefficients(FFNetModel<T>& model, std::size_t layer, const Tensor<T>& images);
template <typename T>
Tensor<T> layer_pre_activations(FFNetModel<T>& model, std::size_t layer, const Tensor<T>& images);

/// Spatially averaged coefficients per sample, then averaged per class.
/// Independent of dataset order.
template <typename T>
CoefficientStats per_class_key_means(FFNetModel<T>& model, std::size_t layer, const ImageDataset& data,
                                     std::size_t batch_size = 32);

/// Argmax over keys; ties go to the lowest index.
std::size_t most_activated_key(const CoefficientStats& stats, std::size_t cls);

struct CoefficientMap {
  Tensor<double> grid;  // [H, W]
  std::size_t key = 0;
  std::size_t layer = 0;
};

/// image: [C, H, W].
template <typename T>
CoefficientMap coefficient_map(FFNetModel<T>& model, std::size_t layer, std::size_t key, const Tensor<float>& image);

/// Rows are classes, columns are keys.
void write_stats_csv(const std::string& path, const CoefficientStats& stats);
void write_map_pgm(const std::string& path, const CoefficientMap& map);

}  // namespace ffnet
