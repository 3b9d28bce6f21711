#pragma once

// Effective receptive field: input-gradient contribution of the central
// output feature, and the centered-square area ratio r(t).

#include <functional>
#include <string>
#include <vector>

#include "ffnet/ffnet_image.hpp"

namespace ffnet {

struct ContributionMap {
  Tensor<double> grid;  // [H, W], nonnegative, sums to 1
  std::size_t image_count = 0;
  std::string model_id;
};

/// Maps images [B, C, H, W] to a feature map [B, C', H', W'].
template <typename T>
using FeatureFn = std::function<ad::Var<T>(const ad::Var<T>&)>;

/// Seeds the channel sum at the central position (H'/2, W'/2) of every
/// image, takes |d/dx| summed over input channels, averages over images
/// and normalizes to unit mass. The feature function must treat batch
/// entries independently.
template <typename T>
ContributionMap central_contribution_map(const FeatureFn<T>& features, const Tensor<T>& images,
                                         std::string model_id = {}, std::size_t batch_size = 8);

/// FFNet features before pooling; the model must be in infer mode.
template <typename T>
ContributionMap central_contribution_map(FFNetModel<T>& model, const Tensor<float>& images,
                                         std::size_t batch_size = 8);

/// Area fraction of the smallest centered square (side 1, 3, 5, ...,
/// clipped to the map) holding at least mass t.
double area_ratio(const ContributionMap& map, double t);

inline constexpr double kErfThresholds[] = {0.2, 0.3, 0.5, 0.99};

/// Bounding box of the nonzero entries: {top, left, bottom, right}, inclusive.
std::array<std::size_t, 4> support_box(const Tensor<double>& grid);

void write_contribution_csv(const std::string& path, const ContributionMap& map);
/// log(1 + map / max) scaled for display.
void write_contribution_pgm(const std::string& path, const ContributionMap& map);
void write_area_ratio_csv(const std::string& path, const ContributionMap& map);

}  // namespace ffnet
