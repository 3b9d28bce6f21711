#pragma once

#include <string>
#include <vector>

#include "ffnet/tensor.hpp"

namespace ffnet {

struct ImageDataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  Tensor<float> gather(const std::vector<std::size_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const;
};

enum class ShapeTask {
  bars,         // 0: horizontal bar, 1: vertical bar
  square_disc,  // 0: filled square, 1: filled disc
};

/// Balanced two-class synthetic images with random placement, size,
/// intensity and Gaussian background noise. Deterministic per seed.
ImageDataset make_shapes_dataset(std::size_t n, std::size_t size, std::uint64_t seed,
                                 ShapeTask task = ShapeTask::bars, std::size_t channels = 3);

/// Directory holding labels.csv (file,label) and PGM/PPM images. Grayscale
/// images are replicated to `channels` planes.
ImageDataset load_image_dir(const std::string& dir, std::size_t channels = 3);
void save_image_dir(const ImageDataset& ds, const std::string& dir);

}  // namespace ffnet
