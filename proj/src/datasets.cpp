#include "ffnet/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ffnet/io.hpp"

namespace ffnet {

void ImageDataset::validate() const {
  if (labels.empty()) throw ConfigError("dataset is empty");
  if (images.rank() != 4 || images.dim(0) != labels.size())
    throw ShapeError("dataset images " + to_string(images.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) throw ConfigError("label out of range");
}

Tensor<float> ImageDataset::gather(const std::vector<std::size_t>& idx) const {
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = idx.size();
  Tensor<float> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.ptr() + idx[i] * per, per, out.ptr() + i * per);
  return out;
}

std::vector<int> ImageDataset::gather_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels.at(i));
  return out;
}

ImageDataset make_shapes_dataset(std::size_t n, std::size_t size, std::uint64_t seed, ShapeTask task,
                                 std::size_t channels) {
  if (n == 0 || size < 8) throw ConfigError("shape dataset needs n >= 1 and size >= 8");
  Rng rng(seed);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  ImageDataset ds;
  ds.num_classes = 2;
  ds.images = Tensor<float>({n, channels, size, size});
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % 2);
  std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

  const std::size_t plane = size * size;
  std::vector<float> mask(plane);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(mask.begin(), mask.end(), 0.0f);
    const int label = ds.labels[i];
    if (task == ShapeTask::bars) {
      const std::size_t len = pick(size / 3, size * 3 / 4), thick = pick(2, 4);
      const std::size_t along = pick(0, size - len), across = pick(0, size - thick);
      for (std::size_t a = 0; a < len; ++a)
        for (std::size_t t = 0; t < thick; ++t) {
          const std::size_t y = label == 0 ? across + t : along + a;
          const std::size_t x = label == 0 ? along + a : across + t;
          mask[y * size + x] = 1.0f;
        }
    } else {
      const std::size_t r = pick(size / 8, size / 4);
      const double cy = static_cast<double>(pick(r, size - r - 1)), cx = static_cast<double>(pick(r, size - r - 1));
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
          const bool inside = label == 0 ? std::max(std::abs(dy), std::abs(dx)) <= static_cast<double>(r)
                                         : dy * dy + dx * dx <= static_cast<double>(r * r);
          if (inside) mask[y * size + x] = 1.0f;
        }
    }
    for (std::size_t c = 0; c < channels; ++c) {
      const float fg = 0.6f + 0.4f * unit(rng);
      float* dst = ds.images.ptr() + (i * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = mask[p] * fg + noise(rng);
    }
  }
  ds.validate();
  return ds;
}

ImageDataset load_image_dir(const std::string& dir, std::size_t channels) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw IoError("data directory not found: " + dir);
  const auto rows = io::read_csv((root / "labels.csv").string());
  std::vector<Tensor<float>> images;
  ImageDataset ds;
  int max_label = -1;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != 2) throw IoError("labels.csv row " + std::to_string(r + 1) + " must have 2 fields");
    if (r == 0 && rows[r][0] == "file") continue;
    Tensor<float> img = io::read_pnm((root / rows[r][0]).string());
    if (img.dim(0) != channels) {
      if (img.dim(0) != 1) throw ShapeError(rows[r][0] + ": channel count does not match");
      Tensor<float> rep({channels, img.dim(1), img.dim(2)});
      for (std::size_t c = 0; c < channels; ++c) std::copy(img.data().begin(), img.data().end(), rep.ptr() + c * img.size());
      img = std::move(rep);
    }
    if (!images.empty() && img.shape() != images.front().shape())
      throw ShapeError(rows[r][0] + ": all images must share one resolution");
    int label = 0;
    try {
      label = std::stoi(rows[r][1]);
    } catch (const std::exception&) {
      throw IoError("labels.csv row " + std::to_string(r + 1) + ": label is not an integer");
    }
    if (label < 0) throw IoError("negative label in labels.csv");
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
    images.push_back(std::move(img));
  }
  if (images.empty()) throw IoError(dir + ": labels.csv lists no images");
  const Shape& s = images.front().shape();
  ds.images = Tensor<float>({images.size(), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < images.size(); ++i)
    std::copy(images[i].data().begin(), images[i].data().end(), ds.images.ptr() + i * images[i].size());
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  ds.validate();
  return ds;
}

void save_image_dir(const ImageDataset& ds, const std::string& dir) {
  ds.validate();
  io::ensure_dir(dir);
  const std::size_t per = ds.images.size() / ds.size();
  const Shape one(ds.images.shape().begin() + 1, ds.images.shape().end());
  std::vector<io::CsvRow> rows;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor<float> img(one, std::vector<float>(ds.images.ptr() + i * per, ds.images.ptr() + (i + 1) * per));
    for (auto& v : img.data()) v = std::clamp(v * 0.8f + 0.1f, 0.0f, 1.0f);
    char name[32];
    std::snprintf(name, sizeof name, "img%05zu.%s", i, one[0] == 1 ? "pgm" : "ppm");
    io::write_pnm((std::filesystem::path(dir) / name).string(), img);
    rows.push_back({name, std::to_string(ds.labels[i])});
  }
  io::write_csv((std::filesystem::path(dir) / "labels.csv").string(), {"file", "label"}, rows);
}

}  // namespace ffnet
