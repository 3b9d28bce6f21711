#include "ffnet/erf.hpp"

#include <cmath>

#include "ffnet/io.hpp"

namespace ffnet {

template <typename T>
ContributionMap central_contribution_map(const FeatureFn<T>& features, const Tensor<T>& images, std::string model_id,
                                         std::size_t batch_size) {
  if (images.rank() != 4 || images.dim(0) == 0) throw ShapeError("expected images [N, C, H, W]");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const std::size_t per = c * h * w;
  Tensor<double> acc({h, w});
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t b = std::min(batch_size, n - start);
    Tensor<T> chunk({b, c, h, w});
    std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(start * per), b * per, chunk.data().begin());
    const ad::Var<T> x = ad::Var<T>::leaf(std::move(chunk), true);
    const ad::Var<T> f = features(x);
    if (f.shape().size() != 4 || f.shape()[0] != b) throw ShapeError("feature map must be [B, C, H, W]");
    if (!f.requires_grad()) throw ConfigError("feature function has no differentiable path to its input");
    const std::size_t fc = f.shape()[1], fh = f.shape()[2], fw = f.shape()[3];
    Tensor<T> seed(f.shape());
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < fc; ++k) seed[((i * fc + k) * fh + fh / 2) * fw + fw / 2] = T(1);
    const Tensor<T> g = ad::backward(f, seed).get(x);
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t k = 0; k < c; ++k)
        for (std::size_t p = 0; p < h * w; ++p)
          acc[p] += std::abs(static_cast<double>(g[(i * c + k) * h * w + p]));
  }
  double total = 0;
  for (std::size_t p = 0; p < acc.size(); ++p) total += acc[p];
  if (!(total > 0) || !std::isfinite(total)) throw NumericError("contribution map has zero or non-finite mass");
  for (std::size_t p = 0; p < acc.size(); ++p) acc[p] /= total;
  return ContributionMap{std::move(acc), n, std::move(model_id)};
}

template <typename T>
ContributionMap central_contribution_map(FFNetModel<T>& model, const Tensor<float>& images, std::size_t batch_size) {
  if (model.mode != NormMode::infer) throw ConfigError("contribution maps require a model in infer mode");
  const FeatureFn<T> f = [&](const ad::Var<T>& x) { return forward_features(model, x); };
  return central_contribution_map<T>(f, images.template cast<T>(), model.config.name, batch_size);
}

double area_ratio(const ContributionMap& map, double t) {
  if (!(t > 0 && t <= 1)) throw ConfigError("threshold must lie in (0, 1], got " + io::fmt(t));
  const Tensor<double>& g = map.grid;
  if (g.rank() != 2 || g.empty()) throw ShapeError("contribution map must be a non-empty [H, W] grid");
  const long h = static_cast<long>(g.dim(0)), w = static_cast<long>(g.dim(1));
  const long ch = h / 2, cw = w / 2;
  double total = 0;
  for (std::size_t i = 0; i < g.size(); ++i) total += g[i];
  const double target = t * total * (1 - 1e-12);
  for (long r = 0;; ++r) {
    const long top = std::max(0L, ch - r), bottom = std::min(h - 1, ch + r);
    const long left = std::max(0L, cw - r), right = std::min(w - 1, cw + r);
    double mass = 0;
    for (long y = top; y <= bottom; ++y)
      for (long x = left; x <= right; ++x) mass += g[static_cast<std::size_t>(y * w + x)];
    const bool full = top == 0 && left == 0 && bottom == h - 1 && right == w - 1;
    if (mass >= target || full)
      return static_cast<double>((bottom - top + 1) * (right - left + 1)) / static_cast<double>(h * w);
  }
}

std::array<std::size_t, 4> support_box(const Tensor<double>& grid) {
  if (grid.rank() != 2) throw ShapeError("expected an [H, W] grid");
  const std::size_t h = grid.dim(0), w = grid.dim(1);
  std::array<std::size_t, 4> box{h, w, 0, 0};
  bool any = false;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (grid[y * w + x] != 0) {
        any = true;
        box = {std::min(box[0], y), std::min(box[1], x), std::max(box[2], y), std::max(box[3], x)};
      }
  if (!any) throw NumericError("grid has no nonzero entries");
  return box;
}

void write_contribution_csv(const std::string& path, const ContributionMap& map) {
  const std::size_t h = map.grid.dim(0), w = map.grid.dim(1);
  std::vector<io::CsvRow> rows;
  for (std::size_t y = 0; y < h; ++y) {
    io::CsvRow r;
    for (std::size_t x = 0; x < w; ++x) r.push_back(io::fmt(map.grid[y * w + x]));
    rows.push_back(std::move(r));
  }
  io::write_csv(path, {}, rows);
}

void write_contribution_pgm(const std::string& path, const ContributionMap& map) {
  double peak = 0;
  for (std::size_t i = 0; i < map.grid.size(); ++i) peak = std::max(peak, map.grid[i]);
  Tensor<double> v(map.grid.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::log1p(map.grid[i] / peak);
  io::write_pgm16(path, v);
}

void write_area_ratio_csv(const std::string& path, const ContributionMap& map) {
  std::vector<io::CsvRow> rows;
  for (double t : kErfThresholds) rows.push_back({io::fmt(t), io::fmt(area_ratio(map, t))});
  io::write_csv(path, {"t", "r"}, rows);
}

#define FFNET_INSTANTIATE(T)                                                                                   \
  template ContributionMap central_contribution_map<T>(const FeatureFn<T>&, const Tensor<T>&, std::string,    \
                                                       std::size_t);                                           \
  template ContributionMap central_contribution_map<T>(FFNetModel<T>&, const Tensor<float>&, std::size_t);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
