#include "ffnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "ffnet/io.hpp"

namespace ffnet {

BenchKind parse_bench_kind(const std::string& s) {
  if (s == "attention") return BenchKind::attention;
  if (s == "ffnified") return BenchKind::ffnified;
  if (s == "convnext") return BenchKind::convnext;
  throw ConfigError("unknown bench kind '" + s + "' (expected attention, ffnified or convnext)");
}

const char* to_string(BenchKind k) {
  switch (k) {
    case BenchKind::attention: return "attention";
    case BenchKind::ffnified: return "ffnified";
    case BenchKind::convnext: return "convnext";
  }
  return "?";
}

double median_seconds(const std::function<void()>& f, std::size_t warmup, std::size_t iters) {
  if (iters == 0) throw ConfigError("need at least one timed iteration");
  for (std::size_t i = 0; i < warmup; ++i) f();
  std::vector<double> t(iters);
  for (auto& e : t) {
    const auto start = std::chrono::steady_clock::now();
    f();
    e = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
  std::nth_element(t.begin(), t.begin() + static_cast<long>(iters / 2), t.end());
  double m = t[iters / 2];
  if (iters % 2 == 0) m = (m + *std::max_element(t.begin(), t.begin() + static_cast<long>(iters / 2))) / 2;
  return m;
}

namespace {

std::size_t square_side(std::size_t n) {
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (s * s != n) throw ConfigError("token count " + std::to_string(n) + " is not a perfect square");
  return s;
}

}  // namespace

std::vector<BenchRow> run_bench(const std::vector<BenchKind>& kinds, const std::vector<std::size_t>& tokens,
                                const BenchOptions& opts) {
  Rng rng(opts.seed);
  const std::size_t c = opts.channels;
  std::vector<BenchRow> rows;
  for (BenchKind kind : kinds) {
    for (std::size_t n : tokens) {
      if (n == 0) throw ConfigError("token count must be positive");
      std::function<void()> f;
      switch (kind) {
        case BenchKind::attention: {
          auto p = random_attention<float>(c, 1, rng);
          auto x = randn<float>({n, c}, rng);
          f = [p = std::move(p), x = std::move(x)] { (void)self_attention_reference(x, p); };
          break;
        }
        case BenchKind::ffnified: {
          const std::size_t s = square_side(n);
          auto p = random_ffnified<float>(c, opts.kernel, rng);
          auto x = randn<float>({1, c, s, s}, rng);
          f = [p = std::move(p), x = std::move(x)] { (void)ffnified_attention_forward(x, p); };
          break;
        }
        case BenchKind::convnext: {
          const std::size_t s = square_side(n);
          auto p = random_convnext<float>(c, opts.kernel, 4, rng);
          auto x = randn<float>({1, c, s, s}, rng);
          f = [p = std::move(p), x = std::move(x)] { (void)convnext_block_forward(x, p); };
          break;
        }
      }
      rows.push_back({to_string(kind), n, median_seconds(f, opts.warmup, opts.iters)});
    }
  }
  std::sort(rows.begin(), rows.end(),
            [](const BenchRow& a, const BenchRow& b) { return std::tie(a.mixer, a.tokens) < std::tie(b.mixer, b.tokens); });
  return rows;
}

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::vector<io::CsvRow> out;
  for (const auto& r : rows) out.push_back({r.mixer, std::to_string(r.tokens), io::fmt(r.seconds)});
  io::write_csv(path, {"mixer", "tokens", "seconds"}, out);
}

}  // namespace ffnet
