#pragma once

// Wall-clock scaling of token mixers against token count.

#include <functional>
#include <string>
#include <vector>

#include "ffnet/metamixer.hpp"

namespace ffnet {

enum class BenchKind { attention, ffnified, convnext };
BenchKind parse_bench_kind(const std::string& s);
const char* to_string(BenchKind k);

struct BenchOptions {
  std::size_t channels = 64;
  std::size_t kernel = 7;
  std::size_t warmup = 5;
  std::size_t iters = 20;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string mixer;
  std::size_t tokens = 0;
  double seconds = 0;  // median
};

/// Convolutional mixers run on a square map, so their token counts must be
/// perfect squares. Rows are sorted by (mixer, tokens).
std::vector<BenchRow> run_bench(const std::vector<BenchKind>& kinds, const std::vector<std::size_t>& tokens,
                                const BenchOptions& opts = {});

/// Median seconds of `iters` calls after `warmup` untimed calls.
double median_seconds(const std::function<void()>& f, std::size_t warmup, std::size_t iters);

void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

}  // namespace ffnet
