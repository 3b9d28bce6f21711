// Acceptance gates: one PASS/FAIL line per criterion. Arguments select a
// subset by number ("acceptance 3 7"); no arguments runs all eleven.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ffnet/bench.hpp"
#include "ffnet/checkpoint.hpp"
#include "ffnet/erf.hpp"
#include "ffnet/gradcheck_suite.hpp"
#include "ffnet/kvm.hpp"
#include "ffnet/metamixer.hpp"
#include "ffnet/reparam.hpp"
#include "ffnet/timeseries.hpp"
#include "oracles.hpp"
#include "ts_oracles.hpp"

using namespace ffnet;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

bool within(double v, double ref, double frac) { return std::abs(v - ref) <= frac * ref; }

// 1
void gate_parameters(Outcome& o) {
  const double ref[] = {13.7, 26.9, 48.3, 79.2};
  for (int v = 1; v <= 4; ++v) {
    const double m = double(count_params(build_ffnet<float>(ffnet_variant(v), 0))) / 1e6;
    o.detail << "FFNet-" << v << " " << m << "M/" << ref[v - 1] << "M ";
    o.check(within(m, ref[v - 1], 0.10), "FFNet-" + std::to_string(v) + " params");
  }
}

// 2
void gate_flops(Outcome& o) {
  const double ref[] = {2.9, 6.0, 10.1};
  for (int v = 1; v <= 3; ++v) {
    const double g = double(estimate_flops(build_ffnet<float>(ffnet_variant(v), 0), 256, 256)) / 1e9;
    o.detail << "FFNet-" << v << " " << g << "G/" << ref[v - 1] << "G ";
    o.check(within(g, ref[v - 1], 0.15), "FFNet-" + std::to_string(v) + " FLOPs");
  }
}

// 3
void gate_reparam(Outcome& o) {
  const FFNetConfig configs[] = {with_default_branches(ffnet_variant(1)),
                                 with_segmentation_branches(ffnet_variant(1))};
  for (const FFNetConfig& cfg : configs) {
    auto m32 = build_ffnet<float>(cfg, 1);
    randomize_statistics(m32, 2);
    auto m64 = cast_model<double>(m32);
    auto r32 = reparameterize_model(m32);
    auto r64 = reparameterize_model(m64);
    const auto e32 = assert_equivalence(m32, r32, 32, 1e-4, 64, 3);
    const auto e64 = assert_equivalence(m64, r64, 32, 1e-9, 64, 3);
    o.detail << cfg.name << " f32 " << e32.max_diff << " f64 " << e64.max_diff << "; ";
    o.check(e32.pass && e32.samples == 32, cfg.name + " f32");
    o.check(e64.pass && e64.samples == 32, cfg.name + " f64");
    o.check(count_aux_branches(r32) == 0 && count_bn_records(r32) == 0, cfg.name + " plain structure");
  }
}

// 4
template <typename T>
double metamixer_sweep(std::size_t instances, Rng& rng) {
  std::uniform_int_distribution<int> small(1, 4), len(1, 12), sp(3, 10), kr(1, 3), batch(1, 2), fill(0, 1);
  double worst = 0;
  auto note = [&](const Tensor<T>& a, const Tensor<T>& b) { worst = std::max(worst, double(max_abs_diff(a, b))); };
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t h = small(rng), d = h * small(rng), n = len(rng);
    const auto ap = random_attention<T>(d, h, rng);
    const auto xa = randn<T>({n, d}, rng);
    note(mixer_forward(build_mixer(attention_spec(ap)), xa), self_attention_reference(xa, ap));

    auto fp = random_ffn<T>(d, 3 * d, rng);
    fp.b1 = randn<T>({3 * d}, rng, T(0.1));
    fp.b2 = randn<T>({d}, rng, T(0.1));
    note(mixer_forward(build_mixer(ffn_spec(fp)), xa), ffn_reference(xa, fp));

    const std::size_t ds = 2 * small(rng);
    const auto s1 = randn<T>({ds, n}, rng, T(0.3)), s2 = randn<T>({n, ds}, rng, T(0.3));
    note(mixer_forward(build_mixer(spatial_mlp_spec(s1, s2)), xa), spatial_mlp_reference(xa, s1, s2));

    const std::size_t c = small(rng), k = 2 * kr(rng) + 1;
    const auto xs = randn<T>({std::size_t(batch(rng)), c, std::size_t(sp(rng)), std::size_t(sp(rng))}, rng);
    const auto ffp = random_ffnified<T>(c, k, rng, fill(rng) ? PadFill::circular : PadFill::zeros);
    note(mixer_forward(build_mixer(ffnified_spec(ffp)), xs), ffnified_attention_forward(xs, ffp));

    const auto cp = random_convnext<T>(c, k, std::size_t(small(rng)), rng);
    note(mixer_forward(build_mixer(convnext_spec(cp)), xs), convnext_block_forward(xs, cp));
  }
  return worst;
}

void gate_metamixer(Outcome& o) {
  Rng rng(4);
  const double w32 = metamixer_sweep<float>(50, rng), w64 = metamixer_sweep<double>(50, rng);
  o.detail << "5 instantiations x 50: worst f32 " << w32 << ", f64 " << w64;
  o.check(w32 <= 1e-6 && w64 <= 1e-6, "generic vs reference");
}

// 5
void gate_gradients(Outcome& o) {
  const auto report = gradcheck::run_suite(gradcheck::SuiteOptions{});
  std::size_t ops = 0, models = 0;
  double worst_op = 0, worst_model = 0;
  for (const auto& r : report.results) {
    const bool model = r.kind == "model";
    (model ? models : ops) += 1;
    (model ? worst_model : worst_op) = std::max(model ? worst_model : worst_op, r.max_rel_err);
    o.check(r.pass(), r.name);
    o.check(r.tol == (model ? 1e-3 : 1e-4), r.name + " tolerance");
  }
  o.check(report.uncovered.empty(), "uncovered ops");
  o.check(models == 2, "one model per domain");
  o.detail << ops << " ops (worst " << worst_op << "), " << models << " models (worst " << worst_model << ")";
}

// 6
void gate_oracles(Outcome& o) {
  Rng rng(6);
  std::uniform_int_distribution<int> c4(1, 4), sp(4, 12), kr(0, 3), stride(1, 2), fill(0, 1);
  auto triple = [&] {
    for (;;) {
      const std::size_t c = c4(rng), out = c4(rng), g = c4(rng);
      if (c % g == 0 && out % g == 0) return std::array<std::size_t, 3>{c, out, g};
    }
  };
  double w2 = 0, w2f = 0, w1 = 0, w1f = 0, wcv = 0, wci = 0;
  for (int it = 0; it < 300; ++it) {
    const auto [C, O, G] = triple();
    const std::size_t kh = 1 + 2 * kr(rng), kw = 1 + 2 * kr(rng);
    const PadFill f = fill(rng) ? PadFill::circular : PadFill::zeros;
    const ConvLayer<double> l2{randn<double>({O, C / G, kh, kw}, rng), randn<double>({O}, rng),
                               ConvGeometry{std::size_t(stride(rng)), Padding::same(kh, kw, f), G}};
    const auto x2 = randn<double>({std::size_t(c4(rng)), C, std::size_t(sp(rng)), std::size_t(sp(rng))}, rng);
    w2 = std::max(w2, max_abs_diff(grouped_conv2d(x2, l2), oracle::conv2d(x2, l2)));
    const ConvLayer<float> l2f{l2.weight.cast<float>(), l2.bias.cast<float>(), l2.geometry};
    const auto x2f = x2.cast<float>();
    w2f = std::max(w2f, max_abs_diff(grouped_conv2d(x2f, l2f).cast<double>(), oracle::conv2d(x2f, l2f)));

    const ConvLayer<double> l1{randn<double>({O, C / G, kh}, rng), randn<double>({O}, rng),
                               ConvGeometry{std::size_t(stride(rng)), Padding::same1d(kh, f), G}};
    const auto x1 = randn<double>({std::size_t(c4(rng)), C, std::size_t(2 * sp(rng))}, rng);
    w1 = std::max(w1, max_abs_diff(grouped_conv1d(x1, l1), oracle::conv1d(x1, l1)));
    const ConvLayer<float> l1f{l1.weight.cast<float>(), l1.bias.cast<float>(), l1.geometry};
    const auto x1f = x1.cast<float>();
    w1f = std::max(w1f, max_abs_diff(grouped_conv1d(x1f, l1f).cast<double>(), oracle::conv1d(x1f, l1f)));
  }
  std::uniform_int_distribution<int> m5(1, 5), d6(1, 6), e4(1, 4), n8(1, 8);
  for (int it = 0; it < 60; ++it) {
    const std::size_t M = m5(rng), D = d6(rng), e = e4(rng), N = n8(rng);
    const auto x = randn<double>({std::size_t(c4(rng)), M, D, N}, rng);
    auto cv = make_cviffn<double>(M, D, e, rng);
    auto ci = make_ciffn<double>(M, D, e, rng);
    for (GroupedFFN<double>* p : {&cv, &ci})
      for (ConvParam<double>* c : {&p->fc1, &p->fc2}) {
        c->weight.value() = randn<double>(c->weight.value().shape(), rng, 0.5);
        if (c->bias.defined()) c->bias.value() = randn<double>(c->bias.value().shape(), rng, 0.3);
      }
    const auto xv = ad::Var<double>::constant(x);
    wcv = std::max(wcv, max_abs_diff(cviffn_forward(cv, xv, e).value(), oracle::cviffn(cv, x, e)));
    wci = std::max(wci, max_abs_diff(ciffn_forward(ci, xv, e).value(), oracle::ciffn(ci, x, e)));
  }
  o.detail << "conv2d f64 " << w2 << " f32 " << w2f << ", conv1d f64 " << w1 << " f32 " << w1f << ", CVIFFN " << wcv
           << ", CIFFN " << wci;
  o.check(w2 <= 1e-6 && w1 <= 1e-6, "64-bit conv sweeps");
  o.check(w2f <= 1e-5 && w1f <= 1e-5, "32-bit conv sweeps");
  o.check(wcv <= 1e-6 && wci <= 1e-6, "grouped FFN oracles");
}

// 7
void gate_training(Outcome& o) {
  const ImageDataset data = make_shapes_dataset(500, 32, 7);
  TrainOptions opts;
  opts.epochs = 30;
  opts.seed = 7;
  auto run = [&] {
    auto model = build_ffnet<float>(toy_config(), 7);
    TrainState<float> st;
    return train_toy(model, data, opts, st, [](const EpochStats& s) { return s.accuracy < 0.95; });
  };
  const TrainReport a = run(), b = run();
  const EpochStats& last = a.epochs.back();
  o.detail << "toy " << last.accuracy * 100 << "% at epoch " << last.epoch << "; ";
  o.check(last.accuracy >= 0.95, "toy accuracy");
  bool same = a.epochs.size() == b.epochs.size();
  for (std::size_t i = 0; same && i < a.epochs.size(); ++i) same = a.epochs[i].loss == b.epochs[i].loss;
  o.check(same, "toy determinism");

  TSConfig cfg;
  cfg.n_vars = 3;
  cfg.lookback = 96;
  cfg.horizon = 96;
  const auto split = split_series(synth_series(SeriesKind::sinusoid_mix, 3, 2000, 8), 96, 96, 4);
  TSTrainOptions to;
  to.epochs = 3;
  to.seed = 8;
  auto model = build_ts_model<float>(cfg, 8);
  TSTrainState<float> st;
  train_forecaster(model, split.train, split.val, to, st);
  const double mse = evaluate_forecaster(model, split.test).mse;
  const double base = ts_metrics(repeat_last_baseline(split.test.inputs, 96), split.test.targets).mse;
  const double gain = 1 - mse / base;
  o.detail << "forecast mse " << mse << " vs repeat-last " << base << " (" << gain * 100 << "% better)";
  o.check(gain >= 0.20, "forecast vs baseline");
}

// 8
void gate_erf(Outcome& o) {
  Rng rng(9);
  for (const auto& ks : std::vector<std::vector<std::size_t>>{{7}, {3, 3}, {5, 3, 3}}) {
    std::vector<ad::Var<double>> ws;
    std::size_t rf = 1;
    for (std::size_t k : ks) {
      ws.push_back(ad::Var<double>::constant(uniform<double>({2, 1, k, k}, rng, 0.2, 1.0)));
      rf += k - 1;
    }
    const FeatureFn<double> f = [&](const ad::Var<double>& x) {
      ad::Var<double> y = x;
      for (std::size_t i = 0; i < ks.size(); ++i)
        y = ad::conv2d(y, ws[i], ad::Var<double>{}, ConvGeometry{1, Padding::same(ks[i], ks[i]), 2});
      return y;
    };
    const auto map = central_contribution_map<double>(f, randn<double>({3, 2, 24, 24}, rng));
    const std::size_t lo = 12 - rf / 2, hi = 12 + rf / 2;
    o.check(support_box(map.grid) == std::array<std::size_t, 4>{lo, lo, hi, hi},
            "support of " + std::to_string(rf) + "x" + std::to_string(rf));
  }

  const std::size_t res = 128;
  const ImageDataset data = make_shapes_dataset(128, res, 10);
  TrainOptions opts;
  opts.epochs = 6;
  opts.batch_size = 16;
  opts.seed = 10;
  double r50[2];
  const FFNetConfig cfgs[] = {toy_config(), ablation_3x3(toy_config())};
  for (int i = 0; i < 2; ++i) {
    auto model = build_ffnet<float>(cfgs[i], 11);
    TrainState<float> st;
    train_toy(model, data, opts, st);
    const auto map = central_contribution_map(model, uniform<float>({8, 3, res, res}, rng, 0.0f, 1.0f));
    double prev = 0;
    for (double t : kErfThresholds) {
      const double r = area_ratio(map, t);
      o.check(r >= prev, "r monotone");
      prev = r;
    }
    r50[i] = area_ratio(map, 0.5);
  }
  o.detail << "conv-stack supports exact; trained r(0.5) toy " << r50[0] << " vs 3x3 " << r50[1];
  o.check(r50[0] > r50[1], "toy ERF broader than 3x3 ablation");
}

// 9
void gate_kvm(Outcome& o) {
  Rng rng(12);
  double compose = 0;
  for (int it = 0; it < 20; ++it) {
    FFNParams<double> p{randn<double>({12, 5}, rng), randn<double>({12, 5}, rng), randn<double>({12}, rng),
                        randn<double>({5}, rng)};
    const auto x = randn<double>({9, 5}, rng);
    const auto via = oracle::matmul(coefficients(x, p.w1, p.b1), p.w2);
    const auto ref = ffn_reference(x, p);
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 5; ++j) compose = std::max(compose, std::abs(ref[i * 5 + j] - via[i * 5 + j] - p.b2[j]));
  }
  o.check(compose <= 1e-6, "coefficients compose to the FFN");

  bool counting = true;
  for (int it = 0; it < 20; ++it) {
    const auto pre = randn<double>({40, 25}, rng, 1.0, 0.2 * (it - 10));
    std::size_t pos = 0;
    for (double v : pre.vec()) pos += v > 0;
    counting = counting && activation_sparsity(pre) == double(pos) / double(pre.size());
  }
  o.check(counting, "sparsity counting oracle");

  auto model = build_ffnet<double>(toy_config(), 13);
  randomize_statistics(model, 14);
  const ImageDataset data = make_shapes_dataset(24, 32, 15);
  bool stats_ok = true;
  for (std::size_t layer = 0; layer < model.block_count(); ++layer) {
    const auto stats = per_class_key_means(model, layer, data, 7);
    const std::size_t d_m = stats.per_class_mean.dim(1);
    std::vector<double> sums(2 * d_m, 0.0);
    std::vector<std::size_t> counts(2, 0);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto c = layer_coefficients(model, layer, data.gather({i}).cast<double>());
      const std::size_t hw = c.dim(2) * c.dim(3), cls = std::size_t(data.labels[i]);
      ++counts[cls];
      for (std::size_t k = 0; k < d_m; ++k) {
        double acc = 0;
        for (std::size_t q = 0; q < hw; ++q) acc += c[k * hw + q];
        sums[cls * d_m + k] += acc / double(hw);
      }
    }
    stats_ok = stats_ok && counts == stats.sample_counts;
    for (std::size_t cls = 0; cls < 2; ++cls) {
      std::size_t best = 0;
      for (std::size_t k = 0; k < d_m; ++k) {
        const double mean = sums[cls * d_m + k] / double(counts[cls]);
        stats_ok = stats_ok && std::abs(mean - stats.per_class_mean[cls * d_m + k]) <= 1e-12;
        if (mean > sums[cls * d_m + best] / double(counts[cls])) best = k;
      }
      stats_ok = stats_ok && best == most_activated_key(stats, cls);
    }
  }
  o.check(stats_ok, "per-class stats recomputation");
  o.detail << "compose diff " << compose << ", sparsity exact, stats match over " << model.block_count() << " layers";
}

// 10
void gate_scaling(Outcome& o) {
  BenchOptions opts;
  opts.warmup = 5;
  opts.iters = 20;
  const auto rows = run_bench({BenchKind::attention, BenchKind::ffnified}, {1024, 4096}, opts);
  auto t = [&](const char* mixer, std::size_t n) {
    for (const auto& r : rows)
      if (r.mixer == mixer && r.tokens == n) return r.seconds;
    return std::nan("");
  };
  const double att = t("attention", 4096) / t("attention", 1024), ffn = t("ffnified", 4096) / t("ffnified", 1024);
  o.detail << "attention t(4096)/t(1024) = " << att << ", ffnified = " << ffn;
  o.check(att > 4, "attention superlinear");
  o.check(ffn < 8, "ffnified near-linear");
}

// 11
void gate_serialization(Outcome& o) {
  auto model = build_ffnet<double>(with_default_branches(toy_config()), 16);
  randomize_statistics(model, 17);
  Checkpoint ck;
  export_state(ck, model.state());
  auto copy = build_ffnet<double>(with_default_branches(toy_config()), 18);
  auto refs = copy.state();
  import_state(deserialize(serialize(ck)), refs);
  bool exact = true;
  auto orig = model.state();
  for (std::size_t i = 0; i < orig.params.size(); ++i) {
    const auto& a = orig.params[i].param->value();
    const auto& b = refs.params[i].param->value();
    exact = exact && std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) == 0;
  }
  for (std::size_t i = 0; i < orig.buffers.size(); ++i)
    exact = exact && std::memcmp(orig.buffers[i].tensor->ptr(), refs.buffers[i].tensor->ptr(),
                                 orig.buffers[i].tensor->size() * sizeof(double)) == 0;
  o.check(exact, "bit-exact round trip");

  const ImageDataset data = make_shapes_dataset(64, 32, 19);
  TrainOptions opts;
  opts.epochs = 6;
  opts.batch_size = 16;
  opts.seed = 20;
  auto whole_model = build_ffnet<float>(toy_config(), 21);
  TrainState<float> whole_state;
  const auto whole = train_toy(whole_model, data, opts, whole_state);

  auto first = build_ffnet<float>(toy_config(), 21);
  TrainState<float> st;
  train_toy(first, data, opts, st, [](const EpochStats& s) { return s.epoch < 3; });
  Checkpoint saved;
  export_state(saved, first.state());
  export_optimizer(saved, st.optimizer, first.state());
  saved.put_scalar("meta.epochs_done", double(st.epochs_done));
  const Checkpoint loaded = deserialize(serialize(saved));
  auto second = build_ffnet<float>(toy_config(), 99);
  auto second_refs = second.state();
  import_state(loaded, second_refs);
  TrainState<float> resumed;
  import_optimizer(loaded, resumed.optimizer, second_refs);
  resumed.epochs_done = std::size_t(loaded.scalar("meta.epochs_done"));
  const auto tail = train_toy(second, data, opts, resumed);
  double worst = 0;
  for (std::size_t i = 0; i < tail.epochs.size(); ++i)
    worst = std::max(worst, std::abs(tail.epochs[i].loss - whole.epochs[i + 3].loss));
  o.check(tail.epochs.size() == 3, "resumed epoch count");
  o.check(worst <= 1e-6, "resumed losses");
  o.detail << "round trip bit-exact, resumed loss diff " << worst;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<void(Outcome&)>>> criteria = {
      {"parameter counts", gate_parameters},  {"FLOPs at 256", gate_flops},
      {"re-parameterization", gate_reparam},  {"MetaMixer equivalence", gate_metamixer},
      {"gradient suite", gate_gradients},     {"oracle equivalence", gate_oracles},
      {"toy training", gate_training},        {"ERF properties", gate_erf},
      {"KVM tooling", gate_kvm},              {"complexity scaling", gate_scaling},
      {"serialization", gate_serialization},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "[exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%-4s %2d %-22s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.str().c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
