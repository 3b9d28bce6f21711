#include "ffnet/gradcheck_suite.hpp"

#include <algorithm>
#include <random>

#include "ffnet/ffnet_image.hpp"
#include "ffnet/io.hpp"
#include "ffnet/timeseries.hpp"

namespace ffnet::gradcheck {

using V = ad::Var<double>;
using ad::GradCheckReport;

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor<double> rnd(const Shape& s, Rng& rng) { return randn<double>(s, rng); }

// Values bounded away from zero, for kinks at the origin.
Tensor<double> away_from_zero(const Shape& s, Rng& rng) {
  Tensor<double> t = uniform<double>(s, rng, 0.05, 1.5);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (sign(rng)) t[i] = -t[i];
  return t;
}

Shape random_shape(Rng& rng, std::size_t min_rank, std::size_t max_rank, std::size_t max_dim = 4) {
  Shape s(pick(rng, min_rank, max_rank));
  for (auto& d : s) d = pick(rng, 1, max_dim);
  return s;
}

// sum(y * R) with a fixed random R, so every output coordinate matters.
V project(const V& y, const Tensor<double>& r) { return ad::sum(ad::mul(y, V::constant(r))); }

GradCheckReport check(const std::function<V()>& loss, const std::vector<V>& params, double tol, Rng& rng,
                      std::size_t max_coords = 0) {
  return ad::grad_check_params(loss, params, tol, 1e-5, max_coords, rng());
}

// Unary op on one random tensor, projected by a random weight.
Fixture unary(std::function<V(const V&, Rng&)> op, bool avoid_zero = false) {
  return [op = std::move(op), avoid_zero](Rng& rng, double tol) {
    const Shape s = random_shape(rng, 1, 4);
    V x = V::param(avoid_zero ? away_from_zero(s, rng) : rnd(s, rng));
    Rng op_rng(rng());
    const Rng op_seed = op_rng;
    const Shape ys = [&] {
      Rng r = op_seed;
      return op(V::constant(x.value()), r).shape();
    }();
    const Tensor<double> proj = rnd(ys, rng);
    return check(
        [&] {
          Rng r = op_seed;
          return project(op(x, r), proj);
        },
        {x}, tol, rng);
  };
}

Fixture binary(std::function<V(const V&, const V&)> op) {
  return [op = std::move(op)](Rng& rng, double tol) {
    const Shape s = random_shape(rng, 1, 4);
    V a = V::param(rnd(s, rng)), b = V::param(rnd(s, rng));
    const Tensor<double> proj = rnd(s, rng);
    return check([&] { return project(op(a, b), proj); }, {a, b}, tol, rng);
  };
}

GradCheckReport bias_like(Rng& rng, double tol, bool scale_op) {
  const Shape s = random_shape(rng, 1, 4);
  const std::size_t axis = pick(rng, 0, s.size() - 1);
  V x = V::param(rnd(s, rng)), b = V::param(rnd({s[axis]}, rng));
  const Tensor<double> proj = rnd(s, rng);
  return check(
      [&] { return project(scale_op ? ad::channel_scale(x, b, axis) : ad::bias_add(x, b, axis), proj); }, {x, b},
      tol, rng);
}

GradCheckReport matmul_fixture(Rng& rng, double tol) {
  const std::size_t m = pick(rng, 1, 5), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
  const bool batched = pick(rng, 0, 1) == 1;
  const Shape as = batched ? Shape{pick(rng, 1, 3), m, k} : Shape{m, k};
  V a = V::param(rnd(as, rng)), b = V::param(rnd({k, n}, rng));
  Shape os = as;
  os.back() = n;
  const Tensor<double> proj = rnd(os, rng);
  return check([&] { return project(ad::matmul(a, b), proj); }, {a, b}, tol, rng);
}

GradCheckReport conv_fixture(Rng& rng, double tol, bool two_d) {
  const std::size_t groups = pick(rng, 1, 3);
  const std::size_t cin = groups * pick(rng, 1, 2), cout = groups * pick(rng, 1, 2);
  const std::size_t kh = two_d ? pick(rng, 1, 3) : 1, kw = pick(rng, 1, 4);
  ConvGeometry g;
  g.groups = groups;
  g.stride = pick(rng, 1, 2);
  const bool circular = two_d && pick(rng, 0, 2) == 0;
  g.padding.fill = circular ? PadFill::circular : PadFill::zeros;
  const std::size_t max_pad = circular ? 1 : 2;
  if (two_d) {
    g.padding.top = pick(rng, 0, max_pad);
    g.padding.bottom = pick(rng, 0, max_pad);
  }
  g.padding.left = pick(rng, 0, max_pad);
  g.padding.right = pick(rng, 0, max_pad);
  const std::size_t h = two_d ? pick(rng, std::max<std::size_t>(kh, 2), 6) : 0, w = pick(rng, std::max<std::size_t>(kw, 2), 7);
  const Shape xs = two_d ? Shape{pick(rng, 1, 2), cin, h, w} : Shape{pick(rng, 1, 2), cin, w};
  const Shape ws = two_d ? Shape{cout, cin / groups, kh, kw} : Shape{cout, cin / groups, kw};
  V x = V::param(rnd(xs, rng)), wt = V::param(rnd(ws, rng));
  const bool with_bias = pick(rng, 0, 1) == 1;
  V b = with_bias ? V::param(rnd({cout}, rng)) : V{};
  auto f = [&] { return two_d ? ad::conv2d(x, wt, b, g) : ad::conv1d(x, wt, b, g); };
  const Tensor<double> proj = rnd(f().shape(), rng);
  std::vector<V> params{x, wt};
  if (with_bias) params.push_back(b);
  return check([&] { return project(f(), proj); }, params, tol, rng);
}

GradCheckReport softmax_fixture(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 1, 3);
  const std::size_t axis = pick(rng, 0, s.size() - 1);
  V x = V::param(rnd(s, rng));
  const Tensor<double> proj = rnd(s, rng);
  return check([&] { return project(ad::softmax(x, axis), proj); }, {x}, tol, rng);
}

GradCheckReport batchnorm_fixture(Rng& rng, double tol, bool train) {
  const std::size_t c = pick(rng, 1, 4);
  Shape s{pick(rng, 2, 3), c};
  for (std::size_t i = pick(rng, 0, 2); i > 0; --i) s.push_back(pick(rng, 1, 3));
  V x = V::param(rnd(s, rng));
  V gamma = V::param(uniform<double>({c}, rng, 0.5, 1.5)), beta = V::param(rnd({c}, rng));
  Tensor<double> mean = rnd({c}, rng), var = uniform<double>({c}, rng, 0.5, 2.0);
  const double eps = 1e-5;
  const Tensor<double> proj = rnd(s, rng);
  return check(
      [&] {
        return project(train ? ad::batchnorm_train(x, gamma, beta, mean, var, eps, 0.1)
                             : ad::batchnorm_infer(x, gamma, beta, mean, var, eps),
                       proj);
      },
      {x, gamma, beta}, tol, rng);
}

GradCheckReport permute_fixture(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 1, 4);
  std::vector<std::size_t> perm(s.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  V x = V::param(rnd(s, rng));
  Shape os(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) os[i] = s[perm[i]];
  const Tensor<double> proj = rnd(os, rng);
  return check([&] { return project(ad::permute(x, perm), proj); }, {x}, tol, rng);
}

GradCheckReport pad_fixture(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 1, 4);
  std::vector<std::size_t> before(s.size()), after(s.size());
  Shape os = s;
  for (std::size_t i = 0; i < s.size(); ++i) {
    before[i] = pick(rng, 0, 2);
    after[i] = pick(rng, 0, 2);
    os[i] += before[i] + after[i];
  }
  V x = V::param(rnd(s, rng));
  const Tensor<double> proj = rnd(os, rng);
  return check([&] { return project(ad::pad(x, before, after), proj); }, {x}, tol, rng);
}

GradCheckReport cross_entropy_fixture(Rng& rng, double tol) {
  const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 5);
  V x = V::param(rnd({b, k}, rng));
  std::vector<int> labels(b);
  for (auto& l : labels) l = static_cast<int>(pick(rng, 0, k - 1));
  return check([&] { return ad::cross_entropy(x, labels); }, {x}, tol, rng);
}

GradCheckReport mse_fixture(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 1, 3);
  V a = V::param(rnd(s, rng)), b = V::param(rnd(s, rng));
  return check([&] { return ad::mse(a, b); }, {a, b}, tol, rng);
}

GradCheckReport mean_trailing_fixture(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 2, 4);
  const std::size_t start = pick(rng, 1, s.size() - 1);
  V x = V::param(rnd(s, rng));
  const Tensor<double> proj = rnd(Shape(s.begin(), s.begin() + static_cast<long>(start)), rng);
  return check([&] { return project(ad::mean_trailing(x, start), proj); }, {x}, tol, rng);
}

// Reshape and flatten targets.
Shape regroup(const Shape& s) { return {numel(s)}; }

}  // namespace

const std::vector<NamedFixture>& op_fixtures() {
  static const std::vector<NamedFixture> fixtures = {
      {"add", binary([](const V& a, const V& b) { return ad::add(a, b); })},
      {"sub", binary([](const V& a, const V& b) { return ad::sub(a, b); })},
      {"mul", binary([](const V& a, const V& b) { return ad::mul(a, b); })},
      {"scale", unary([](const V& x, Rng& r) { return ad::scale(x, uniform<double>({1}, r, -2, 2)[0]); })},
      {"bias_add", [](Rng& rng, double tol) { return bias_like(rng, tol, false); }},
      {"channel_scale", [](Rng& rng, double tol) { return bias_like(rng, tol, true); }},
      {"matmul", matmul_fixture},
      {"conv1d", [](Rng& rng, double tol) { return conv_fixture(rng, tol, false); }},
      {"conv2d", [](Rng& rng, double tol) { return conv_fixture(rng, tol, true); }},
      {"gelu", unary([](const V& x, Rng&) { return ad::gelu(x); })},
      {"relu", unary([](const V& x, Rng&) { return ad::relu(x); }, true)},
      {"softmax", softmax_fixture},
      {"batchnorm_infer", [](Rng& rng, double tol) { return batchnorm_fixture(rng, tol, false); }},
      {"batchnorm_train", [](Rng& rng, double tol) { return batchnorm_fixture(rng, tol, true); }},
      {"reshape", unary([](const V& x, Rng&) { return ad::reshape(x, regroup(x.shape())); })},
      {"permute", permute_fixture},
      {"pad", pad_fixture},
      {"flatten", unary([](const V& x, Rng& r) { return ad::flatten(x, pick(r, 0, x.shape().size() - 1)); })},
      {"sum", unary([](const V& x, Rng&) { return ad::sum(x); })},
      {"mean", unary([](const V& x, Rng&) { return ad::mean(x); })},
      {"mean_trailing", mean_trailing_fixture},
      {"cross_entropy", cross_entropy_fixture},
      {"dropout", unary([](const V& x, Rng& r) { return ad::dropout(x, 0.3, r); })},
      {"mse", mse_fixture},
  };
  return fixtures;
}

namespace {

template <typename Refs>
void randomize_norms(Refs& refs, Rng& rng) {
  for (auto& p : refs.params) {
    Tensor<double>& v = p.param->value();
    const std::string& n = p.name;
    if (n.find("gamma") != std::string::npos)
      v = uniform<double>(v.shape(), rng, 0.5, 1.5);
    else if (n.find("beta") != std::string::npos || n.find("bias") != std::string::npos)
      v = uniform<double>(v.shape(), rng, -0.3, 0.3);
    else if (n.find("layer_scale") != std::string::npos || n.find(".ls") != std::string::npos)
      v = uniform<double>(v.shape(), rng, 0.5, 1.0);
    else if (v.rank() >= 2) {
      const double fan_in = static_cast<double>(v.size() / v.dim(0));
      v = randn<double>(v.shape(), rng, 1.0 / std::sqrt(fan_in));
    }
  }
  for (auto& b : refs.buffers) {
    Tensor<double>& t = *b.tensor;
    t = b.name.find("mean") != std::string::npos ? uniform<double>(t.shape(), rng, -0.2, 0.2)
                                                 : uniform<double>(t.shape(), rng, 0.5, 2.0);
  }
}

}  // namespace

GradCheckReport check_image_model(Rng& rng, double tol) {
  FFNetConfig cfg = toy_config(3);
  cfg.name = "gradcheck-image";
  cfg.stem = {4, 8};
  const std::size_t widths[] = {8, 16, 32, 64};
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) cfg.stages[i].channels = widths[i];
  cfg.stages[2].token_kernel = 5;
  cfg.branches = {{}, {}, {{3, 3}, {5, 1}}, {}};
  FFNetModel<double> model = build_ffnet<double>(cfg, rng());
  model.mode = NormMode::infer;
  StateRefs<double> refs = model.state();
  randomize_norms(refs, rng);
  const V x = V::constant(randn<double>({2, 3, 32, 32}, rng));
  const Tensor<double> proj = randn<double>({2, cfg.num_classes}, rng);
  return check([&] { return project(forward(model, x), proj); }, refs.vars(), tol, rng, 2);
}

GradCheckReport check_forecaster(Rng& rng, double tol) {
  TSConfig cfg;
  cfg.n_vars = 2;
  cfg.d_model = 8;
  cfg.lookback = 16;
  cfg.horizon = 4;
  cfg.expansion = 2;
  TSModel<double> model = build_ts_model<double>(cfg, rng());
  model.mode = NormMode::infer;
  StateRefs<double> refs = model.state();
  randomize_norms(refs, rng);
  const V x = V::constant(randn<double>({3, cfg.n_vars, cfg.lookback}, rng));
  const Tensor<double> proj = randn<double>({3, cfg.n_vars, cfg.horizon}, rng);
  return check([&] { return project(forecast(model, x), proj); }, refs.vars(), tol, rng, 4);
}

GradCheckReport check_faulty_gelu(Rng& rng, double tol) {
  const Shape s = random_shape(rng, 1, 3);
  V x = V::param(rnd(s, rng));
  const Tensor<double> proj = rnd(s, rng);
  auto faulty = [](const V& v) {
    // Forward is GELU, backward is the derivative of tanh.
    return ad::make_op<double>("gelu_faulty", {v}, gelu(v.value()),
                               [](const ad::Node<double>& self, const Tensor<double>& g) {
                                 const Tensor<double>& in = self.inputs[0]->value;
                                 Tensor<double> out(g.shape());
                                 for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double t = std::tanh(in[i]);
                                   out[i] = g[i] * (1 - t * t);
                                 }
                                 return std::vector<Tensor<double>>{out};
                               });
  };
  return check([&] { return project(faulty(x), proj); }, {x}, tol, rng);
}

bool SuiteReport::pass() const {
  if (!uncovered.empty()) return false;
  for (const auto& r : results)
    if (!r.pass()) return false;
  return !results.empty();
}

namespace {

CheckResult run_fixture(const std::string& name, const std::string& kind, const Fixture& f, std::size_t instances,
                        double tol, Rng& rng) {
  CheckResult r{name, kind, instances, 0, 0, 0, tol};
  for (std::size_t i = 0; i < instances; ++i) {
    Rng inst(rng());
    const GradCheckReport g = f(inst, tol);
    r.passed += g.pass;
    r.coords += g.checked;
    r.max_rel_err = std::max(r.max_rel_err, g.max_rel_err);
  }
  return r;
}

}  // namespace

SuiteReport run_suite(const SuiteOptions& opts, const std::function<void(const CheckResult&)>& on_result) {
  if (opts.instances == 0) throw ConfigError("need at least one instance per check");
  SuiteReport report;
  Rng rng(opts.seed);
  auto add = [&](CheckResult r) {
    if (on_result) on_result(r);
    report.results.push_back(std::move(r));
  };
  if (opts.ops) {
    for (std::string_view op : ad::kDifferentiableOps) {
      const auto& fx = op_fixtures();
      const auto it = std::find_if(fx.begin(), fx.end(), [&](const NamedFixture& f) { return f.name == op; });
      if (it == fx.end()) report.uncovered.emplace_back(op);
    }
    for (const auto& f : op_fixtures()) add(run_fixture(f.name, "op", f.run, opts.instances, opts.op_tol, rng));
    if (opts.inject_faulty_op)
      add(run_fixture("gelu_faulty", "op", check_faulty_gelu, opts.instances, opts.op_tol, rng));
  }
  if (opts.models) {
    const std::size_t n = std::max<std::size_t>(1, opts.instances / 10);
    add(run_fixture("model.image", "model", check_image_model, n, opts.model_tol, rng));
    add(run_fixture("model.timeseries", "model", check_forecaster, n, opts.model_tol, rng));
  }
  return report;
}

void write_report_csv(const std::string& path, const SuiteReport& report) {
  std::vector<io::CsvRow> rows;
  for (const auto& r : report.results)
    rows.push_back({r.name, r.kind, std::to_string(r.instances), std::to_string(r.passed), std::to_string(r.coords),
                    io::fmt(r.max_rel_err), io::fmt(r.tol), r.pass() ? "pass" : "fail"});
  for (const auto& u : report.uncovered) rows.push_back({u, "op", "0", "0", "0", "", "", "uncovered"});
  io::write_csv(path, {"name", "kind", "instances", "passed", "coords", "max_rel_err", "tol", "status"}, rows);
}

}  // namespace ffnet::gradcheck
