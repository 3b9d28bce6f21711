#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ffnet/bench.hpp"
#include "ffnet/checkpoint.hpp"
#include "ffnet/erf.hpp"
#include "ffnet/gradcheck_suite.hpp"
#include "ffnet/io.hpp"
#include "ffnet/kvm.hpp"
#include "ffnet/reparam.hpp"
#include "ffnet/run_config.hpp"
#include "ffnet/timeseries.hpp"

namespace ffnet::cli {

namespace {

namespace fs = std::filesystem;

const ConfigSchema kModelKeys = {
    {"model.variant", "toy"},  // toy | toy-3x3 | FFNet-1..4
    {"model.branches", "none"},  // none | default | segmentation
    {"model.classes", "2"},
    {"model.seed", "0"},
    {"model.checkpoint", ""},
};

const ConfigSchema kImageDataKeys = {
    {"data.source", "synthetic"},  // synthetic | dir
    {"data.path", ""},
    {"data.task", "bars"},  // bars | square-disc
    {"data.samples", "500"},
    {"data.size", "32"},
    {"data.channels", "3"},
    {"data.seed", "1"},
};

ConfigSchema merge(std::initializer_list<ConfigSchema> parts) {
  ConfigSchema out;
  for (const auto& p : parts)
    for (const auto& [k, v] : p) out.insert_or_assign(k, v);
  return out;
}

ConfigSchema schema_for(const std::string& command) {
  if (command == "gradcheck")
    return {{"gradcheck.instances", "20"}, {"gradcheck.seed", "0"},     {"gradcheck.op_tol", "1e-4"},
            {"gradcheck.model_tol", "1e-3"}, {"gradcheck.models", "true"}};
  if (command == "train-image")
    return merge({kModelKeys, kImageDataKeys,
                  ConfigSchema{{"train.epochs", "30"},
                               {"train.batch_size", "32"},
                               {"train.lr", "1e-3"},
                               {"train.weight_decay", "0.05"},
                               {"train.seed", "0"},
                               {"train.resume", ""},
                               {"train.stop_after", "0"}}});
  if (command == "forecast")
    return {{"data.source", "synthetic"},  // synthetic | csv
            {"data.path", ""},
            {"data.kind", "sinusoid-mix"},
            {"data.vars", "3"},
            {"data.length", "2000"},
            {"data.seed", "1"},
            {"data.step", "1"},
            {"model.d_model", "64"},
            {"model.expansion", "12"},
            {"model.blocks", "1"},
            {"model.lookback", "96"},
            {"model.horizon", "96"},
            {"model.token_kernel", "51"},
            {"model.drop1", "0"},
            {"model.drop2", "0"},
            {"model.seed", "0"},
            {"train.epochs", "10"},
            {"train.batch_size", "32"},
            {"train.lr", "1e-4"},
            {"train.patience", "3"},
            {"train.seed", "0"},
            {"train.resume", ""},
            {"train.stop_after", "0"}};
  if (command == "reparam-verify")
    return merge({kModelKeys, ConfigSchema{{"model.variant", "FFNet-1"},
                                           {"model.branches", "default"},
                                           {"model.classes", "1000"},
                                           {"verify.samples", "32"},
                                           {"verify.resolution", "64"},
                                           {"verify.tol", "1e-4"},
                                           {"verify.dtype", "f32"},
                                           {"verify.batch", "4"},
                                           {"verify.randomize", "true"},
                                           {"verify.corrupt", "false"}}});
  if (command == "erf")
    return merge({kModelKeys, ConfigSchema{{"erf.images", "8"}, {"erf.resolution", "64"}, {"erf.seed", "0"}}});
  if (command == "kvm")
    return merge({kModelKeys, kImageDataKeys, ConfigSchema{{"kvm.layer", "-1"}, {"kvm.batch", "32"}}});
  if (command == "bench")
    return {{"bench.kinds", "attention,ffnified,convnext"},
            {"bench.tokens", "256,1024,4096"},
            {"bench.channels", "64"},
            {"bench.kernel", "7"},
            {"bench.warmup", "5"},
            {"bench.iters", "20"},
            {"bench.seed", "0"}};
  if (command == "gen-data")
    return {{"data.kind", "shapes"},  // shapes | sinusoid-mix | ar-process | trend+season
            {"data.task", "bars"},   {"data.samples", "500"}, {"data.size", "32"}, {"data.channels", "3"},
            {"data.vars", "3"},      {"data.length", "2000"}, {"data.seed", "1"}};
  throw ConfigError("unknown command '" + command + "'");
}

RunConfig load_config(const std::string& command, const CommonArgs& a) {
  RunConfig cfg(schema_for(command));
  if (!a.config.empty()) cfg.load(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' must look like key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) {
    const std::string s = std::to_string(*a.seed);
    for (const char* k : {"model.seed", "gradcheck.seed", "bench.seed", "data.seed"})
      if (cfg.has(k) && (std::string(k) != "data.seed" || command == "gen-data")) cfg.set(k, s);
  }
  return cfg;
}

std::string out_path(const CommonArgs& a, const std::string& name) {
  io::ensure_dir(a.out);
  return (fs::path(a.out) / name).string();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::size_t size_key(const RunConfig& c, const std::string& k) { return static_cast<std::size_t>(c.unsigned_integer(k)); }

FFNetConfig image_config(const RunConfig& c) {
  const std::string v = c.str("model.variant");
  const std::size_t classes = size_key(c, "model.classes");
  FFNetConfig cfg;
  if (v == "toy" || v == "toy-3x3") {
    cfg = toy_config(classes);
    if (v == "toy-3x3") cfg = ablation_3x3(cfg);
  } else {
    cfg = ffnet_variant(v);
    cfg.num_classes = classes;
  }
  const std::string b = c.str("model.branches");
  if (b == "default")
    cfg = with_default_branches(cfg);
  else if (b == "segmentation")
    cfg = with_segmentation_branches(cfg);
  else if (b != "none")
    throw ConfigError("model.branches must be none, default or segmentation, got '" + b + "'");
  return cfg;
}

template <typename T>
FFNetModel<T> image_model(const RunConfig& c) {
  FFNetModel<T> m = build_ffnet<T>(image_config(c), c.unsigned_integer("model.seed"));
  if (const std::string& ck = c.str("model.checkpoint"); !ck.empty()) {
    if (!fs::exists(ck)) throw ConfigError("model.checkpoint '" + ck + "' does not exist");
    StateRefs<T> refs = m.state();
    import_state(load_checkpoint(ck), refs);
  }
  return m;
}

ImageDataset image_data(const RunConfig& c) {
  const std::string src = c.str("data.source");
  const std::size_t channels = size_key(c, "data.channels");
  if (src == "dir") {
    const std::string& p = c.str("data.path");
    if (p.empty()) throw ConfigError("data.source = dir needs data.path");
    if (!fs::is_directory(p)) throw ConfigError("data.path '" + p + "' is not a directory");
    return load_image_dir(p, channels);
  }
  if (src != "synthetic") throw ConfigError("data.source must be synthetic or dir, got '" + src + "'");
  const std::string task = c.str("data.task");
  ShapeTask t;
  if (task == "bars")
    t = ShapeTask::bars;
  else if (task == "square-disc")
    t = ShapeTask::square_disc;
  else
    throw ConfigError("data.task must be bars or square-disc, got '" + task + "'");
  return make_shapes_dataset(size_key(c, "data.samples"), size_key(c, "data.size"), c.unsigned_integer("data.seed"),
                             t, channels);
}

Tensor<double> history(const std::vector<double>& v) {
  Tensor<double> t({v.size()});
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

std::vector<double> history(const Checkpoint& ck, const std::string& name) {
  if (!ck.contains(name)) return {};
  const auto& t = ck.get<double>(name);
  return {t.data().begin(), t.data().end()};
}

}  // namespace

int cmd_show_config(const std::string& command) {
  for (const auto& [k, v] : schema_for(command)) std::cout << k << " = " << (v.empty() ? "\"\"" : v) << "\n";
  return kOk;
}

int cmd_gradcheck(const CommonArgs& a, bool inject_faulty_op) {
  const RunConfig c = load_config("gradcheck", a);
  gradcheck::SuiteOptions o;
  o.instances = size_key(c, "gradcheck.instances");
  o.seed = c.unsigned_integer("gradcheck.seed");
  o.op_tol = c.real("gradcheck.op_tol");
  o.model_tol = c.real("gradcheck.model_tol");
  o.models = c.boolean("gradcheck.models");
  o.inject_faulty_op = inject_faulty_op;
  const auto report = gradcheck::run_suite(o, [](const gradcheck::CheckResult& r) {
    std::printf("%-18s %-5s %3zu/%-3zu max_rel_err %.3e  %s\n", r.name.c_str(), r.kind.c_str(), r.passed, r.instances,
                r.max_rel_err, r.pass() ? "ok" : "FAIL");
  });
  for (const auto& u : report.uncovered) std::printf("%-18s no fixture\n", u.c_str());
  const std::string path = out_path(a, "gradcheck.csv");
  gradcheck::write_report_csv(path, report);
  std::cout << (report.pass() ? "gradcheck passed" : "gradcheck FAILED") << "; report: " << path << "\n";
  return report.pass() ? kOk : kVerificationFailed;
}

int cmd_model_report(const std::vector<std::string>& variants, std::size_t input_hw) {
  struct Ref {
    double params;
    std::map<std::size_t, double> flops;  // by input side length
  };
  static const std::map<int, Ref> refs = {{1, {13.7, {{256, 2.9}}}},
                                          {2, {26.9, {{256, 6.0}}}},
                                          {3, {48.3, {{256, 10.1}, {384, 22.8}}}},
                                          {4, {79.2, {{384, 43.1}}}}};
  std::vector<int> list;
  for (const auto& v : variants) {
    if (v == "all") {
      list = {1, 2, 3, 4};
      break;
    }
    list.push_back(std::stoi(ffnet_variant(v).name.substr(6)));
  }
  auto dev = [](double ours, double ref) { return (ours - ref) / ref * 100.0; };
  std::printf("%-8s %10s %10s %8s %10s %10s %8s\n", "variant", "params(M)", "ref(M)", "dev%", "FLOPs(G)", "ref(G)",
              "dev%");
  for (int v : list) {
    const auto model = build_ffnet<float>(ffnet_variant(v), 0);
    const double p = static_cast<double>(count_params(model)) / 1e6;
    const double f = static_cast<double>(estimate_flops(model, input_hw, input_hw)) / 1e9;
    const Ref& r = refs.at(v);
    std::printf("FFNet-%d  %10.3f %10.1f %+8.2f %10.3f ", v, p, r.params, dev(p, r.params), f);
    if (auto it = r.flops.find(input_hw); it != r.flops.end())
      std::printf("%10.1f %+8.2f\n", it->second, dev(f, it->second));
    else
      std::printf("%10s %8s\n", "-", "-");
  }
  std::printf("FLOPs at %zux%zu, 1 MAC = 1 FLOP\n", input_hw, input_hw);
  return kOk;
}

int cmd_train_image(const CommonArgs& a) {
  const RunConfig c = load_config("train-image", a);
  const ImageDataset data = image_data(c);
  FFNetModel<float> model = image_model<float>(c);
  TrainOptions o;
  o.epochs = size_key(c, "train.epochs");
  o.batch_size = size_key(c, "train.batch_size");
  o.lr = c.real("train.lr");
  o.weight_decay = c.real("train.weight_decay");
  o.seed = c.unsigned_integer("train.seed");
  const std::size_t stop_after = size_key(c, "train.stop_after");
  TrainState<float> state;
  std::vector<double> losses, accs;
  StateRefs<float> refs = model.state();
  if (const std::string& resume = c.str("train.resume"); !resume.empty()) {
    if (!fs::exists(resume)) throw ConfigError("train.resume '" + resume + "' does not exist");
    const Checkpoint ck = load_checkpoint(resume);
    import_state(ck, refs);
    import_optimizer(ck, state.optimizer, refs);
    state.epochs_done = static_cast<std::size_t>(ck.scalar("meta.epochs_done"));
    losses = history(ck, "meta.loss");
    accs = history(ck, "meta.accuracy");
    std::cout << "resumed from " << resume << " after epoch " << state.epochs_done << "\n";
  }
  const std::string ck_path = out_path(a, "checkpoint.ffck");
  const std::string metrics_path = out_path(a, "metrics.csv");
  auto save = [&] {
    Checkpoint ck;
    export_state(ck, refs);
    export_optimizer(ck, state.optimizer, refs);
    ck.put_scalar("meta.epochs_done", static_cast<double>(state.epochs_done));
    ck.put("meta.loss", history(losses));
    ck.put("meta.accuracy", history(accs));
    save_checkpoint(ck_path, ck);
    std::vector<io::CsvRow> rows;
    for (std::size_t i = 0; i < losses.size(); ++i)
      rows.push_back({std::to_string(i + 1), io::fmt(losses[i]), io::fmt(accs[i])});
    io::write_csv(metrics_path, {"epoch", "loss", "accuracy"}, rows);
  };
  train_toy(model, data, o, state, [&](const EpochStats& s) {
    losses.push_back(s.loss);
    accs.push_back(s.accuracy);
    std::printf("epoch %3zu  loss %.6f  train_acc %.4f\n", s.epoch, s.loss, s.accuracy);
    std::fflush(stdout);
    save();
    return stop_after == 0 || s.epoch < stop_after;
  });
  save();
  std::cout << "checkpoint: " << ck_path << "\nmetrics: " << metrics_path << "\n";
  return kOk;
}

namespace {

Tensor<float> read_series_csv(const std::string& path, std::vector<std::string>& names) {
  const auto rows = io::read_csv(path);
  if (rows.size() < 2) throw ConfigError("series CSV '" + path + "' needs a header and at least one row");
  names = rows[0];
  const std::size_t m = names.size(), t = rows.size() - 1;
  Tensor<float> s({t, m});
  for (std::size_t i = 0; i < t; ++i) {
    if (rows[i + 1].size() != m)
      throw ConfigError(path + ": row " + std::to_string(i + 2) + " has " + std::to_string(rows[i + 1].size()) +
                        " fields, expected " + std::to_string(m));
    for (std::size_t v = 0; v < m; ++v) {
      try {
        s[i * m + v] = std::stof(rows[i + 1][v]);
      } catch (const std::exception&) {
        throw ConfigError(path + ": row " + std::to_string(i + 2) + " has a non-numeric value '" + rows[i + 1][v] +
                          "'");
      }
    }
  }
  return s;
}

void write_series_csv(const std::string& path, const Tensor<float>& s, const std::vector<std::string>& names) {
  std::vector<io::CsvRow> rows;
  const std::size_t m = s.dim(1);
  for (std::size_t t = 0; t < s.dim(0); ++t) {
    io::CsvRow r;
    for (std::size_t v = 0; v < m; ++v) r.push_back(io::fmt(s[t * m + v]));
    rows.push_back(std::move(r));
  }
  io::write_csv(path, names, rows);
}

}  // namespace

int cmd_forecast(const CommonArgs& a) {
  const RunConfig c = load_config("forecast", a);
  std::vector<std::string> names;
  Tensor<float> series;
  const std::string src = c.str("data.source");
  if (src == "csv") {
    const std::string& p = c.str("data.path");
    if (p.empty()) throw ConfigError("data.source = csv needs data.path");
    if (!fs::exists(p)) throw ConfigError("data.path '" + p + "' does not exist");
    series = read_series_csv(p, names);
  } else if (src == "synthetic") {
    series = synth_series(parse_series_kind(c.str("data.kind")), size_key(c, "data.vars"), size_key(c, "data.length"),
                          c.unsigned_integer("data.seed"));
    for (std::size_t v = 0; v < series.dim(1); ++v) names.push_back("var" + std::to_string(v));
  } else {
    throw ConfigError("data.source must be synthetic or csv, got '" + src + "'");
  }
  TSConfig tc;
  tc.n_vars = series.dim(1);
  tc.d_model = size_key(c, "model.d_model");
  tc.expansion = size_key(c, "model.expansion");
  tc.blocks = size_key(c, "model.blocks");
  tc.lookback = size_key(c, "model.lookback");
  tc.horizon = size_key(c, "model.horizon");
  tc.token_kernel = size_key(c, "model.token_kernel");
  tc.drop1 = c.real("model.drop1");
  tc.drop2 = c.real("model.drop2");
  const SeriesSplit split = split_series(series, tc.lookback, tc.horizon, size_key(c, "data.step"));
  TSModel<float> model = build_ts_model<float>(tc, c.unsigned_integer("model.seed"));
  StateRefs<float> refs = model.state();
  TSTrainOptions o;
  o.epochs = size_key(c, "train.epochs");
  o.batch_size = size_key(c, "train.batch_size");
  o.lr = c.real("train.lr");
  o.patience = size_key(c, "train.patience");
  o.seed = c.unsigned_integer("train.seed");
  const std::size_t stop_after = size_key(c, "train.stop_after");
  TSTrainState<float> state;
  std::vector<double> losses, vals;
  if (const std::string& resume = c.str("train.resume"); !resume.empty()) {
    if (!fs::exists(resume)) throw ConfigError("train.resume '" + resume + "' does not exist");
    const Checkpoint ck = load_checkpoint(resume);
    import_state(ck, refs);
    import_optimizer(ck, state.optimizer, refs);
    state.epochs_done = static_cast<std::size_t>(ck.scalar("meta.epochs_done"));
    state.best_val = ck.scalar("meta.best_val");
    state.bad_epochs = static_cast<std::size_t>(ck.scalar("meta.bad_epochs"));
    losses = history(ck, "meta.loss");
    vals = history(ck, "meta.val_mse");
    std::cout << "resumed from " << resume << " after epoch " << state.epochs_done << "\n";
  }
  const std::string ck_path = out_path(a, "checkpoint.ffck");
  auto save = [&] {
    Checkpoint ck;
    export_state(ck, refs);
    export_optimizer(ck, state.optimizer, refs);
    ck.put_scalar("meta.epochs_done", static_cast<double>(state.epochs_done));
    ck.put_scalar("meta.best_val", state.best_val);
    ck.put_scalar("meta.bad_epochs", static_cast<double>(state.bad_epochs));
    ck.put("meta.loss", history(losses));
    ck.put("meta.val_mse", history(vals));
    save_checkpoint(ck_path, ck);
    std::vector<io::CsvRow> rows;
    for (std::size_t i = 0; i < losses.size(); ++i)
      rows.push_back({std::to_string(i + 1), io::fmt(losses[i]), io::fmt(vals[i])});
    io::write_csv(out_path(a, "metrics.csv"), {"epoch", "train_loss", "val_mse"}, rows);
  };
  std::cout << "windows: train " << split.train.size() << ", val " << split.val.size() << ", test "
            << split.test.size() << "\n";
  const auto rep = train_forecaster(model, split.train, split.val, o, state, [&](const TSEpochStats& s) {
    losses.push_back(s.train_loss);
    vals.push_back(s.val_mse);
    std::printf("epoch %3zu  train_mse %.6f  val_mse %.6f\n", s.epoch, s.train_loss, s.val_mse);
    std::fflush(stdout);
    save();
    return stop_after == 0 || s.epoch < stop_after;
  });
  save();
  if (rep.stopped_early) std::cout << "early stop after epoch " << state.epochs_done << "\n";

  const TSMetrics test = evaluate_forecaster(model, split.test);
  const TSMetrics base = ts_metrics(repeat_last_baseline(split.test.inputs, tc.horizon), split.test.targets);
  nlohmann::ordered_json j;
  j["epochs"] = state.epochs_done;
  j["test"] = {{"mse", test.mse}, {"mae", test.mae}};
  j["repeat_last"] = {{"mse", base.mse}, {"mae", base.mae}};
  j["mse_reduction"] = 1.0 - test.mse / base.mse;
  io::write_file(out_path(a, "report.json"), j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";

  // First test window: one row per horizon step.
  const std::size_t m = tc.n_vars, s = tc.horizon;
  Tensor<float> first({1, m, tc.lookback});
  std::copy_n(split.test.inputs.data().begin(), m * tc.lookback, first.data().begin());
  const Tensor<float> pred = predict_series(model, first);
  std::vector<io::CsvRow> rows;
  for (std::size_t t = 0; t < s; ++t)
    for (std::size_t v = 0; v < m; ++v)
      rows.push_back({std::to_string(t + 1), names[v], io::fmt(pred[v * s + t]), io::fmt(split.test.targets[v * s + t])});
  io::write_csv(out_path(a, "forecast.csv"), {"step", "variable", "prediction", "target"}, rows);
  return kOk;
}

namespace {

template <typename T>
int reparam_verify_typed(const RunConfig& c, const CommonArgs& a) {
  FFNetModel<T> model = image_model<T>(c);
  if (c.boolean("verify.randomize")) randomize_statistics(model, c.unsigned_integer("model.seed") + 1);
  model.mode = NormMode::infer;
  FFNetModel<T> merged = reparameterize_model(model);
  if (c.boolean("verify.corrupt")) merged.stem1.main.conv.weight.value()[0] += T(0.5);
  const auto rep = assert_equivalence(model, merged, size_key(c, "verify.samples"), c.real("verify.tol"),
                                      size_key(c, "verify.resolution"), c.unsigned_integer("model.seed") + 2,
                                      size_key(c, "verify.batch"));
  std::vector<io::CsvRow> rows;
  for (const auto& l : rep.layers)
    rows.push_back({l.name, io::fmt(l.max_diff), l.max_diff <= rep.tol ? "pass" : "fail"});
  rows.push_back({"logits", io::fmt(rep.max_diff), rep.max_diff <= rep.tol ? "pass" : "fail"});
  double global = rep.max_diff;
  for (const auto& l : rep.layers) global = std::max(global, l.max_diff);
  rows.push_back({"global", io::fmt(global), rep.pass ? "pass" : "fail"});
  const std::string path = out_path(a, "reparam_report.csv");
  io::write_csv(path, {"layer", "max_abs_diff", "status"}, rows);
  std::printf("%s: params %zu -> %zu, aux branches %zu -> %zu, BN records %zu -> %zu\n", model.config.name.c_str(),
              count_params(model), count_params(merged), count_aux_branches(model), count_aux_branches(merged),
              count_bn_records(model), count_bn_records(merged));
  std::printf("logits max diff %.3e, worst layer diff %.3e, tol %.1e over %zu samples: %s\nreport: %s\n", rep.max_diff,
              global, rep.tol, rep.samples, rep.pass ? "pass" : "FAIL", path.c_str());
  return rep.pass ? kOk : kVerificationFailed;
}

}  // namespace

int cmd_reparam_verify(const CommonArgs& a) {
  const RunConfig c = load_config("reparam-verify", a);
  const std::string dt = c.str("verify.dtype");
  if (dt == "f32") return reparam_verify_typed<float>(c, a);
  if (dt == "f64") return reparam_verify_typed<double>(c, a);
  throw ConfigError("verify.dtype must be f32 or f64, got '" + dt + "'");
}

int cmd_erf(const CommonArgs& a) {
  const RunConfig c = load_config("erf", a);
  const std::size_t n = size_key(c, "erf.images"), res = size_key(c, "erf.resolution");
  Rng rng(c.unsigned_integer("erf.seed"));
  ContributionMap map;
  if (c.str("model.variant") == "dw7") {
    // One depthwise 7x7 conv, stride 1, same padding.
    Rng wr(c.unsigned_integer("model.seed"));
    const ConvLayer<float> conv{randn<float>({3, 1, 7, 7}, wr), Tensor<float>{},
                                ConvGeometry{1, Padding::same(7, 7), 3}};
    const Tensor<float> images = randn<float>({n, 3, res, res}, rng);
    const FeatureFn<float> f = [&](const ad::Var<float>& x) {
      return ad::conv2d(x, ad::Var<float>::constant(conv.weight), ad::Var<float>{}, conv.geometry);
    };
    map = central_contribution_map<float>(f, images, "dw7");
  } else {
    FFNetModel<float> model = image_model<float>(c);
    model.mode = NormMode::infer;
    map = central_contribution_map(model, uniform<float>({n, 3, res, res}, rng, 0.0f, 1.0f));
  }
  write_contribution_csv(out_path(a, "erf_map.csv"), map);
  write_contribution_pgm(out_path(a, "erf_map.pgm"), map);
  write_area_ratio_csv(out_path(a, "erf_ratio.csv"), map);
  std::printf("model %s, %zu images at %zux%zu\n", map.model_id.c_str(), map.image_count, res, res);
  for (double t : kErfThresholds) std::printf("r(%.2f) = %.4f\n", t, area_ratio(map, t));
  return kOk;
}

int cmd_kvm(const CommonArgs& a) {
  const RunConfig c = load_config("kvm", a);
  FFNetModel<float> model = image_model<float>(c);
  model.mode = NormMode::infer;
  const ImageDataset data = image_data(c);
  const long requested = c.integer("kvm.layer");
  const std::size_t blocks = model.block_count();
  if (requested >= static_cast<long>(blocks) || requested < -static_cast<long>(blocks))
    throw ConfigError("kvm.layer " + std::to_string(requested) + " out of range for " + std::to_string(blocks) +
                      " blocks");
  const std::size_t layer = static_cast<std::size_t>(requested < 0 ? requested + static_cast<long>(blocks) : requested);
  const CoefficientStats stats = per_class_key_means(model, layer, data, size_key(c, "kvm.batch"));
  write_stats_csv(out_path(a, "kvm_stats.csv"), stats);

  std::vector<double> activated(blocks, 0);
  std::size_t seen = 0;
  for (std::size_t start = 0; start < data.size(); start += 32) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + 32); ++i) idx.push_back(i);
    FeatureTrace<float> trace;
    {
      ad::NoGradGuard guard;
      forward_features(model, ad::Var<float>::constant(data.gather(idx)), &trace);
    }
    for (std::size_t b = 0; b < blocks; ++b)
      activated[b] += activation_sparsity(trace.pre_activations[b]) * static_cast<double>(idx.size());
    seen += idx.size();
  }
  std::vector<io::CsvRow> rows;
  for (std::size_t b = 0; b < blocks; ++b)
    rows.push_back({std::to_string(b), io::fmt(activated[b] / static_cast<double>(seen))});
  io::write_csv(out_path(a, "kvm_sparsity.csv"), {"layer", "activated_fraction"}, rows);

  std::printf("layer %zu: %zu keys\n", layer, stats.per_class_mean.dim(1));
  for (std::size_t cls = 0; cls < stats.sample_counts.size(); ++cls) {
    if (stats.sample_counts[cls] == 0) continue;
    const std::size_t key = most_activated_key(stats, cls);
    std::size_t first = 0;
    while (data.labels[first] != static_cast<int>(cls)) ++first;
    const Tensor<float> img = reshape(data.gather({first}), {data.images.dim(1), data.images.dim(2), data.images.dim(3)});
    const CoefficientMap map = coefficient_map(model, layer, key, img);
    const std::string p = out_path(a, "kvm_map_class" + std::to_string(cls) + ".pgm");
    write_map_pgm(p, map);
    std::printf("class %zu: %zu samples, most activated key %zu (mean %.4f), map %s\n", cls, stats.sample_counts[cls],
                key, stats.per_class_mean[cls * stats.per_class_mean.dim(1) + key], p.c_str());
  }
  std::printf("activated fraction (pre-activation > 0) in the last block: %.4f\n",
              activated[blocks - 1] / static_cast<double>(seen));
  return kOk;
}

int cmd_bench(const CommonArgs& a) {
  const RunConfig c = load_config("bench", a);
  std::vector<BenchKind> kinds;
  for (const auto& k : split_list(c.str("bench.kinds"))) kinds.push_back(parse_bench_kind(k));
  std::vector<std::size_t> tokens;
  for (const auto& t : split_list(c.str("bench.tokens"))) {
    try {
      tokens.push_back(std::stoul(t));
    } catch (const std::exception&) {
      throw ConfigError("bench.tokens entry '" + t + "' is not a number");
    }
  }
  BenchOptions o;
  o.channels = size_key(c, "bench.channels");
  o.kernel = size_key(c, "bench.kernel");
  o.warmup = size_key(c, "bench.warmup");
  o.iters = size_key(c, "bench.iters");
  o.seed = c.unsigned_integer("bench.seed");
  const auto rows = run_bench(kinds, tokens, o);
  for (const auto& r : rows) std::printf("%-10s %7zu tokens  %.6f s\n", r.mixer.c_str(), r.tokens, r.seconds);
  const std::string path = out_path(a, "bench.csv");
  write_bench_csv(path, rows);
  std::cout << "csv: " << path << "\n";
  return kOk;
}

int cmd_gen_data(const CommonArgs& a) {
  const RunConfig c = load_config("gen-data", a);
  const std::string kind = c.str("data.kind");
  if (kind == "shapes") {
    RunConfig img(kImageDataKeys);
    for (const char* k : {"data.task", "data.samples", "data.size", "data.channels", "data.seed"}) img.set(k, c.str(k));
    const ImageDataset ds = image_data(img);
    const std::string dir = out_path(a, "images");
    save_image_dir(ds, dir);
    std::cout << ds.size() << " images in " << dir << "\n";
    return kOk;
  }
  const Tensor<float> s = synth_series(parse_series_kind(kind), size_key(c, "data.vars"), size_key(c, "data.length"),
                                       c.unsigned_integer("data.seed"));
  std::vector<std::string> names;
  for (std::size_t v = 0; v < s.dim(1); ++v) names.push_back("var" + std::to_string(v));
  const std::string path = out_path(a, "series.csv");
  write_series_csv(path, s, names);
  std::cout << s.dim(0) << " steps x " << s.dim(1) << " variables in " << path << "\n";
  return kOk;
}

}  // namespace ffnet::cli
