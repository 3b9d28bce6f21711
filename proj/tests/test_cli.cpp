#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sys/wait.h>

#include "ffnet/bench.hpp"
#include "ffnet/checkpoint.hpp"
#include "ffnet/ffnet_image.hpp"
#include "ffnet/io.hpp"
#include "ffnet/run_config.hpp"

using namespace ffnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ffnet_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(FFNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

template <typename T>
std::vector<std::uint8_t> bytes_of(const Tensor<T>& t) {
  std::vector<std::uint8_t> b(t.size() * sizeof(T));
  std::memcpy(b.data(), t.ptr(), b.size());
  return b;
}

void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

std::vector<double> column(const std::vector<io::CsvRow>& rows, std::size_t c) {
  std::vector<double> out;
  for (std::size_t i = 1; i < rows.size(); ++i) out.push_back(std::stod(rows[i][c]));
  return out;
}

}  // namespace

TEST(Checkpoint, ByteLayoutOfOneRecord) {
  Checkpoint ck;
  ck.put("w", Tensor<float>({2}, std::vector<float>{1.0f, -2.5f}));
  std::string expect(kCheckpointMagic);
  put_u32(expect, 1);
  put_u32(expect, 1);
  put_u32(expect, 1);
  expect += "w";
  expect.push_back(0);
  expect.push_back(1);
  put_u32(expect, 2);
  for (float f : {1.0f, -2.5f}) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(expect, u);
  }
  EXPECT_EQ(serialize(ck), expect);
}

TEST(Checkpoint, RoundTripIsBitExactForBothDtypes) {
  Rng rng(1);
  Checkpoint ck;
  Tensor<float> f = randn<float>({3, 4, 5}, rng);
  f[0] = -0.0f;
  f[1] = std::numeric_limits<float>::denorm_min();
  f[2] = std::numeric_limits<float>::infinity();
  Tensor<double> d = randn<double>({7}, rng);
  d[0] = std::numeric_limits<double>::quiet_NaN();
  d[1] = -std::numeric_limits<double>::denorm_min();
  ck.put("a.f", f);
  ck.put("b.d", d);
  ck.put("one", Tensor<double>::scalar(2.0));
  ck.put_scalar("meta.epoch", 7);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint((dir / "x.ffck").string(), ck);
  const Checkpoint back = load_checkpoint((dir / "x.ffck").string());
  EXPECT_EQ(bytes_of(back.get<float>("a.f")), bytes_of(f));
  EXPECT_EQ(bytes_of(back.get<double>("b.d")), bytes_of(d));
  EXPECT_EQ(back.get<float>("a.f").shape(), f.shape());
  EXPECT_EQ(back.scalar("meta.epoch"), 7.0);
  EXPECT_EQ(serialize(back), serialize(ck));
  EXPECT_THROW(back.get<double>("a.f"), ConfigError);
  EXPECT_THROW(back.get<float>("missing"), IoError);
}

TEST(Checkpoint, ModelStateRoundTrip) {
  for (int dtype = 0; dtype < 2; ++dtype) {
    auto run = [](auto tag) {
      using T = decltype(tag);
      auto a = build_ffnet<T>(with_default_branches(toy_config()), 2);
      randomize_statistics(a, 3);
      auto b = build_ffnet<T>(with_default_branches(toy_config()), 4);
      Checkpoint ck;
      export_state(ck, a.state());
      const Checkpoint back = deserialize(serialize(ck));
      auto refs = b.state();
      import_state(back, refs);
      auto ra = a.state();
      for (std::size_t i = 0; i < ra.params.size(); ++i)
        EXPECT_EQ(bytes_of(ra.params[i].param->value()), bytes_of(refs.params[i].param->value()));
      for (std::size_t i = 0; i < ra.buffers.size(); ++i)
        EXPECT_EQ(bytes_of(*ra.buffers[i].tensor), bytes_of(*refs.buffers[i].tensor));
      auto other = build_ffnet<T>(with_default_branches(toy_config(5)), 5);
      auto other_refs = other.state();
      EXPECT_THROW(import_state(back, other_refs), Error);
    };
    if (dtype == 0)
      run(float{});
    else
      run(double{});
  }
}

TEST(Checkpoint, MalformedFilesAreRejected) {
  Checkpoint ck;
  ck.put("x", Tensor<double>({3}, 1.5));
  const std::string good = serialize(ck);
  for (std::size_t cut : {std::size_t{4}, std::size_t{12}, good.size() - 1})
    EXPECT_THROW(deserialize(std::string_view(good).substr(0, cut)), IoError) << cut;
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), IoError);
  std::string bad_version = good;
  bad_version[kCheckpointMagic.size()] = 9;
  EXPECT_THROW(deserialize(bad_version), IoError);
  EXPECT_THROW(deserialize(good + "z"), IoError);

  std::string dup(kCheckpointMagic);
  put_u32(dup, 1);
  put_u32(dup, 2);
  for (int i = 0; i < 2; ++i) {
    put_u32(dup, 1);
    dup += "a";
    dup.push_back(1);
    dup.push_back(0);
    dup.append(8, '\0');
  }
  EXPECT_THROW(deserialize(dup), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ck.ffck"), IoError);
}

TEST(RunConfigTest, ParsesOverridesAndComments) {
  RunConfig c({{"train.epochs", "30"}, {"train.lr", "1e-3"}, {"data.path", ""}, {"model.flag", "false"}});
  c.parse("# header\n\ntrain.epochs = 12   # trailing\ndata.path = \"a dir/with # hash\"\nmodel.flag = true\n");
  EXPECT_EQ(c.integer("train.epochs"), 12);
  EXPECT_DOUBLE_EQ(c.real("train.lr"), 1e-3);
  EXPECT_EQ(c.str("data.path"), "a dir/with # hash");
  EXPECT_TRUE(c.boolean("model.flag"));
  RunConfig again({{"train.epochs", "30"}, {"train.lr", "1e-3"}, {"data.path", ""}, {"model.flag", "false"}});
  again.parse(c.dump());
  EXPECT_EQ(again.values(), c.values());
}

TEST(RunConfigTest, ErrorsNameTheProblem) {
  const ConfigSchema schema{{"train.epochs", "30"}, {"model.flag", "false"}};
  auto fails = [&](const std::string& text, const std::string& needle) {
    RunConfig c(schema);
    try {
      c.parse(text, "cfg");
      ADD_FAILURE() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  fails("train.epoch = 3\n", "unknown key");
  fails("train.epochs = 3\ntrain.epochs = 4\n", "duplicate");
  fails("train.epochs 3\n", "expected");
  fails("\n\ntrain.epochs\n", "cfg:3");
  fails("model.flag = \"yes\n", "unterminated");
  RunConfig c(schema);
  c.set("train.epochs", "abc");
  EXPECT_THROW(c.integer("train.epochs"), ConfigError);
  c.set("model.flag", "maybe");
  EXPECT_THROW(c.boolean("model.flag"), ConfigError);
  EXPECT_THROW(c.set("nope", "1"), ConfigError);
  EXPECT_THROW(c.load("/nonexistent/run.cfg"), Error);
}

TEST(Bench, RowsSortedAndComplete) {
  BenchOptions o;
  o.warmup = 1;
  o.iters = 3;
  o.channels = 8;
  const auto rows = run_bench({BenchKind::ffnified, BenchKind::attention, BenchKind::convnext}, {64, 16}, o);
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_TRUE(std::tie(rows[i - 1].mixer, rows[i - 1].tokens) < std::tie(rows[i].mixer, rows[i].tokens));
  for (const auto& r : rows) EXPECT_GT(r.seconds, 0.0);
  EXPECT_THROW(run_bench({BenchKind::ffnified}, {20}, o), Error);
  EXPECT_THROW(parse_bench_kind("mamba"), ConfigError);
}

TEST(Resume, LibraryLevelLossesMatch) {
  const ImageDataset data = make_shapes_dataset(32, 32, 6);
  TrainOptions o;
  o.epochs = 4;
  o.batch_size = 8;
  o.seed = 7;
  auto full = build_ffnet<float>(toy_config(), 8);
  TrainState<float> fs_state;
  const auto whole = train_toy(full, data, o, fs_state);

  auto first = build_ffnet<float>(toy_config(), 8);
  TrainState<float> st;
  train_toy(first, data, o, st, [](const EpochStats& s) { return s.epoch < 2; });
  Checkpoint ck;
  export_state(ck, first.state());
  export_optimizer(ck, st.optimizer, first.state());
  const Checkpoint back = deserialize(serialize(ck));

  auto second = build_ffnet<float>(toy_config(), 99);
  auto refs = second.state();
  import_state(back, refs);
  TrainState<float> resumed;
  import_optimizer(back, resumed.optimizer, refs);
  resumed.epochs_done = 2;
  const auto tail = train_toy(second, data, o, resumed);
  ASSERT_EQ(tail.epochs.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(tail.epochs[i].loss, whole.epochs[i + 2].loss, 1e-6);
}

TEST(Cli, UsageErrorsExitTwo) {
  const fs::path d = scratch("usage");
  EXPECT_EQ(run_cli("", d / "log"), 2);
  EXPECT_EQ(run_cli("no-such-command", d / "log"), 2);
  EXPECT_EQ(run_cli("train-image --set foo.bar=1 --out " + (d / "o").string(), d / "log"), 2);
  EXPECT_NE(io::read_file((d / "log").string()).find("foo.bar"), std::string::npos);
  EXPECT_EQ(run_cli("train-image --set data.source=dir --set data.path=/nonexistent/images --out " + (d / "o").string(),
                    d / "log"),
            2);
  std::ofstream(d / "bad.cfg") << "train.epochs = 3\ntrain.epochz = 4\n";
  EXPECT_EQ(run_cli("train-image --config " + (d / "bad.cfg").string() + " --out " + (d / "o").string(), d / "log"), 2);
  EXPECT_EQ(run_cli("model-report --variant FFNet-7", d / "log"), 2);
}

TEST(Cli, ModelReportShowsReferences) {
  const fs::path d = scratch("report");
  ASSERT_EQ(run_cli("model-report", d / "log"), 0);
  const std::string out = io::read_file((d / "log").string());
  EXPECT_NE(out.find("13.7"), std::string::npos);
  EXPECT_NE(out.find("79.2"), std::string::npos);
  EXPECT_NE(out.find("-2.26"), std::string::npos);
}

TEST(Cli, GradcheckExitCodes) {
  const fs::path d = scratch("gradcheck");
  EXPECT_EQ(run_cli("gradcheck --set gradcheck.instances=3 --out " + (d / "ok").string(), d / "log"), 0);
  const auto rows = io::read_csv((d / "ok" / "gradcheck.csv").string());
  std::set<std::string> names;
  for (std::size_t i = 1; i < rows.size(); ++i) names.insert(rows[i][0]);
  for (auto op : ad::kDifferentiableOps) EXPECT_TRUE(names.count(std::string(op))) << op;
  EXPECT_EQ(run_cli("gradcheck --inject-faulty-op --set gradcheck.instances=3 --out " + (d / "bad").string(), d / "log"),
            1);
}

TEST(Cli, TrainImageMetricsAndResume) {
  const fs::path d = scratch("train");
  const std::string common = " --set data.samples=48 --set train.epochs=3 --set train.batch_size=16 --seed 3";
  ASSERT_EQ(run_cli("train-image" + common + " --out " + (d / "full").string(), d / "log"), 0);
  const auto full = io::read_csv((d / "full" / "metrics.csv").string());
  ASSERT_EQ(full.size(), 4u);
  ASSERT_EQ(run_cli("train-image" + common + " --set train.stop_after=1 --out " + (d / "part").string(), d / "log"), 0);
  EXPECT_EQ(io::read_csv((d / "part" / "metrics.csv").string()).size(), 2u);
  ASSERT_EQ(run_cli("train-image" + common + " --set train.resume=" + (d / "part" / "checkpoint.ffck").string() +
                        " --out " + (d / "part").string(),
                    d / "log"),
            0);
  const auto resumed = io::read_csv((d / "part" / "metrics.csv").string());
  ASSERT_EQ(resumed.size(), 4u);
  const auto a = column(full, 1), b = column(resumed, 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  EXPECT_EQ(run_cli("train-image" + common + " --set train.resume=/nonexistent.ffck --out " + (d / "x").string(),
                    d / "log"),
            2);
}

TEST(Cli, ForecastWritesReportAndOneRowPerEpoch) {
  const fs::path d = scratch("forecast");
  ASSERT_EQ(run_cli("forecast --set data.length=600 --set data.vars=2 --set data.step=8 --set model.d_model=8 "
                    "--set model.expansion=2 --set model.lookback=48 --set model.horizon=24 --set train.epochs=2 "
                    "--set train.patience=0 --out " +
                        (d / "o").string(),
                    d / "log"),
            0);
  EXPECT_EQ(io::read_csv((d / "o" / "metrics.csv").string()).size(), 3u);
  EXPECT_TRUE(fs::exists(d / "o" / "report.json"));
  EXPECT_TRUE(fs::exists(d / "o" / "forecast.csv"));
}

TEST(Cli, ReparamVerifyPassesAndCatchesCorruption) {
  const fs::path d = scratch("reparam");
  const std::string small =
      " --set model.variant=toy --set verify.samples=4 --set verify.resolution=32 --out " + (d / "o").string();
  EXPECT_EQ(run_cli("reparam-verify --set model.branches=none" + small, d / "log"), 0);
  EXPECT_TRUE(fs::exists(d / "o" / "reparam_report.csv"));
  EXPECT_EQ(run_cli("reparam-verify --set model.branches=default --set verify.dtype=f64" + small, d / "log"), 0);
  EXPECT_EQ(run_cli("reparam-verify --set model.branches=default --set verify.corrupt=true" + small, d / "log"), 1);
}

TEST(Cli, ErfDw7WritesFourThresholds) {
  const fs::path d = scratch("erf");
  ASSERT_EQ(run_cli("erf --set model.variant=dw7 --set erf.images=2 --set erf.resolution=32 --out " + (d / "o").string(),
                    d / "log"),
            0);
  const auto rows = io::read_csv((d / "o" / "erf_ratio.csv").string());
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_DOUBLE_EQ(std::stod(rows[4][1]), 49.0 / 1024);
  EXPECT_TRUE(fs::exists(d / "o" / "erf_map.pgm"));
}

TEST(Cli, KvmStatsHaveClassByKeyShape) {
  const fs::path d = scratch("kvm");
  ASSERT_EQ(run_cli("kvm --set data.samples=16 --out " + (d / "o").string(), d / "log"), 0);
  const auto rows = io::read_csv((d / "o" / "kvm_stats.csv").string());
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r.size(), 2u + 3 * 128);
  EXPECT_TRUE(fs::exists(d / "o" / "kvm_map_class1.pgm"));
}

TEST(Cli, BenchAndGenData) {
  const fs::path d = scratch("bench");
  ASSERT_EQ(run_cli("bench --set bench.tokens=16,64 --set bench.iters=2 --set bench.warmup=1 --out " +
                        (d / "o").string(),
                    d / "log"),
            0);
  const auto rows = io::read_csv((d / "o" / "bench.csv").string());
  ASSERT_EQ(rows.size(), 7u);
  for (std::size_t i = 2; i < rows.size(); ++i)
    EXPECT_TRUE(rows[i - 1][0] < rows[i][0] || (rows[i - 1][0] == rows[i][0] && std::stoul(rows[i - 1][1]) <
                                                                                    std::stoul(rows[i][1])));
  ASSERT_EQ(run_cli("gen-data --set data.samples=10 --set data.size=32 --out " + (d / "img").string(), d / "log"), 0);
  const ImageDataset ds = load_image_dir((d / "img" / "images").string());
  EXPECT_EQ(ds.size(), 10u);
  EXPECT_EQ(ds.images.shape(), (Shape{10, 3, 32, 32}));
  ASSERT_EQ(run_cli("train-image --set data.source=dir --set data.path=" + (d / "img" / "images").string() +
                        " --set train.epochs=1 --out " + (d / "t").string(),
                    d / "log"),
            0);
}
