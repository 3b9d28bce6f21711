#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "ffnet/tensor.hpp"

using namespace ffnet::cli;

namespace {

struct Sub {
  CLI::App* app;
  CommonArgs args;
  bool print_config = false;
};

void add_common(Sub& s) {
  s.app->add_option("--config", s.args.config, "RunConfig file (key = value lines)");
  s.app->add_option("--seed", s.args.seed, "Seed override");
  s.app->add_option("--out", s.args.out, "Output directory")->capture_default_str();
  s.app->add_option("--set", s.args.overrides, "Config override key=value (repeatable)");
  s.app->add_flag("--print-config", s.print_config, "Print accepted keys with defaults and exit");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FFNet toolkit: models, verification suites, analyses and benchmarks"};
  app.require_subcommand(1);

  std::map<std::string, Sub> subs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gradcheck", "Finite-difference checks of every differentiable op and two tiny models"},
      {"train-image", "Train an image classifier; writes checkpoint and metrics"},
      {"forecast", "Train and evaluate a time-series forecaster"},
      {"reparam-verify", "Merge branches and BN, then check output equivalence"},
      {"erf", "Effective receptive field map and area ratios"},
      {"kvm", "Key-value memory statistics and coefficient maps"},
      {"bench", "Token-mixer timing versus token count"},
      {"gen-data", "Write a synthetic image directory or series CSV"},
  };
  for (const auto& [name, help] : commands) {
    Sub& s = subs[name];
    s.app = app.add_subcommand(name, help);
    add_common(s);
  }
  bool inject = false;
  subs["gradcheck"].app->add_flag("--inject-faulty-op", inject, "Add a GELU with a wrong backward rule");

  std::vector<std::string> variants{"all"};
  std::size_t input_hw = 256;
  auto* report = app.add_subcommand("model-report", "Parameter and FLOP table for FFNet-1..4");
  report->add_option("--variant", variants, "FFNet-1..FFNet-4 or all")->capture_default_str();
  report->add_option("--input-hw", input_hw, "Input side length")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsageError;
  }

  try {
    if (report->parsed()) return cmd_model_report(variants, input_hw);
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      if (s.print_config) return cmd_show_config(name);
      if (name == "gradcheck") return cmd_gradcheck(s.args, inject);
      if (name == "train-image") return cmd_train_image(s.args);
      if (name == "forecast") return cmd_forecast(s.args);
      if (name == "reparam-verify") return cmd_reparam_verify(s.args);
      if (name == "erf") return cmd_erf(s.args);
      if (name == "kvm") return cmd_kvm(s.args);
      if (name == "bench") return cmd_bench(s.args);
      if (name == "gen-data") return cmd_gen_data(s.args);
    }
  } catch (const ffnet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ffnet::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ffnet::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kVerificationFailed;
  }
  return kUsageError;
}
