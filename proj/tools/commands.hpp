#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ffnet::cli {

inline constexpr int kOk = 0;
inline constexpr int kVerificationFailed = 1;
inline constexpr int kUsageError = 2;

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> overrides;  // key=value
};

int cmd_gradcheck(const CommonArgs& a, bool inject_faulty_op);
int cmd_model_report(const std::vector<std::string>& variants, std::size_t input_hw);
int cmd_train_image(const CommonArgs& a);
int cmd_forecast(const CommonArgs& a);
int cmd_reparam_verify(const CommonArgs& a);
int cmd_erf(const CommonArgs& a);
int cmd_kvm(const CommonArgs& a);
int cmd_bench(const CommonArgs& a);
int cmd_gen_data(const CommonArgs& a);
/// Prints the accepted keys and defaults of a command.
int cmd_show_config(const std::string& command);

}  // namespace ffnet::cli
