#pragma once

// Binary checkpoints:
//   "FFNETCKPT" | version u32 | record count u32 |
//   per record: name length u32 | name | dtype u8 (0 f32, 1 f64) | rank u8 |
//               dims u32[rank] | raw scalars
// All integers and scalars are little-endian.

#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ffnet/optim.hpp"

namespace ffnet {

inline constexpr std::string_view kCheckpointMagic = "FFNETCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> tensor;
};

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, const Tensor<T>& t);
  void put_scalar(const std::string& name, double v);

  bool contains(const std::string& name) const;
  /// Throws IoError when absent and ConfigError on a dtype mismatch.
  template <typename T>
  const Tensor<T>& get(const std::string& name) const;
  double scalar(const std::string& name) const;

  const std::vector<CheckpointRecord>& records() const { return records_; }

 private:
  const CheckpointRecord& find(const std::string& name) const;
  std::vector<CheckpointRecord> records_;
};

std::string serialize(const Checkpoint& ck);
Checkpoint deserialize(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Parameters and buffers under `prefix`.
template <typename T>
void export_state(Checkpoint& ck, const StateRefs<T>& refs, const std::string& prefix = "model.");
/// Every parameter and buffer must be present with the same dtype and shape.
template <typename T>
void import_state(const Checkpoint& ck, StateRefs<T>& refs, const std::string& prefix = "model.");

template <typename T>
void export_optimizer(Checkpoint& ck, AdamW<T>& opt, const StateRefs<T>& refs, const std::string& prefix = "optim.");
template <typename T>
void import_optimizer(const Checkpoint& ck, AdamW<T>& opt, const StateRefs<T>& refs,
                      const std::string& prefix = "optim.");

}  // namespace ffnet
