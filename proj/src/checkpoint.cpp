#include "ffnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <unordered_set>

#include "ffnet/io.hpp"

namespace ffnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void Checkpoint::put(const std::string& name, const Tensor<T>& t) {
  for (auto& r : records_)
    if (r.name == name) {
      r.tensor = t;
      return;
    }
  records_.push_back({name, t});
}

void Checkpoint::put_scalar(const std::string& name, double v) { put(name, Tensor<double>::scalar(v)); }

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return true;
  return false;
}

const CheckpointRecord& Checkpoint::find(const std::string& name) const {
  for (const auto& r : records_)
    if (r.name == name) return r;
  throw IoError("checkpoint has no record '" + name + "'");
}

template <typename T>
const Tensor<T>& Checkpoint::get(const std::string& name) const {
  const auto* t = std::get_if<Tensor<T>>(&find(name).tensor);
  if (!t) throw ConfigError("checkpoint record '" + name + "' has a different dtype");
  return *t;
}

double Checkpoint::scalar(const std::string& name) const {
  const Tensor<double>& t = get<double>(name);
  if (t.size() != 1) throw ConfigError("checkpoint record '" + name + "' is not a scalar");
  return t[0];
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t to_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw IoError(std::string(what) + " too large for the checkpoint format");
  return static_cast<std::uint32_t>(v);
}

class Reader {
 public:
  explicit Reader(std::string_view b) : b_(b) {}
  std::string_view take(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) throw IoError(std::string("truncated checkpoint while reading ") + what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

template <typename T>
Tensor<T> read_tensor(Reader& r, const Shape& shape) {
  Tensor<T> t(shape);
  const auto raw = r.take(t.size() * sizeof(T), "tensor data");
  if (!raw.empty()) std::memcpy(t.ptr(), raw.data(), raw.size());
  return t;
}

}  // namespace

std::string serialize(const Checkpoint& ck) {
  std::string out(kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, to_u32(ck.records().size(), "record count"));
  for (const auto& rec : ck.records()) {
    put_u32(out, to_u32(rec.name.size(), "record name"));
    out += rec.name;
    std::visit(
        [&](const auto& t) {
          using T = typename std::decay_t<decltype(t)>::value_type;
          out.push_back(static_cast<char>(std::is_same_v<T, float> ? 0 : 1));
          if (t.rank() > 255) throw IoError("tensor rank exceeds 255");
          out.push_back(static_cast<char>(t.rank()));
          for (std::size_t d : t.shape()) put_u32(out, to_u32(d, "dimension"));
          out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(T));
        },
        rec.tensor);
  }
  return out;
}

Checkpoint deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kCheckpointMagic.size(), "magic") != kCheckpointMagic) throw IoError("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32("record count");
  Checkpoint ck;
  std::unordered_set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.take(r.u32("name length"), "name"));
    if (!names.insert(name).second) throw IoError("duplicate checkpoint record '" + name + "'");
    const std::uint8_t dtype = r.u8("dtype");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dimension");
    if (dtype == 0)
      ck.put(name, read_tensor<float>(r, shape));
    else if (dtype == 1)
      ck.put(name, read_tensor<double>(r, shape));
    else
      throw IoError("unknown dtype code " + std::to_string(dtype) + " in record '" + name + "'");
  }
  if (!r.done()) throw IoError("trailing bytes after the last checkpoint record");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) { io::write_file(path, serialize(ck)); }

Checkpoint load_checkpoint(const std::string& path) { return deserialize(io::read_file(path)); }

namespace {

template <typename T>
void load_into(const Checkpoint& ck, const std::string& name, Tensor<T>& dst) {
  const Tensor<T>& src = ck.get<T>(name);
  if (src.shape() != dst.shape())
    throw ShapeError("checkpoint record '" + name + "' has shape " + to_string(src.shape()) + ", expected " +
                     to_string(dst.shape()));
  dst = src;
}

}  // namespace

template <typename T>
void export_state(Checkpoint& ck, const StateRefs<T>& refs, const std::string& prefix) {
  for (const auto& p : refs.params) ck.put(prefix + p.name, p.param->value());
  for (const auto& b : refs.buffers) ck.put(prefix + b.name, *b.tensor);
}

template <typename T>
void import_state(const Checkpoint& ck, StateRefs<T>& refs, const std::string& prefix) {
  for (auto& p : refs.params) load_into(ck, prefix + p.name, p.param->value());
  for (auto& b : refs.buffers) load_into(ck, prefix + b.name, *b.tensor);
}

template <typename T>
void export_optimizer(Checkpoint& ck, AdamW<T>& opt, const StateRefs<T>& refs, const std::string& prefix) {
  ck.put_scalar(prefix + "steps", static_cast<double>(opt.steps()));
  const auto& m = opt.first_moments();
  const auto& v = opt.second_moments();
  if (m.empty()) return;
  if (m.size() != refs.params.size()) throw ConfigError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < m.size(); ++i) {
    ck.put(prefix + "m." + refs.params[i].name, m[i]);
    ck.put(prefix + "v." + refs.params[i].name, v[i]);
  }
}

template <typename T>
void import_optimizer(const Checkpoint& ck, AdamW<T>& opt, const StateRefs<T>& refs, const std::string& prefix) {
  const auto steps = static_cast<std::uint64_t>(ck.scalar(prefix + "steps"));
  std::vector<Tensor<T>> m, v;
  if (steps > 0) {
    for (const auto& p : refs.params) {
      m.push_back(ck.get<T>(prefix + "m." + p.name));
      v.push_back(ck.get<T>(prefix + "v." + p.name));
    }
  }
  opt.restore(steps, std::move(m), std::move(v));
}

template void Checkpoint::put<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::put<double>(const std::string&, const Tensor<double>&);
template const Tensor<float>& Checkpoint::get<float>(const std::string&) const;
template const Tensor<double>& Checkpoint::get<double>(const std::string&) const;

#define FFNET_INSTANTIATE(T)                                                                              \
  template void export_state<T>(Checkpoint&, const StateRefs<T>&, const std::string&);                    \
  template void import_state<T>(const Checkpoint&, StateRefs<T>&, const std::string&);                    \
  template void export_optimizer<T>(Checkpoint&, AdamW<T>&, const StateRefs<T>&, const std::string&);    \
  template void import_optimizer<T>(const Checkpoint&, AdamW<T>&, const StateRefs<T>&, const std::string&);

FFNET_INSTANTIATE(float)
FFNET_INSTANTIATE(double)
#undef FFNET_INSTANTIATE

}  // namespace ffnet
