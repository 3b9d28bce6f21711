#include "ffnet/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace ffnet::io {

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string csv_line(const CsvRow& row) {
  std::string line;
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) line += ',';
    line += csv_field(row[i]);
  }
  return line;
}

std::vector<CsvRow> parse_csv(std::string_view text) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw IoError("unterminated quoted CSV field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << contents;
  if (!out) throw IoError("write failed for " + path);
}

std::vector<CsvRow> read_csv(const std::string& path) { return parse_csv(read_file(path)); }

void write_csv(const std::string& path, const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::string text = header.empty() ? std::string() : csv_line(header) + "\r\n";
  for (const auto& r : rows) text += csv_line(r) + "\r\n";
  write_file(path, text);
}

std::string fmt(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

// Netpbm header tokens, skipping comments.
struct PnmReader {
  const std::string& s;
  std::size_t pos = 0;

  std::size_t number() {
    for (;;) {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
      if (pos < s.size() && s[pos] == '#') {
        while (pos < s.size() && s[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::size_t v = 0;
    auto res = std::from_chars(s.data() + pos, s.data() + s.size(), v);
    if (res.ec != std::errc()) throw IoError("malformed Netpbm header");
    pos = static_cast<std::size_t>(res.ptr - s.data());
    return v;
  }
};

}  // namespace

Tensor<float> read_pnm(const std::string& path) {
  const std::string s = read_file(path);
  if (s.size() < 2 || s[0] != 'P') throw IoError(path + ": not a Netpbm file");
  const char kind = s[1];
  std::size_t channels;
  bool binary;
  switch (kind) {
    case '2': channels = 1; binary = false; break;
    case '3': channels = 3; binary = false; break;
    case '5': channels = 1; binary = true; break;
    case '6': channels = 3; binary = true; break;
    default: throw IoError(path + ": unsupported Netpbm kind P" + std::string(1, kind));
  }
  PnmReader r{s, 2};
  const std::size_t w = r.number(), h = r.number(), maxval = r.number();
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw IoError(path + ": bad Netpbm dimensions");
  Tensor<float> img({channels, h, w});
  const std::size_t count = channels * h * w;
  std::vector<std::size_t> raw(count);
  if (binary) {
    std::size_t p = r.pos + 1;  // single whitespace after maxval
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    if (s.size() < p + count * bytes) throw IoError(path + ": truncated pixel data");
    for (std::size_t i = 0; i < count; ++i) {
      const auto* u = reinterpret_cast<const unsigned char*>(s.data() + p + i * bytes);
      raw[i] = bytes == 2 ? (std::size_t(u[0]) << 8) | u[1] : u[0];
    }
  } else {
    for (auto& v : raw) v = r.number();
  }
  // interleaved HWC -> planar CHW
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t v = raw[(y * w + x) * channels + c];
        if (v > maxval) throw IoError(path + ": sample exceeds maxval");
        img[(c * h + y) * w + x] = static_cast<float>(v) / static_cast<float>(maxval);
      }
  return img;
}

void write_pnm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw ShapeError("write_pnm expects [1|3, H, W], got " + to_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::string out = std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float v = std::clamp(image[(ch * h + y) * w + x], 0.0f, 1.0f);
        out += static_cast<char>(static_cast<unsigned char>(v * 255.0f + 0.5f));
      }
  write_file(path, out);
}

void write_pgm16(const std::string& path, const Tensor<double>& map) {
  if (map.rank() != 2) throw ShapeError("write_pgm16 expects [H, W], got " + to_string(map.shape()));
  const std::size_t h = map.dim(0), w = map.dim(1);
  const auto [lo_it, hi_it] = std::minmax_element(map.data().begin(), map.data().end());
  const double lo = *lo_it, hi = *hi_it;
  std::string out = "P5\n# min=" + fmt(lo) + " max=" + fmt(hi) + "\n" + std::to_string(w) + " " +
                    std::to_string(h) + "\n65535\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = hi > lo ? (map[i] - lo) / (hi - lo) : 0.0;
    const auto v = static_cast<unsigned>(t * 65535.0 + 0.5);
    out += static_cast<char>((v >> 8) & 0xff);
    out += static_cast<char>(v & 0xff);
  }
  write_file(path, out);
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  std::filesystem::create_directories(path, ec);
  if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

}  // namespace ffnet::io
