#pragma once

// CSV (RFC 4180) and Netpbm image helpers.

#include <string>
#include <string_view>
#include <vector>

#include "ffnet/tensor.hpp"

namespace ffnet::io {

using CsvRow = std::vector<std::string>;

std::string csv_field(std::string_view s);
std::string csv_line(const CsvRow& row);
std::vector<CsvRow> parse_csv(std::string_view text);
std::vector<CsvRow> read_csv(const std::string& path);
/// An empty header writes no header line.
void write_csv(const std::string& path, const CsvRow& header, const std::vector<CsvRow>& rows);

/// Shortest round-trippable decimal form.
std::string fmt(double v);

/// P2/P3/P5/P6 with maxval up to 65535. Returns [C, H, W] scaled to [0, 1].
Tensor<float> read_pnm(const std::string& path);
/// [1 or 3, H, W] in [0, 1], 8-bit binary PGM or PPM.
void write_pnm(const std::string& path, const Tensor<float>& image);
/// [H, W] map min-max normalized to 16 bits; the range goes in a comment line.
void write_pgm16(const std::string& path, const Tensor<double>& map);

void ensure_dir(const std::string& path);
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

}  // namespace ffnet::io
