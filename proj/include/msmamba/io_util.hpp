#pragma once

#include <string>

namespace msmamba {

/// Writes content to path via a temp file in the same directory plus rename,
/// so readers never observe a partial file.
void write_file_atomic(const std::string& path, const std::string& content);

/// Shortest decimal form that round-trips a double ("%.17g").
std::string fmt_g17(double v);

/// Exact hexadecimal float form ("%a").
std::string fmt_hex(double v);

}  // namespace msmamba
