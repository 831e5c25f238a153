#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace vlbias {

inline constexpr const char* kToolVersion = "0.1.0";

// Entry point of the `vlbias` executable; returns the process exit code
// (0 ok, 1 usage, 2 data, 3 numerical).
int cli_main(int argc, const char* const* argv);
// Same, with `args` excluding the program name.
int cli_main(const std::vector<std::string>& args);

// Stable 64-bit FNV-1a hash of the canonical (key-sorted) JSON dump.
std::string config_hash(const nlohmann::json& resolved);

}  // namespace vlbias
