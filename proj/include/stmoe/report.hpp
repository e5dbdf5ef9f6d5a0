// SPDX-License-Identifier: Apache-2.0
//
// Output directory of one command: artifacts, the effective configuration
// and manifest.json listing every file with its SHA-256.
#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace stmoe {

inline constexpr const char* kToolVersion = "0.1.0";

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

class ReportBundle {
 public:
  ReportBundle(std::filesystem::path dir, std::string command, std::uint64_t seed);

  [[nodiscard]] const std::filesystem::path& dir() const { return dir_; }
  [[nodiscard]] std::filesystem::path path(const std::string& name) const { return dir_ / name; }

  // Writes an artifact (relative name, subdirectories allowed).
  void write(const std::string& name, std::string_view content);
  void write_json(const std::string& name, const nlohmann::json& j);
  // Registers a file that something else already wrote into the bundle.
  void add_existing(const std::string& name);

  // Writes manifest.json and returns it.
  nlohmann::json finalize();

 private:
  std::filesystem::path dir_;
  std::string command_;
  std::uint64_t seed_;
  std::vector<std::string> files_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace stmoe
