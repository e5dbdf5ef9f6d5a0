// SPDX-License-Identifier: Apache-2.0
#include "stmoe/report.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <memory>

#include "stmoe/error.hpp"

namespace stmoe {

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
      throw Error(Errc::Io, "sha256: digest init failed");
  }
  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_.get(), data, n) != 1) throw Error(Errc::Io, "sha256: update failed");
  }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_.get(), md.data(), &len) != 1) throw Error(Errc::Io, "sha256: final failed");
    std::string out;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
      std::snprintf(buf, sizeof buf, "%02x", md[i]);
      out += buf;
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

ReportBundle::ReportBundle(std::filesystem::path dir, std::string command, std::uint64_t seed)
    : dir_(std::move(dir)), command_(std::move(command)), seed_(seed), start_(std::chrono::steady_clock::now()) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error(Errc::Io, "cannot create " + dir_.string() + ": " + ec.message());
}

void ReportBundle::write(const std::string& name, std::string_view content) {
  const auto p = dir_ / name;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + p.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(Errc::Io, "write failed: " + p.string());
  add_existing(name);
}

void ReportBundle::write_json(const std::string& name, const nlohmann::json& j) { write(name, j.dump(2) + "\n"); }

void ReportBundle::add_existing(const std::string& name) {
  if (!std::filesystem::exists(dir_ / name)) throw Error(Errc::Io, "missing bundle file " + name);
  if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
}

nlohmann::json ReportBundle::finalize() {
  std::vector<std::string> names = files_;
  std::sort(names.begin(), names.end());
  nlohmann::json files = nlohmann::json::array();
  for (const auto& n : names) {
    const auto p = dir_ / n;
    files.push_back({{"path", n}, {"sha256", sha256_file(p)}, {"bytes", std::filesystem::file_size(p)}});
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  nlohmann::json m = {{"command", command_},
                      {"version", kToolVersion},
                      {"seed", seed_},
                      {"wall_time_s", wall},
                      {"files", files}};
  std::ofstream out(dir_ / "manifest.json");
  if (!out) throw Error(Errc::Io, "cannot write manifest");
  out << m.dump(2) << '\n';
  return m;
}

}  // namespace stmoe
