// SPDX-License-Identifier: Apache-2.0
#include "stmoe/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace stmoe {

namespace {

std::uint32_t to_le(std::uint32_t x) {
  if constexpr (std::endian::native == std::endian::little) return x;
  return ((x & 0xFFu) << 24) | ((x & 0xFF00u) << 8) | ((x >> 8) & 0xFF00u) | (x >> 24);
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_heads", c.n_heads},     {"n_layers", c.n_layers},
          {"vocab_size", c.vocab_size}, {"d_space", c.d_space}, {"n_experts", c.n_experts},
          {"top_k", c.top_k},     {"tau", c.tau},             {"hops", c.hops},
          {"router", router_mode_name(c.router)}, {"max_seq", c.max_seq}, {"tie_embeddings", c.tie_embeddings},
          {"init_std", c.init_std}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.at("d_model").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_space = j.at("d_space").get<int>();
    c.n_experts = j.at("n_experts").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.tau = j.at("tau").get<double>();
    c.hops = j.at("hops").get<int>();
    c.router = parse_router_mode(j.at("router").get<std::string>());
    c.max_seq = j.at("max_seq").get<int>();
    c.tie_embeddings = j.at("tie_embeddings").get<bool>();
    c.init_std = j.at("init_std").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ShapeMismatch, std::string("manifest config: ") + e.what());
  }
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocab& vocab, std::int64_t step,
                     std::uint64_t seed) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto* t : model.params().tensors()) {
    tensors.push_back({{"name", t->name}, {"shape", t->shape}, {"offset", offset}, {"count", t->data.size()}});
    offset += t->data.size() * sizeof(float);
  }
  nlohmann::json vocab_j = nlohmann::json::array();
  for (int i = 0; i < vocab.size(); ++i)
    vocab_j.push_back({vocab.tokens[static_cast<std::size_t>(i)], vocab.freq[static_cast<std::size_t>(i)]});
  const nlohmann::json manifest = {{"format", kCheckpointVersion},
                                   {"config", config_to_json(model.config())},
                                   {"tensors", tensors},
                                   {"payload_bytes", offset},
                                   {"step", step},
                                   {"seed", seed},
                                   {"vocab", vocab_j}};
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << kCheckpointVersion << '\n' << text.size() << '\n' << text;
  for (const auto* t : model.params().tensors()) {
    std::vector<std::uint32_t> buf(t->data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_le(std::bit_cast<std::uint32_t>(t->data[i]));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  }
  if (!out) throw Error(Errc::Io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointVersion)
    throw Error(Errc::VersionMismatch, path.string() + ": expected " + kCheckpointVersion + " header");
  std::string len_line;
  if (!std::getline(in, len_line)) throw Error(Errc::Truncated, path.string() + ": missing manifest length");
  std::size_t len = 0;
  try {
    len = std::stoull(len_line);
  } catch (const std::exception&) {
    throw Error(Errc::Truncated, path.string() + ": bad manifest length");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (static_cast<std::size_t>(in.gcount()) != len) throw Error(Errc::Truncated, path.string() + ": manifest cut short");
  const auto payload_start = static_cast<std::uint64_t>(in.tellg());

  nlohmann::json m;
  try {
    m = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::Truncated, path.string() + ": manifest unreadable: " + e.what());
  }
  if (m.value("format", "") != kCheckpointVersion)
    throw Error(Errc::VersionMismatch, path.string() + ": manifest format " + m.value("format", "?"));

  const ModelConfig cfg = config_from_json(m.at("config"));
  ModelParams<float> params = make_params<float>(cfg);
  auto tensors = params.tensors();
  const auto& table = m.at("tensors");
  if (table.size() != tensors.size()) throw Error(Errc::ShapeMismatch, "tensor count differs from config");

  const auto file_size = static_cast<std::uint64_t>(std::filesystem::file_size(path));
  const std::uint64_t payload_bytes = m.at("payload_bytes").get<std::uint64_t>();
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& row = table[i];
    auto* t = tensors[i];
    if (row.at("name").get<std::string>() != t->name || row.at("shape").get<std::vector<int>>() != t->shape ||
        row.at("count").get<std::size_t>() != t->data.size())
      throw Error(Errc::ShapeMismatch, "tensor " + t->name + " does not match the manifest config");
    if (row.at("offset").get<std::uint64_t>() != expected_offset)
      throw Error(Errc::ShapeMismatch, "tensor " + t->name + " has an overlapping or misplaced offset");
    expected_offset += t->data.size() * sizeof(float);
  }
  if (expected_offset != payload_bytes) throw Error(Errc::ShapeMismatch, "payload size disagrees with tensor table");
  if (file_size < payload_start + payload_bytes)
    throw Error(Errc::Truncated, path.string() + ": payload has " + std::to_string(file_size - payload_start) +
                                     " of " + std::to_string(payload_bytes) + " bytes");
  if (file_size > payload_start + payload_bytes) throw Error(Errc::ShapeMismatch, path.string() + ": trailing bytes");

  for (auto* t : tensors) {
    std::vector<std::uint32_t> buf(t->data.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!in) throw Error(Errc::Truncated, path.string() + ": payload read failed");
    for (std::size_t i = 0; i < buf.size(); ++i) t->data[i] = std::bit_cast<float>(to_le(buf[i]));
  }

  Vocab vocab;
  for (const auto& e : m.at("vocab")) {
    vocab.tokens.push_back(e.at(0).get<std::string>());
    vocab.freq.push_back(e.at(1).get<std::int64_t>());
  }
  vocab.reindex();
  if (vocab.size() != cfg.vocab_size) throw Error(Errc::ShapeMismatch, "vocab size differs from config");

  return {Model(cfg, std::move(params)), std::move(vocab), m.at("step").get<std::int64_t>(),
          m.at("seed").get<std::uint64_t>()};
}

}  // namespace stmoe
