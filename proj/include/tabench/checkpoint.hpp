#pragma once

// TABX checkpoint format:
//   bytes 0-3   magic "TABX"
//   byte  4     format version (1)
//   ...         JSON header, compact, one line, terminated by '\n'
//               {"meta": {...}, "param_count": n, "spec": {...}}
//   8 bytes     little-endian uint64: number of f64 values that follow
//   8*n bytes   little-endian IEEE-754 binary64 weights, layout order

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "tabench/model.hpp"

namespace tabench {

class CheckpointError : public Error {
 public:
  enum class Code { io, bad_magic, bad_version, bad_header, truncated, length_mismatch };
  CheckpointError(Code c, const std::string& msg) : Error(msg), code_(c) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

inline constexpr char kCheckpointMagic[4] = {'T', 'A', 'B', 'X'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointHeader {
  ModelSpec spec;
  TrainMeta meta;
  std::uint64_t param_count = 0;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline CheckpointHeader read_header(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4)) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated before magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError(CheckpointError::Code::bad_magic, "bad magic");
  char ver = 0;
  if (!in.get(ver)) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated before version");
  if (static_cast<std::uint8_t>(ver) != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Code::bad_version, "checkpoint: unsupported version " + std::to_string(static_cast<int>(ver)));
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated header");
  CheckpointHeader h;
  try {
    const auto j = nlohmann::json::parse(line);
    h.spec = j.at("spec").get<ModelSpec>();
    h.meta = j.at("meta").get<TrainMeta>();
    h.param_count = j.at("param_count").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Code::bad_header, std::string("checkpoint: bad header: ") + e.what());
  }
  return h;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
  std::string out(kCheckpointMagic, 4);
  out.push_back(static_cast<char>(kCheckpointVersion));
  nlohmann::json header{{"spec", m.spec()}, {"meta", m.meta()}, {"param_count", m.param_count()}};
  out += header.dump();
  out.push_back('\n');
  detail::put_u64(out, m.weights().size());
  for (double w : m.weights()) detail::put_u64(out, std::bit_cast<std::uint64_t>(w));
  return out;
}

inline Model deserialize_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes);
  CheckpointHeader h = detail::read_header(in);
  const auto pos = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < pos + 8) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated blob length");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  const std::uint64_t n = detail::get_u64(p);
  if (n != h.param_count || n != param_count(h.spec))
    throw CheckpointError(CheckpointError::Code::length_mismatch,
                          "checkpoint: blob length " + std::to_string(n) + " does not match spec parameter count " +
                              std::to_string(param_count(h.spec)));
  if (bytes.size() - pos - 8 < n * 8) throw CheckpointError(CheckpointError::Code::truncated, "checkpoint: truncated blob");
  std::vector<double> w(n);
  for (std::uint64_t i = 0; i < n; ++i) w[i] = std::bit_cast<double>(detail::get_u64(p + 8 + 8 * i));
  return Model(h.spec, std::move(w), h.meta);
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: cannot open '" + path + "' for writing");
  const std::string bytes = serialize_checkpoint(m);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: write failed for '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

/// Reads only the header; the weight blob is not touched.
inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointError::Code::io, "checkpoint: cannot open '" + path + "'");
  return detail::read_header(f);
}

}  // namespace tabench
