#pragma once

// Checkpoint layout:
//   "NDRCKPT 1\n"
//   key=value header lines (model config under "model.", anything else the
//   caller stores), terminated by an empty line
//   u32 tensor count; per tensor: u32 name length, name, u32 rank, u64 dims,
//   f32 data
//   u64 optimizer step; u32 moment count; per parameter: f32 m, f32 v
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndr/model.hpp"
#include "ndr/optim.hpp"

namespace ndr {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr const char* kCheckpointMagic = "NDRCKPT 1";

template <class U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("checkpoint: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

inline void put_floats(std::ostream& os, std::span<const float> xs) {
  for (float x : xs) put_le(os, std::bit_cast<std::uint32_t>(x));
}

inline void get_floats(std::istream& is, std::span<float> xs) {
  for (float& x : xs) x = std::bit_cast<float>(get_le<std::uint32_t>(is));
}

}  // namespace detail

struct LoadedCheckpoint {
  EncoderModel<float> model;
  AdamW<float> optimizer;
  std::map<std::string, std::string> header;  // non-model keys

  const std::string& get(const std::string& key) const {
    auto it = header.find(key);
    if (it == header.end()) throw CheckpointError("checkpoint: missing header key " + key);
    return it->second;
  }
};

/// Writes to a temporary sibling and renames it into place.
inline void save_checkpoint(const std::filesystem::path& path, const EncoderModel<float>& model,
                            const AdamW<float>& opt, const std::map<std::string, std::string>& header = {}) {
  const auto params = model.parameters();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
    os << detail::kCheckpointMagic << '\n';
    for (const auto& [k, v] : model.config().to_kv()) os << "model." << k << '=' << v << '\n';
    for (const auto& [k, v] : header) {
      if (k.find('\n') != std::string::npos || v.find('\n') != std::string::npos || k.find('=') != std::string::npos)
        throw CheckpointError("checkpoint: header entries must be single-line key=value");
      os << k << '=' << v << '\n';
    }
    os << '\n';
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
      os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.dim()));
      for (auto d : p.tensor.shape()) detail::put_le<std::uint64_t>(os, d);
      detail::put_floats(os, p.tensor.data());
    }
    detail::put_le<std::uint64_t>(os, opt.steps());
    const auto& m = opt.first_moments();
    const auto& v = opt.second_moments();
    const bool has_state = m.size() == params.size();
    detail::put_le<std::uint32_t>(os, has_state ? static_cast<std::uint32_t>(params.size()) : 0U);
    if (has_state)
      for (std::size_t i = 0; i < params.size(); ++i) {
        detail::put_floats(os, m[i]);
        detail::put_floats(os, v[i]);
      }
    if (!os) throw CheckpointError("checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != detail::kCheckpointMagic)
    throw CheckpointError("not a checkpoint: " + path.string());
  std::map<std::string, std::string> model_kv, header;
  while (std::getline(is, line) && !line.empty()) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError("checkpoint: malformed header line");
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k.rfind("model.", 0) == 0)
      model_kv[k.substr(6)] = v;
    else
      header[k] = v;
  }
  LoadedCheckpoint ck{EncoderModel<float>(ModelConfig::from_kv(model_kv), Rng()), AdamW<float>(), std::move(header)};
  const auto params = ck.model.parameters();
  const auto count = detail::get_le<std::uint32_t>(is);
  if (count != params.size()) throw CheckpointError("checkpoint: parameter count does not match the model");
  for (const auto& p : params) {
    const auto len = detail::get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint: truncated file");
    if (name != p.name) throw CheckpointError("checkpoint: expected parameter " + p.name + ", found " + name);
    const auto rank = detail::get_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint64_t>(is);
    if (shape != p.tensor.shape()) throw CheckpointError("checkpoint: shape mismatch for " + name);
    auto t = p.tensor;
    detail::get_floats(is, t.data_mut());
  }
  ck.optimizer.set_steps(detail::get_le<std::uint64_t>(is));
  const auto moments = detail::get_le<std::uint32_t>(is);
  if (moments != 0) {
    if (moments != params.size()) throw CheckpointError("checkpoint: optimizer state does not match the model");
    ck.optimizer.ensure_state(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      detail::get_floats(is, ck.optimizer.first_moments()[i]);
      detail::get_floats(is, ck.optimizer.second_moments()[i]);
    }
  }
  return ck;
}

}  // namespace ndr
