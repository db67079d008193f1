#pragma once

#include <filesystem>
#include <string>

#include "aird/io.hpp"
#include "aird/nn.hpp"

namespace aird {

inline constexpr std::uint32_t kCheckpointFormat = 1;

// Layout (little-endian):
//   "AIRD" u32 format | str architecture | u32 nparams {str name, u32 rank, u64 dims…}
//   | u32 nbn {str name, u32 channels} | parameter blocks (f64, manifest order)
//   | BN blocks (running mean then running var, per layer, manifest order)
inline std::string serialize_checkpoint(const Network& net) {
  io::Writer w;
  w.bytes("AIRD");
  w.u32(kCheckpointFormat);
  w.str(net.arch().canonical());
  w.u32(static_cast<std::uint32_t>(net.params().size()));
  for (const auto& [name, t] : net.params()) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
  }
  w.u32(static_cast<std::uint32_t>(net.bn().size()));
  for (const auto& [name, s] : net.bn()) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(s.channels()));
  }
  for (const auto& [_, t] : net.params()) w.f64s(t.data());
  for (const auto& [_, s] : net.bn()) {
    w.f64s(s.running_mean);
    w.f64s(s.running_var);
  }
  return w.buffer();
}

inline Network deserialize_checkpoint(std::string bytes) {
  io::Reader r(std::move(bytes));
  if (r.bytes(4) != "AIRD") throw FormatError("checkpoint: bad magic");
  const auto fmt = r.u32();
  if (fmt != kCheckpointFormat) throw FormatError("checkpoint: unsupported format " + std::to_string(fmt));
  Architecture arch = Architecture::parse(r.str());
  const auto np = r.u32();
  std::vector<std::pair<std::string, Shape>> manifest;
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = r.str();
    Shape s(r.u32());
    for (auto& d : s) d = r.u64();
    manifest.emplace_back(std::move(name), std::move(s));
  }
  const auto nb = r.u32();
  std::vector<std::pair<std::string, std::size_t>> bn_manifest;
  for (std::uint32_t i = 0; i < nb; ++i) {
    std::string name = r.str();
    bn_manifest.emplace_back(std::move(name), r.u32());
  }
  std::map<std::string, Tensor> params;
  for (auto& [name, shape] : manifest) {
    const std::size_t n = shape_size(shape);
    params[name] = Tensor(shape, r.f64s(n));
  }
  std::map<std::string, BNState> bn;
  for (auto& [name, ch] : bn_manifest) {
    BNState s;
    s.running_mean = r.f64s(ch);
    s.running_var = r.f64s(ch);
    bn[name] = std::move(s);
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");
  return Network(std::move(arch), std::move(params), std::move(bn));
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& p) {
  io::write_file(p, serialize_checkpoint(net));
}

inline Network load_checkpoint(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw ConfigError("checkpoint not found: '" + p.string() + "'");
  return deserialize_checkpoint(io::read_file(p));
}

}  // namespace aird
