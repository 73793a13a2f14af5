#pragma once

// Portable weight container:
//
//   bytes 0..3   magic "MNWB"
//   bytes 4..7   header length L (uint32, little endian)
//   bytes 8..8+L JSON header: format version, embedded architecture config
//                text, and a tensor manifest (name, shape, byte offset into
//                the payload)
//   remainder    payload: raw little-endian float32, tensors back to back
//
// Offsets are strictly increasing and non-overlapping; the payload length
// must equal the sum of tensor sizes times four. Every violation, truncation
// or header corruption raises FormatError before any tensor is touched.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "micronet/arch.hpp"
#include "micronet/common.hpp"
#include "micronet/network.hpp"
#include "micronet/tensor.hpp"

namespace micronet {

static_assert(std::endian::native == std::endian::little,
              "bundle i/o assumes a little-endian host");

struct BundleTensor {
  std::string name;
  Shape4 shape{0, 0, 0, 0};
  std::uint64_t offset = 0;  // bytes into the payload
};

struct WeightBundle {
  int format_version = 1;
  std::string arch_text;
  std::vector<BundleTensor> manifest;
  std::vector<float> payload;

  const BundleTensor* find(const std::string& name) const {
    for (const auto& t : manifest) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  Tensor<float> tensor(const BundleTensor& info) const {
    Tensor<float> t(info.shape);
    const std::size_t first = static_cast<std::size_t>(info.offset / 4);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = payload[first + i];
    return t;
  }
};

/// Collects every parameter and running statistic of a network, in plan
/// order, as (name, tensor snapshot) pairs.
inline std::vector<std::pair<std::string, Tensor<float>>> network_tensors(
    Network<float>& net) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (auto& p : net.params()) out.emplace_back(p.name, p.node->value);
  for (auto& s : net.state()) out.emplace_back(s.name, *s.tensor);
  return out;
}

inline WeightBundle bundle_from_network(Network<float>& net) {
  WeightBundle b;
  b.arch_text = arch_config_text(net.arch);
  std::uint64_t offset = 0;
  for (auto& [name, tensor] : network_tensors(net)) {
    BundleTensor info;
    info.name = name;
    info.shape = tensor.shape();
    info.offset = offset;
    b.manifest.push_back(info);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      b.payload.push_back(tensor[i]);
    }
    offset += static_cast<std::uint64_t>(tensor.size()) * 4;
  }
  return b;
}

/// Writes every manifest tensor into the network's matching parameter/state
/// slot. Missing names or shape mismatches raise FormatError.
inline void apply_bundle_to_network(const WeightBundle& b,
                                    Network<float>& net) {
  auto apply = [&](const std::string& name, Tensor<float>& dst) {
    const BundleTensor* info = b.find(name);
    if (!info) throw FormatError("bundle is missing tensor '" + name + "'");
    if (info->shape != dst.shape()) {
      throw FormatError("bundle tensor '" + name + "' has shape " +
                        info->shape.str() + ", network wants " +
                        dst.shape().str());
    }
    dst = b.tensor(*info);
  };
  for (auto& p : net.params()) apply(p.name, p.node->value);
  for (auto& s : net.state()) apply(s.name, *s.tensor);
}

/// Rebuilds the network described by the bundle's embedded config and loads
/// all weights into it.
inline Network<float> network_from_bundle(const WeightBundle& b) {
  Network<float> net(parse_arch_config(b.arch_text), /*seed=*/0);
  apply_bundle_to_network(b, net);
  return net;
}

inline void save_bundle(const std::string& path, const WeightBundle& b) {
  nlohmann::json header;
  header["format_version"] = b.format_version;
  header["arch"] = b.arch_text;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& t : b.manifest) {
    manifest.push_back({{"name", t.name},
                        {"shape", {t.shape.n, t.shape.c, t.shape.h,
                                   t.shape.w}},
                        {"offset", t.offset}});
  }
  header["tensors"] = std::move(manifest);
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write bundle '" + path + "'");
  out.write("MNWB", 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  out.write(reinterpret_cast<const char*>(b.payload.data()),
            static_cast<std::streamsize>(b.payload.size() * 4));
  if (!out) throw FormatError("short write to bundle '" + path + "'");
}

inline WeightBundle load_bundle(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open bundle '" + path + "'");
  char magic[4] = {};
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "MNWB", 4) != 0) {
    throw FormatError("'" + path + "' is not a weight bundle (bad magic)");
  }
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  if (in.gcount() != 4 || hlen == 0 || hlen > (1u << 26)) {
    throw FormatError("bundle header length is corrupt");
  }
  std::string htext(hlen, '\0');
  in.read(htext.data(), hlen);
  if (in.gcount() != static_cast<std::streamsize>(hlen)) {
    throw FormatError("truncated bundle header");
  }

  WeightBundle b;
  std::uint64_t expected_bytes = 0;
  try {
    const nlohmann::json header = nlohmann::json::parse(htext);
    b.format_version = header.at("format_version").get<int>();
    b.arch_text = header.at("arch").get<std::string>();
    std::uint64_t next_offset = 0;
    for (const auto& jt : header.at("tensors")) {
      BundleTensor t;
      t.name = jt.at("name").get<std::string>();
      const auto& s = jt.at("shape");
      if (s.size() != 4) throw FormatError("tensor shape must have 4 dims");
      t.shape = {s[0].get<int>(), s[1].get<int>(), s[2].get<int>(),
                 s[3].get<int>()};
      t.offset = jt.at("offset").get<std::uint64_t>();
      if (t.shape.numel() <= 0) {
        throw FormatError("tensor '" + t.name + "' has an empty shape");
      }
      if (t.offset != next_offset) {
        throw FormatError("tensor '" + t.name +
                          "' offset overlaps or leaves a gap");
      }
      next_offset += static_cast<std::uint64_t>(t.shape.numel()) * 4;
      b.manifest.push_back(std::move(t));
    }
    expected_bytes = next_offset;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt bundle header: ") + e.what());
  }
  if (b.format_version != 1) {
    throw FormatError("unsupported bundle format version " +
                      std::to_string(b.format_version));
  }

  b.payload.resize(static_cast<std::size_t>(expected_bytes / 4));
  in.read(reinterpret_cast<char*>(b.payload.data()),
          static_cast<std::streamsize>(expected_bytes));
  if (in.gcount() != static_cast<std::streamsize>(expected_bytes)) {
    throw FormatError("truncated bundle payload: wanted " +
                      std::to_string(expected_bytes) + " bytes");
  }
  char extra = 0;
  if (in.read(&extra, 1); in.gcount() != 0) {
    throw FormatError("trailing bytes after bundle payload");
  }
  return b;
}

}  // namespace micronet
