#pragma once

// Versioned checkpoint archive: magic + JSON header (config, seeds, upstream
// hashes) + named float tensors. Loading validates magic, version, and that
// tensor names/shapes match what the model registered.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokedit/common.hpp"
#include "tokedit/nn.hpp"

namespace tokedit {

constexpr const char* kCheckpointMagic = "TOKEDITCKPT";
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  TOKEDIT_CHECK(is.good(), FormatError, "checkpoint truncated");
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const nlohmann::json& header,
                            const nn::ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  TOKEDIT_CHECK(os.good(), IoError, "cannot write checkpoint %s", path.c_str());
  os.write(kCheckpointMagic, 11);
  detail::write_pod<uint32_t>(os, kCheckpointVersion);
  std::string hdr = header.dump();
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(hdr.size()));
  os.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); i++) {
    const std::string& name = params.name(i);
    const Tensor& t = params.tensor(i);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); d++) detail::write_pod<int32_t>(os, t.dim(d));
    detail::write_pod<uint64_t>(os, static_cast<uint64_t>(t.numel()));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  TOKEDIT_CHECK(os.good(), IoError, "write failed for checkpoint %s", path.c_str());
}

// Reads the header without touching tensors.
inline nlohmann::json read_checkpoint_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  TOKEDIT_CHECK(is.good(), IoError, "cannot open checkpoint %s", path.c_str());
  char magic[11];
  is.read(magic, 11);
  TOKEDIT_CHECK(is.good() && std::string(magic, 11) == kCheckpointMagic, FormatError,
                "bad checkpoint magic in %s", path.c_str());
  uint32_t version = detail::read_pod<uint32_t>(is);
  TOKEDIT_CHECK(version == kCheckpointVersion, FormatError,
                "unsupported checkpoint version %u in %s", version, path.c_str());
  uint32_t hlen = detail::read_pod<uint32_t>(is);
  std::string hdr(hlen, '\0');
  is.read(hdr.data(), hlen);
  TOKEDIT_CHECK(is.good(), FormatError, "checkpoint header truncated in %s", path.c_str());
  try {
    return nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header parse error: ") + e.what());
  }
}

// Loads tensors into an already-constructed ParamStore; names and shapes must
// match registration order exactly.
inline nlohmann::json load_checkpoint(const std::string& path, nn::ParamStore& params) {
  std::ifstream is(path, std::ios::binary);
  TOKEDIT_CHECK(is.good(), IoError, "cannot open checkpoint %s", path.c_str());
  char magic[11];
  is.read(magic, 11);
  TOKEDIT_CHECK(is.good() && std::string(magic, 11) == kCheckpointMagic, FormatError,
                "bad checkpoint magic in %s", path.c_str());
  uint32_t version = detail::read_pod<uint32_t>(is);
  TOKEDIT_CHECK(version == kCheckpointVersion, FormatError, "unsupported checkpoint version %u",
                version);
  uint32_t hlen = detail::read_pod<uint32_t>(is);
  std::string hdr(hlen, '\0');
  is.read(hdr.data(), hlen);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hdr);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header parse error: ") + e.what());
  }
  uint32_t n = detail::read_pod<uint32_t>(is);
  TOKEDIT_CHECK(n == params.size(), FormatError, "checkpoint has %u tensors, model expects %zu",
                n, params.size());
  for (size_t i = 0; i < params.size(); i++) {
    uint32_t nlen = detail::read_pod<uint32_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    TOKEDIT_CHECK(name == params.name(i), FormatError,
                  "checkpoint tensor '%s' where model expects '%s'", name.c_str(),
                  params.name(i).c_str());
    uint32_t nd = detail::read_pod<uint32_t>(is);
    Tensor& t = params.tensor(i);
    TOKEDIT_CHECK(nd == static_cast<uint32_t>(t.ndim()), FormatError,
                  "checkpoint tensor '%s' rank mismatch", name.c_str());
    for (uint32_t d = 0; d < nd; d++) {
      int32_t dim = detail::read_pod<int32_t>(is);
      TOKEDIT_CHECK(dim == t.dim(static_cast<int>(d)), FormatError,
                    "checkpoint tensor '%s' dim %u mismatch (%d vs %d)", name.c_str(), d, dim,
                    t.dim(static_cast<int>(d)));
    }
    uint64_t numel = detail::read_pod<uint64_t>(is);
    TOKEDIT_CHECK(numel == t.numel(), FormatError, "checkpoint tensor '%s' size mismatch",
                  name.c_str());
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(numel * sizeof(float)));
    TOKEDIT_CHECK(is.good(), FormatError, "checkpoint truncated in tensor '%s'", name.c_str());
  }
  return header;
}

inline uint64_t file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  TOKEDIT_CHECK(is.good(), IoError, "cannot open %s", path.c_str());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    std::streamsize got = is.gcount();
    if (got > 0) h = fnv1a(buf, static_cast<size_t>(got), h);
  }
  return h;
}

}  // namespace tokedit
