#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enjoint/model.hpp"
#include "enjoint/rng.hpp"

namespace enjoint {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native order");

/// Weights, optimizer velocity and free-form metadata at one training step.
/// Layout on disk: 8-byte magic, u64 LE manifest length, JSON manifest, then
/// raw LE float32 blobs at the offsets the manifest lists.
struct Checkpoint {
  NetworkConfig network;
  std::int64_t step = 0;
  ParamStore<float> params;
  std::vector<Tensor<float>> velocity;  // empty, or one per parameter
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr char kCheckpointMagic[8] = {'E', 'N', 'J', 'C', 'K', 'P', 'T', '1'};

inline std::string hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  Fnv1a h;
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  return hash_hex(h.digest());
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  if (!ck.velocity.empty() && ck.velocity.size() != ck.params.size()) {
    throw std::invalid_argument("checkpoint: velocity count differs from parameter count");
  }
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  auto entry = [&offset](const std::string& name, const Tensor<float>& t) {
    nlohmann::json e{{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}};
    offset += t.size() * sizeof(float);
    return e;
  };
  for (std::size_t i = 0; i < ck.params.size(); ++i) tensors.push_back(entry(ck.params.names()[i], ck.params.vars()[i].value()));
  nlohmann::json velocity = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.velocity.size(); ++i) velocity.push_back(entry(ck.params.names()[i], ck.velocity[i]));

  const nlohmann::json manifest{{"format", 1},           {"network", to_json(ck.network)}, {"step", ck.step},
                                {"tensors", tensors},    {"velocity", velocity},           {"meta", ck.meta},
                                {"blob_bytes", offset}};
  const std::string header = manifest.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = header.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += header;
  out.reserve(out.size() + offset);
  auto blob = [&out](const Tensor<float>& t) {
    out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(float));
  };
  for (const auto& v : ck.params.vars()) blob(v.value());
  for (const auto& v : ck.velocity) blob(v);
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const auto bad = [&path](const std::string& why) { return std::runtime_error("checkpoint " + path.string() + ": " + why); };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw bad("bad magic");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (len > bytes.size() - 16) throw bad("truncated manifest");
  const auto manifest = nlohmann::json::parse(bytes.substr(16, len));
  if (manifest.at("format").get<int>() != 1) throw bad("unsupported format");
  const std::size_t base = 16 + len;
  const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
  if (bytes.size() - base != blob_bytes) throw bad("blob size mismatch");

  auto read_tensor = [&](const nlohmann::json& e) {
    const auto shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (off + count * sizeof(float) > blob_bytes) throw bad("tensor out of range");
    AlignedVector<float> data(count);
    std::memcpy(data.data(), bytes.data() + base + off, count * sizeof(float));
    return Tensor<float>(shape, std::move(data));
  };

  Checkpoint ck;
  ck.network = network_config_from_json(manifest.at("network"));
  ck.step = manifest.at("step").get<std::int64_t>();
  ck.meta = manifest.at("meta");
  for (const auto& e : manifest.at("tensors")) ck.params.add(e.at("name").get<std::string>(), read_tensor(e));
  const auto& vel = manifest.at("velocity");
  if (!vel.empty() && vel.size() != ck.params.size()) throw bad("velocity table size mismatch");
  for (const auto& e : vel) ck.velocity.push_back(read_tensor(e));
  return ck;
}

/// Checks that `params` carries exactly the tensors `cfg` defines.
inline void check_params_match(const NetworkConfig& cfg, const ParamStore<float>& params) {
  const auto ref = zero_weights<float>(cfg);
  if (ref.params.names() != params.names()) throw std::runtime_error("checkpoint tensors do not match the network config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ref.params.vars()[i].shape() != params.vars()[i].shape()) {
      throw std::runtime_error("checkpoint tensor " + params.names()[i] + " has shape " +
                               shape_str(params.vars()[i].shape()) + ", config expects " +
                               shape_str(ref.params.vars()[i].shape()));
    }
  }
}

}  // namespace enjoint
