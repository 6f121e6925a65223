#pragma once

// Checkpoint container:
//   8-byte magic "VFXCKPT1" | u64 header length | JSON header | float32 blobs
// The header lists config, parameter names, shapes and frozen flags; blobs
// follow in header order, little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <set>
#include <string>

#include "vfx/model.hpp"

namespace vfx {

inline constexpr char kCheckpointMagic[8] = {'V', 'F', 'X', 'C', 'K', 'P', 'T', '1'};
inline constexpr const char* kCheckpointFile = "model.ckpt";

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

// A directory argument resolves to <dir>/model.ckpt.
inline fs::path checkpoint_file(const fs::path& p) { return fs::is_directory(p) ? p / kCheckpointFile : p; }

}  // namespace detail

template <class T>
void save_checkpoint(const Model<T>& model, const fs::path& path, const json& meta = json::object()) {
  json header;
  header["format"] = 1;
  header["config"] = model.config().to_json();
  header["meta"] = meta;
  json params = json::array();
  for (const auto& p : model.params())
    params.push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}, {"frozen", p->frozen}});
  header["params"] = params;
  const std::string text = header.dump();

  fs::path file = fs::is_directory(path) || !path.has_extension() ? path / kCheckpointFile : path;
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write checkpoint: " + file.string());
  out.write(kCheckpointMagic, 8);
  const std::uint64_t n = text.size();
  detail::put_u32(out, static_cast<std::uint32_t>(n & 0xFFFFFFFFu));
  detail::put_u32(out, static_cast<std::uint32_t>(n >> 32));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.params())
    for (ad::Index i = 0; i < p->value.size(); ++i) {
      const float f = static_cast<float>(p->value.data()[i]);
      detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
  if (!out) throw RuntimeFailure("failed writing checkpoint: " + file.string());
}

struct CheckpointHeader {
  json header;
  ModelConfig config;
  std::uint64_t blob_offset = 0;
};

inline CheckpointHeader read_checkpoint_header(const fs::path& path, std::string* bytes_out = nullptr) {
  const fs::path file = detail::checkpoint_file(path);
  if (!fs::exists(file)) throw ValidationError("missing file: checkpoint " + file.string());
  std::ifstream in(file, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw ValidationError("not a checkpoint file: " + file.string());
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t n = detail::get_u32(u + 8) | static_cast<std::uint64_t>(detail::get_u32(u + 12)) << 32;
  if (16 + n > bytes.size()) throw ValidationError("truncated checkpoint header: " + file.string());
  CheckpointHeader h;
  try {
    h.header = json::parse(bytes.substr(16, n));
  } catch (const json::exception& e) {
    throw ValidationError("corrupt checkpoint header: " + std::string(e.what()));
  }
  h.config = ModelConfig::from_json(h.header.at("config"), "checkpoint config");
  // The control branch is plugged in iff its parameters are present.
  bool has_control = false;
  for (const auto& p : h.header.at("params"))
    if (p.at("name").get<std::string>().rfind("control.", 0) == 0) has_control = true;
  h.config.control = has_control;
  h.blob_offset = 16 + n;
  if (bytes_out) *bytes_out = std::move(bytes);
  return h;
}

template <class T>
std::unique_ptr<Model<T>> load_checkpoint(const fs::path& path, json* meta = nullptr) {
  std::string bytes;
  const CheckpointHeader h = read_checkpoint_header(path, &bytes);
  auto model = std::make_unique<Model<T>>(h.config, 0);
  const auto& params = h.header.at("params");
  if (params.size() != model->params().size())
    throw ValidationError("checkpoint lists " + std::to_string(params.size()) + " parameters, config implies " +
                          std::to_string(model->params().size()));
  std::uint64_t off = h.blob_offset;
  for (const auto& e : params) {
    const std::string name = e.at("name").get<std::string>();
    Param<T>* p = model->params().find(name);
    if (!p) throw ValidationError("checkpoint parameter not in model: " + name);
    const auto shape = e.at("shape").get<std::vector<ad::Index>>();
    if (shape.size() != 2 || shape[0] != p->value.rows() || shape[1] != p->value.cols())
      throw ValidationError("checkpoint shape mismatch for " + name);
    const std::uint64_t count = static_cast<std::uint64_t>(shape[0] * shape[1]);
    if (off + 4 * count > bytes.size()) throw ValidationError("truncated checkpoint blobs at " + name);
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data() + off);
    for (std::uint64_t i = 0; i < count; ++i)
      p->value.data()[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32(u + 4 * i)));
    p->frozen = e.at("frozen").get<bool>();
    off += 4 * count;
  }
  if (off != bytes.size()) throw ValidationError("trailing bytes after checkpoint blobs");
  if (meta) *meta = h.header.value("meta", json::object());
  return model;
}

}  // namespace vfx
