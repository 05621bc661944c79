#include "litediff/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace litediff {

namespace {

constexpr char kMagic[4] = {'L', 'D', 'C', 'K'};

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_checkpoint(const ParamStore& params, const Json& meta) {
  Json manifest;
  manifest["meta"] = meta;
  manifest["tensors"] = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : params.entries()) {
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", e.tensor.shape()}, {"trainable", e.trainable}, {"offset", offset}});
    offset += e.tensor.numel() * sizeof(double);
  }
  const std::string text = manifest.dump();
  if (text.size() > UINT32_MAX) throw CheckpointError("manifest too large");

  std::string out(kMagic, 4);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& [name, e] : params.entries()) {
    for (double v : e.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("not an LDCK checkpoint");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get_le<std::uint32_t>(bytes, 6);
  if (bytes.size() < 10 + static_cast<std::size_t>(len)) throw CheckpointError("truncated checkpoint manifest");
  Json manifest;
  try {
    manifest = Json::parse(bytes.substr(10, len));
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const std::size_t payload = 10 + len;
  Checkpoint ck;
  ck.meta = manifest.value("meta", Json::object());
  std::size_t end = payload;
  if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
    throw CheckpointError("checkpoint manifest lacks a tensor list");
  }
  for (const auto& t : manifest["tensors"]) {
    if (!t.contains("name") || !t.contains("shape") || !t.contains("offset") || !t.contains("trainable")) {
      throw CheckpointError("incomplete tensor entry in checkpoint manifest");
    }
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_numel(shape);
    if (payload + offset + n * sizeof(double) > bytes.size()) {
      throw CheckpointError("truncated checkpoint payload at '" + name + "'");
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      data[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, payload + offset + i * sizeof(double)));
    }
    ck.params.add(name, Tensor(shape, std::move(data)), t.at("trainable").get<bool>());
    end = std::max<std::size_t>(end, payload + offset + n * sizeof(double));
  }
  if (end != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ck;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const Json& meta) {
  write_file_atomic(path, encode_checkpoint(params, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace litediff
