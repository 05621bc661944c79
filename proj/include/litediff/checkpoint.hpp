#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "litediff/layers.hpp"

namespace litediff {

using Json = nlohmann::json;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Json meta = Json::object();
  ParamStore params;
};

/// Layout: "LDCK", u16 version, u32 manifest length, UTF-8 JSON manifest
/// {"meta": ..., "tensors": [{name, shape, trainable, offset}]}, then the
/// tensors as little-endian f64 in manifest (= sorted name) order. Offsets are
/// byte positions relative to the start of the payload.
std::string encode_checkpoint(const ParamStore& params, const Json& meta);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const Json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Writes via a temporary file and rename so a crash never leaves a torn file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace litediff
