#pragma once

// Named-tensor container shared by teacher, student and encoder weights.
//
// Layout (little-endian): magic "FKDCKPT\0", u32 version, u32 kind,
// u64 header count + (key, value) strings, u64 tensor count + per tensor
// (name, rank, dims, f64 data), u8 optimizer flag + optimizer state,
// u64 training step, then a u64 FNV-1a checksum over every preceding byte.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "foldkd/dt_model.hpp"
#include "foldkd/optim.hpp"

namespace foldkd::ckpt {

enum class Kind : std::uint32_t { Teacher = 0, Student = 1, Encoder = 2 };

std::string_view kind_name(Kind k);

struct StoredTensor {
  ad::Shape shape;
  std::vector<double> values;
  bool operator==(const StoredTensor&) const = default;
};

using Header = std::vector<std::pair<std::string, std::string>>;

struct Checkpoint {
  Kind kind = Kind::Teacher;
  Header header;
  std::map<std::string, StoredTensor> tensors;
  std::optional<ad::OptimizerState> optimizer;
  std::uint64_t step = 0;

  // Throws ConfigError when the header lacks `key`.
  const std::string& get(const std::string& key) const;
  bool operator==(const Checkpoint&) const = default;
};

std::string serialize(const Checkpoint& c);
// Throws ChecksumError on a content mismatch, FormatError on bad structure.
Checkpoint deserialize(std::string_view bytes);
void save(const Checkpoint& c, const std::string& path);
Checkpoint load(const std::string& path);
// load() plus a kind check; a mismatch is a ConfigError.
Checkpoint load(const std::string& path, Kind expected);

// Tensor map helpers for any named parameter set.
std::map<std::string, StoredTensor> store_params(const ad::ParamMap& params);
// Copies values into existing parameters; names and shapes must match
// exactly (ArchitectureError otherwise).
void restore_params(const std::map<std::string, StoredTensor>& stored, ad::ParamMap& params);

std::string format_double(double v);  // round-trippable text

Checkpoint pack_model(const model::DtModel& m, Kind kind,
                      const ad::AdamW* optimizer = nullptr, std::uint64_t step = 0);
model::DtModel unpack_model(const Checkpoint& c);
Header model_header(const model::DtConfig& cfg);
model::DtConfig model_config_from(const Checkpoint& c);

}  // namespace foldkd::ckpt
