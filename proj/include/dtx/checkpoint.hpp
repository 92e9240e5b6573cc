#pragma once
// Binary checkpoint files.
//
//   magic "DTXCKPT\0" | u32 version | u64 config digest
//   u32 metadata count, then (string key, string value) pairs
//   u32 entry count, then per entry: string name | u32 ndim | u64 dims[ndim] | f64 data[numel]
//
// Integers and doubles are little-endian; strings are u32 length + bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dtx/params.hpp"

namespace dtx {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_digest = 0;
  std::map<std::string, std::string> metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

Checkpoint snapshot(const ParamStore& store, std::uint64_t config_digest,
                    std::map<std::string, std::string> metadata = {});

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies values into the store's leaves. Every store entry under `prefix`
// must be present with the same shape; extra checkpoint entries are ignored.
void restore(ParamStore& store, const Checkpoint& ckpt, const std::string& prefix = {});

// Per-parameter arithmetic mean. Name or shape mismatches are InputError
// listing the offending entries. Metadata and digest come from the last input.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);

// Mean of xs rounded to the nearest double, independent of input order.
double rounded_mean(const std::vector<double>& xs);

std::string hex_digest(std::uint64_t d);

}  // namespace dtx
