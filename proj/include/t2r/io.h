#pragma once

// Checkpoint files and byte-level corpora.
//
// Checkpoint layout, all integers little-endian:
//   "T2R1" | u32 version | u64 n | n bytes of key=value lines (model config,
//   then meta.<key> lines) | u64 tensor count | per tensor: u32 name length,
//   name, u32 rank, rank x u64 dims, f64 data | u64 FNV-1a of all prior bytes

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "t2r/model.h"

namespace t2r {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> SerializeCheckpoint(const Model& model);
// CorruptionError (with byte offset) on any structural damage; ValidationError
// when the tensors disagree with the stored config.
Model DeserializeCheckpoint(std::span<const std::uint8_t> bytes);

// Writes to a temporary sibling and renames it into place.
void SaveCheckpoint(const Model& model, const std::string& path);
// InputError when the file cannot be read.
Model LoadCheckpoint(const std::string& path);

// Byte values 0..255 as token ids. Empty or unreadable files are an InputError.
std::vector<int> LoadCorpus(const std::string& path);
std::vector<int> Tokenize(std::string_view text);
// Ids outside 0..255 are an InputError.
std::string Detokenize(std::span<const int> ids);

std::string ReadFile(const std::string& path);
// Temp file + rename.
void WriteFileAtomic(const std::string& path, std::string_view contents);

}  // namespace t2r
