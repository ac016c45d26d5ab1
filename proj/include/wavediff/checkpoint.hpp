// Checkpoint format: one JSON manifest line (parameter names, shapes, and an
// FNV-1a checksum of the payload), followed by the raw little-endian 64-bit
// values of every tensor, row-major, in manifest order.

#pragma once

#include <cstdint>
#include <string>

#include "wavediff/tape.hpp"

namespace wavediff::ad {

void save_checkpoint(const ParameterSet& params, const std::string& path);

// Loads into an already-constructed set; names, order and shapes must match
// the manifest exactly, and the checksum must verify.
void load_checkpoint(ParameterSet& params, const std::string& path);

uint64_t fnv1a64(const unsigned char* data, std::size_t len, uint64_t seed = 0xcbf29ce484222325ull);
std::string fnv1a64_hex(const unsigned char* data, std::size_t len);
std::string file_checksum_hex(const std::string& path);

}  // namespace wavediff::ad
