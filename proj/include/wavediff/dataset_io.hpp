// Dataset files are JSON Lines: a header line with environment metadata
// (dims, gamma, bounds), then one episode per line with fields version, env,
// behavior_tag, states, actions, rewards.

#pragma once

#include <string>

#include "wavediff/worldkit.hpp"

namespace wavediff::io {

// Thrown with the 1-based offending line number on malformed input.
struct DatasetParseError : std::runtime_error {
  int line;
  DatasetParseError(int line_number, const std::string& message)
      : std::runtime_error("line " + std::to_string(line_number) + ": " + message),
        line(line_number) {}
};

void write_dataset(const worldkit::Dataset& dataset, const std::string& path);
worldkit::Dataset read_dataset(const std::string& path);

// Checksum of the canonical serialized form (identical to the file bytes
// write_dataset would produce).
std::string dataset_checksum(const worldkit::Dataset& dataset);

}  // namespace wavediff::io
