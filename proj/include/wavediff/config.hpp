// Flat key = value configuration files ('#' starts a comment). Keys mirror
// the training configuration fields; unknown or duplicate keys are rejected
// with the offending line number.

#pragma once

#include <stdexcept>
#include <string>

#include "wavediff/pipeline.hpp"

namespace wavediff::config {

struct ConfigError : std::runtime_error {
  int line;
  ConfigError(int line_number, const std::string& message)
      : std::runtime_error("line " + std::to_string(line_number) + ": " + message),
        line(line_number) {}
};

pipeline::TrainConfig parse_file(const std::string& path);
pipeline::TrainConfig parse_text(const std::string& text);

std::string to_text(const pipeline::TrainConfig& cfg);
void write_file(const pipeline::TrainConfig& cfg, const std::string& path);

}  // namespace wavediff::config
