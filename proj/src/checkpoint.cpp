#include "wavediff/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace wavediff::ad {

namespace {

void append_le_double(std::vector<unsigned char>& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int b = 0; b < 8; ++b) out.push_back((unsigned char)((bits >> (8 * b)) & 0xff));
}

double read_le_double(const unsigned char* p) {
  uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= uint64_t(p[b]) << (8 * b);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::vector<unsigned char> payload_bytes(const ParameterSet& params) {
  std::vector<unsigned char> bytes;
  bytes.reserve(params.value_count() * 8);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params[i].value;
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) append_le_double(bytes, v(r, c));
  }
  return bytes;
}

}  // namespace

uint64_t fnv1a64(const unsigned char* data, std::size_t len, uint64_t seed) {
  uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string fnv1a64_hex(const unsigned char* data, std::size_t len) {
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)fnv1a64(data, len));
  return buf;
}

std::string file_checksum_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return fnv1a64_hex(bytes.data(), bytes.size());
}

void save_checkpoint(const ParameterSet& params, const std::string& path) {
  const std::vector<unsigned char> bytes = payload_bytes(params);

  nlohmann::json manifest;
  manifest["format"] = "wavediff-checkpoint";
  manifest["version"] = 1;
  manifest["checksum"] = "fnv1a64:" + fnv1a64_hex(bytes.data(), bytes.size());
  nlohmann::json plist = nlohmann::json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    plist.push_back({{"name", params[i].name},
                     {"rows", params[i].value.rows()},
                     {"cols", params[i].value.cols()}});
  }
  manifest["params"] = plist;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << manifest.dump() << "\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

void load_checkpoint(ParameterSet& params, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty checkpoint: " + path);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("bad checkpoint manifest in " + path + ": " + e.what());
  }
  if (manifest.value("format", "") != "wavediff-checkpoint") {
    throw std::runtime_error("not a wavediff checkpoint: " + path);
  }
  const auto& plist = manifest.at("params");
  if (plist.size() != params.size()) {
    throw std::runtime_error("checkpoint " + path + " lists " + std::to_string(plist.size()) +
                             " parameters, expected " + std::to_string(params.size()));
  }

  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  const std::string checksum = "fnv1a64:" + fnv1a64_hex(bytes.data(), bytes.size());
  if (checksum != manifest.at("checksum").get<std::string>()) {
    throw std::runtime_error("checksum mismatch in " + path);
  }

  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = plist[i];
    const std::string name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    Parameter& p = params[i];
    if (p.name != name || p.value.rows() != rows || p.value.cols() != cols) {
      throw std::runtime_error("checkpoint entry " + name + " does not match parameter " +
                               p.name);
    }
    if (off + std::size_t(rows * cols) * 8 > bytes.size()) {
      throw std::runtime_error("checkpoint " + path + " truncated at " + name);
    }
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) {
        p.value(r, c) = read_le_double(bytes.data() + off);
        off += 8;
      }
  }
  if (off != bytes.size()) {
    throw std::runtime_error("checkpoint " + path + " has trailing bytes");
  }
}

}  // namespace wavediff::ad
