#include "wavediff/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace wavediff::config {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

long long parse_int(const std::string& v, int line) {
  std::size_t pos = 0;
  long long out;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(line, "expected an integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(line, "trailing characters in integer '" + v + "'");
  return out;
}

double parse_double(const std::string& v, int line) {
  std::size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(line, "expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(line, "trailing characters in number '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(line, "expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

pipeline::TrainConfig parse_text(const std::string& text) {
  pipeline::TrainConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  std::set<std::string> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(line_no, "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(line_no, "empty key");
    if (!seen.insert(key).second) throw ConfigError(line_no, "duplicate key '" + key + "'");

    if (key == "horizon") cfg.horizon = int(parse_int(value, line_no));
    else if (key == "history") cfg.history = int(parse_int(value, line_no));
    else if (key == "diffusion_steps") cfg.diffusion_steps = int(parse_int(value, line_no));
    else if (key == "learning_rate") cfg.learning_rate = parse_double(value, line_no);
    else if (key == "epochs") cfg.epochs = int(parse_int(value, line_no));
    else if (key == "batch_size") cfg.batch_size = int(parse_int(value, line_no));
    else if (key == "batches_per_epoch") cfg.batches_per_epoch = int(parse_int(value, line_no));
    else if (key == "p_null") cfg.p_null = parse_double(value, line_no);
    else if (key == "guidance_omega") cfg.guidance_omega = parse_double(value, line_no);
    else if (key == "guidance_temp") cfg.guidance_temp = parse_double(value, line_no);
    else if (key == "literal_update") cfg.literal_update = parse_bool(value, line_no);
    else if (key == "ablation_mode") {
      try {
        cfg.mode = pipeline::ablation_mode_by_name(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(line_no, e.what());
      }
    } else if (key == "wavelet") {
      if (value == "haar") cfg.wavelet = spectral::WaveletKind::Haar;
      else if (value == "daubechies2") cfg.wavelet = spectral::WaveletKind::Daubechies2;
      else throw ConfigError(line_no, "unknown wavelet '" + value + "'");
    } else if (key == "d_model") cfg.d_model = int(parse_int(value, line_no));
    else if (key == "clamp_first_state") cfg.clamp_first_state = parse_bool(value, line_no);
    else if (key == "inverse_dynamics_epochs") {
      cfg.inverse_dynamics_epochs = int(parse_int(value, line_no));
    } else if (key == "seed") cfg.seed = uint64_t(parse_int(value, line_no));
    else if (key == "threads") cfg.threads = int(parse_int(value, line_no));
    else throw ConfigError(line_no, "unknown key '" + key + "'");
  }
  return cfg;
}

pipeline::TrainConfig parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

std::string to_text(const pipeline::TrainConfig& cfg) {
  std::ostringstream out;
  out << "horizon = " << cfg.horizon << "\n";
  out << "history = " << cfg.history << "\n";
  out << "diffusion_steps = " << cfg.diffusion_steps << "\n";
  out << "learning_rate = " << fmt_double(cfg.learning_rate) << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "batches_per_epoch = " << cfg.batches_per_epoch << "\n";
  out << "p_null = " << fmt_double(cfg.p_null) << "\n";
  out << "guidance_omega = " << fmt_double(cfg.guidance_omega) << "\n";
  out << "guidance_temp = " << fmt_double(cfg.guidance_temp) << "\n";
  out << "literal_update = " << (cfg.literal_update ? "true" : "false") << "\n";
  out << "ablation_mode = " << pipeline::ablation_mode_name(cfg.mode) << "\n";
  out << "wavelet = " << spectral::wavelet_name(cfg.wavelet) << "\n";
  out << "d_model = " << cfg.d_model << "\n";
  out << "clamp_first_state = " << (cfg.clamp_first_state ? "true" : "false") << "\n";
  out << "inverse_dynamics_epochs = " << cfg.inverse_dynamics_epochs << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "threads = " << cfg.threads << "\n";
  return out.str();
}

void write_file(const pipeline::TrainConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write config " + path);
  out << to_text(cfg);
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace wavediff::config
