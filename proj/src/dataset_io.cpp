#include "wavediff/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include "wavediff/checkpoint.hpp"

#include <json.hpp>

namespace wavediff::io {

using nlohmann::json;
using worldkit::Dataset;
using worldkit::Episode;

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols, int line,
                                 const char* field) {
  if (!j.is_array() || j.empty()) {
    throw DatasetParseError(line, std::string(field) + " must be a non-empty array");
  }
  Eigen::MatrixXd m(Eigen::Index(j.size()), cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const json& row = j[std::size_t(r)];
    if (!row.is_array() || Eigen::Index(row.size()) != cols) {
      throw DatasetParseError(line, std::string(field) + " row " + std::to_string(r) +
                                        " has wrong width");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      if (!row[std::size_t(c)].is_number()) {
        throw DatasetParseError(line, std::string(field) + " holds a non-number");
      }
      m(r, c) = row[std::size_t(c)].get<double>();
    }
  }
  return m;
}

}  // namespace

namespace {

void serialize_dataset(const Dataset& dataset, std::ostream& out) {
  json header;
  header["type"] = "header";
  header["version"] = 1;
  header["env"] = dataset.env.name();
  header["d_s"] = dataset.env.d_s;
  header["d_a"] = dataset.env.d_a;
  header["gamma"] = dataset.env.gamma;
  header["dt"] = dataset.env.dt;
  header["action_low"] = std::vector<double>(dataset.env.action_low.data(),
                                             dataset.env.action_low.data() + dataset.env.d_a);
  header["action_high"] = std::vector<double>(
      dataset.env.action_high.data(), dataset.env.action_high.data() + dataset.env.d_a);
  header["episodes"] = dataset.episodes.size();
  header["horizon"] = dataset.horizon;
  header["policy"] = dataset.policy;
  header["seed"] = dataset.seed;
  out << header.dump() << "\n";

  for (const Episode& ep : dataset.episodes) {
    json line;
    line["type"] = "episode";
    line["version"] = 1;
    line["env"] = dataset.env.name();
    line["behavior_tag"] = ep.behavior_tag;
    line["states"] = matrix_to_json(ep.states);
    line["actions"] = matrix_to_json(ep.actions);
    json rewards = json::array();
    for (Eigen::Index t = 0; t < ep.rewards.size(); ++t) rewards.push_back(ep.rewards(t));
    line["rewards"] = std::move(rewards);
    out << line.dump() << "\n";
  }
}

}  // namespace

void write_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  serialize_dataset(dataset, out);
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string dataset_checksum(const Dataset& dataset) {
  std::ostringstream out;
  serialize_dataset(dataset, out);
  const std::string bytes = out.str();
  return ad::fnv1a64_hex(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);

  Dataset ds;
  std::string text;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DatasetParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    const std::string type = j.value("type", "episode");
    if (!have_header) {
      if (type != "header") throw DatasetParseError(line_no, "expected header line");
      try {
        ds.env = worldkit::Environment::by_name(j.at("env").get<std::string>());
        ds.env.gamma = j.at("gamma").get<double>();
        ds.horizon = j.at("horizon").get<int>();
        ds.policy = j.value("policy", "");
        ds.seed = j.value("seed", uint64_t(0));
        if (j.at("d_s").get<int>() != ds.env.d_s || j.at("d_a").get<int>() != ds.env.d_a) {
          throw DatasetParseError(line_no, "header dims disagree with environment");
        }
      } catch (const json::exception& e) {
        throw DatasetParseError(line_no, std::string("bad header: ") + e.what());
      }
      have_header = true;
      continue;
    }
    if (type != "episode") throw DatasetParseError(line_no, "unexpected line type " + type);

    Episode ep;
    try {
      ep.behavior_tag = j.at("behavior_tag").get<std::string>();
      ep.states = matrix_from_json(j.at("states"), ds.env.d_s, line_no, "states");
      ep.actions = matrix_from_json(j.at("actions"), ds.env.d_a, line_no, "actions");
      const json& rewards = j.at("rewards");
      if (!rewards.is_array()) throw DatasetParseError(line_no, "rewards must be an array");
      ep.rewards.resize(Eigen::Index(rewards.size()));
      for (Eigen::Index t = 0; t < ep.rewards.size(); ++t) {
        ep.rewards(t) = rewards[std::size_t(t)].get<double>();
      }
    } catch (const json::exception& e) {
      throw DatasetParseError(line_no, std::string("bad episode: ") + e.what());
    }
    if (ep.states.rows() != ep.actions.rows() + 1 ||
        ep.rewards.size() != ep.actions.rows()) {
      throw DatasetParseError(line_no, "episode lengths are inconsistent");
    }
    ds.episodes.push_back(std::move(ep));
  }
  if (!have_header) throw DatasetParseError(1, "missing header line");
  return ds;
}

}  // namespace wavediff::io
