// wavediff: frequency-aware trajectory-diffusion toolkit.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error. Diagnostics
// go to stderr; machine-readable output goes to files only.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "wavediff/analysis.hpp"
#include "wavediff/checkpoint.hpp"
#include "wavediff/config.hpp"
#include "wavediff/dataset_io.hpp"
#include "wavediff/pipeline.hpp"

namespace fs = std::filesystem;
using namespace wavediff;

namespace {

struct GenDataArgs {
  std::string env = "pointmass";
  std::string policy = "scripted_expert";
  double sigma = 0.5;
  int episodes = 100;
  int horizon = 120;
  uint64_t seed = 0;
  std::string out;
};

struct TrainArgs {
  std::string config_path;
  std::string data;
  std::string out;
  bool with_baseline = false;
  int64_t seed = -1;
  int threads = 0;
};

struct EvalArgs {
  std::string run;
  std::string out;
  int episodes = 20;
  int seeds = 5;
  int max_steps = 60;
  uint64_t seed = 0;
  double temp = -1.0;  // <0: keep the bundle's setting
};

struct SampleArgs {
  std::string run;
  std::string data;
  std::string out;
  uint64_t seed = 0;
};

struct SpectrumArgs {
  std::string data;
  std::string out;
  uint64_t seed = 0;  // accepted for interface uniformity; analysis is deterministic
};

struct AblateArgs {
  std::string config_path;
  std::string data;
  std::string out;
  int64_t seed = -1;
  int eval_seeds = 3;
  int eval_episodes = 5;
  int max_steps = 40;
  int threads = 0;
};

pipeline::TrainConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return pipeline::TrainConfig{};
  return config::parse_file(path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

nlohmann::json eval_to_json(const pipeline::EvalResult& eval, int episodes, int max_steps) {
  nlohmann::json j;
  j["mean_undiscounted"] = eval.mean;
  j["stderr"] = eval.stderr_of_mean;
  j["per_seed_means"] = eval.per_seed_means;
  j["mean_discounted"] = eval.mean_discounted;
  j["per_seed_means_discounted"] = eval.per_seed_means_discounted;
  j["seeds"] = eval.seeds;
  j["episodes_per_seed"] = episodes;
  j["max_steps"] = max_steps;
  return j;
}

int run_gen_data(const GenDataArgs& a) {
  const auto env = worldkit::Environment::by_name(a.env);
  const auto policy = worldkit::PolicySpec::parse(a.policy, a.sigma);
  const auto dataset = worldkit::generate_dataset(env, policy, a.episodes, a.horizon, a.seed);
  io::write_dataset(dataset, a.out);
  std::cerr << "wrote " << a.episodes << " episodes (" << dataset.policy << ") to " << a.out
            << "\n";
  return 0;
}

int run_train(const TrainArgs& a) {
  pipeline::TrainConfig cfg = load_config_or_default(a.config_path);
  if (a.seed >= 0) cfg.seed = uint64_t(a.seed);
  if (a.threads > 0) cfg.threads = a.threads;
  cfg.validate();

  const auto dataset = io::read_dataset(a.data);
  const auto result = pipeline::train(dataset, cfg);
  pipeline::save_bundle(result.bundle, a.out);
  write_text((fs::path(a.out) / "dataset_checksum.txt").string(),
             ad::file_checksum_hex(a.data) + "\n");

  const pipeline::FrequencyShiftLog* baseline_log = nullptr;
  pipeline::FrequencyShiftLog baseline_storage;
  if (a.with_baseline && cfg.mode != pipeline::AblationMode::BaselineTimeDomain) {
    pipeline::TrainConfig bcfg = cfg;
    bcfg.mode = pipeline::AblationMode::BaselineTimeDomain;
    baseline_storage = pipeline::train(dataset, bcfg).log;
    baseline_log = &baseline_storage;
  }
  pipeline::write_frequency_csv(result.log, baseline_log,
                                (fs::path(a.out) / "frequency_shift.csv").string());

  nlohmann::json summary;
  summary["epochs"] = int(result.log.size());
  summary["final_loss"] = result.log.empty() ? 0.0 : result.log.back().mean_loss;
  summary["first_loss"] = result.log.empty() ? 0.0 : result.log.front().mean_loss;
  summary["final_ratio"] = result.log.empty() ? 0.0 : result.log.back().ratio;
  summary["inverse_dynamics_mse"] = result.inverse_dynamics_mse;
  summary["mode"] = pipeline::ablation_mode_name(cfg.mode);
  if (baseline_log && !baseline_log->empty()) {
    summary["baseline_final_ratio"] = baseline_log->back().ratio;
  }
  write_text((fs::path(a.out) / "train_summary.json").string(), summary.dump(2) + "\n");
  std::cerr << "trained " << pipeline::ablation_mode_name(cfg.mode) << " for "
            << result.log.size() << " epochs into " << a.out << "\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  auto bundle = pipeline::load_bundle(a.run);
  if (a.temp >= 0.0) bundle.config.guidance_temp = a.temp;
  const auto eval =
      pipeline::evaluate(bundle, bundle.env, a.seeds, a.episodes, a.max_steps, a.seed);
  write_text(a.out, eval_to_json(eval, a.episodes, a.max_steps).dump(2) + "\n");
  std::cerr << "mean undiscounted return " << eval.mean << " +- " << eval.stderr_of_mean
            << " over " << a.seeds << " seeds\n";
  return 0;
}

int run_sample(const SampleArgs& a) {
  auto bundle = pipeline::load_bundle(a.run);
  const auto dataset = io::read_dataset(a.data);
  if (dataset.episodes.empty()) throw std::runtime_error("sample: dataset has no episodes");

  const int c = bundle.config.effective_history();
  pipeline::HistoryQueue queue(c, bundle.env.d_s);
  const Eigen::MatrixXd& states = dataset.episodes.front().states;
  for (Eigen::Index r = 0; r < std::min<Eigen::Index>(c, states.rows()); ++r) {
    queue.push(states.row(r).transpose());
  }
  std::mt19937_64 rng(a.seed);
  const Eigen::MatrixXd plan = pipeline::plan_trajectory(bundle, queue, rng);

  std::ofstream out(a.out, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + a.out);
  out << "step";
  for (int d = 0; d < bundle.env.d_s; ++d) out << ",dim" << d;
  out << "\n";
  char buf[64];
  for (Eigen::Index r = 0; r < plan.rows(); ++r) {
    out << r;
    for (Eigen::Index col = 0; col < plan.cols(); ++col) {
      std::snprintf(buf, sizeof(buf), ",%.17g", plan(r, col));
      out << buf;
    }
    out << "\n";
  }
  std::cerr << "sampled a " << plan.rows() << "-step plan into " << a.out << "\n";
  return 0;
}

int run_spectrum(const SpectrumArgs& a) {
  const auto dataset = io::read_dataset(a.data);
  const auto summary = analysis::analyze_dataset_spectrum(dataset);
  analysis::write_spectrum_csv(summary, a.out);
  std::cerr << "central-band energy share " << summary.mean_central_share << "% over "
            << summary.episodes << " episodes\n";
  return 0;
}

int run_ablate(const AblateArgs& a) {
  pipeline::TrainConfig cfg = load_config_or_default(a.config_path);
  if (a.seed >= 0) cfg.seed = uint64_t(a.seed);
  if (a.threads > 0) cfg.threads = a.threads;
  cfg.validate();
  const auto dataset = io::read_dataset(a.data);

  pipeline::AblationOptions opts;
  opts.eval_seeds = a.eval_seeds;
  opts.eval_episodes = a.eval_episodes;
  opts.max_steps = a.max_steps;
  const auto report = pipeline::ablation_suite(dataset, cfg, opts);

  fs::create_directories(a.out);
  nlohmann::json j;
  j["dataset_checksum"] = report.dataset_checksum;
  j["seeds"] = report.seeds;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : report.rows) {
    nlohmann::json r = eval_to_json(row.eval, opts.eval_episodes, opts.max_steps);
    r["mode"] = row.mode;
    r["final_ratio"] = row.final_ratio;
    r["dataset_checksum"] = report.dataset_checksum;
    rows.push_back(std::move(r));
    pipeline::write_frequency_csv(row.log, nullptr,
                                  (fs::path(a.out) / ("freq_" + row.mode + ".csv")).string());
  }
  j["rows"] = std::move(rows);
  write_text((fs::path(a.out) / "report.json").string(), j.dump(2) + "\n");
  std::cerr << "ablation report with " << report.rows.size() << " rows in " << a.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wavediff: frequency-aware trajectory diffusion toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate an offline dataset");
  gen_cmd->add_option("--env", gen.env, "pointmass|oscillator|pendulum");
  gen_cmd->add_option("--policy", gen.policy, "random|scripted_noisy|scripted_expert");
  gen_cmd->add_option("--sigma", gen.sigma, "action noise for scripted_noisy");
  gen_cmd->add_option("--episodes", gen.episodes, "episode count");
  gen_cmd->add_option("--horizon", gen.horizon, "steps per episode");
  gen_cmd->add_option("--seed", gen.seed, "rng seed");
  gen_cmd->add_option("--out", gen.out, "output JSONL path")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a bundle into a run directory");
  train_cmd->add_option("--config", train.config_path, "flat key=value config file");
  train_cmd->add_option("--data", train.data, "dataset JSONL")->required();
  train_cmd->add_option("--out", train.out, "run directory")->required();
  train_cmd->add_flag("--with-baseline", train.with_baseline,
                      "also train the time-domain baseline for the frequency CSV");
  train_cmd->add_option("--seed", train.seed, "override the config seed");
  train_cmd->add_option("--threads", train.threads, "worker cap (or WAVEDIFF_THREADS)");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "closed-loop evaluation of a run");
  eval_cmd->add_option("--run", eval.run, "run directory")->required();
  eval_cmd->add_option("--out", eval.out, "results JSON path")->required();
  eval_cmd->add_option("--episodes", eval.episodes, "episodes per seed");
  eval_cmd->add_option("--seeds", eval.seeds, "number of seeds");
  eval_cmd->add_option("--max-steps", eval.max_steps, "steps per episode");
  eval_cmd->add_option("--seed", eval.seed, "base seed");
  eval_cmd->add_option("--temp", eval.temp, "override reverse-noise temperature");

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "sample a plan conditioned on a dataset");
  sample_cmd->add_option("--run", sample.run, "run directory")->required();
  sample_cmd->add_option("--data", sample.data, "dataset JSONL (history source)")->required();
  sample_cmd->add_option("--out", sample.out, "plan CSV path")->required();
  sample_cmd->add_option("--seed", sample.seed, "rng seed");

  SpectrumArgs spec;
  auto* spec_cmd = app.add_subcommand("analyze-spectrum", "energy-density CSV for a dataset");
  spec_cmd->add_option("--data", spec.data, "dataset JSONL")->required();
  spec_cmd->add_option("--out", spec.out, "spectrum CSV path")->required();
  spec_cmd->add_option("--seed", spec.seed, "accepted for uniformity");

  AblateArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate all five variants");
  ablate_cmd->add_option("--config", ablate.config_path, "flat key=value config file");
  ablate_cmd->add_option("--data", ablate.data, "dataset JSONL")->required();
  ablate_cmd->add_option("--out", ablate.out, "report directory")->required();
  ablate_cmd->add_option("--seed", ablate.seed, "override the config seed");
  ablate_cmd->add_option("--eval-seeds", ablate.eval_seeds, "seeds per variant");
  ablate_cmd->add_option("--eval-episodes", ablate.eval_episodes, "episodes per seed");
  ablate_cmd->add_option("--max-steps", ablate.max_steps, "steps per episode");
  ablate_cmd->add_option("--threads", ablate.threads, "worker cap");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(train);
    if (eval_cmd->parsed()) return run_eval(eval);
    if (sample_cmd->parsed()) return run_sample(sample);
    if (spec_cmd->parsed()) return run_spectrum(spec);
    if (ablate_cmd->parsed()) return run_ablate(ablate);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
