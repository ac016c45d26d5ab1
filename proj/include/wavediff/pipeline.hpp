// Orchestration: joint training of the twin diffusion models and the shared
// conditioner over windowed trajectories, the closed-loop planner, rollout
// evaluation, the time-domain baseline, and the ablation harness.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "wavediff/cffc.hpp"
#include "wavediff/diffusion.hpp"
#include "wavediff/spectral.hpp"
#include "wavediff/worldkit.hpp"

namespace wavediff::pipeline {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class AblationMode { Full, LowFreqOnly, HighFreqOnly, NoneFreq, BaselineTimeDomain };

std::string ablation_mode_name(AblationMode mode);
AblationMode ablation_mode_by_name(const std::string& name);

struct TrainConfig {
  int horizon = 96;              // H, even
  int history = 0;               // C; 0 means "same as horizon"
  int diffusion_steps = 100;     // N
  double learning_rate = 2e-4;
  int epochs = 60;
  int batch_size = 16;
  int batches_per_epoch = 4;     // an epoch is this many sampled batches
  double p_null = 0.25;
  double guidance_omega = 1.2;
  double guidance_temp = 0.5;
  bool literal_update = false;
  AblationMode mode = AblationMode::Full;
  spectral::WaveletKind wavelet = spectral::WaveletKind::Haar;
  int d_model = 64;
  bool clamp_first_state = true;
  int inverse_dynamics_epochs = 60;
  uint64_t seed = 0;
  int threads = 0;               // 0: WAVEDIFF_THREADS, else hardware

  int effective_history() const { return history > 0 ? history : horizon; }
  void validate() const;
};

int resolve_threads(int requested);

// Bounded FIFO of observed states, capacity C; oldest evicted first.
class HistoryQueue {
 public:
  HistoryQueue(int capacity, int d_state);
  void push(const Vector& state);
  int size() const { return int(states_.size()); }
  int capacity() const { return capacity_; }
  bool empty() const { return states_.empty(); }
  // C x d: a partially filled queue is padded by repeating its oldest state.
  Matrix padded_history() const;

 private:
  int capacity_;
  int d_state_;
  std::vector<Vector> states_;
};

struct WindowedItem {
  Matrix window;  // H x d_s
  double normalized_return = 0.0;
};

// Stride-1 sliding windows over every episode's state sequence, each tagged
// with its episode's normalized return. Episodes shorter than H contribute
// nothing; an entirely too-short dataset is rejected.
std::vector<WindowedItem> window_dataset(const worldkit::Dataset& dataset, int horizon,
                                         worldkit::ReturnNormalizer* normalizer = nullptr);

struct FrequencyShiftEntry {
  int epoch = 0;
  double low_band_power = 0.0;
  double high_band_power = 0.0;
  double ratio = 0.0;
  double mean_loss = 0.0;
};
using FrequencyShiftLog = std::vector<FrequencyShiftEntry>;

struct TrainedBundle {
  TrainConfig config;
  worldkit::Environment env;
  worldkit::ReturnNormalizer normalizer;
  // Per-dimension z-score statistics of the training states. Diffusion and
  // CFFC operate in normalized space; inverse dynamics sees raw states.
  Eigen::RowVectorXd state_mean;
  Eigen::RowVectorXd state_std;
  diffusion::NoiseSchedule schedule;
  ad::ParameterSet lfd;     // baseline mode: the single time-domain model
  ad::ParameterSet hfd;     // empty in baseline mode
  ad::ParameterSet cffc;    // empty in baseline mode
  ad::ParameterSet inverse_dynamics;
  bool trained = false;

  diffusion::DenoiserConfig lfd_config() const;
  diffusion::DenoiserConfig hfd_config() const;
  cffc::CFFCConfig cffc_config() const;
  worldkit::InverseDynamicsConfig id_config() const;
};

struct TrainHooks {
  // Reassembled time-domain residuals of every item seen in the epoch.
  std::function<void(int epoch, const std::vector<Matrix>& residuals)> on_epoch_residuals;
};

struct TrainResult {
  TrainedBundle bundle;
  FrequencyShiftLog log;
  double inverse_dynamics_mse = 0.0;
};

TrainResult train(const worldkit::Dataset& dataset, const TrainConfig& cfg,
                  const TrainHooks* hooks = nullptr);

// One Algorithm-1 step: pad the history, condition through the wavelet/CFFC
// path, sample both streams jointly (optionally clamping the current state
// into row 0 in the wavelet domain at each denoise step), reassemble, and
// read the action from the inverse dynamics of rows 0 and 1.
Vector plan_step(TrainedBundle& bundle, const HistoryQueue& queue, std::mt19937_64& rng);

// Full generated plan (H x d_s) for inspection; plan_step uses rows 0 and 1.
Matrix plan_trajectory(TrainedBundle& bundle, const HistoryQueue& queue, std::mt19937_64& rng);

struct RolloutStats {
  std::vector<double> undiscounted;
  std::vector<double> discounted;
  double mean_undiscounted() const;
};

RolloutStats rollout(TrainedBundle& bundle, const worldkit::Environment& env, int episodes,
                     int max_steps, uint64_t seed);

// Baseline oracle: uniform-random actions through the same rollout harness.
RolloutStats rollout_random(const worldkit::Environment& env, int episodes, int max_steps,
                            uint64_t seed);

struct EvalResult {
  double mean = 0.0;
  double stderr_of_mean = 0.0;
  std::vector<double> per_seed_means;
  std::vector<uint64_t> seeds;
  // Discounted companions (the headline numbers are undiscounted).
  double mean_discounted = 0.0;
  std::vector<double> per_seed_means_discounted;
};

EvalResult summarize_per_seed(const std::vector<double>& per_seed_means);
EvalResult evaluate(TrainedBundle& bundle, const worldkit::Environment& env, int seeds,
                    int episodes, int max_steps, uint64_t seed0);

struct AblationRow {
  std::string mode;
  EvalResult eval;
  FrequencyShiftLog log;
  double final_ratio = 0.0;
};

struct AblationReport {
  std::string dataset_checksum;
  std::vector<uint64_t> seeds;
  std::vector<AblationRow> rows;  // full, low_freq_only, high_freq_only, none_freq, baseline
};

struct AblationOptions {
  int eval_seeds = 3;
  int eval_episodes = 5;
  int max_steps = 40;
};

AblationReport ablation_suite(const worldkit::Dataset& dataset, const TrainConfig& cfg,
                              const AblationOptions& opts = {});

// Gradient probe for the condition-nulling invariants: backpropagates the
// LFD and HFD losses separately on one deterministic batch (no dropout).
struct ConditionGradientProbe {
  double cffc_grad_from_lfd_loss = 0.0;
  double cffc_grad_from_hfd_loss = 0.0;
  double null_low_grad = 0.0;
  double null_high_grad = 0.0;
};

ConditionGradientProbe probe_condition_gradients(const worldkit::Dataset& dataset,
                                                 const TrainConfig& cfg);

// Run-directory layout: config snapshot, checkpoints per component,
// frequency-shift CSV; evaluation results are written by the caller.
void save_bundle(const TrainedBundle& bundle, const std::string& dir);
TrainedBundle load_bundle(const std::string& dir);

void write_frequency_csv(const FrequencyShiftLog& model, const FrequencyShiftLog* baseline,
                         const std::string& path);

}  // namespace wavediff::pipeline
