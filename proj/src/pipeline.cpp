#include "wavediff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include <json.hpp>

#include "wavediff/checkpoint.hpp"
#include "wavediff/config.hpp"
#include "wavediff/dataset_io.hpp"

namespace wavediff::pipeline {

namespace {

constexpr double kIdLearningRate = 2e-3;
constexpr int kIdBatchSize = 64;

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return seed ^ (0x9e3779b97f4a7c15ull * (stream + 1));
}

Eigen::Index loss_band_width(int rows) {
  const Eigen::Index one_sided = rows / 2 + 1;
  return std::max<Eigen::Index>(1, std::min<Eigen::Index>(10, one_sided / 2));
}

Matrix draw_normal(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

}  // namespace

std::string ablation_mode_name(AblationMode mode) {
  switch (mode) {
    case AblationMode::Full: return "full";
    case AblationMode::LowFreqOnly: return "low_freq_only";
    case AblationMode::HighFreqOnly: return "high_freq_only";
    case AblationMode::NoneFreq: return "none_freq";
    case AblationMode::BaselineTimeDomain: return "baseline_time_domain";
  }
  return "?";
}

AblationMode ablation_mode_by_name(const std::string& name) {
  if (name == "full") return AblationMode::Full;
  if (name == "low_freq_only") return AblationMode::LowFreqOnly;
  if (name == "high_freq_only") return AblationMode::HighFreqOnly;
  if (name == "none_freq") return AblationMode::NoneFreq;
  if (name == "baseline_time_domain") return AblationMode::BaselineTimeDomain;
  throw std::invalid_argument("unknown ablation mode '" + name + "'");
}

void TrainConfig::validate() const {
  if (horizon < 4 || horizon % 2 != 0) {
    throw std::invalid_argument("config: horizon must be even and >= 4");
  }
  if (history != 0 && (history < 2 || history % 2 != 0)) {
    throw std::invalid_argument("config: history must be even and >= 2 (or 0 for horizon)");
  }
  if (diffusion_steps < 2) throw std::invalid_argument("config: diffusion_steps must be >= 2");
  if (!(learning_rate > 0)) throw std::invalid_argument("config: learning_rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (batches_per_epoch < 1) {
    throw std::invalid_argument("config: batches_per_epoch must be >= 1");
  }
  if (!(p_null >= 0.0 && p_null <= 1.0)) {
    throw std::invalid_argument("config: p_null must lie in [0,1]");
  }
  if (!(guidance_omega >= 0.0)) throw std::invalid_argument("config: guidance_omega >= 0");
  if (!(guidance_temp >= 0.0 && guidance_temp <= 1.0)) {
    throw std::invalid_argument("config: guidance_temp must lie in [0,1]");
  }
  if (d_model < 1) throw std::invalid_argument("config: d_model must be >= 1");
  if (inverse_dynamics_epochs < 0) {
    throw std::invalid_argument("config: inverse_dynamics_epochs must be >= 0");
  }
  if (wavelet == spectral::WaveletKind::Daubechies2 && effective_history() < 4) {
    throw std::invalid_argument("config: daubechies2 needs history >= 4");
  }
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("WAVEDIFF_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? int(hw) : 1;
}

HistoryQueue::HistoryQueue(int capacity, int d_state)
    : capacity_(capacity), d_state_(d_state) {
  if (capacity < 1) throw std::invalid_argument("HistoryQueue: capacity must be >= 1");
}

void HistoryQueue::push(const Vector& state) {
  if (state.size() != d_state_) throw std::invalid_argument("HistoryQueue: state width");
  states_.push_back(state);
  if (int(states_.size()) > capacity_) states_.erase(states_.begin());
}

Matrix HistoryQueue::padded_history() const {
  if (states_.empty()) throw std::invalid_argument("HistoryQueue: empty");
  Matrix h(capacity_, d_state_);
  const int pad = capacity_ - int(states_.size());
  for (int r = 0; r < capacity_; ++r) {
    const int src = std::max(0, r - pad);
    h.row(r) = states_[std::size_t(src)].transpose();
  }
  return h;
}

std::vector<WindowedItem> window_dataset(const worldkit::Dataset& dataset, int horizon,
                                         worldkit::ReturnNormalizer* normalizer) {
  std::vector<double> per_episode;
  const auto norm = worldkit::normalize_returns(dataset, &per_episode);
  if (normalizer) *normalizer = norm;

  std::vector<WindowedItem> out;
  for (std::size_t e = 0; e < dataset.episodes.size(); ++e) {
    const Matrix& states = dataset.episodes[e].states;
    for (Eigen::Index start = 0; start + horizon <= states.rows(); ++start) {
      WindowedItem item;
      item.window = states.middleRows(start, horizon);
      item.normalized_return = per_episode[e];
      out.push_back(std::move(item));
    }
  }
  if (out.empty()) {
    throw std::invalid_argument("window_dataset: every episode is shorter than H=" +
                                std::to_string(horizon));
  }
  return out;
}

diffusion::DenoiserConfig TrainedBundle::lfd_config() const {
  diffusion::DenoiserConfig d;
  d.prefix = "lfd.";
  d.d_state = env.d_s;
  d.cond_dim = config.mode == AblationMode::BaselineTimeDomain ? 1 : config.d_model + 1;
  return d;
}

diffusion::DenoiserConfig TrainedBundle::hfd_config() const {
  diffusion::DenoiserConfig d = lfd_config();
  d.prefix = "hfd.";
  return d;
}

cffc::CFFCConfig TrainedBundle::cffc_config() const {
  cffc::CFFCConfig c;
  c.d_state = env.d_s;
  c.d_model = config.d_model;
  return c;
}

worldkit::InverseDynamicsConfig TrainedBundle::id_config() const {
  worldkit::InverseDynamicsConfig c;
  c.d_s = env.d_s;
  c.d_a = env.d_a;
  return c;
}

namespace {

void compute_state_stats(const worldkit::Dataset& dataset, TrainedBundle& bundle) {
  const int d = dataset.env.d_s;
  Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(d);
  double count = 0;
  for (const auto& ep : dataset.episodes) {
    mean += ep.states.colwise().sum();
    count += double(ep.states.rows());
  }
  mean /= count;
  Eigen::RowVectorXd var = Eigen::RowVectorXd::Zero(d);
  for (const auto& ep : dataset.episodes) {
    var += (ep.states.rowwise() - mean).array().square().colwise().sum().matrix();
  }
  var /= count;
  bundle.state_mean = mean;
  bundle.state_std = var.array().sqrt().max(1e-8).matrix();
}

Matrix normalize_states(const TrainedBundle& bundle, const Matrix& states) {
  return ((states.rowwise() - bundle.state_mean).array().rowwise() /
          bundle.state_std.array())
      .matrix();
}

Matrix denormalize_states(const TrainedBundle& bundle, const Matrix& states) {
  return ((states.array().rowwise() * bundle.state_std.array()).matrix().rowwise() +
          bundle.state_mean);
}

void init_bundle_params(TrainedBundle& bundle, std::mt19937_64& rng) {
  const bool baseline = bundle.config.mode == AblationMode::BaselineTimeDomain;
  if (!baseline) {
    cffc::add_cffc_params(bundle.cffc, bundle.cffc_config(), rng);
  }
  diffusion::add_denoiser_params(bundle.lfd, bundle.lfd_config(), rng);
  if (!baseline) {
    diffusion::add_denoiser_params(bundle.hfd, bundle.hfd_config(), rng);
  }
  worldkit::add_inverse_dynamics_params(bundle.inverse_dynamics, bundle.id_config(), rng);
}

struct ItemDraws {
  std::size_t window = 0;
  int i_low = 0;
  int i_high = 0;
  Matrix eps_low;
  Matrix eps_high;
  bool drop_low = false;
  bool drop_high = false;
};

struct ItemOutcome {
  std::unique_ptr<ad::Tape> tape;
  double loss = 0.0;
  double band_low = 0.0;
  double band_high = 0.0;
  Matrix resid_time;
};

// Builds the joint per-item graph (CFFC conditions plus one or two denoiser
// losses), runs backward, and reports the reassembled time-domain residual
// band powers. Thread-safe: parameters are read-only here, gradients stay in
// the tape until the caller flushes them in item order.
ItemOutcome run_item(TrainedBundle& bundle, const WindowedItem& item, const ItemDraws& draws,
                     double grad_seed, bool want_residual_matrix) {
  const TrainConfig& cfg = bundle.config;
  const bool baseline = cfg.mode == AblationMode::BaselineTimeDomain;
  const auto filter = spectral::WaveletFilterPair<double>::make(cfg.wavelet);

  ItemOutcome out;
  out.tape = std::make_unique<ad::Tape>();
  ad::Tape& t = *out.tape;
  const Matrix window = normalize_states(bundle, item.window);

  if (baseline) {
    const Matrix x_i =
        diffusion::forward_noise(window, draws.i_low, draws.eps_low, bundle.schedule);
    ad::Var y;
    if (draws.drop_low) {
      y = t.leaf(bundle.lfd.at("lfd.null"));
    } else {
      Matrix cond(1, 1);
      cond(0, 0) = item.normalized_return;
      y = t.input(cond);
    }
    const ad::Var pred = diffusion::denoiser_forward(t, bundle.lfd_config(), bundle.lfd,
                                                     x_i, draws.i_low, y);
    const ad::Var loss = t.mean_sq_error(pred, draws.eps_low);
    out.loss = t.value(loss)(0, 0);
    out.resid_time = t.value(pred) - draws.eps_low;
    t.backward(loss, grad_seed);
  } else {
    const auto pair = spectral::dwt<double>(window, filter);

    // Clean-pair conditions (teacher forcing); ablation modes replace the
    // respective condition with the learned null embedding.
    const bool lfd_conditioned =
        (cfg.mode == AblationMode::Full || cfg.mode == AblationMode::LowFreqOnly) &&
        !draws.drop_low;
    const bool hfd_conditioned =
        (cfg.mode == AblationMode::Full || cfg.mode == AblationMode::HighFreqOnly) &&
        !draws.drop_high;

    ad::Var y_low, y_high;
    if (lfd_conditioned || hfd_conditioned) {
      const auto cond = cffc::cffc_forward(t, pair, bundle.cffc, bundle.cffc_config());
      y_low = lfd_conditioned
                  ? t.append_scalar(cond.pooled_low, item.normalized_return)
                  : t.leaf(bundle.lfd.at("lfd.null"));
      y_high = hfd_conditioned
                   ? t.append_scalar(cond.pooled_high, item.normalized_return)
                   : t.leaf(bundle.hfd.at("hfd.null"));
    } else {
      y_low = t.leaf(bundle.lfd.at("lfd.null"));
      y_high = t.leaf(bundle.hfd.at("hfd.null"));
    }

    const Matrix x_low =
        diffusion::forward_noise(pair.low, draws.i_low, draws.eps_low, bundle.schedule);
    const Matrix x_high =
        diffusion::forward_noise(pair.high, draws.i_high, draws.eps_high, bundle.schedule);
    const ad::Var pred_low = diffusion::denoiser_forward(t, bundle.lfd_config(), bundle.lfd,
                                                         x_low, draws.i_low, y_low);
    const ad::Var pred_high = diffusion::denoiser_forward(t, bundle.hfd_config(), bundle.hfd,
                                                          x_high, draws.i_high, y_high);
    const ad::Var loss = t.add(t.mean_sq_error(pred_low, draws.eps_low),
                               t.mean_sq_error(pred_high, draws.eps_high));
    out.loss = t.value(loss)(0, 0);

    spectral::SubTrajectoryPair<double> resid;
    resid.low = t.value(pred_low) - draws.eps_low;
    resid.high = t.value(pred_high) - draws.eps_high;
    resid.source_len = window.rows();
    out.resid_time = spectral::idwt(resid, filter);
    t.backward(loss, grad_seed);
  }

  const auto rep =
      spectral::loss_spectrum<double>(out.resid_time, loss_band_width(int(out.resid_time.rows())));
  out.band_low = rep.low_band_power;
  out.band_high = rep.high_band_power;
  if (!want_residual_matrix) out.resid_time.resize(0, 0);
  return out;
}

ItemDraws draw_item(const TrainConfig& cfg, std::size_t window_index, Eigen::Index rows,
                    Eigen::Index cols, std::mt19937_64& rng) {
  const bool baseline = cfg.mode == AblationMode::BaselineTimeDomain;
  std::uniform_int_distribution<int> step_dist(0, cfg.diffusion_steps - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ItemDraws d;
  d.window = window_index;
  if (baseline) {
    d.i_low = step_dist(rng);
    d.eps_low = draw_normal(rows, cols, rng);
    d.drop_low = unit(rng) < cfg.p_null;
  } else {
    d.i_low = step_dist(rng);
    d.eps_low = draw_normal(rows / 2, cols, rng);
    d.drop_low = unit(rng) < cfg.p_null;
    d.i_high = step_dist(rng);
    d.eps_high = draw_normal(rows / 2, cols, rng);
    d.drop_high = unit(rng) < cfg.p_null;
  }
  return d;
}

}  // namespace

TrainResult train(const worldkit::Dataset& dataset, const TrainConfig& cfg,
                  const TrainHooks* hooks) {
  cfg.validate();
  if (dataset.episodes.empty()) throw std::invalid_argument("train: empty dataset");

  TrainResult result;
  TrainedBundle& bundle = result.bundle;
  bundle.config = cfg;
  bundle.env = dataset.env;
  bundle.schedule = diffusion::NoiseSchedule::linear(cfg.diffusion_steps);

  const auto windows = window_dataset(dataset, cfg.horizon, &bundle.normalizer);
  compute_state_stats(dataset, bundle);

  std::mt19937_64 rng(cfg.seed);
  init_bundle_params(bundle, rng);

  const bool baseline = cfg.mode == AblationMode::BaselineTimeDomain;
  const int threads = std::min(resolve_threads(cfg.threads), cfg.batch_size);
  std::uniform_int_distribution<std::size_t> window_dist(0, windows.size() - 1);
  const double grad_seed = 1.0 / double(cfg.batch_size);
  const Eigen::Index rows = cfg.horizon;
  const Eigen::Index cols = dataset.env.d_s;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    double epoch_band_low = 0.0;
    double epoch_band_high = 0.0;
    std::vector<Matrix> epoch_residuals;

    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      // All randomness is drawn up front so worker scheduling cannot
      // influence results.
      std::vector<ItemDraws> draws;
      draws.reserve(std::size_t(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) {
        draws.push_back(draw_item(cfg, window_dist(rng), rows, cols, rng));
      }

      std::vector<ItemOutcome> outcomes(std::size_t(cfg.batch_size));
      for (int start = 0; start < cfg.batch_size; start += threads) {
        const int count = std::min(threads, cfg.batch_size - start);
        std::vector<std::future<ItemOutcome>> futures;
        futures.reserve(std::size_t(count));
        for (int k = 0; k < count; ++k) {
          const ItemDraws& d = draws[std::size_t(start + k)];
          const bool keep_residuals = hooks && hooks->on_epoch_residuals;
          futures.push_back(
              std::async(std::launch::async, [&bundle, &windows, &d, grad_seed, keep_residuals] {
                return run_item(bundle, windows[d.window], d, grad_seed, keep_residuals);
              }));
        }
        for (int k = 0; k < count; ++k) {
          outcomes[std::size_t(start + k)] = futures[std::size_t(k)].get();
        }
      }

      // Deterministic merge in item order, then one optimizer step.
      for (auto& oc : outcomes) {
        oc.tape->flush_param_grads();
        oc.tape.reset();
        epoch_loss += oc.loss / double(cfg.batch_size * cfg.batches_per_epoch);
        epoch_band_low += oc.band_low;
        epoch_band_high += oc.band_high;
        if (hooks && hooks->on_epoch_residuals) {
          epoch_residuals.push_back(std::move(oc.resid_time));
        }
      }
      bundle.lfd.adam_step(cfg.learning_rate);
      if (!baseline) {
        bundle.hfd.adam_step(cfg.learning_rate);
        bundle.cffc.adam_step(cfg.learning_rate);
      }
    }

    FrequencyShiftEntry entry;
    entry.epoch = epoch;
    entry.low_band_power = epoch_band_low;
    entry.high_band_power = epoch_band_high;
    entry.ratio = epoch_band_high > 0.0 ? epoch_band_low / epoch_band_high
                                        : std::numeric_limits<double>::infinity();
    entry.mean_loss = epoch_loss;
    result.log.push_back(entry);
    if (hooks && hooks->on_epoch_residuals) {
      hooks->on_epoch_residuals(epoch, epoch_residuals);
    }
  }

  if (cfg.inverse_dynamics_epochs > 0) {
    const auto id_report = worldkit::train_inverse_dynamics(
        dataset, bundle.inverse_dynamics, bundle.id_config(), cfg.inverse_dynamics_epochs,
        kIdLearningRate, kIdBatchSize, mix_seed(cfg.seed, 101));
    result.inverse_dynamics_mse = id_report.validation_mse;
  }

  bundle.trained = true;
  return result;
}

namespace {

Matrix posterior_or_literal(const Matrix& x, const Matrix& eps_hat, int i,
                            const diffusion::NoiseSchedule& sched, bool literal) {
  if (literal) return x - eps_hat;
  const double beta = sched.betas(i);
  const double ab = sched.alpha_bars(i);
  return (x - (beta / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(sched.alphas(i));
}

}  // namespace

Matrix plan_trajectory(TrainedBundle& bundle, const HistoryQueue& queue,
                       std::mt19937_64& rng) {
  if (!bundle.trained) throw std::invalid_argument("plan: bundle is not trained");
  if (queue.empty()) throw std::invalid_argument("plan: empty history queue");

  const TrainConfig& cfg = bundle.config;
  const auto& sched = bundle.schedule;
  // Plan in normalized space; the caller receives raw states back.
  const Matrix history = normalize_states(bundle, queue.padded_history());
  const Vector observed = history.row(history.rows() - 1).transpose();
  const int n = sched.steps();

  if (cfg.mode == AblationMode::BaselineTimeDomain) {
    Eigen::RowVectorXd y(1);
    y(0) = 1.0;  // request the best observed behavior
    Matrix x = draw_normal(cfg.horizon, bundle.env.d_s, rng);
    for (int i = n - 1; i >= 1; --i) {
      const Matrix eps_hat =
          diffusion::guided_epsilon(bundle.lfd_config(), bundle.lfd, x, y, i, cfg.guidance_omega);
      Matrix mu = posterior_or_literal(x, eps_hat, i, sched, cfg.literal_update);
      if (cfg.clamp_first_state) mu.row(0) = observed.transpose();
      if (i > 1 && !cfg.literal_update) {
        mu += cfg.guidance_temp * std::sqrt(sched.betas(i)) *
              draw_normal(mu.rows(), mu.cols(), rng);
      }
      x = mu;
    }
    return denormalize_states(bundle, x);
  }

  const auto filter = spectral::WaveletFilterPair<double>::make(cfg.wavelet);
  const auto hist_pair = spectral::dwt<double>(history, filter);
  const auto cond = cffc::cffc_eval(hist_pair, bundle.cffc, bundle.cffc_config());

  const int cond_dim = cfg.d_model + 1;
  Eigen::RowVectorXd y_low(cond_dim), y_high(cond_dim);
  y_low << cond.pooled_low, 1.0;
  y_high << cond.pooled_high, 1.0;
  if (cfg.mode == AblationMode::HighFreqOnly || cfg.mode == AblationMode::NoneFreq) {
    y_low = bundle.lfd.at("lfd.null").value.row(0);
  }
  if (cfg.mode == AblationMode::LowFreqOnly || cfg.mode == AblationMode::NoneFreq) {
    y_high = bundle.hfd.at("hfd.null").value.row(0);
  }

  const Eigen::Index half = cfg.horizon / 2;
  Matrix x_low = draw_normal(half, bundle.env.d_s, rng);
  Matrix x_high = draw_normal(half, bundle.env.d_s, rng);
  for (int i = n - 1; i >= 1; --i) {
    const Matrix el = diffusion::guided_epsilon(bundle.lfd_config(), bundle.lfd, x_low, y_low,
                                                i, cfg.guidance_omega);
    const Matrix eh = diffusion::guided_epsilon(bundle.hfd_config(), bundle.hfd, x_high,
                                                y_high, i, cfg.guidance_omega);
    Matrix mu_low = posterior_or_literal(x_low, el, i, sched, cfg.literal_update);
    Matrix mu_high = posterior_or_literal(x_high, eh, i, sched, cfg.literal_update);

    if (cfg.clamp_first_state) {
      // Wavelet-domain clamp: project the observed state into row 0 of the
      // reassembled plan, then return to the wavelet domain.
      spectral::SubTrajectoryPair<double> pair;
      pair.low = std::move(mu_low);
      pair.high = std::move(mu_high);
      pair.source_len = cfg.horizon;
      Matrix tau = spectral::idwt(pair, filter);
      tau.row(0) = observed.transpose();
      const auto clamped = spectral::dwt<double>(tau, filter);
      mu_low = clamped.low;
      mu_high = clamped.high;
    }

    if (i > 1 && !cfg.literal_update) {
      const double scale = cfg.guidance_temp * std::sqrt(sched.betas(i));
      mu_low += scale * draw_normal(half, bundle.env.d_s, rng);
      mu_high += scale * draw_normal(half, bundle.env.d_s, rng);
    }
    x_low = std::move(mu_low);
    x_high = std::move(mu_high);
  }

  spectral::SubTrajectoryPair<double> final_pair;
  final_pair.low = std::move(x_low);
  final_pair.high = std::move(x_high);
  final_pair.source_len = cfg.horizon;
  return denormalize_states(bundle, spectral::idwt(final_pair, filter));
}

Vector plan_step(TrainedBundle& bundle, const HistoryQueue& queue, std::mt19937_64& rng) {
  const Matrix plan = plan_trajectory(bundle, queue, rng);
  return worldkit::predict_action(bundle.inverse_dynamics, bundle.id_config(), bundle.env,
                                  plan.row(0).transpose(), plan.row(1).transpose());
}

double RolloutStats::mean_undiscounted() const {
  if (undiscounted.empty()) return 0.0;
  double acc = 0.0;
  for (const double v : undiscounted) acc += v;
  return acc / double(undiscounted.size());
}

namespace {

template <typename ActionFn>
RolloutStats run_rollout(const worldkit::Environment& env, int episodes, int max_steps,
                         uint64_t seed, int history_capacity, const ActionFn& act) {
  RolloutStats stats;
  stats.undiscounted.assign(std::size_t(episodes), 0.0);
  stats.discounted.assign(std::size_t(episodes), 0.0);
  if (max_steps <= 0) return stats;  // no environment interaction at all

  for (int e = 0; e < episodes; ++e) {
    std::mt19937_64 ep_rng(mix_seed(seed, uint64_t(e)));
    Vector s = env.sample_initial_state(ep_rng);
    HistoryQueue queue(history_capacity, env.d_s);
    queue.push(s);
    double undisc = 0.0, disc = 0.0, g = 1.0;
    for (int t = 0; t < max_steps; ++t) {
      const Vector a = act(queue, s, ep_rng);
      const auto r = env.step(s, a);
      undisc += r.reward;
      disc += g * r.reward;
      g *= env.gamma;
      s = r.next_state;
      queue.push(s);
      if (r.done) break;
    }
    stats.undiscounted[std::size_t(e)] = undisc;
    stats.discounted[std::size_t(e)] = disc;
  }
  return stats;
}

}  // namespace

RolloutStats rollout(TrainedBundle& bundle, const worldkit::Environment& env, int episodes,
                     int max_steps, uint64_t seed) {
  return run_rollout(env, episodes, max_steps, seed, bundle.config.effective_history(),
                     [&bundle](const HistoryQueue& queue, const Vector&, std::mt19937_64& rng) {
                       return plan_step(bundle, queue, rng);
                     });
}

RolloutStats rollout_random(const worldkit::Environment& env, int episodes, int max_steps,
                            uint64_t seed) {
  return run_rollout(env, episodes, max_steps, seed, 2,
                     [&env](const HistoryQueue&, const Vector&, std::mt19937_64& rng) {
                       std::uniform_real_distribution<double> unit(0.0, 1.0);
                       Vector a(env.d_a);
                       for (int i = 0; i < env.d_a; ++i) {
                         a(i) = env.action_low(i) +
                                (env.action_high(i) - env.action_low(i)) * unit(rng);
                       }
                       return a;
                     });
}

EvalResult summarize_per_seed(const std::vector<double>& per_seed_means) {
  if (per_seed_means.size() < 2) {
    throw std::invalid_argument("evaluate: need at least 2 seeds");
  }
  EvalResult out;
  out.per_seed_means = per_seed_means;
  double acc = 0.0;
  for (const double v : per_seed_means) acc += v;
  out.mean = acc / double(per_seed_means.size());
  double ss = 0.0;
  for (const double v : per_seed_means) ss += (v - out.mean) * (v - out.mean);
  const double sample_var = ss / double(per_seed_means.size() - 1);
  out.stderr_of_mean = std::sqrt(sample_var / double(per_seed_means.size()));
  return out;
}

EvalResult evaluate(TrainedBundle& bundle, const worldkit::Environment& env, int seeds,
                    int episodes, int max_steps, uint64_t seed0) {
  if (seeds < 2) throw std::invalid_argument("evaluate: need at least 2 seeds");
  std::vector<double> means;
  std::vector<double> means_disc;
  std::vector<uint64_t> used;
  for (int s = 0; s < seeds; ++s) {
    const uint64_t seed = seed0 + uint64_t(s);
    const RolloutStats stats = rollout(bundle, env, episodes, max_steps, seed);
    means.push_back(stats.mean_undiscounted());
    double disc = 0.0;
    for (const double v : stats.discounted) disc += v;
    means_disc.push_back(stats.discounted.empty() ? 0.0
                                                  : disc / double(stats.discounted.size()));
    used.push_back(seed);
  }
  EvalResult out = summarize_per_seed(means);
  out.seeds = used;
  out.per_seed_means_discounted = means_disc;
  double acc = 0.0;
  for (const double v : means_disc) acc += v;
  out.mean_discounted = acc / double(means_disc.size());
  return out;
}

AblationReport ablation_suite(const worldkit::Dataset& dataset, const TrainConfig& cfg,
                              const AblationOptions& opts) {
  AblationReport report;
  report.dataset_checksum = io::dataset_checksum(dataset);
  for (int s = 0; s < opts.eval_seeds; ++s) report.seeds.push_back(cfg.seed + uint64_t(s));

  const AblationMode modes[] = {AblationMode::Full, AblationMode::LowFreqOnly,
                                AblationMode::HighFreqOnly, AblationMode::NoneFreq,
                                AblationMode::BaselineTimeDomain};
  for (const AblationMode mode : modes) {
    TrainConfig mode_cfg = cfg;
    mode_cfg.mode = mode;
    TrainResult trained = train(dataset, mode_cfg);
    AblationRow row;
    row.mode = ablation_mode_name(mode);
    row.eval = evaluate(trained.bundle, dataset.env, opts.eval_seeds, opts.eval_episodes,
                        opts.max_steps, cfg.seed);
    row.log = trained.log;
    row.final_ratio = trained.log.empty() ? 0.0 : trained.log.back().ratio;
    report.rows.push_back(std::move(row));
  }
  return report;
}

ConditionGradientProbe probe_condition_gradients(const worldkit::Dataset& dataset,
                                                 const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.mode == AblationMode::BaselineTimeDomain) {
    throw std::invalid_argument("probe: baseline mode has no condition branches");
  }
  TrainedBundle bundle;
  bundle.config = cfg;
  bundle.config.p_null = 0.0;  // isolate mode-nulling from dropout
  bundle.env = dataset.env;
  bundle.schedule = diffusion::NoiseSchedule::linear(cfg.diffusion_steps);
  const auto windows = window_dataset(dataset, cfg.horizon, &bundle.normalizer);
  compute_state_stats(dataset, bundle);
  std::mt19937_64 rng(cfg.seed);
  init_bundle_params(bundle, rng);
  // The output heads start at zero, which blocks every upstream gradient;
  // give them life so the probe sees the graph's true connectivity.
  for (ad::ParameterSet* set : {&bundle.lfd, &bundle.hfd}) {
    ad::Parameter& head = set->at((set == &bundle.lfd ? "lfd." : "hfd.") +
                                  std::string("conv_out.w0"));
    head.value = 0.3 * ad::he_init(head.value.rows(), head.value.cols(), rng);
  }

  const std::size_t batch = std::min<std::size_t>(4, windows.size());
  const auto filter = spectral::WaveletFilterPair<double>::make(cfg.wavelet);

  ConditionGradientProbe probe;
  for (int branch = 0; branch < 2; ++branch) {
    bundle.lfd.zero_grads();
    bundle.hfd.zero_grads();
    bundle.cffc.zero_grads();
    std::mt19937_64 draw_rng(mix_seed(cfg.seed, 7));
    for (std::size_t b = 0; b < batch; ++b) {
      const ItemDraws draws =
          draw_item(bundle.config, b, cfg.horizon, dataset.env.d_s, draw_rng);
      ad::Tape t;
      const auto pair = spectral::dwt<double>(windows[b].window, filter);
      const bool lfd_conditioned =
          cfg.mode == AblationMode::Full || cfg.mode == AblationMode::LowFreqOnly;
      const bool hfd_conditioned =
          cfg.mode == AblationMode::Full || cfg.mode == AblationMode::HighFreqOnly;

      ad::Var y_low, y_high;
      if (lfd_conditioned || hfd_conditioned) {
        const auto cond = cffc::cffc_forward(t, pair, bundle.cffc, bundle.cffc_config());
        y_low = lfd_conditioned
                    ? t.append_scalar(cond.pooled_low, windows[b].normalized_return)
                    : t.leaf(bundle.lfd.at("lfd.null"));
        y_high = hfd_conditioned
                     ? t.append_scalar(cond.pooled_high, windows[b].normalized_return)
                     : t.leaf(bundle.hfd.at("hfd.null"));
      } else {
        y_low = t.leaf(bundle.lfd.at("lfd.null"));
        y_high = t.leaf(bundle.hfd.at("hfd.null"));
      }

      ad::Var loss;
      if (branch == 0) {
        const Matrix x_low =
            diffusion::forward_noise(pair.low, draws.i_low, draws.eps_low, bundle.schedule);
        loss = t.mean_sq_error(diffusion::denoiser_forward(t, bundle.lfd_config(), bundle.lfd,
                                                           x_low, draws.i_low, y_low),
                               draws.eps_low);
      } else {
        const Matrix x_high =
            diffusion::forward_noise(pair.high, draws.i_high, draws.eps_high, bundle.schedule);
        loss = t.mean_sq_error(diffusion::denoiser_forward(t, bundle.hfd_config(), bundle.hfd,
                                                           x_high, draws.i_high, y_high),
                               draws.eps_high);
      }
      t.backward(loss, 1.0 / double(batch));
      t.flush_param_grads();
    }
    if (branch == 0) {
      probe.cffc_grad_from_lfd_loss = bundle.cffc.grad_max_abs();
      probe.null_low_grad = bundle.lfd.at("lfd.null").grad.cwiseAbs().maxCoeff();
    } else {
      probe.cffc_grad_from_hfd_loss = bundle.cffc.grad_max_abs();
      probe.null_high_grad = bundle.hfd.at("hfd.null").grad.cwiseAbs().maxCoeff();
    }
  }
  return probe;
}

void save_bundle(const TrainedBundle& bundle, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  config::write_file(bundle.config, (fs::path(dir) / "config.cfg").string());

  nlohmann::json meta;
  meta["format"] = "wavediff-bundle";
  meta["version"] = 1;
  meta["env"] = bundle.env.name();
  meta["gamma"] = bundle.env.gamma;
  meta["min_return"] = bundle.normalizer.min_return;
  meta["max_return"] = bundle.normalizer.max_return;
  meta["state_mean"] = std::vector<double>(bundle.state_mean.data(),
                                           bundle.state_mean.data() + bundle.state_mean.size());
  meta["state_std"] = std::vector<double>(bundle.state_std.data(),
                                          bundle.state_std.data() + bundle.state_std.size());
  meta["trained"] = bundle.trained;
  std::ofstream meta_out((fs::path(dir) / "bundle.json").string(), std::ios::trunc);
  if (!meta_out) throw std::runtime_error("cannot write bundle.json");
  meta_out << meta.dump(2) << "\n";

  ad::save_checkpoint(bundle.lfd, (fs::path(dir) / "lfd.ckpt").string());
  if (bundle.config.mode != AblationMode::BaselineTimeDomain) {
    ad::save_checkpoint(bundle.hfd, (fs::path(dir) / "hfd.ckpt").string());
    ad::save_checkpoint(bundle.cffc, (fs::path(dir) / "cffc.ckpt").string());
  }
  ad::save_checkpoint(bundle.inverse_dynamics,
                      (fs::path(dir) / "inverse_dynamics.ckpt").string());
}

TrainedBundle load_bundle(const std::string& dir) {
  namespace fs = std::filesystem;
  TrainedBundle bundle;
  bundle.config = config::parse_file((fs::path(dir) / "config.cfg").string());

  std::ifstream meta_in((fs::path(dir) / "bundle.json").string());
  if (!meta_in) throw std::runtime_error("cannot open bundle.json in " + dir);
  nlohmann::json meta = nlohmann::json::parse(meta_in);
  bundle.env = worldkit::Environment::by_name(meta.at("env").get<std::string>());
  bundle.env.gamma = meta.at("gamma").get<double>();
  bundle.normalizer.min_return = meta.at("min_return").get<double>();
  bundle.normalizer.max_return = meta.at("max_return").get<double>();
  const auto mean_vec = meta.at("state_mean").get<std::vector<double>>();
  const auto std_vec = meta.at("state_std").get<std::vector<double>>();
  bundle.state_mean = Eigen::Map<const Eigen::RowVectorXd>(mean_vec.data(),
                                                           Eigen::Index(mean_vec.size()));
  bundle.state_std =
      Eigen::Map<const Eigen::RowVectorXd>(std_vec.data(), Eigen::Index(std_vec.size()));
  bundle.schedule = diffusion::NoiseSchedule::linear(bundle.config.diffusion_steps);

  std::mt19937_64 rng(bundle.config.seed);
  init_bundle_params(bundle, rng);
  ad::load_checkpoint(bundle.lfd, (fs::path(dir) / "lfd.ckpt").string());
  if (bundle.config.mode != AblationMode::BaselineTimeDomain) {
    ad::load_checkpoint(bundle.hfd, (fs::path(dir) / "hfd.ckpt").string());
    ad::load_checkpoint(bundle.cffc, (fs::path(dir) / "cffc.ckpt").string());
  }
  ad::load_checkpoint(bundle.inverse_dynamics,
                      (fs::path(dir) / "inverse_dynamics.ckpt").string());
  bundle.trained = meta.at("trained").get<bool>();
  return bundle;
}

void write_frequency_csv(const FrequencyShiftLog& model, const FrequencyShiftLog* baseline,
                         const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "epoch,model_ratio,baseline_ratio\n";
  char buf[96];
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (baseline && i < baseline->size()) {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", model[i].epoch, model[i].ratio,
                    (*baseline)[i].ratio);
    } else {
      std::snprintf(buf, sizeof(buf), "%d,%.17g,nan\n", model[i].epoch, model[i].ratio);
    }
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace wavediff::pipeline
