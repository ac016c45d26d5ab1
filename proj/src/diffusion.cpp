#include "wavediff/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace wavediff::diffusion {

NoiseSchedule NoiseSchedule::linear(int n, double beta_start, double beta_end) {
  if (n < 1) throw std::invalid_argument("NoiseSchedule: need at least 1 step");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
    throw std::invalid_argument("NoiseSchedule: betas must grow inside (0,1)");
  }
  NoiseSchedule s;
  s.betas.resize(n);
  for (int i = 0; i < n; ++i) {
    s.betas(i) = n == 1 ? beta_start
                        : beta_start + (beta_end - beta_start) * double(i) / double(n - 1);
  }
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bars.resize(n);
  double prod = 1.0;
  for (int i = 0; i < n; ++i) {
    prod *= s.alphas(i);
    s.alpha_bars(i) = prod;
    if (!(s.alpha_bars(i) > 0.0 && s.alpha_bars(i) < 1.0)) {
      throw std::invalid_argument("NoiseSchedule: alpha_bar left (0,1)");
    }
    if (i > 0 && !(s.betas(i) > s.betas(i - 1))) {
      throw std::invalid_argument("NoiseSchedule: betas must be strictly increasing");
    }
  }
  return s;
}

void validate(const GuidanceConfig& cfg) {
  if (!(cfg.omega >= 0.0)) throw std::invalid_argument("guidance: omega must be >= 0");
  if (!(cfg.temp >= 0.0 && cfg.temp <= 1.0)) {
    throw std::invalid_argument("guidance: temp must lie in [0,1]");
  }
}

RowVector timestep_embedding(int step, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
  const int half = dim / 2;
  RowVector e(dim);
  for (int j = 0; j < half; ++j) {
    const double freq =
        std::exp(-std::log(10000.0) * double(j) / double(std::max(1, half - 1)));
    e(j) = std::sin(step * freq);
    e(half + j) = std::cos(step * freq);
  }
  return e;
}

namespace {

void add_conv(ad::ParameterSet& ps, const std::string& prefix, int cin, int cout, int taps,
              std::mt19937_64& rng, bool zero) {
  // Fan-in of a temporal conv is taps * cin.
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(taps * cin)));
  for (int m = 0; m < taps; ++m) {
    Matrix w = Matrix::Zero(cin, cout);
    if (!zero) {
      for (int r = 0; r < cin; ++r)
        for (int c = 0; c < cout; ++c) w(r, c) = dist(rng);
    }
    ps.add(prefix + ".w" + std::to_string(m), w);
  }
  ps.add(prefix + ".b", Matrix::Zero(1, cout));
}

ad::Var apply_conv(ad::Tape& t, ad::ParameterSet& ps, const std::string& prefix, ad::Var x,
                   int taps) {
  std::vector<ad::Var> w;
  w.reserve(taps);
  for (int m = 0; m < taps; ++m) w.push_back(t.leaf(ps.at(prefix + ".w" + std::to_string(m))));
  return t.conv1d(x, w, t.leaf(ps.at(prefix + ".b")));
}

}  // namespace

void add_denoiser_params(ad::ParameterSet& ps, const DenoiserConfig& cfg,
                         std::mt19937_64& rng) {
  if (cfg.d_state < 1 || cfg.cond_dim < 1) {
    throw std::invalid_argument("denoiser: d_state and cond_dim must be positive");
  }
  ps.add(cfg.prefix + "temb.w", ad::he_init(cfg.time_dim, cfg.channels, rng));
  ps.add(cfg.prefix + "temb.b", Matrix::Zero(1, cfg.channels));
  ps.add(cfg.prefix + "cond.w", ad::he_init(cfg.cond_dim, cfg.channels, rng));
  ps.add(cfg.prefix + "cond.b", Matrix::Zero(1, cfg.channels));
  add_conv(ps, cfg.prefix + "conv_in", cfg.d_state, cfg.channels, 3, rng, false);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string blk = cfg.prefix + "blk" + std::to_string(b);
    add_conv(ps, blk + ".conv1", cfg.channels, cfg.channels, 3, rng, false);
    add_conv(ps, blk + ".conv2", cfg.channels, cfg.channels, 3, rng, false);
  }
  // Zero-initialized head: an untrained denoiser predicts exactly zero noise.
  add_conv(ps, cfg.prefix + "conv_out", cfg.channels, cfg.d_state, 1, rng, true);

  std::normal_distribution<double> small(0.0, 0.02);
  Matrix null_embed(1, cfg.cond_dim);
  for (int c = 0; c < cfg.cond_dim; ++c) null_embed(0, c) = small(rng);
  ps.add(cfg.prefix + "null", null_embed);
}

ad::Var denoiser_forward(ad::Tape& t, const DenoiserConfig& cfg, ad::ParameterSet& ps,
                         const Matrix& x, int step, ad::Var y) {
  if (x.cols() != cfg.d_state) {
    throw std::invalid_argument("denoiser: state width mismatch");
  }
  if (t.value(y).rows() != 1 || t.value(y).cols() != cfg.cond_dim) {
    throw std::invalid_argument("denoiser: condition width mismatch");
  }
  const ad::Var temb = t.input(timestep_embedding(step, cfg.time_dim));
  const ad::Var temb_proj =
      t.linear(temb, t.leaf(ps.at(cfg.prefix + "temb.w")), t.leaf(ps.at(cfg.prefix + "temb.b")));
  const ad::Var cond_proj =
      t.linear(y, t.leaf(ps.at(cfg.prefix + "cond.w")), t.leaf(ps.at(cfg.prefix + "cond.b")));
  const ad::Var inject = t.broadcast_rows(t.add(temb_proj, cond_proj), x.rows());

  ad::Var h = apply_conv(t, ps, cfg.prefix + "conv_in", t.input(x), 3);
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string blk = cfg.prefix + "blk" + std::to_string(b);
    const ad::Var pre = t.relu(t.add(h, inject));
    const ad::Var z = t.relu(apply_conv(t, ps, blk + ".conv1", pre, 3));
    h = t.add(h, apply_conv(t, ps, blk + ".conv2", z, 3));
  }
  return apply_conv(t, ps, cfg.prefix + "conv_out", h, 1);
}

Matrix denoiser_eval(const DenoiserConfig& cfg, ad::ParameterSet& ps, const Matrix& x,
                     int step, const RowVector& y) {
  ad::Tape t;
  return t.value(denoiser_forward(t, cfg, ps, x, step, t.input(y)));
}

Matrix forward_noise(const Matrix& x0, int i, const Matrix& eps, const NoiseSchedule& sched) {
  if (i < 0 || i >= sched.steps()) {
    throw std::invalid_argument("forward_noise: step " + std::to_string(i) +
                                " outside [0," + std::to_string(sched.steps()) + ")");
  }
  if (eps.rows() != x0.rows() || eps.cols() != x0.cols()) {
    throw std::invalid_argument("forward_noise: eps shape mismatch");
  }
  const double ab = sched.alpha_bars(i);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

Matrix guided_epsilon(const DenoiserConfig& cfg, ad::ParameterSet& ps, const Matrix& x_i,
                      const RowVector& y, int i, double omega) {
  const RowVector null_embed = ps.at(cfg.prefix + "null").value.row(0);
  const Matrix eps_null = denoiser_eval(cfg, ps, x_i, i, null_embed);
  const Matrix eps_cond = denoiser_eval(cfg, ps, x_i, i, y);
  return eps_null + omega * (eps_cond - eps_null);
}

Matrix denoise_step(const Matrix& x_i, const Matrix& eps_hat, int i,
                    const NoiseSchedule& sched, const GuidanceConfig& cfg,
                    std::mt19937_64& rng) {
  if (i < 1 || i >= sched.steps()) {
    throw std::invalid_argument("denoise_step: step must lie in [1,N)");
  }
  if (cfg.literal_update) {
    return x_i - eps_hat;
  }
  const double beta = sched.betas(i);
  const double ab = sched.alpha_bars(i);
  Matrix mean = (x_i - (beta / std::sqrt(1.0 - ab)) * eps_hat) / std::sqrt(sched.alphas(i));
  if (i > 1) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix z(x_i.rows(), x_i.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r)
      for (Eigen::Index c = 0; c < z.cols(); ++c) z(r, c) = dist(rng);
    mean += cfg.temp * std::sqrt(beta) * z;
  }
  return mean;
}

Matrix sample(const DenoiserConfig& cfg, ad::ParameterSet& ps, const RowVector& y,
              Eigen::Index rows, const NoiseSchedule& sched, const GuidanceConfig& gcfg,
              std::mt19937_64& rng) {
  validate(gcfg);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix x(rows, cfg.d_state);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(r, c) = dist(rng);
  for (int i = sched.steps() - 1; i >= 1; --i) {
    const Matrix eps_hat = guided_epsilon(cfg, ps, x, y, i, gcfg.omega);
    x = denoise_step(x, eps_hat, i, sched, gcfg, rng);
  }
  return x;
}

TrainingLossResult training_loss(const std::vector<LossItem>& batch,
                                 const NoiseSchedule& sched, const DenoiserConfig& cfg,
                                 ad::ParameterSet& ps, double p_null, std::mt19937_64& rng,
                                 bool accumulate_grads, const DenoiserFn& denoiser) {
  if (batch.empty()) throw std::invalid_argument("training_loss: empty batch");

  // Pre-draw all randomness so item evaluation order cannot matter.
  std::uniform_int_distribution<int> step_dist(0, sched.steps() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  struct Draw {
    int i;
    Matrix eps;
    bool drop;
  };
  std::vector<Draw> draws(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    draws[b].i = step_dist(rng);
    draws[b].eps.resize(batch[b].x0.rows(), batch[b].x0.cols());
    for (Eigen::Index r = 0; r < draws[b].eps.rows(); ++r)
      for (Eigen::Index c = 0; c < draws[b].eps.cols(); ++c)
        draws[b].eps(r, c) = normal(rng);
    draws[b].drop = unit(rng) < p_null;
  }

  TrainingLossResult out;
  const double inv_batch = 1.0 / double(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape t;
    const Matrix x_i = forward_noise(batch[b].x0, draws[b].i, draws[b].eps, sched);
    const ad::Var y_var = draws[b].drop ? t.leaf(ps.at(cfg.prefix + "null"))
                                        : t.input(batch[b].y);
    const ad::Var pred = denoiser ? denoiser(t, b, x_i, draws[b].i, y_var)
                                  : denoiser_forward(t, cfg, ps, x_i, draws[b].i, y_var);
    const ad::Var loss = t.mean_sq_error(pred, draws[b].eps);
    out.loss += t.value(loss)(0, 0) * inv_batch;
    out.residuals.push_back(t.value(pred) - draws[b].eps);
    out.timesteps.push_back(draws[b].i);
    out.dropped.push_back(draws[b].drop);
    if (accumulate_grads) {
      t.backward(loss, inv_batch);
      t.flush_param_grads();
    }
  }
  return out;
}

}  // namespace wavediff::diffusion
