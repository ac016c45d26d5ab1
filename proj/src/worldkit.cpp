#include "wavediff/worldkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace wavediff::worldkit {

namespace {

// PointMass2D: goal at the origin, reward = -distance after the step.
constexpr double kGoalTol = 0.01;
// DampedOscillator stiffness/damping.
constexpr double kSpring = 4.0;
constexpr double kDamping = 0.8;
// Pendulum gravity-over-length; angle measured from upright.
constexpr double kGravity = 3.0;
constexpr double kMaxSpin = 8.0;

double wrap_angle(double a) {
  while (a > EIGEN_PI) a -= 2.0 * EIGEN_PI;
  while (a <= -EIGEN_PI) a += 2.0 * EIGEN_PI;
  return a;
}

}  // namespace

Environment Environment::make(EnvKind kind) {
  Environment env;
  env.kind = kind;
  switch (kind) {
    case EnvKind::PointMass2D:
      env.d_s = 4;
      env.d_a = 2;
      env.action_low = Vector::Constant(2, -1.0);
      env.action_high = Vector::Constant(2, 1.0);
      break;
    case EnvKind::DampedOscillator:
      env.d_s = 2;
      env.d_a = 1;
      env.action_low = Vector::Constant(1, -2.0);
      env.action_high = Vector::Constant(1, 2.0);
      break;
    case EnvKind::Pendulum:
      env.d_s = 3;
      env.d_a = 1;
      env.action_low = Vector::Constant(1, -2.0);
      env.action_high = Vector::Constant(1, 2.0);
      break;
  }
  return env;
}

Environment Environment::by_name(const std::string& name) {
  if (name == "pointmass") return make(EnvKind::PointMass2D);
  if (name == "oscillator") return make(EnvKind::DampedOscillator);
  if (name == "pendulum") return make(EnvKind::Pendulum);
  throw std::invalid_argument("unknown environment: " + name +
                              " (expected pointmass|oscillator|pendulum)");
}

std::string Environment::name() const {
  switch (kind) {
    case EnvKind::PointMass2D: return "pointmass";
    case EnvKind::DampedOscillator: return "oscillator";
    case EnvKind::Pendulum: return "pendulum";
  }
  return "?";
}

Vector Environment::sample_initial_state(std::mt19937_64& rng) const {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector s(d_s);
  switch (kind) {
    case EnvKind::PointMass2D: {
      // Start on a thin ring around the goal, at rest.
      const double angle = 2.0 * EIGEN_PI * unit(rng);
      const double radius = 0.9 + 0.2 * unit(rng);
      s << radius * std::cos(angle), radius * std::sin(angle), 0.0, 0.0;
      break;
    }
    case EnvKind::DampedOscillator: {
      s << -1.0 + 2.0 * unit(rng), -0.5 + 1.0 * unit(rng);
      break;
    }
    case EnvKind::Pendulum: {
      const double theta = -0.8 + 1.6 * unit(rng);
      const double spin = -0.5 + 1.0 * unit(rng);
      s << std::cos(theta), std::sin(theta), spin;
      break;
    }
  }
  return s;
}

Vector Environment::clip_action(const Vector& action) const {
  if (action.size() != d_a) {
    throw std::invalid_argument("action dimension mismatch");
  }
  return action.cwiseMax(action_low).cwiseMin(action_high);
}

StepResult Environment::step(const Vector& state, const Vector& action) const {
  if (state.size() != d_s) throw std::invalid_argument("state dimension mismatch");
  if (!state.allFinite()) throw std::invalid_argument("non-finite state");
  const Vector a = clip_action(action);

  StepResult out;
  out.next_state.resize(d_s);
  switch (kind) {
    case EnvKind::PointMass2D: {
      const Eigen::Vector2d vel(state(2) + dt * a(0), state(3) + dt * a(1));
      const Eigen::Vector2d pos(state(0) + dt * vel(0), state(1) + dt * vel(1));
      out.next_state << pos(0), pos(1), vel(0), vel(1);
      out.reward = -pos.norm();
      out.done = pos.norm() < kGoalTol && vel.norm() < kGoalTol;
      break;
    }
    case EnvKind::DampedOscillator: {
      const double v = state(1) + dt * (-kSpring * state(0) - kDamping * state(1) + a(0));
      const double x = state(0) + dt * v;
      out.next_state << x, v;
      out.reward = -std::abs(x);
      out.done = false;
      break;
    }
    case EnvKind::Pendulum: {
      const double theta = std::atan2(state(1), state(0));
      double spin = state(2) + dt * (kGravity * std::sin(theta) + a(0));
      spin = std::clamp(spin, -kMaxSpin, kMaxSpin);
      const double next_theta = wrap_angle(theta + dt * spin);
      out.next_state << std::cos(next_theta), std::sin(next_theta), spin;
      out.reward = -(next_theta * next_theta + 0.1 * spin * spin);
      out.done = false;
      break;
    }
  }
  return out;
}

PolicySpec PolicySpec::parse(const std::string& name, double sigma) {
  PolicySpec p;
  p.sigma = sigma;
  if (name == "random") {
    p.kind = PolicyKind::Random;
  } else if (name == "scripted_noisy") {
    p.kind = PolicyKind::ScriptedNoisy;
  } else if (name == "scripted_expert") {
    p.kind = PolicyKind::ScriptedExpert;
  } else {
    throw std::invalid_argument("unknown policy: " + name +
                                " (expected random|scripted_noisy|scripted_expert)");
  }
  return p;
}

std::string PolicySpec::tag() const {
  switch (kind) {
    case PolicyKind::Random: return "random";
    case PolicyKind::ScriptedNoisy: {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "scripted_noisy(%g)", sigma);
      return buf;
    }
    case PolicyKind::ScriptedExpert: return "scripted_expert";
  }
  return "?";
}

namespace {

Vector pd_controller(const Environment& env, const Vector& s) {
  Vector a(env.d_a);
  switch (env.kind) {
    case EnvKind::PointMass2D:
      a << -2.5 * s(0) - 3.2 * s(2), -2.5 * s(1) - 3.2 * s(3);
      break;
    case EnvKind::DampedOscillator:
      a << -2.0 * s(0) - 2.0 * s(1);
      break;
    case EnvKind::Pendulum: {
      const double theta = std::atan2(s(1), s(0));
      a << -6.0 * std::sin(theta) - 2.0 * s(2) - kGravity * std::sin(theta);
      break;
    }
  }
  return a;
}

}  // namespace

Dataset generate_dataset(const Environment& env, const PolicySpec& policy, int episodes,
                         int horizon, uint64_t seed) {
  if (horizon < 2) throw std::invalid_argument("generate_dataset: horizon must be >= 2");
  if (episodes < 1) throw std::invalid_argument("generate_dataset: need episodes >= 1");

  Dataset ds;
  ds.env = env;
  ds.policy = policy.tag();
  ds.horizon = horizon;
  ds.seed = seed;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int e = 0; e < episodes; ++e) {
    Episode ep;
    ep.behavior_tag = policy.tag();
    ep.states.resize(horizon + 1, env.d_s);
    ep.actions.resize(horizon, env.d_a);
    ep.rewards.resize(horizon);

    Vector s = env.sample_initial_state(rng);
    ep.states.row(0) = s.transpose();
    for (int t = 0; t < horizon; ++t) {
      Vector a(env.d_a);
      switch (policy.kind) {
        case PolicyKind::Random:
          for (int i = 0; i < env.d_a; ++i) {
            a(i) = env.action_low(i) + (env.action_high(i) - env.action_low(i)) * unit(rng);
          }
          break;
        case PolicyKind::ScriptedExpert:
          a = pd_controller(env, s);
          break;
        case PolicyKind::ScriptedNoisy:
          a = pd_controller(env, s);
          for (int i = 0; i < env.d_a; ++i) a(i) += policy.sigma * noise(rng);
          break;
      }
      a = env.clip_action(a);
      const StepResult r = env.step(s, a);
      ep.actions.row(t) = a.transpose();
      ep.rewards(t) = r.reward;
      s = r.next_state;
      ep.states.row(t + 1) = s.transpose();
    }
    ds.episodes.push_back(std::move(ep));
  }
  return ds;
}

double discounted_return(const Episode& episode, double gamma) {
  if (episode.rewards.size() == 0) {
    throw std::invalid_argument("discounted_return: empty episode");
  }
  double acc = 0.0;
  double g = 1.0;
  for (Eigen::Index t = 0; t < episode.rewards.size(); ++t) {
    acc += g * episode.rewards(t);
    g *= gamma;
  }
  return acc;
}

double ReturnNormalizer::normalize(double ret) const {
  if (max_return <= min_return) return 1.0;
  return (ret - min_return) / (max_return - min_return);
}

ReturnNormalizer normalize_returns(const Dataset& dataset, std::vector<double>* per_episode) {
  if (dataset.episodes.empty()) {
    throw std::invalid_argument("normalize_returns: empty dataset");
  }
  std::vector<double> returns;
  returns.reserve(dataset.episodes.size());
  for (const Episode& ep : dataset.episodes) {
    returns.push_back(discounted_return(ep, dataset.env.gamma));
  }
  ReturnNormalizer norm;
  norm.min_return = *std::min_element(returns.begin(), returns.end());
  norm.max_return = *std::max_element(returns.begin(), returns.end());
  if (per_episode) {
    per_episode->clear();
    for (const double r : returns) per_episode->push_back(norm.normalize(r));
  }
  return norm;
}

void add_inverse_dynamics_params(ad::ParameterSet& ps, const InverseDynamicsConfig& cfg,
                                 std::mt19937_64& rng) {
  ad::add_ffn(ps, "id", 2 * cfg.d_s, cfg.hidden, cfg.d_a, rng);
}

InverseDynamicsReport train_inverse_dynamics(const Dataset& dataset, ad::ParameterSet& ps,
                                             const InverseDynamicsConfig& cfg, int epochs,
                                             double lr, int batch_size, uint64_t seed) {
  std::size_t total = 0;
  for (const Episode& ep : dataset.episodes) total += std::size_t(ep.actions.rows());
  if (total < 1) throw std::invalid_argument("train_inverse_dynamics: empty dataset");

  Matrix inputs(total, 2 * cfg.d_s);
  Matrix targets(total, cfg.d_a);
  std::size_t row = 0;
  for (const Episode& ep : dataset.episodes) {
    for (Eigen::Index t = 0; t < ep.actions.rows(); ++t) {
      inputs.row(row).leftCols(cfg.d_s) = ep.states.row(t);
      inputs.row(row).rightCols(cfg.d_s) = ep.states.row(t + 1);
      targets.row(row) = ep.actions.row(t);
      ++row;
    }
  }

  // Deterministic 90/10 split.
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t train_count = std::max<std::size_t>(1, total * 9 / 10);

  const ad::FFNParams ffn = ad::ffn_handles(ps, "id");
  std::uniform_int_distribution<std::size_t> pick(0, train_count - 1);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const int batches = int((train_count + batch_size - 1) / batch_size);
    for (int b = 0; b < batches; ++b) {
      Matrix bx(batch_size, 2 * cfg.d_s);
      Matrix by(batch_size, cfg.d_a);
      for (int i = 0; i < batch_size; ++i) {
        const std::size_t idx = order[pick(rng)];
        bx.row(i) = inputs.row(idx);
        by.row(i) = targets.row(idx);
      }
      ad::Tape t;
      const ad::Var loss = t.mean_sq_error(ad::ffn_apply(t, t.input(bx), ffn), by);
      t.backward(loss);
      t.flush_param_grads();
      ps.adam_step(lr);
    }
  }

  InverseDynamicsReport report;
  report.transitions = int(total);
  double acc = 0.0;
  std::size_t val_count = 0;
  for (std::size_t i = train_count; i < total; ++i, ++val_count) {
    ad::Tape t;
    const ad::Var pred = ad::ffn_apply(t, t.input(inputs.row(order[i])), ffn);
    acc += (t.value(pred) - targets.row(order[i])).squaredNorm() / double(cfg.d_a);
  }
  report.validation_mse = val_count > 0 ? acc / double(val_count) : 0.0;
  return report;
}

Vector predict_action(ad::ParameterSet& ps, const InverseDynamicsConfig& cfg,
                      const Environment& env, const Vector& s, const Vector& s_next) {
  Matrix in(1, 2 * cfg.d_s);
  in.leftCols(cfg.d_s) = s.transpose();
  in.rightCols(cfg.d_s) = s_next.transpose();
  ad::Tape t;
  const ad::Var pred = ad::ffn_apply(t, t.input(in), ad::ffn_handles(ps, "id"));
  return env.clip_action(t.value(pred).row(0).transpose());
}

}  // namespace wavediff::worldkit
