// Synthetic control environments, offline dataset generation, discounted
// returns and their normalization, and the learned inverse-dynamics model.

#pragma once

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include "wavediff/tape.hpp"

namespace wavediff::worldkit {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class EnvKind { PointMass2D, DampedOscillator, Pendulum };

struct StepResult {
  Vector next_state;
  double reward = 0.0;
  bool done = false;
};

// Deterministic semi-implicit Euler dynamics at dt = 0.05, bounded actions.
struct Environment {
  EnvKind kind = EnvKind::PointMass2D;
  int d_s = 0;
  int d_a = 0;
  double gamma = 0.99;
  double dt = 0.05;
  Vector action_low;
  Vector action_high;

  static Environment make(EnvKind kind);
  static Environment by_name(const std::string& name);
  std::string name() const;

  Vector sample_initial_state(std::mt19937_64& rng) const;
  StepResult step(const Vector& state, const Vector& action) const;
  Vector clip_action(const Vector& action) const;
};

struct Episode {
  Matrix states;   // (T+1) x d_s
  Matrix actions;  // T x d_a
  Vector rewards;  // T
  std::string behavior_tag;
};

struct Dataset {
  Environment env;
  std::vector<Episode> episodes;
  std::string policy;
  int horizon = 0;
  uint64_t seed = 0;
};

enum class PolicyKind { Random, ScriptedNoisy, ScriptedExpert };

struct PolicySpec {
  PolicyKind kind = PolicyKind::ScriptedExpert;
  double sigma = 0.5;  // additive action noise for ScriptedNoisy

  static PolicySpec parse(const std::string& name, double sigma);
  std::string tag() const;
};

// Scripted policies are proportional-derivative goal controllers; fully
// seed-deterministic.
Dataset generate_dataset(const Environment& env, const PolicySpec& policy, int episodes,
                         int horizon, uint64_t seed);

double discounted_return(const Episode& episode, double gamma);

struct ReturnNormalizer {
  double min_return = 0.0;
  double max_return = 0.0;

  // Degenerate max == min maps every episode to 1.0.
  double normalize(double ret) const;
};

ReturnNormalizer normalize_returns(const Dataset& dataset, std::vector<double>* per_episode);

// Inverse dynamics f_phi: concat(s_t, s_{t+1}) -> action, one hidden
// rectified-linear layer of width 512.
struct InverseDynamicsConfig {
  int d_s = 0;
  int d_a = 0;
  int hidden = 512;
};

void add_inverse_dynamics_params(ad::ParameterSet& ps, const InverseDynamicsConfig& cfg,
                                 std::mt19937_64& rng);

struct InverseDynamicsReport {
  double validation_mse = 0.0;
  int transitions = 0;
};

// MSE regression on a 90/10 split of the dataset's transitions.
InverseDynamicsReport train_inverse_dynamics(const Dataset& dataset, ad::ParameterSet& ps,
                                             const InverseDynamicsConfig& cfg, int epochs,
                                             double lr, int batch_size, uint64_t seed);

// Deterministic evaluation, clipped to the environment's action bounds.
Vector predict_action(ad::ParameterSet& ps, const InverseDynamicsConfig& cfg,
                      const Environment& env, const Vector& s, const Vector& s_next);

}  // namespace wavediff::worldkit
