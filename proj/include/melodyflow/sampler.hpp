#pragma once

// Euler integration of the learned velocity field from noise (t = 0) to data
// (t = 1) on a uniform grid, with classifier-free guidance, plus the
// single-step stochastic variant used to collect policy-gradient rollouts.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "melodyflow/autodiff.hpp"
#include "melodyflow/backbone.hpp"

namespace melodyflow {

/// Time fed to the noise schedule at grid step k. kGrid uses k/steps directly;
/// kNoiseRemaining uses 1 - k/steps, putting the largest noise next to the
/// noise end as in samplers that run time from noise at 1 to data at 0.
enum class SigmaTime { kNoiseRemaining, kGrid };

const char* to_string(SigmaTime s);
SigmaTime sigma_time_from_string(const std::string& s);

struct SamplerConfig {
  int steps = 32;
  double cfg_scale = 2.0;
  double noise_level_a = 0.7;
  SigmaTime sigma_time = SigmaTime::kGrid;
  std::optional<int> stochastic_step_index;

  void validate() const;
};

/// v(x, t) on a fixed condition.
using VelocityFn = std::function<Matrix(const Matrix& x, double t)>;

/// v_uncond + s (v_cond - v_uncond); v_uncond drops every condition.
/// s = 1 and s = 0 return the single required pass unchanged.
Matrix cfg_velocity(const Matrix& x_t, double t, const ConditionBundle& cond, double cfg_scale,
                    const ParameterSet& params, const ModelConfig& config);

/// Graph version of cfg_velocity used for policy log-densities.
Var cfg_velocity(Tape& tape, const ModelConfig& config, Var x_t, double t, const std::vector<int>& padded_lyrics,
                 Var prompt, Var melody, DropFlags drop, double cfg_scale);

VelocityFn guided_field(const ConditionBundle& cond, double cfg_scale, const ParameterSet& params,
                        const ModelConfig& config);

inline constexpr double kSigmaTimeClamp = 1.0 - 1e-4;

/// a * sqrt(t / (1 - t)), with t clamped to 1 - 1e-4; DomainError for t < 0.
double sigma_schedule(double t, double a);

/// Grid time of step k: k / steps.
double grid_time(int step, int steps);

/// Plain Euler from a given initial state.
Matrix euler_integrate(const Matrix& x0, int steps, const VelocityFn& field);

Matrix initial_noise(Eigen::Index frames, Eigen::Index dim, std::uint64_t seed);

FeatureSequence sample_ode(const ConditionBundle& cond, const SamplerConfig& config, const ParameterSet& params,
                           const ModelConfig& model, std::uint64_t seed, double frame_rate = 50.0);

struct RolloutRecord {
  Matrix x0;
  std::vector<Matrix> states;  // states[k] = x at grid step k; states.back() is the sample
  int stochastic_step = 0;
  Matrix noise;                // standard normal draw injected at stochastic_step
  int steps = 0;
  double cfg_scale = 0.0;
  double noise_level_a = 0.0;
  SigmaTime sigma_time = SigmaTime::kGrid;
  double log_prob = 0.0;       // transition log-density under the generating parameters

  const Matrix& sample() const { return states.back(); }
  double dt() const { return 1.0 / static_cast<double>(steps); }
  double t() const { return grid_time(stochastic_step, steps); }
  double transition_std() const;
  const Matrix& transition_input() const { return states[static_cast<std::size_t>(stochastic_step)]; }
  const Matrix& transition_output() const { return states[static_cast<std::size_t>(stochastic_step) + 1]; }
};

/// Log-density of `x_next` under N(mean, std^2 I).
double gaussian_log_density(const Matrix& x_next, const Matrix& mean, double std);
Var gaussian_log_density(Var mean, const Matrix& x_next, double std);

/// Deterministic Euler everywhere except at the stochastic step, where
/// sigma_t * sqrt(dt) * eps is added. When config leaves the step unset it is
/// drawn uniformly from [1, steps) (or 0 for a single step).
RolloutRecord sample_sde_rollout(const VelocityFn& field, const Matrix& x0, const SamplerConfig& config,
                                 std::uint64_t seed);
RolloutRecord sample_sde_rollout(const ConditionBundle& cond, const SamplerConfig& config, const ParameterSet& params,
                                 const ModelConfig& model, std::uint64_t seed);

/// Re-executes the record's trajectory from x0 with its stored noise.
Matrix replay(const RolloutRecord& record, const VelocityFn& field);

}  // namespace melodyflow
