#include "melodyflow/sampler.hpp"

#include <cmath>
#include <numbers>

#include "melodyflow/errors.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

namespace {

constexpr std::uint64_t kInitialNoiseStream = 0x78300000ull;
constexpr std::uint64_t kStepDrawStream = 0x73746570ull;
constexpr std::uint64_t kInjectedNoiseStream = 0x65707300ull;

}  // namespace

void SamplerConfig::validate() const {
  if (steps < 1) throw ConfigError("sampler steps must be >= 1");
  if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
  if (!(noise_level_a >= 0.0)) throw ConfigError("noise_level_a must be >= 0");
  if (stochastic_step_index && (*stochastic_step_index < 0 || *stochastic_step_index >= steps)) {
    throw ConfigError("stochastic_step_index must lie in [0, steps)");
  }
}

Var cfg_velocity(Tape& tape, const ModelConfig& config, Var x_t, double t, const std::vector<int>& padded_lyrics,
                 Var prompt, Var melody, DropFlags drop, double cfg_scale) {
  if (!(cfg_scale >= 0.0)) throw ConfigError("cfg_scale must be >= 0");
  if (cfg_scale == 1.0) return velocity(tape, config, x_t, t, padded_lyrics, prompt, melody, drop).velocity;
  Var uncond = velocity(tape, config, x_t, t, padded_lyrics, prompt, melody, DropFlags::all()).velocity;
  if (cfg_scale == 0.0) return uncond;
  Var cond = velocity(tape, config, x_t, t, padded_lyrics, prompt, melody, drop).velocity;
  return uncond + ad::scale(cond - uncond, cfg_scale);
}

Matrix cfg_velocity(const Matrix& x_t, double t, const ConditionBundle& cond, double cfg_scale,
                    const ParameterSet& params, const ModelConfig& config) {
  Tape tape(&params);
  Var melody = cond.drop.melody ? tape.constant(Matrix()) : tape.constant(cond.melody.values);
  return cfg_velocity(tape, config, tape.constant(x_t), t, cond.padded_lyrics, tape.constant(cond.prompt), melody,
                      cond.drop, cfg_scale)
      .value();
}

VelocityFn guided_field(const ConditionBundle& cond, double cfg_scale, const ParameterSet& params,
                        const ModelConfig& config) {
  return [&cond, cfg_scale, &params, &config](const Matrix& x, double t) {
    return cfg_velocity(x, t, cond, cfg_scale, params, config);
  };
}

double sigma_schedule(double t, double a) {
  if (t < 0.0) throw DomainError("sigma schedule undefined for t < 0");
  const double clamped = std::min(t, kSigmaTimeClamp);
  return a * std::sqrt(clamped / (1.0 - clamped));
}

double grid_time(int step, int steps) { return static_cast<double>(step) / static_cast<double>(steps); }

Matrix euler_integrate(const Matrix& x0, int steps, const VelocityFn& field) {
  if (steps < 1) throw ConfigError("Euler integration needs at least one step");
  const double dt = 1.0 / static_cast<double>(steps);
  Matrix x = x0;
  for (int k = 0; k < steps; ++k) {
    const Matrix v = field(x, grid_time(k, steps));
    x = x + v * dt;
  }
  return x;
}

Matrix initial_noise(Eigen::Index frames, Eigen::Index dim, std::uint64_t seed) {
  Rng rng = make_rng(seed, {kInitialNoiseStream});
  return standard_normal(frames, dim, rng);
}

FeatureSequence sample_ode(const ConditionBundle& cond, const SamplerConfig& config, const ParameterSet& params,
                           const ModelConfig& model, std::uint64_t seed, double frame_rate) {
  config.validate();
  if (config.stochastic_step_index) throw ConfigError("sample_ode requires a fully deterministic sampler config");
  FeatureSequence out;
  out.frame_rate = frame_rate;
  out.frames = euler_integrate(initial_noise(cond.frames(), model.feature_dim, seed), config.steps,
                               guided_field(cond, config.cfg_scale, params, model));
  return out;
}

double RolloutRecord::transition_std() const {
  const double schedule_time = sigma_time == SigmaTime::kGrid ? t() : 1.0 - t();
  return sigma_schedule(schedule_time, noise_level_a) * std::sqrt(dt());
}

const char* to_string(SigmaTime s) { return s == SigmaTime::kGrid ? "grid" : "noise_remaining"; }

SigmaTime sigma_time_from_string(const std::string& s) {
  if (s == "grid") return SigmaTime::kGrid;
  if (s == "noise_remaining") return SigmaTime::kNoiseRemaining;
  throw ConfigError("sigma_time must be grid or noise_remaining, got " + s);
}

double gaussian_log_density(const Matrix& x_next, const Matrix& mean, double std) {
  if (!(std > 0.0)) throw ContractError("transition has zero variance; log-density undefined");
  const double n = static_cast<double>(x_next.size());
  return -(x_next - mean).squaredNorm() / (2.0 * std * std) - n * std::log(std) -
         0.5 * n * std::log(2.0 * std::numbers::pi);
}

Var gaussian_log_density(Var mean, const Matrix& x_next, double std) {
  if (!(std > 0.0)) throw ContractError("transition has zero variance; log-density undefined");
  const double n = static_cast<double>(x_next.size());
  Var diff = mean.tape()->constant(x_next) - mean;
  const double constant = -n * std::log(std) - 0.5 * n * std::log(2.0 * std::numbers::pi);
  return ad::add_scalar(ad::scale(ad::sum(ad::square(diff)), -1.0 / (2.0 * std * std)), constant);
}

RolloutRecord sample_sde_rollout(const VelocityFn& field, const Matrix& x0, const SamplerConfig& config,
                                 std::uint64_t seed) {
  config.validate();
  RolloutRecord record;
  record.x0 = x0;
  record.steps = config.steps;
  record.cfg_scale = config.cfg_scale;
  record.noise_level_a = config.noise_level_a;
  record.sigma_time = config.sigma_time;
  if (config.stochastic_step_index) {
    record.stochastic_step = *config.stochastic_step_index;
  } else if (config.steps > 1) {
    Rng pick = make_rng(seed, {kStepDrawStream});
    record.stochastic_step = std::uniform_int_distribution<int>(1, config.steps - 1)(pick);
  }
  Rng eps_rng = make_rng(seed, {kInjectedNoiseStream});
  record.noise = standard_normal(x0.rows(), x0.cols(), eps_rng);

  const double dt = record.dt();
  record.states.reserve(static_cast<std::size_t>(config.steps) + 1);
  record.states.push_back(x0);
  for (int k = 0; k < config.steps; ++k) {
    const Matrix& x = record.states.back();
    Matrix next = x + field(x, grid_time(k, config.steps)) * dt;
    if (k == record.stochastic_step) {
      const double std = record.transition_std();
      if (std > 0.0) {
        const Matrix mean = next;
        next = mean + record.noise * std;
        record.log_prob = gaussian_log_density(next, mean, std);
      }
    }
    record.states.push_back(std::move(next));
  }
  return record;
}

RolloutRecord sample_sde_rollout(const ConditionBundle& cond, const SamplerConfig& config, const ParameterSet& params,
                                 const ModelConfig& model, std::uint64_t seed) {
  return sample_sde_rollout(guided_field(cond, config.cfg_scale, params, model),
                            initial_noise(cond.frames(), model.feature_dim, seed), config, seed);
}

Matrix replay(const RolloutRecord& record, const VelocityFn& field) {
  const double dt = record.dt();
  Matrix x = record.x0;
  for (int k = 0; k < record.steps; ++k) {
    Matrix next = x + field(x, grid_time(k, record.steps)) * dt;
    if (k == record.stochastic_step) {
      const double std = record.transition_std();
      if (std > 0.0) next = next + record.noise * std;
    }
    x = std::move(next);
  }
  return x;
}

}  // namespace melodyflow
