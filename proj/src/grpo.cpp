#include "melodyflow/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "melodyflow/errors.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

using nlohmann::json;

namespace {

constexpr std::uint64_t kPromptStream = 0x70726f6dull;
constexpr std::uint64_t kGroupStream = 0x67727570ull;
constexpr std::uint64_t kGroupNoiseStream = 0x78306e73ull;

FeatureSequence as_features(const Matrix& frames, double frame_rate) {
  FeatureSequence f;
  f.frames = frames;
  f.frame_rate = frame_rate;
  return f;
}

}  // namespace

void GrpoConfig::validate() const {
  if (group_size < 2) throw ConfigError("group_size must be >= 2");
  if (!(kl_weight >= 0.0)) throw ConfigError("kl_weight must be >= 0");
  if (inner_epochs < 1) throw ConfigError("inner_epochs must be >= 1");
  if (ratio_clip && !(*ratio_clip > 0.0 && *ratio_clip < 1.0)) throw ConfigError("ratio_clip must lie in (0, 1)");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (prompts_per_step < 1) throw ConfigError("prompts_per_step must be >= 1");
  if (steps < 0) throw ConfigError("steps must be >= 0");
  sampler().validate();
}

SamplerConfig GrpoConfig::sampler() const {
  SamplerConfig s;
  s.steps = sampler_steps;
  s.cfg_scale = cfg_scale;
  s.noise_level_a = noise_level_a;
  s.sigma_time = sigma_time;
  return s;
}

json to_json(const GrpoConfig& c) {
  return json{{"group_size", c.group_size},
              {"kl_weight", c.kl_weight},
              {"inner_epochs", c.inner_epochs},
              {"ratio_clip", c.ratio_clip ? json(*c.ratio_clip) : json(nullptr)},
              {"noise_level_a", c.noise_level_a},
              {"sigma_time", to_string(c.sigma_time)},
              {"learning_rate", c.learning_rate},
              {"prompts_per_step", c.prompts_per_step},
              {"steps", c.steps},
              {"seed", c.seed},
              {"sampler_steps", c.sampler_steps},
              {"cfg_scale", c.cfg_scale},
              {"prompt_fraction", c.prompt_fraction},
              {"weights", c.weights}};
}

PromptContext PromptContext::from_clip(const GroundTruthClip& clip, double prompt_fraction) {
  PromptContext ctx;
  ctx.clip_id = clip.clip_id;
  ctx.padded_lyrics = pad_lyrics(clip.lyrics);
  ctx.prompt = prompt_prefix(clip.features, prompt_fraction);
  ctx.melody_source = clip.features.frames;
  return ctx;
}

ConditionBundle PromptContext::condition(const ParameterSet& params, const ModelConfig& model) const {
  ConditionBundle cond;
  cond.padded_lyrics = padded_lyrics;
  cond.prompt = prompt;
  cond.melody = resample_melody(student_extract(as_features(melody_source, 0.0), params, model.extractor()),
                                cond.frames());
  return cond;
}

ScoredGroup collect_group(const GroundTruthClip& clip, const GrpoConfig& config, const PolicySnapshot& old_policy,
                          const ModelConfig& model, const CorpusConfig& corpus, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < config.group_size; ++i) seeds.push_back(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
  return collect_group(clip, config, old_policy, model, corpus, derive_seed(seed, {kGroupNoiseStream}), seeds);
}

ScoredGroup collect_group(const GroundTruthClip& clip, const GrpoConfig& config, const PolicySnapshot& old_policy,
                          const ModelConfig& model, const CorpusConfig& corpus, std::uint64_t x0_seed,
                          const std::vector<std::uint64_t>& member_seeds) {
  if (member_seeds.size() < 2) throw ConfigError("a group needs at least 2 members");
  ScoredGroup group;
  group.clip = &clip;
  group.context = PromptContext::from_clip(clip, config.prompt_fraction);
  const ConditionBundle cond = group.context.condition(old_policy.params(), model);
  const SamplerConfig sampler = config.sampler();
  const VelocityFn field = guided_field(cond, sampler.cfg_scale, old_policy.params(), model);
  const Matrix x0 = initial_noise(cond.frames(), model.feature_dim, x0_seed);

  std::vector<double> totals;
  for (std::uint64_t seed : member_seeds) {
    GroupMember member;
    member.seed = seed;
    member.rollout = sample_sde_rollout(field, x0, sampler, seed);
    member.reward = score_features(as_features(member.rollout.sample(), corpus.frame_rate), clip, corpus,
                                   config.weights);
    totals.push_back(member.reward.total);
    group.members.push_back(std::move(member));
  }
  const std::vector<double> advantages = group_advantage(totals);
  for (std::size_t i = 0; i < advantages.size(); ++i) group.members[i].reward.advantage = advantages[i];
  return group;
}

Var transition_mean(Tape& tape, const PromptContext& context, const RolloutRecord& record, const ModelConfig& model) {
  const Var x = tape.constant(record.transition_input());
  const auto frames = static_cast<Eigen::Index>(context.padded_lyrics.size());
  const Var melody =
      resample_frames(student_extract(tape, tape.constant(context.melody_source), model.extractor()), frames);
  const Var v = cfg_velocity(tape, model, x, record.t(), context.padded_lyrics, tape.constant(context.prompt), melody,
                             DropFlags{}, record.cfg_scale);
  return x + ad::scale(v, record.dt());
}

Matrix transition_mean(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params,
                       const ModelConfig& model) {
  Tape tape(&params);
  return transition_mean(tape, context, record, model).value();
}

double transition_log_prob(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params,
                           const ModelConfig& model) {
  const double std = record.transition_std();
  if (!(std > 0.0)) throw ContractError("rollout has no stochastic transition");
  // Same graph as the objective so that identical parameters give identical values.
  Tape tape(&params);
  return gaussian_log_density(transition_mean(tape, context, record, model), record.transition_output(), std)
      .scalar();
}

double policy_ratio(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params_new,
                    const ParameterSet& params_old, const ModelConfig& model) {
  return std::exp(transition_log_prob(context, record, params_new, model) -
                  transition_log_prob(context, record, params_old, model));
}

double kl_penalty(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params_new,
                  const ParameterSet& params_ref, const ModelConfig& model) {
  const double std = record.transition_std();
  if (!(std > 0.0)) throw ContractError("rollout has no stochastic transition");
  const Matrix diff =
      transition_mean(context, record, params_new, model) - transition_mean(context, record, params_ref, model);
  return diff.squaredNorm() / (2.0 * std * std);
}

Var clipped_surrogate(Var logp_new, double logp_old, double advantage, std::optional<double> clip) {
  const Var ratio = ad::exp(ad::add_scalar(logp_new, -logp_old));
  if (clip) {
    const double r = ratio.scalar();
    const bool capped = (advantage >= 0.0 && r > 1.0 + *clip) || (advantage < 0.0 && r < 1.0 - *clip);
    if (capped) return logp_new.tape()->scalar(std::clamp(r, 1.0 - *clip, 1.0 + *clip) * advantage);
  }
  return ad::scale(ratio, advantage);
}

Var gaussian_kl(Var mean_new, const Matrix& mean_ref, double std) {
  const Var diff = mean_new - mean_new.tape()->constant(mean_ref);
  return ad::scale(ad::sum(ad::square(diff)), 1.0 / (2.0 * std * std));
}

GrpoMetrics grpo_objective(const std::vector<ScoredGroup>& groups, const ParameterSet& params,
                           const PolicySnapshot& old_policy, const PolicySnapshot& reference,
                           const ModelConfig& model, const GrpoConfig& config, Gradients* grads) {
  GrpoMetrics metrics;
  for (const auto& g : groups) metrics.members += g.members.size();
  if (metrics.members == 0) throw ContractError("grpo step needs at least one valid group");
  const double n = static_cast<double>(metrics.members);

  for (const auto& group : groups) {
    for (const auto& member : group.members) {
      const RolloutRecord& record = member.rollout;
      const double std = record.transition_std();
      if (!(std > 0.0)) throw ContractError("rollout has no stochastic transition");
      const double logp_old = transition_log_prob(group.context, record, old_policy.params(), model);
      const Matrix mean_ref = transition_mean(group.context, record, reference.params(), model);

      Tape tape(&params);
      const Var mean_new = transition_mean(tape, group.context, record, model);
      const Var logp_new = gaussian_log_density(mean_new, record.transition_output(), std);
      const Var kl = gaussian_kl(mean_new, mean_ref, std);
      const Var surrogate = clipped_surrogate(logp_new, logp_old, member.reward.advantage, config.ratio_clip);
      const Var term = ad::scale(surrogate - ad::scale(kl, config.kl_weight), 1.0 / n);
      if (grads != nullptr) tape.backward(term, *grads);

      metrics.objective += term.scalar();
      metrics.mean_ratio += std::exp(logp_new.scalar() - logp_old) / n;
      metrics.mean_kl += kl.scalar() / n;
      metrics.mean_reward += member.reward.total / n;
      metrics.mean_r_con += member.reward.r_con / n;
      metrics.mean_r_mel += member.reward.r_mel / n;
    }
  }
  return metrics;
}

GrpoMetrics grpo_step(const std::vector<ScoredGroup>& groups, ParameterSet& params, AdamState& optimizer,
                      const PolicySnapshot& old_policy, const PolicySnapshot& reference, const ModelConfig& model,
                      const GrpoConfig& config) {
  Gradients grads = params.zeros_like();
  GrpoMetrics metrics = grpo_objective(groups, params, old_policy, reference, model, config, &grads);
  if (!std::isfinite(metrics.objective) || !all_finite(grads)) {
    metrics.skipped = true;
    return metrics;
  }
  // Ascent on the objective is descent on its negation.
  for (auto& g : grads) g = -g;
  metrics.grad_norm = adamw_step(params, std::move(grads), optimizer, config.adam, config.learning_rate);
  return metrics;
}

json CurvePoint::to_json() const {
  return json{{"step", step},
              {"mean_reward", mean_reward},
              {"mean_r_con", mean_r_con},
              {"mean_r_mel", mean_r_mel},
              {"mean_kl", mean_kl}};
}

void post_train(Checkpoint& checkpoint, const std::vector<GroundTruthClip>& clips, const CorpusConfig& corpus,
                const GrpoConfig& config, const CurveCallback& on_curve, const DiagnosticCallback& on_diagnostic) {
  config.validate();
  if (!(config.noise_level_a > 0.0)) throw ConfigError("post-training needs noise_level_a > 0");
  if (config.sampler_steps < 2) throw ConfigError("post-training needs at least 2 sampler steps");
  if (clips.empty()) throw ConfigError("post-training needs at least one prompt clip");
  if (checkpoint.model.feature_dim != corpus.feature_dim || checkpoint.model.vocab_size != corpus.vocab_size) {
    throw VersionError("model config does not match the corpus dimensions");
  }
  const ModelConfig& model = checkpoint.model;
  const PolicySnapshot reference(checkpoint.params, SnapshotTag::kReference);
  const long start = checkpoint.meta.value("grpo_step", 0L);
  AdamState optimizer;

  for (long step = start + 1; step <= start + config.steps; ++step) {
    const PolicySnapshot old_policy(checkpoint.params, SnapshotTag::kOld);

    Rng pick = make_rng(config.seed, {kPromptStream, static_cast<std::uint64_t>(step)});
    std::vector<ScoredGroup> groups;
    for (int p = 0; p < config.prompts_per_step; ++p) {
      const std::size_t index = std::uniform_int_distribution<std::size_t>(0, clips.size() - 1)(pick);
      const std::uint64_t seed =
          derive_seed(config.seed, {kGroupStream, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(p)});
      try {
        groups.push_back(collect_group(clips[index], config, old_policy, model, corpus, seed));
      } catch (const Error& e) {
        if (on_diagnostic) {
          on_diagnostic("step " + std::to_string(step) + ": discarded group for " + clips[index].clip_id + ": " +
                        e.what());
        }
      }
    }
    if (groups.empty()) {
      if (on_diagnostic) on_diagnostic("step " + std::to_string(step) + ": no valid group");
      continue;
    }

    GrpoMetrics metrics;
    for (int epoch = 0; epoch < config.inner_epochs; ++epoch) {
      metrics = grpo_step(groups, checkpoint.params, optimizer, old_policy, reference, model, config);
      if (metrics.skipped && on_diagnostic) {
        on_diagnostic("step " + std::to_string(step) + ": non-finite objective or gradient, update skipped");
      }
    }
    checkpoint.meta["grpo_step"] = step;
    if (on_curve) on_curve({step, metrics.mean_reward, metrics.mean_r_con, metrics.mean_r_mel, metrics.mean_kl});
  }
  checkpoint.meta["grpo_config"] = to_json(config);
}

}  // namespace melodyflow
