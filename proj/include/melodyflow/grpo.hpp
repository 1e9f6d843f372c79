#pragma once

// Group-relative policy optimisation on the single stochastic transition of
// each SDE rollout. The policy is the whole conditional sampler: backbone,
// melody extractor and guidance, evaluated on a fixed prompt context.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melodyflow/autodiff.hpp"
#include "melodyflow/backbone.hpp"
#include "melodyflow/corpus.hpp"
#include "melodyflow/reward.hpp"
#include "melodyflow/sampler.hpp"
#include "melodyflow/trainer.hpp"

namespace melodyflow {

struct GrpoConfig {
  int group_size = 8;
  double kl_weight = 0.04;
  int inner_epochs = 1;
  std::optional<double> ratio_clip = 0.2;  // nullopt: plain ratio
  double noise_level_a = 0.7;
  SigmaTime sigma_time = SigmaTime::kGrid;
  double learning_rate = 1e-5;
  int prompts_per_step = 4;
  long steps = 300;
  std::uint64_t seed = 0;
  int sampler_steps = 32;
  double cfg_scale = 2.0;
  double prompt_fraction = kDefaultPromptFraction;
  AdamConfig adam;
  RewardMap weights = kDefaultRewardWeights;

  void validate() const;
  SamplerConfig sampler() const;
};

nlohmann::json to_json(const GrpoConfig& config);

enum class SnapshotTag { kOld, kReference };

/// Frozen parameter copy. Copies share the same immutable storage.
class PolicySnapshot {
 public:
  PolicySnapshot(const ParameterSet& params, SnapshotTag tag)
      : params_(std::make_shared<const ParameterSet>(params)), tag_(tag) {}

  const ParameterSet& params() const { return *params_; }
  SnapshotTag tag() const { return tag_; }

 private:
  std::shared_ptr<const ParameterSet> params_;
  SnapshotTag tag_;
};

/// Parameter-independent part of a prompt's condition. The melody is
/// re-extracted from `melody_source` under whichever parameters are evaluated.
struct PromptContext {
  std::string clip_id;
  std::vector<int> padded_lyrics;
  Matrix prompt;
  Matrix melody_source;

  static PromptContext from_clip(const GroundTruthClip& clip, double prompt_fraction = kDefaultPromptFraction);
  ConditionBundle condition(const ParameterSet& params, const ModelConfig& model) const;
};

struct GroupMember {
  RolloutRecord rollout;
  RewardBundle reward;
  std::uint64_t seed = 0;
};

struct ScoredGroup {
  const GroundTruthClip* clip = nullptr;
  PromptContext context;
  std::vector<GroupMember> members;
};

/// G rollouts of the snapshot policy, scored against the clip, advantages
/// filled. Members start from one shared x0 and differ in the stochastic step
/// and injected noise, drawn from derive_seed(seed, {i}).
ScoredGroup collect_group(const GroundTruthClip& clip, const GrpoConfig& config, const PolicySnapshot& old_policy,
                          const ModelConfig& model, const CorpusConfig& corpus, std::uint64_t seed);
/// Same with an explicit x0 seed and per-member seeds (size >= 2).
ScoredGroup collect_group(const GroundTruthClip& clip, const GrpoConfig& config, const PolicySnapshot& old_policy,
                          const ModelConfig& model, const CorpusConfig& corpus, std::uint64_t x0_seed,
                          const std::vector<std::uint64_t>& member_seeds);

/// Mean of the Gaussian transition at the record's stochastic step.
Var transition_mean(Tape& tape, const PromptContext& context, const RolloutRecord& record, const ModelConfig& model);
Matrix transition_mean(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params,
                       const ModelConfig& model);

/// Log-density of the recorded transition output; ContractError when the
/// record carries no noise (zero transition std).
double transition_log_prob(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params,
                           const ModelConfig& model);

double policy_ratio(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params_new,
                    const ParameterSet& params_old, const ModelConfig& model);

/// ||mu_new - mu_ref||^2 / (2 s^2) for the shared transition std s.
double kl_penalty(const PromptContext& context, const RolloutRecord& record, const ParameterSet& params_new,
                  const ParameterSet& params_ref, const ModelConfig& model);

/// min(r A, clip(r, 1-eps, 1+eps) A) with r = exp(logp_new - logp_old).
Var clipped_surrogate(Var logp_new, double logp_old, double advantage, std::optional<double> clip);
Var gaussian_kl(Var mean_new, const Matrix& mean_ref, double std);

struct GrpoMetrics {
  double objective = 0.0;
  double mean_reward = 0.0;
  double mean_r_con = 0.0;
  double mean_r_mel = 0.0;
  double mean_ratio = 0.0;
  double mean_kl = 0.0;
  double grad_norm = 0.0;
  std::size_t members = 0;
  bool skipped = false;
};

/// Group-mean of (surrogate - beta KL) and its gradient with respect to
/// `params` accumulated into grads (gradient of the objective, not the loss).
GrpoMetrics grpo_objective(const std::vector<ScoredGroup>& groups, const ParameterSet& params,
                           const PolicySnapshot& old_policy, const PolicySnapshot& reference,
                           const ModelConfig& model, const GrpoConfig& config, Gradients* grads);

/// One ascent step on the objective. Non-finite objective or gradient skips it.
GrpoMetrics grpo_step(const std::vector<ScoredGroup>& groups, ParameterSet& params, AdamState& optimizer,
                      const PolicySnapshot& old_policy, const PolicySnapshot& reference, const ModelConfig& model,
                      const GrpoConfig& config);

struct CurvePoint {
  long step = 0;
  double mean_reward = 0.0;
  double mean_r_con = 0.0;
  double mean_r_mel = 0.0;
  double mean_kl = 0.0;

  nlohmann::json to_json() const;
};

using CurveCallback = std::function<void(const CurvePoint&)>;
using DiagnosticCallback = std::function<void(const std::string&)>;

/// Post-trains `checkpoint` in place on prompts drawn from `clips`. The
/// reference snapshot is the checkpoint as passed in.
void post_train(Checkpoint& checkpoint, const std::vector<GroundTruthClip>& clips, const CorpusConfig& corpus,
                const GrpoConfig& config, const CurveCallback& on_curve = {},
                const DiagnosticCallback& on_diagnostic = {});

}  // namespace melodyflow
