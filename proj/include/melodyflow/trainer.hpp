#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melodyflow/autodiff.hpp"
#include "melodyflow/backbone.hpp"
#include "melodyflow/corpus.hpp"

namespace melodyflow {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  Gradients first_moment;
  Gradients second_moment;
  long updates = 0;

  bool empty() const { return first_moment.empty(); }
};

/// Decoupled weight decay Adam. Returns the pre-clipping gradient norm.
double adamw_step(ParameterSet& params, Gradients grads, AdamState& state, const AdamConfig& config, double lr);

struct TrainConfig {
  int batch_size = 8;
  long total_steps = 5000;
  long warmup_steps = 200;
  double peak_lr = 1e-3;
  std::uint64_t seed = 0;
  double dropout = 0.2;
  LambdaSchedule lambdas;
  AdamConfig adam;
  double prompt_fraction = kDefaultPromptFraction;
  double teacher_epsilon = kTeacherEpsilon;
  double teacher_rate_ratio = kTeacherRateRatio;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Linear warm-up 0 -> peak over warmup_steps, then linear decay to 0 at total_steps.
double lr_schedule(long step, const TrainConfig& config);

struct LossBreakdown {
  long step = 0;
  double diffusion = 0.0;
  double kd = 0.0;
  double cka = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double lambda_kd = 0.0;
  double lambda_cka = 0.0;
  double grad_norm = 0.0;
  bool skipped = false;

  nlohmann::json to_log_json() const;
};

struct ClipLosses {
  double diffusion = 0.0;
  double kd = 0.0;
  double cka = 0.0;
  bool cka_defined = true;
};

/// Builds the joint graph for one clip, backpropagates `weights`-combined loss
/// into grads and returns the parts. Randomness (t, noise, dropout) comes from
/// `rng`.
ClipLosses clip_loss_and_gradients(const GroundTruthClip& clip, const ParameterSet& params, const ModelConfig& model,
                                   const CorpusConfig& corpus, const TrainConfig& config, const LossWeights& weights,
                                   Rng& rng, Gradients* grads);

/// One optimizer step on a batch. `step` is 1-based; lr and lambda_cka are
/// evaluated at it. Non-finite losses or gradients skip the update.
LossBreakdown train_step(const std::vector<const GroundTruthClip*>& batch, ParameterSet& params, AdamState& optimizer,
                         long step, const TrainConfig& config, const ModelConfig& model, const CorpusConfig& corpus);

/// Deterministic batch indices for a step.
std::vector<std::size_t> batch_indices(std::size_t corpus_size, long step, const TrainConfig& config);

struct Checkpoint {
  ModelConfig model;
  ParameterSet params;
  long step = 0;
  AdamState optimizer;
  nlohmann::json meta = nlohmann::json::object();
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Single binary archive: "MFCK", u32 version, u64 header length, JSON header
/// (config echo, step, named tensor entries), little-endian f64 payload and a
/// trailing FNV-1a 64 checksum of everything before it.
std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// VersionError when `expected` is given and differs from the stored config;
/// IntegrityError on checksum or structure failures.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

using StepCallback = std::function<void(const LossBreakdown&, const ParameterSet&)>;

/// Runs steps checkpoint.step + 1 .. min(stop_at, total_steps), updating the
/// checkpoint in place.
void pretrain(Checkpoint& checkpoint, const std::vector<GroundTruthClip>& clips, const CorpusConfig& corpus,
              const TrainConfig& config, long stop_at = -1, const StepCallback& on_step = {});

Checkpoint fresh_checkpoint(const ModelConfig& model, std::uint64_t seed);

/// Flat "key = value" text, '#' comments. Unknown keys raise ConfigError.
std::map<std::string, std::string> parse_key_values(const std::string& text);
void apply_key_values(const std::map<std::string, std::string>& values, TrainConfig& train, ModelConfig& model);

}  // namespace melodyflow
