#pragma once

// Conditional flow-matching velocity network and its training losses.
//
// The network is a small pre-norm transformer over time frames. Its per-frame
// input is the sum of a projection of the noisy state, a lyric-token
// embedding, a projection of the audio prompt, a projection of the melody
// representation, a sinusoidal position code and a time embedding. Each of the
// three conditions can be replaced by a learned null embedding (dropout for
// classifier-free guidance).

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "melodyflow/autodiff.hpp"
#include "melodyflow/corpus.hpp"
#include "melodyflow/melody.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

struct ModelConfig {
  int layers = 4;
  int hidden = 64;
  int heads = 4;
  int feature_dim = 16;
  int melody_dim = 32;
  int vocab_size = 32;
  int cka_layer_index = -1;  // -1 resolves to layers / 2
  int mlp_ratio = 4;
  int time_features = 16;
  int extractor_hidden = 64;
  int extractor_layers = 2;

  void validate() const;
  int resolved_cka_layer() const { return cka_layer_index < 0 ? layers / 2 : cka_layer_index; }
  ExtractorConfig extractor() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Which conditions are replaced by their null embedding.
struct DropFlags {
  bool lyrics = false;
  bool prompt = false;
  bool melody = false;

  static DropFlags all() { return {true, true, true}; }
  bool operator==(const DropFlags&) const = default;
};

/// Everything the velocity network is conditioned on, already laid out on the
/// clip's T frames.
struct ConditionBundle {
  std::vector<int> padded_lyrics;  // length T
  Matrix prompt;                   // T x D_f; rows past the prompt prefix are zero
  MelodyRepresentation melody;     // T x D_m student representation
  DropFlags drop;

  Eigen::Index frames() const { return static_cast<Eigen::Index>(padded_lyrics.size()); }
};

inline constexpr double kDefaultPromptFraction = 0.125;

/// First `fraction` of the reference clip's frames, zero elsewhere.
Matrix prompt_prefix(const FeatureSequence& reference, double fraction = kDefaultPromptFraction);

/// Builds the condition for `clip` with the melody extracted from
/// `melody_source` by the student extractor in `params`.
ConditionBundle make_condition(const GroundTruthClip& clip, const FeatureSequence& melody_source,
                               const ParameterSet& params, const ModelConfig& config,
                               double prompt_fraction = kDefaultPromptFraction);

/// Full parameter set: backbone, extractor, projection and null embeddings.
ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed);

struct VelocityVars {
  Var velocity;  // T x D_f
  Var z_l;       // T x hidden, output of block resolved_cka_layer()
};

/// Graph-building forward pass. `melody` is T x D_m (ignored when dropped).
VelocityVars velocity(Tape& tape, const ModelConfig& config, Var x_t, double t, const std::vector<int>& padded_lyrics,
                      Var prompt, Var melody, DropFlags drop);

struct VelocityOutput {
  Matrix velocity;
  Matrix z_l;
};

VelocityOutput velocity(const Matrix& x_t, double t, const ConditionBundle& cond, const ParameterSet& params,
                        const ModelConfig& config);

/// Rectified-flow regression: x_t = (1-t) noise + t x1, target x1 - noise.
Var flow_matching_loss(Var predicted_velocity, const Matrix& x1, const Matrix& noise);
double flow_matching_loss(const GroundTruthClip& clip, const ConditionBundle& cond, double t, const Matrix& noise,
                          const ParameterSet& params, const ModelConfig& config);
Matrix interpolate_state(const Matrix& x1, const Matrix& noise, double t);

/// Linear CKA on centred Gram matrices: ||K^T L||_F^2 / (||K^T K||_F ||L^T L||_F).
/// Throws DegenerateInputError when either centred Gram matrix vanishes.
double linear_cka(const Matrix& a, const Matrix& b);
Var linear_cka(Var a, Var b);

/// 1 - CKA(melody, z_l); frame counts must agree.
double cka_loss(const MelodyRepresentation& melody, const Matrix& z_l);
Var cka_loss(Var melody, Var z_l);

struct LambdaSchedule {
  double kd = 1.0;
  double cka_start = 0.3;
  double cka_end = 0.01;
  long decay_steps = 2500;
  bool cka_enabled = true;
};

/// Linear decay from cka_start at step 0 to cka_end at decay_steps, flat after.
double lambda_cka_schedule(long step, const LambdaSchedule& schedule = {});

struct LossWeights {
  double lambda_kd = 1.0;
  double lambda_cka = 0.3;
  long step = 0;

  static LossWeights at_step(long step, const LambdaSchedule& schedule = {});
};

double total_loss(double diffusion, double kd, double cka, const LossWeights& weights);

/// Sets each drop flag independently with probability `rate`.
ConditionBundle apply_condition_dropout(ConditionBundle cond, double rate, Rng& rng);
DropFlags draw_drop_flags(double rate, Rng& rng);

}  // namespace melodyflow
