#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melodyflow/backbone.hpp"
#include "melodyflow/corpus.hpp"
#include "melodyflow/reward.hpp"
#include "melodyflow/sampler.hpp"

namespace melodyflow {

struct ClipEvaluation {
  std::string clip_id;
  WerResult wer;
  double r_con = 0.0;
  double r_mel = 0.0;
  double fpc = 0.0;  // same Pearson quantity as r_mel, reported under its metric name
  double sim = 0.0;  // mean-feature cosine stand-in, not an embedding similarity
  double total = 0.0;
};

struct EvaluationReport {
  std::vector<ClipEvaluation> clips;

  /// Arithmetic means over clips; empty when there are no clips.
  std::map<std::string, double> aggregates() const;
  nlohmann::json to_json() const;
};

/// Per-clip sample seed: derive_seed(seed, {hash_string(clip_id)}).
std::uint64_t clip_sample_seed(std::uint64_t seed, const std::string& clip_id);

/// Generates every clip with the deterministic sampler (melody prompt = the
/// clip itself) and scores it with the oracle decoders.
EvaluationReport evaluate(const std::vector<GroundTruthClip>& clips, const ParameterSet& params,
                          const ModelConfig& model, const CorpusConfig& corpus, const SamplerConfig& sampler,
                          std::uint64_t seed, const RewardMap& weights = kDefaultRewardWeights);

ClipEvaluation score_clip(const FeatureSequence& generated, const GroundTruthClip& clip, const CorpusConfig& corpus,
                          const RewardMap& weights = kDefaultRewardWeights);

/// Sine rendering of a note contour as 16-bit mono PCM WAV bytes. Note n maps
/// to MIDI 47 + n; note 0 is silence.
std::string render_debug_wav(const std::vector<int>& notes, double frame_rate, int sample_rate = 24000);

}  // namespace melodyflow
