#pragma once

#include <map>
#include <string>
#include <vector>

#include "melodyflow/corpus.hpp"

namespace melodyflow {

struct WerResult {
  double wer = 0.0;
  int substitutions = 0;
  int deletions = 0;
  int insertions = 0;
};

/// Minimum edit distance alignment with unit costs; (S + D + I) / |reference|.
/// Throws UndefinedWerError for an empty reference.
WerResult wer(const std::vector<int>& reference, const std::vector<int>& hypothesis);

/// 1 - WER, unclamped.
double content_reward(double wer_value);

/// Pearson correlation over frames voiced in both contours. The shorter
/// contour is linearly resampled to the longer one first. Throws
/// UndefinedCorrelationError with fewer than two jointly voiced frames or zero
/// variance on either side.
double melody_reward(const std::vector<double>& generated, const std::vector<double>& target);
double melody_reward(const std::vector<int>& generated, const std::vector<int>& target);

/// melody_reward with the undefined case mapped to 0.
double melody_reward_or_zero(const std::vector<int>& generated, const std::vector<int>& target);

using RewardMap = std::map<std::string, double>;

inline const RewardMap kDefaultRewardWeights = {{"con", 1.0}, {"mel", 1.0}};

/// sum_k w_k r_k; ConfigError when a part has no weight.
double aggregate_reward(const RewardMap& parts, const RewardMap& weights);

inline constexpr double kAdvantageEpsilon = 1e-8;

/// (R_i - mean) / (population std + 1e-8); ConfigError for fewer than 2 entries.
std::vector<double> group_advantage(const std::vector<double>& rewards);

struct RewardBundle {
  double r_con = 0.0;
  double r_mel = 0.0;
  RewardMap weights = kDefaultRewardWeights;
  double total = 0.0;
  double advantage = 0.0;
  WerResult wer;
};

/// Scores generated features against the clip's lyrics and pitch contour with
/// the exact oracle decoders.
RewardBundle score_features(const FeatureSequence& generated, const GroundTruthClip& reference,
                            const CorpusConfig& config, const RewardMap& weights = kDefaultRewardWeights);

/// Deterministic speaker-similarity stand-in: cosine between mean feature
/// vectors. Not comparable to embedding-based similarity.
double similarity_stub(const FeatureSequence& generated, const FeatureSequence& reference);

}  // namespace melodyflow
