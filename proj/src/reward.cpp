#include "melodyflow/reward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "melodyflow/errors.hpp"

namespace melodyflow {

WerResult wer(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  if (reference.empty()) throw UndefinedWerError("WER is undefined for an empty reference");
  const std::size_t n = reference.size();
  const std::size_t m = hypothesis.size();
  std::vector<std::vector<int>> cost(n + 1, std::vector<int>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) cost[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= m; ++j) cost[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const int diag = cost[i - 1][j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cost[i][j] = std::min({diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1});
    }
  }

  // Backtrace preferring match/substitution, then deletion, then insertion.
  WerResult result;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0) {
      const bool same = reference[i - 1] == hypothesis[j - 1];
      if (cost[i][j] == cost[i - 1][j - 1] + (same ? 0 : 1)) {
        if (!same) ++result.substitutions;
        --i;
        --j;
        continue;
      }
    }
    if (i > 0 && cost[i][j] == cost[i - 1][j] + 1) {
      ++result.deletions;
      --i;
    } else {
      ++result.insertions;
      --j;
    }
  }
  result.wer = static_cast<double>(result.substitutions + result.deletions + result.insertions) /
               static_cast<double>(n);
  return result;
}

double content_reward(double wer_value) { return 1.0 - wer_value; }

namespace {

struct Contour {
  std::vector<double> values;
  std::vector<bool> voiced;
};

Contour to_contour(const std::vector<double>& raw) {
  Contour c;
  c.values = raw;
  c.voiced.reserve(raw.size());
  for (double v : raw) c.voiced.push_back(v != 0.0);
  return c;
}

Contour resample_contour(const Contour& in, std::size_t target) {
  if (in.values.size() == target) return in;
  Contour out;
  out.values.assign(target, 0.0);
  out.voiced.assign(target, false);
  const std::size_t source = in.values.size();
  for (std::size_t j = 0; j < target; ++j) {
    const double pos = target == 1 ? 0.0
                                   : static_cast<double>(j) * static_cast<double>(source - 1) /
                                         static_cast<double>(target - 1);
    const auto lo = std::min(static_cast<std::size_t>(std::floor(pos)), source - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || lo + 1 >= source) {
      out.values[j] = in.values[lo];
      out.voiced[j] = in.voiced[lo];
    } else if (in.voiced[lo] && in.voiced[lo + 1]) {
      out.values[j] = (1.0 - frac) * in.values[lo] + frac * in.values[lo + 1];
      out.voiced[j] = true;
    }
  }
  return out;
}

std::vector<double> widen(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace

double melody_reward(const std::vector<double>& generated, const std::vector<double>& target) {
  if (generated.empty() || target.empty()) throw UndefinedCorrelationError("empty pitch contour");
  const std::size_t n = std::max(generated.size(), target.size());
  const Contour g = resample_contour(to_contour(generated), n);
  const Contour f = resample_contour(to_contour(target), n);

  std::vector<double> gv, fv;
  for (std::size_t i = 0; i < n; ++i) {
    if (g.voiced[i] && f.voiced[i]) {
      gv.push_back(g.values[i]);
      fv.push_back(f.values[i]);
    }
  }
  if (gv.size() < 2) throw UndefinedCorrelationError("fewer than two jointly voiced frames");
  const double count = static_cast<double>(gv.size());
  const double gm = std::accumulate(gv.begin(), gv.end(), 0.0) / count;
  const double fm = std::accumulate(fv.begin(), fv.end(), 0.0) / count;
  double cov = 0.0, gvar = 0.0, fvar = 0.0;
  for (std::size_t i = 0; i < gv.size(); ++i) {
    cov += (gv[i] - gm) * (fv[i] - fm);
    gvar += (gv[i] - gm) * (gv[i] - gm);
    fvar += (fv[i] - fm) * (fv[i] - fm);
  }
  const double tiny_g = 1e-24 * count * (1.0 + gm * gm);
  const double tiny_f = 1e-24 * count * (1.0 + fm * fm);
  if (gvar <= tiny_g || fvar <= tiny_f) throw UndefinedCorrelationError("pitch contour has zero variance");
  return std::clamp(cov / std::sqrt(gvar * fvar), -1.0, 1.0);
}

double melody_reward(const std::vector<int>& generated, const std::vector<int>& target) {
  return melody_reward(widen(generated), widen(target));
}

double melody_reward_or_zero(const std::vector<int>& generated, const std::vector<int>& target) {
  try {
    return melody_reward(generated, target);
  } catch (const UndefinedCorrelationError&) {
    return 0.0;
  }
}

double aggregate_reward(const RewardMap& parts, const RewardMap& weights) {
  double total = 0.0;
  for (const auto& [name, value] : parts) {
    auto it = weights.find(name);
    if (it == weights.end()) throw ConfigError("no weight for reward term '" + name + "'");
    total += it->second * value;
  }
  return total;
}

std::vector<double> group_advantage(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw ConfigError("group advantage needs a group of at least 2");
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) {
    return std::vector<double>(rewards.size(), 0.0);
  }
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double stddev = std::sqrt(var / n);
  std::vector<double> out;
  out.reserve(rewards.size());
  for (double r : rewards) out.push_back((r - mean) / (stddev + kAdvantageEpsilon));
  return out;
}

RewardBundle score_features(const FeatureSequence& generated, const GroundTruthClip& reference,
                            const CorpusConfig& config, const RewardMap& weights) {
  RewardBundle bundle;
  bundle.weights = weights;
  bundle.wer = wer(reference.lyrics.tokens(), oracle_transcribe(generated, config));
  bundle.r_con = content_reward(bundle.wer.wer);
  bundle.r_mel = melody_reward_or_zero(oracle_pitch(generated, config), reference.pitch_contour);
  bundle.total = aggregate_reward({{"con", bundle.r_con}, {"mel", bundle.r_mel}}, weights);
  return bundle;
}

double similarity_stub(const FeatureSequence& generated, const FeatureSequence& reference) {
  if (generated.dim() != reference.dim()) throw ShapeError("feature dimensions differ");
  const Eigen::RowVectorXd a = generated.frames.colwise().mean();
  const Eigen::RowVectorXd b = reference.frames.colwise().mean();
  const double denom = a.norm() * b.norm();
  return denom > 0.0 ? a.dot(b) / denom : 0.0;
}

}  // namespace melodyflow
