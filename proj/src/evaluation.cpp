#include "melodyflow/evaluation.hpp"

#include <cmath>
#include <numbers>

#include "melodyflow/errors.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

using nlohmann::json;

std::map<std::string, double> EvaluationReport::aggregates() const {
  std::map<std::string, double> out;
  if (clips.empty()) return out;
  const double n = static_cast<double>(clips.size());
  for (const auto& c : clips) {
    out["wer"] += c.wer.wer / n;
    out["S"] += c.wer.substitutions / n;
    out["D"] += c.wer.deletions / n;
    out["I"] += c.wer.insertions / n;
    out["r_con"] += c.r_con / n;
    out["r_mel"] += c.r_mel / n;
    out["fpc"] += c.fpc / n;
    out["sim"] += c.sim / n;
    out["total"] += c.total / n;
  }
  return out;
}

json EvaluationReport::to_json() const {
  json rows = json::array();
  for (const auto& c : clips) {
    rows.push_back({{"clip_id", c.clip_id},
                    {"wer", c.wer.wer},
                    {"S", c.wer.substitutions},
                    {"D", c.wer.deletions},
                    {"I", c.wer.insertions},
                    {"r_con", c.r_con},
                    {"r_mel", c.r_mel},
                    {"fpc", c.fpc},
                    {"sim", c.sim},
                    {"total", c.total}});
  }
  return json{{"clips", rows}, {"aggregates", aggregates()}, {"clip_count", clips.size()}};
}

std::uint64_t clip_sample_seed(std::uint64_t seed, const std::string& clip_id) {
  return derive_seed(seed, {hash_string(clip_id)});
}

ClipEvaluation score_clip(const FeatureSequence& generated, const GroundTruthClip& clip, const CorpusConfig& corpus,
                          const RewardMap& weights) {
  const RewardBundle bundle = score_features(generated, clip, corpus, weights);
  ClipEvaluation e;
  e.clip_id = clip.clip_id;
  e.wer = bundle.wer;
  e.r_con = bundle.r_con;
  e.r_mel = bundle.r_mel;
  e.fpc = bundle.r_mel;
  e.sim = similarity_stub(generated, clip.features);
  e.total = bundle.total;
  return e;
}

EvaluationReport evaluate(const std::vector<GroundTruthClip>& clips, const ParameterSet& params,
                          const ModelConfig& model, const CorpusConfig& corpus, const SamplerConfig& sampler,
                          std::uint64_t seed, const RewardMap& weights) {
  EvaluationReport report;
  for (const auto& clip : clips) {
    const ConditionBundle cond = make_condition(clip, clip.features, params, model);
    const FeatureSequence generated =
        sample_ode(cond, sampler, params, model, clip_sample_seed(seed, clip.clip_id), corpus.frame_rate);
    report.clips.push_back(score_clip(generated, clip, corpus, weights));
  }
  return report;
}

std::string render_debug_wav(const std::vector<int>& notes, double frame_rate, int sample_rate) {
  if (!(frame_rate > 0.0) || sample_rate < 1) throw ConfigError("invalid WAV rates");
  const auto per_frame = static_cast<std::size_t>(std::lround(sample_rate / frame_rate));
  const std::size_t count = per_frame * notes.size();

  std::string out;
  auto put = [&out](std::uint32_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  };
  const auto data_bytes = static_cast<std::uint32_t>(count * 2);
  out += "RIFF";
  put(36 + data_bytes, 4);
  out += "WAVEfmt ";
  put(16, 4);
  put(1, 2);  // PCM
  put(1, 2);  // mono
  put(static_cast<std::uint32_t>(sample_rate), 4);
  put(static_cast<std::uint32_t>(sample_rate * 2), 4);
  put(2, 2);
  put(16, 2);
  out += "data";
  put(data_bytes, 4);

  double phase = 0.0;
  for (int note : notes) {
    const double hz = note > 0 ? 440.0 * std::pow(2.0, (47.0 + note - 69.0) / 12.0) : 0.0;
    for (std::size_t s = 0; s < per_frame; ++s) {
      double sample = 0.0;
      if (note > 0) {
        phase += 2.0 * std::numbers::pi * hz / sample_rate;
        sample = 0.3 * std::sin(phase);
      }
      const auto pcm = static_cast<std::int16_t>(std::lround(sample * 32767.0));
      put(static_cast<std::uint16_t>(pcm), 2);
    }
  }
  return out;
}

}  // namespace melodyflow
