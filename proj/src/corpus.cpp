#include "melodyflow/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <limits>

#include "melodyflow/errors.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

namespace {

constexpr std::uint64_t kTimbreStream = 0x7469'6d62'7265ull;

int bits_for(int count) {
  int bits = 1;
  while ((1 << bits) < count) ++bits;
  return bits;
}

void require_dim(const FeatureSequence& features, const CorpusConfig& config) {
  if (features.dim() != config.feature_dim) {
    throw ShapeError("feature dimension " + std::to_string(features.dim()) + " does not match corpus D_f " +
                     std::to_string(config.feature_dim));
  }
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

}  // namespace

void CorpusConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
  if (feature_dim < 4) throw ConfigError("feature_dim must be >= 4");
  if (frames < 32 || frames > 512) throw ConfigError("frames must lie in [32, 512]");
  if (!(frame_rate > 0.0)) throw ConfigError("frame_rate must be positive");
  if (min_note_frames < 1 || max_note_frames < min_note_frames) {
    throw ConfigError("note duration bounds must satisfy 1 <= min <= max");
  }
  if (2 * max_note_frames + 8 > frames) throw ConfigError("max_note_frames too long for the clip length");
  if (max_sentences < 1) throw ConfigError("max_sentences must be >= 1");
  (void)FeatureLayout::for_config(*this);
}

FeatureLayout FeatureLayout::for_config(const CorpusConfig& config) {
  FeatureLayout layout;
  const int available = config.feature_dim - 2;
  layout.data_bits = bits_for(config.vocab_size - 1);
  if (available < layout.data_bits) {
    throw ConfigError("feature_dim " + std::to_string(config.feature_dim) + " cannot encode " +
                      std::to_string(config.vocab_size) + " tokens");
  }
  layout.token_offset = 0;
  layout.token_dim = std::min(available, layout.data_bits + 1);
  layout.parity = layout.token_dim > layout.data_bits;
  layout.pitch_offset = layout.token_dim;
  layout.residual_offset = layout.pitch_offset + 2;
  layout.residual_dim = config.feature_dim - layout.residual_offset;
  return layout;
}

std::vector<int> LyricSequence::tokens() const {
  std::vector<int> out;
  for (const auto& s : sentences) out.insert(out.end(), s.tokens.begin(), s.tokens.end());
  return out;
}

void LyricSequence::validate(int vocab_size) const {
  if (total_frames < 1) throw ConfigError("lyrics need total_frames >= 1");
  int previous_end = 0;
  for (const auto& s : sentences) {
    if (s.start < previous_end || s.end < s.start || s.end > total_frames) {
      throw ConfigError("sentence spans must be sorted, non-overlapping and inside [0, T)");
    }
    for (int tok : s.tokens) {
      if (tok < 0 || tok >= vocab_size) throw ConfigError("token id out of vocabulary: " + std::to_string(tok));
    }
    previous_end = s.end;
  }
}

Eigen::VectorXd token_codeword(int token, const FeatureLayout& layout) {
  Eigen::VectorXd code = Eigen::VectorXd::Zero(layout.token_dim);
  if (token == kFillerToken) return code;
  const auto bits = static_cast<unsigned>(token - 1);
  for (int b = 0; b < layout.data_bits; ++b) code(b) = ((bits >> b) & 1u) ? 1.0 : -1.0;
  if (layout.parity) {
    code(layout.data_bits) = (std::popcount(bits) % 2 == 1) ? 1.0 : -1.0;
    for (int extra = layout.data_bits + 1; extra < layout.token_dim; ++extra) code(extra) = code(layout.data_bits);
  }
  return code;
}

Eigen::Vector2d pitch_codeword(int note) {
  if (note == 0) return {0.0, -1.0};
  return {(note - 24.5) / 24.0, 1.0};
}

FeatureSequence render_features(const LyricSequence& lyrics, const std::vector<int>& pitch_contour,
                                const CorpusConfig& config, std::uint64_t seed) {
  const FeatureLayout layout = FeatureLayout::for_config(config);
  lyrics.validate(config.vocab_size);
  const int frames = lyrics.total_frames;
  if (static_cast<int>(pitch_contour.size()) != frames) {
    throw ShapeError("pitch contour length differs from total_frames");
  }
  for (int p : pitch_contour) {
    if (p < 0 || p > kMaxNote) throw DomainError("note index out of range: " + std::to_string(p));
  }

  std::vector<int> frame_token(static_cast<std::size_t>(frames), kFillerToken);
  for (const auto& sentence : lyrics.sentences) {
    std::size_t next = 0;
    for (int f = sentence.start; f < sentence.end; ++f) {
      const int p = pitch_contour[static_cast<std::size_t>(f)];
      if (p == 0) continue;
      const bool new_note = f == sentence.start || pitch_contour[static_cast<std::size_t>(f - 1)] != p;
      if (new_note) ++next;
      if (next > sentence.tokens.size()) throw ConfigError("sentence has more notes than tokens");
      frame_token[static_cast<std::size_t>(f)] = sentence.tokens[next - 1];
    }
    if (next != sentence.tokens.size()) throw ConfigError("sentence has fewer notes than tokens");
  }

  Rng rng = make_rng(seed, {kTimbreStream});
  std::normal_distribution<double> timbre(0.0, 0.5);
  std::normal_distribution<double> jitter(0.0, 0.05);
  Eigen::VectorXd colour(layout.residual_dim);
  for (int j = 0; j < layout.residual_dim; ++j) colour(j) = timbre(rng);

  FeatureSequence out;
  out.frame_rate = config.frame_rate;
  out.frames = Matrix::Zero(frames, config.feature_dim);
  for (int f = 0; f < frames; ++f) {
    const int note = pitch_contour[static_cast<std::size_t>(f)];
    out.frames.row(f).segment(layout.token_offset, layout.token_dim) =
        token_codeword(frame_token[static_cast<std::size_t>(f)], layout).transpose();
    out.frames.row(f).segment(layout.pitch_offset, 2) = pitch_codeword(note).transpose();
    const double gain = note == 0 ? 0.3 : 1.0;
    for (int j = 0; j < layout.residual_dim; ++j) {
      out.frames(f, layout.residual_offset + j) = gain * colour(j) + jitter(rng);
    }
  }
  // Store exactly what features.bin can represent.
  out.frames = out.frames.cast<float>().cast<double>();
  return out;
}

GroundTruthClip generate_clip(const CorpusConfig& config, std::uint64_t seed, const std::string& clip_id) {
  config.validate();
  Rng rng = make_rng(seed);
  const int frames = config.frames;

  GroundTruthClip clip;
  clip.clip_id = clip_id;
  clip.seed = seed;
  clip.pitch_contour.assign(static_cast<std::size_t>(frames), 0);
  clip.lyrics.total_frames = frames;

  int pos = uniform_int(rng, 0, 3);
  int last_note = uniform_int(rng, 10, 38);
  for (int s = 0; s < config.max_sentences; ++s) {
    if (pos + config.max_note_frames > frames) break;
    Sentence sentence;
    sentence.start = pos;
    const int target_notes = uniform_int(rng, 2, 6);
    int previous_token = -1;
    for (int k = 0; k < target_notes; ++k) {
      bool gapped = false;
      if (k > 0 && uniform01(rng) < 0.3) {
        const int gap = uniform_int(rng, 1, 2);
        if (pos + gap + config.min_note_frames > frames) break;
        pos += gap;
        gapped = true;
      }
      const int duration = uniform_int(rng, config.min_note_frames, config.max_note_frames);
      if (pos + duration > frames) break;
      int note = std::clamp(last_note + uniform_int(rng, -4, 4), 1, kMaxNote);
      if (k > 0 && !gapped && note == last_note) note = note < kMaxNote ? note + 1 : note - 1;
      int token = previous_token;
      while (token == previous_token) token = uniform_int(rng, 1, config.vocab_size - 1);
      std::fill(clip.pitch_contour.begin() + pos, clip.pitch_contour.begin() + pos + duration, note);
      sentence.tokens.push_back(token);
      pos += duration;
      last_note = note;
      previous_token = token;
    }
    if (sentence.tokens.empty()) break;
    sentence.end = pos;
    clip.lyrics.sentences.push_back(std::move(sentence));
    pos += uniform_int(rng, 2, 5);
  }

  clip.features = render_features(clip.lyrics, clip.pitch_contour, config, seed);
  return clip;
}

std::vector<GroundTruthClip> generate_corpus(int n_clips, const CorpusConfig& config, std::uint64_t seed) {
  if (n_clips < 1) throw ConfigError("n_clips must be >= 1");
  config.validate();
  std::vector<GroundTruthClip> clips;
  clips.reserve(static_cast<std::size_t>(n_clips));
  for (int i = 0; i < n_clips; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "clip_%05d", i);
    clips.push_back(generate_clip(config, derive_seed(seed, {static_cast<std::uint64_t>(i)}), id));
  }
  return clips;
}

GroundTruthClip transpose_clip(const GroundTruthClip& clip, int semitones, const CorpusConfig& config) {
  GroundTruthClip out = clip;
  for (int& p : out.pitch_contour) {
    if (p == 0) continue;
    p += semitones;
    if (p < 1 || p > kMaxNote) throw DomainError("transposition leaves the note range");
  }
  out.clip_id = clip.clip_id + "_t" + std::to_string(semitones);
  out.features = render_features(out.lyrics, out.pitch_contour, config, clip.seed);
  return out;
}

std::vector<int> pad_lyrics(const LyricSequence& lyrics) {
  std::vector<int> grid(static_cast<std::size_t>(std::max(lyrics.total_frames, 0)), kFillerToken);
  for (const auto& sentence : lyrics.sentences) {
    if (static_cast<int>(sentence.tokens.size()) > sentence.width()) {
      throw SpanOverflowError("sentence with " + std::to_string(sentence.tokens.size()) +
                              " tokens overflows span of width " + std::to_string(sentence.width()));
    }
    if (sentence.start < 0 || sentence.end > lyrics.total_frames) {
      throw SpanOverflowError("sentence span lies outside the clip");
    }
    std::copy(sentence.tokens.begin(), sentence.tokens.end(), grid.begin() + sentence.start);
  }
  return grid;
}

std::vector<int> decode_frame_tokens(const FeatureSequence& features, const CorpusConfig& config) {
  require_dim(features, config);
  const FeatureLayout layout = FeatureLayout::for_config(config);
  Matrix codebook(config.vocab_size, layout.token_dim);
  for (int tok = 0; tok < config.vocab_size; ++tok) codebook.row(tok) = token_codeword(tok, layout).transpose();

  std::vector<int> out(static_cast<std::size_t>(features.frame_count()));
  for (Eigen::Index f = 0; f < features.frame_count(); ++f) {
    const Eigen::RowVectorXd x = features.frames.row(f).segment(layout.token_offset, layout.token_dim);
    int best = kFillerToken;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int tok = 0; tok < config.vocab_size; ++tok) {
      const double d = (codebook.row(tok) - x).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = tok;
      }
    }
    out[static_cast<std::size_t>(f)] = best;
  }
  return out;
}

std::vector<int> oracle_transcribe(const FeatureSequence& features, const CorpusConfig& config) {
  std::vector<int> out;
  int previous = -1;
  for (int tok : decode_frame_tokens(features, config)) {
    if (tok != previous && tok != kFillerToken) out.push_back(tok);
    previous = tok;
  }
  return out;
}

std::vector<int> oracle_pitch(const FeatureSequence& features, const CorpusConfig& config) {
  require_dim(features, config);
  const FeatureLayout layout = FeatureLayout::for_config(config);
  std::vector<int> out(static_cast<std::size_t>(features.frame_count()));
  for (Eigen::Index f = 0; f < features.frame_count(); ++f) {
    const Eigen::Vector2d x = features.frames.row(f).segment(layout.pitch_offset, 2).transpose();
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int note = 0; note <= kMaxNote; ++note) {
      const double d = (pitch_codeword(note) - x).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = note;
      }
    }
    out[static_cast<std::size_t>(f)] = best;
  }
  return out;
}

}  // namespace melodyflow
