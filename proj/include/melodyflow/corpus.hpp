#pragma once

// Synthetic singing corpus.
//
// Each clip is a sequence of sung notes grouped into sentences. Every voiced
// note carries exactly one lyric token. Frame features are laid out in three
// disjoint channel groups:
//
//   [ token codeword | pitch (ramp, voicing) | residual timbre ]
//
// so that the token sequence and the pitch contour can be read back exactly by
// nearest-codeword decoding (oracle_transcribe / oracle_pitch).

#include <cstdint>
#include <string>
#include <vector>

#include "melodyflow/autodiff.hpp"

namespace melodyflow {

inline constexpr int kFillerToken = 0;
inline constexpr int kMaxNote = 48;
inline constexpr int kPitchBins = kMaxNote + 1;  // notes 1..48 plus unvoiced

struct CorpusConfig {
  int vocab_size = 32;
  int feature_dim = 16;
  int frames = 64;
  double frame_rate = 50.0;
  int min_note_frames = 3;
  int max_note_frames = 6;
  int max_sentences = 3;

  /// Throws ConfigError on out-of-range values or when feature_dim cannot
  /// encode vocab_size tokens.
  void validate() const;
};

/// Channel assignment derived from a CorpusConfig.
struct FeatureLayout {
  int token_offset = 0;
  int token_dim = 0;
  int data_bits = 0;
  bool parity = false;
  int pitch_offset = 0;  // two channels: ramp, voicing
  int residual_offset = 0;
  int residual_dim = 0;

  static FeatureLayout for_config(const CorpusConfig& config);
};

/// Frame-level acoustic features, T x D_f.
struct FeatureSequence {
  Matrix frames;
  double frame_rate = 50.0;

  Eigen::Index frame_count() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

/// A sentence's tokens occupy the half-open frame span [start, end).
struct Sentence {
  std::vector<int> tokens;
  int start = 0;
  int end = 0;

  int width() const { return end - start; }
};

struct LyricSequence {
  std::vector<Sentence> sentences;
  int total_frames = 0;

  std::vector<int> tokens() const;
  /// Throws ConfigError when tokens or spans break the sequence invariants.
  void validate(int vocab_size) const;
};

struct GroundTruthClip {
  std::string clip_id;
  LyricSequence lyrics;
  std::vector<int> pitch_contour;  // 0 = unvoiced, otherwise 1..48
  FeatureSequence features;
  std::uint64_t seed = 0;
};

std::vector<GroundTruthClip> generate_corpus(int n_clips, const CorpusConfig& config, std::uint64_t seed);

GroundTruthClip generate_clip(const CorpusConfig& config, std::uint64_t seed, const std::string& clip_id);

/// Deterministic feature rendering. Tokens are assigned, sentence by sentence,
/// to the maximal runs of constant nonzero pitch inside each span.
FeatureSequence render_features(const LyricSequence& lyrics, const std::vector<int>& pitch_contour,
                                const CorpusConfig& config, std::uint64_t seed);

/// Re-renders the clip with every voiced note shifted by `semitones`.
GroundTruthClip transpose_clip(const GroundTruthClip& clip, int semitones, const CorpusConfig& config);

/// Places each sentence's tokens at the start of its span; every other frame
/// holds kFillerToken. Throws SpanOverflowError if a sentence does not fit.
std::vector<int> pad_lyrics(const LyricSequence& lyrics);

/// Nearest-codeword token per frame (filler included), no collapsing.
std::vector<int> decode_frame_tokens(const FeatureSequence& features, const CorpusConfig& config);

/// Token sequence with consecutive duplicates collapsed and filler removed.
std::vector<int> oracle_transcribe(const FeatureSequence& features, const CorpusConfig& config);

/// Nearest note index per frame, 0 for unvoiced.
std::vector<int> oracle_pitch(const FeatureSequence& features, const CorpusConfig& config);

/// Codeword written into the token channel group for `token`.
Eigen::VectorXd token_codeword(int token, const FeatureLayout& layout);

/// (ramp, voicing) pair written into the pitch channel group for `note`.
Eigen::Vector2d pitch_codeword(int note);

}  // namespace melodyflow
