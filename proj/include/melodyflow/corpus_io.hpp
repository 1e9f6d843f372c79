#pragma once

// On-disk corpus layout: one directory per clip holding
//   lyrics.json   {"total_frames", "tokens", "sentences": [{"start","end","tokens"}]}
//   pitch.json    {"frame_rate", "pitch": [...]} plus the render seed
//   features.bin  "MFLW", u32 T, u32 D_f, then T*D_f little-endian float32, row-major
// and a top-level corpus.json with the generating config and the clip list.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "melodyflow/corpus.hpp"

namespace melodyflow {

struct Corpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::vector<GroundTruthClip> clips;
};

nlohmann::json to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

nlohmann::json lyrics_to_json(const LyricSequence& lyrics);
LyricSequence lyrics_from_json(const nlohmann::json& j);

void write_features_bin(const std::filesystem::path& path, const FeatureSequence& features);
FeatureSequence read_features_bin(const std::filesystem::path& path, double frame_rate = 50.0);

void save_clip(const std::filesystem::path& dir, const GroundTruthClip& clip);
GroundTruthClip load_clip(const std::filesystem::path& dir);

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

/// Reads and parses a JSON file; IoError if missing, ParseError if malformed.
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename so readers never see partial files.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace melodyflow
