#include "melodyflow/corpus_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "melodyflow/errors.hpp"

namespace melodyflow {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kFeatureMagic = {'M', 'F', 'L', 'W'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

json to_json(const CorpusConfig& c) {
  return json{{"vocab_size", c.vocab_size},         {"feature_dim", c.feature_dim},
              {"frames", c.frames},                 {"frame_rate", c.frame_rate},
              {"min_note_frames", c.min_note_frames}, {"max_note_frames", c.max_note_frames},
              {"max_sentences", c.max_sentences}};
}

CorpusConfig corpus_config_from_json(const json& j) {
  try {
    CorpusConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.frames = j.at("frames").get<int>();
    c.frame_rate = j.at("frame_rate").get<double>();
    c.min_note_frames = j.at("min_note_frames").get<int>();
    c.max_note_frames = j.at("max_note_frames").get<int>();
    c.max_sentences = j.at("max_sentences").get<int>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("corpus config: ") + e.what());
  }
}

json lyrics_to_json(const LyricSequence& lyrics) {
  json sentences = json::array();
  for (const auto& s : lyrics.sentences) {
    sentences.push_back({{"start", s.start}, {"end", s.end}, {"tokens", s.tokens}});
  }
  return json{{"total_frames", lyrics.total_frames}, {"tokens", lyrics.tokens()}, {"sentences", sentences}};
}

LyricSequence lyrics_from_json(const json& j) {
  try {
    LyricSequence lyrics;
    lyrics.total_frames = j.at("total_frames").get<int>();
    for (const auto& s : j.at("sentences")) {
      Sentence sentence;
      sentence.start = s.at("start").get<int>();
      sentence.end = s.at("end").get<int>();
      sentence.tokens = s.at("tokens").get<std::vector<int>>();
      lyrics.sentences.push_back(std::move(sentence));
    }
    return lyrics;
  } catch (const json::exception& e) {
    throw ParseError(std::string("lyrics: ") + e.what());
  }
}

void write_features_bin(const fs::path& path, const FeatureSequence& features) {
  std::string out(kFeatureMagic.begin(), kFeatureMagic.end());
  put_u32(out, static_cast<std::uint32_t>(features.frame_count()));
  put_u32(out, static_cast<std::uint32_t>(features.dim()));
  for (Eigen::Index r = 0; r < features.frame_count(); ++r) {
    for (Eigen::Index c = 0; c < features.dim(); ++c) {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(features.frames(r, c))));
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write to " + path.string());
}

FeatureSequence read_features_bin(const fs::path& path, double frame_rate) {
  const std::string bytes = read_bytes(path);
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kFeatureMagic.data(), 4) != 0) {
    throw IntegrityError("bad features.bin header in " + path.string());
  }
  const std::uint32_t frames = get_u32(bytes, 4);
  const std::uint32_t dim = get_u32(bytes, 8);
  if (bytes.size() != 12 + 4ull * frames * dim) throw IntegrityError("features.bin size mismatch in " + path.string());
  FeatureSequence out;
  out.frame_rate = frame_rate;
  out.frames.resize(frames, dim);
  std::size_t at = 12;
  for (std::uint32_t r = 0; r < frames; ++r) {
    for (std::uint32_t c = 0; c < dim; ++c, at += 4) {
      out.frames(r, c) = static_cast<double>(std::bit_cast<float>(get_u32(bytes, at)));
    }
  }
  if (!out.frames.allFinite()) throw IntegrityError("non-finite feature values in " + path.string());
  return out;
}

void save_clip(const fs::path& dir, const GroundTruthClip& clip) {
  fs::create_directories(dir);
  write_text_atomic(dir / "lyrics.json", lyrics_to_json(clip.lyrics).dump(2) + "\n");
  json pitch{{"clip_id", clip.clip_id},
             {"frame_rate", clip.features.frame_rate},
             {"seed", clip.seed},
             {"pitch", clip.pitch_contour}};
  write_text_atomic(dir / "pitch.json", pitch.dump(2) + "\n");
  write_features_bin(dir / "features.bin", clip.features);
}

GroundTruthClip load_clip(const fs::path& dir) {
  GroundTruthClip clip;
  clip.lyrics = lyrics_from_json(read_json_file(dir / "lyrics.json"));
  const json pitch = read_json_file(dir / "pitch.json");
  try {
    clip.clip_id = pitch.value("clip_id", dir.filename().string());
    clip.seed = pitch.value("seed", std::uint64_t{0});
    clip.pitch_contour = pitch.at("pitch").get<std::vector<int>>();
    clip.features = read_features_bin(dir / "features.bin", pitch.value("frame_rate", 50.0));
  } catch (const json::exception& e) {
    throw ParseError("pitch.json: " + std::string(e.what()));
  }
  if (clip.features.frame_count() != clip.lyrics.total_frames ||
      static_cast<Eigen::Index>(clip.pitch_contour.size()) != clip.lyrics.total_frames) {
    throw IntegrityError("clip " + dir.string() + " has inconsistent frame counts");
  }
  return clip;
}

void save_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir);
  json ids = json::array();
  for (const auto& clip : corpus.clips) {
    save_clip(dir / clip.clip_id, clip);
    ids.push_back(clip.clip_id);
  }
  json meta{{"config", to_json(corpus.config)}, {"seed", corpus.seed}, {"clips", ids}};
  write_text_atomic(dir / "corpus.json", meta.dump(2) + "\n");
}

Corpus load_corpus(const fs::path& dir) {
  const json meta = read_json_file(dir / "corpus.json");
  Corpus corpus;
  try {
    corpus.config = corpus_config_from_json(meta.at("config"));
    corpus.seed = meta.value("seed", std::uint64_t{0});
    for (const auto& id : meta.at("clips")) {
      GroundTruthClip clip = load_clip(dir / id.get<std::string>());
      if (clip.features.dim() != corpus.config.feature_dim) {
        throw IntegrityError("clip " + clip.clip_id + " feature dimension differs from corpus config");
      }
      corpus.clips.push_back(std::move(clip));
    }
  } catch (const json::exception& e) {
    throw ParseError("corpus.json: " + std::string(e.what()));
  }
  return corpus;
}

json read_json_file(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing file " + path.string());
  const std::string text = read_bytes(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace melodyflow
