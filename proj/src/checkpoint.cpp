#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "melodyflow/corpus_io.hpp"
#include "melodyflow/errors.hpp"
#include "melodyflow/trainer.hpp"

namespace melodyflow {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr const char* kMomentPrefix1 = "adam.m/";
constexpr const char* kMomentPrefix2 = "adam.v/";

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::uint64_t fnv1a(const std::string& bytes, std::size_t length) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < length; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 1099511628211ull;
  }
  return h;
}

struct Entry {
  std::string name;
  const Matrix* value;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) entries.push_back({ckpt.params.name(i), &ckpt.params.value(i)});
  if (!ckpt.optimizer.empty()) {
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      entries.push_back({kMomentPrefix1 + ckpt.params.name(i), &ckpt.optimizer.first_moment[i]});
      entries.push_back({kMomentPrefix2 + ckpt.params.name(i), &ckpt.optimizer.second_moment[i]});
    }
  }

  json listing = json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries) {
    listing.push_back({{"name", e.name}, {"rows", e.value->rows()}, {"cols", e.value->cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(e.value->size());
  }
  const json header{{"format", "melodyflow-checkpoint"},
                    {"version", kCheckpointVersion},
                    {"config", to_json(ckpt.model)},
                    {"step", ckpt.step},
                    {"optimizer_updates", ckpt.optimizer.updates},
                    {"meta", ckpt.meta},
                    {"entries", listing}};
  const std::string header_text = header.dump();

  std::string out(kMagic, kMagic + 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, header_text.size(), 8);
  out += header_text;
  out.reserve(out.size() + 8 * offset + 8);
  for (const auto& e : entries) {
    // Row-major payload.
    for (Eigen::Index r = 0; r < e.value->rows(); ++r) {
      for (Eigen::Index c = 0; c < e.value->cols(); ++c) put_le(out, std::bit_cast<std::uint64_t>((*e.value)(r, c)), 8);
    }
  }
  put_le(out, fnv1a(out, out.size()), 8);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const ModelConfig* expected) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IntegrityError("not a melodyflow checkpoint");
  }
  const std::size_t body = bytes.size() - 8;
  if (get_le(bytes, body, 8) != fnv1a(bytes, body)) throw IntegrityError("checkpoint checksum mismatch");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  const std::uint64_t header_len = get_le(bytes, 8, 8);
  if (16 + header_len > body) throw IntegrityError("checkpoint header overruns the file");

  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::parse_error& e) {
    throw IntegrityError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.model = model_config_from_json(header.at("config"));
  if (expected != nullptr && !(ckpt.model == *expected)) {
    throw VersionError("checkpoint config " + to_json(ckpt.model).dump() + " differs from expected " +
                       to_json(*expected).dump());
  }
  ckpt.step = header.at("step").get<long>();
  ckpt.optimizer.updates = header.value("optimizer_updates", 0L);
  ckpt.meta = header.value("meta", json::object());

  const std::size_t payload = 16 + header_len;
  std::vector<std::pair<std::string, Matrix>> moments;
  for (const auto& e : header.at("entries")) {
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    if (payload + 8 * (offset + static_cast<std::uint64_t>(rows * cols)) > body) {
      throw IntegrityError("checkpoint entry overruns the payload");
    }
    Matrix m(rows, cols);
    std::size_t at = payload + 8 * offset;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c, at += 8) m(r, c) = std::bit_cast<double>(get_le(bytes, at, 8));
    }
    const auto name = e.at("name").get<std::string>();
    if (name.rfind("adam.", 0) == 0) {
      moments.emplace_back(name, std::move(m));
    } else {
      ckpt.params.add(name, std::move(m));
    }
  }

  if (!moments.empty()) {
    ckpt.optimizer.first_moment.resize(ckpt.params.size());
    ckpt.optimizer.second_moment.resize(ckpt.params.size());
    for (auto& [name, m] : moments) {
      const bool first = name.rfind(kMomentPrefix1, 0) == 0;
      const std::size_t idx = ckpt.params.index(name.substr(std::strlen(first ? kMomentPrefix1 : kMomentPrefix2)));
      (first ? ckpt.optimizer.first_moment : ckpt.optimizer.second_moment)[idx] = std::move(m);
    }
  }

  const ParameterSet reference = init_parameters(ckpt.model, 0);
  if (!reference.same_layout(ckpt.params)) throw IntegrityError("checkpoint tensors do not match its config");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  write_text_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), expected);
}

}  // namespace melodyflow
