#include "melodyflow/melody.hpp"

#include <algorithm>
#include <cmath>

#include "melodyflow/errors.hpp"

namespace melodyflow {

namespace {

Matrix scaled_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  return standard_normal(rows, cols, rng) * stddev;
}

std::string layer_name(const char* kind, int layer) { return "extractor." + std::string(kind) + std::to_string(layer); }

}  // namespace

void ExtractorConfig::validate() const {
  if (feature_dim < 1 || hidden < 1 || melody_dim < 1 || hidden_layers < 0) {
    throw ConfigError("extractor dimensions must be positive");
  }
}

Eigen::Index teacher_frame_count(Eigen::Index frames, double rate_ratio) {
  if (!(rate_ratio > 0.0)) throw ConfigError("teacher rate ratio must be positive");
  return std::max<Eigen::Index>(1, static_cast<Eigen::Index>(std::lround(static_cast<double>(frames) * rate_ratio)));
}

MelodyRepresentation teacher_extract(const FeatureSequence& features, const CorpusConfig& config, double epsilon,
                                     double rate_ratio) {
  if (epsilon < 0.0 || epsilon >= 1.0) throw ConfigError("teacher epsilon must lie in [0, 1)");
  const std::vector<int> pitch = oracle_pitch(features, config);
  const Eigen::Index frames = features.frame_count();
  if (frames < 1) throw ShapeError("teacher input has no frames");
  const Eigen::Index out_frames = teacher_frame_count(frames, rate_ratio);

  MelodyRepresentation rep;
  rep.is_distribution = true;
  rep.values = Matrix::Constant(out_frames, kPitchBins, epsilon / kPitchBins);
  for (Eigen::Index j = 0; j < out_frames; ++j) {
    const auto source = std::min<Eigen::Index>(
        frames - 1, static_cast<Eigen::Index>(std::floor((static_cast<double>(j) + 0.5) / rate_ratio)));
    rep.values(j, pitch[static_cast<std::size_t>(source)]) += 1.0 - epsilon;
  }
  return rep;
}

Matrix interpolation_matrix(Eigen::Index source_frames, Eigen::Index target_frames) {
  if (source_frames < 1) throw ConfigError("cannot resample an empty representation");
  if (target_frames < 1) throw ConfigError("target_frames must be >= 1");
  if (source_frames == target_frames) return Matrix::Identity(target_frames, source_frames);
  Matrix w = Matrix::Zero(target_frames, source_frames);
  for (Eigen::Index j = 0; j < target_frames; ++j) {
    if (source_frames == 1 || target_frames == 1) {
      w(j, 0) = 1.0;
      continue;
    }
    const double pos = static_cast<double>(j) * static_cast<double>(source_frames - 1) /
                       static_cast<double>(target_frames - 1);
    const auto lo = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(pos)), source_frames - 1);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 < source_frames && frac > 0.0) {
      w(j, lo) = 1.0 - frac;
      w(j, lo + 1) = frac;
    } else {
      w(j, lo) = 1.0;
    }
  }
  return w;
}

MelodyRepresentation resample_melody(const MelodyRepresentation& rep, Eigen::Index target_frames) {
  if (target_frames < 1) throw ConfigError("target_frames must be >= 1");
  if (target_frames == rep.frame_count()) return rep;
  MelodyRepresentation out;
  out.is_distribution = rep.is_distribution;
  out.values = interpolation_matrix(rep.frame_count(), target_frames) * rep.values;
  if (out.is_distribution) {
    for (Eigen::Index r = 0; r < out.values.rows(); ++r) out.values.row(r) /= out.values.row(r).sum();
  }
  return out;
}

Var resample_frames(Var rep, Eigen::Index target_frames) {
  if (target_frames == rep.rows()) return rep;
  Var weights = rep.tape()->constant(interpolation_matrix(rep.rows(), target_frames));
  return ad::matmul(weights, rep);
}

void add_extractor_parameters(ParameterSet& params, const ExtractorConfig& config, Rng& rng) {
  config.validate();
  int fan_in = config.feature_dim;
  for (int layer = 0; layer < config.hidden_layers; ++layer) {
    params.add(layer_name("w", layer), scaled_normal(fan_in, config.hidden, 1.0 / std::sqrt(fan_in), rng));
    params.add(layer_name("b", layer), Matrix::Zero(1, config.hidden));
    fan_in = config.hidden;
  }
  params.add(layer_name("w", config.hidden_layers),
             scaled_normal(fan_in, config.melody_dim, 1.0 / std::sqrt(fan_in), rng));
  params.add(layer_name("b", config.hidden_layers), Matrix::Zero(1, config.melody_dim));
}

void add_projection_parameters(ParameterSet& params, int melody_dim, Rng& rng) {
  params.add("proj.weight", scaled_normal(melody_dim, kPitchBins, 1.0 / std::sqrt(melody_dim), rng));
  params.add("proj.bias", Matrix::Zero(1, kPitchBins));
}

Var student_extract(Tape& tape, Var features, const ExtractorConfig& config) {
  if (features.cols() != config.feature_dim) {
    throw ShapeError("extractor expects " + std::to_string(config.feature_dim) + " feature channels, got " +
                     std::to_string(features.cols()));
  }
  Var h = features;
  for (int layer = 0; layer < config.hidden_layers; ++layer) {
    h = ad::tanh(ad::add_row(ad::matmul(h, tape.parameter(layer_name("w", layer))),
                             tape.parameter(layer_name("b", layer))));
  }
  return ad::add_row(ad::matmul(h, tape.parameter(layer_name("w", config.hidden_layers))),
                     tape.parameter(layer_name("b", config.hidden_layers)));
}

MelodyRepresentation student_extract(const FeatureSequence& features, const ParameterSet& params,
                                     const ExtractorConfig& config) {
  Tape tape(&params);
  MelodyRepresentation rep;
  rep.values = student_extract(tape, tape.constant(features.frames), config).value();
  return rep;
}

Var kd_loss(Tape& tape, Var student, const MelodyRepresentation& teacher) {
  if (teacher.dim() != kPitchBins) throw ShapeError("teacher representation must have 49 note bins");
  if (student.rows() != teacher.frame_count()) {
    throw AlignmentError("student has " + std::to_string(student.rows()) + " frames, teacher has " +
                         std::to_string(teacher.frame_count()));
  }
  Var logits = ad::add_row(ad::matmul(student, tape.parameter("proj.weight")), tape.parameter("proj.bias"));
  Var log_q = ad::log_softmax_rows(logits);
  Var q = ad::exp(log_q);
  Var log_p = tape.constant(teacher.values.array().log().matrix());
  Var kl = ad::sum(ad::mul(q, ad::sub(log_q, log_p)));
  return ad::scale(kl, 1.0 / static_cast<double>(teacher.frame_count()));
}

double kd_loss(const MelodyRepresentation& student, const MelodyRepresentation& teacher, const ParameterSet& params) {
  Tape tape(&params);
  // Rounding can leave a -1e-17 residue when the distributions coincide.
  const double kl = kd_loss(tape, tape.constant(student.values), teacher).scalar();
  return kl < 0.0 ? 0.0 : kl;
}

}  // namespace melodyflow
