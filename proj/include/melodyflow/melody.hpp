#pragma once

// Melody conditioning: a frozen teacher that emits note-bin distributions, the
// trainable per-frame student extractor, its projection into the teacher's bin
// space, and the distillation loss between the two.

#include <string>

#include "melodyflow/autodiff.hpp"
#include "melodyflow/corpus.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

struct MelodyRepresentation {
  Matrix values;               // frames x dim
  bool is_distribution = false;  // teacher output: rows are probability vectors

  Eigen::Index frame_count() const { return values.rows(); }
  Eigen::Index dim() const { return values.cols(); }
};

struct ExtractorConfig {
  int feature_dim = 16;
  int hidden = 64;
  int hidden_layers = 2;
  int melody_dim = 32;

  void validate() const;
};

inline constexpr double kTeacherEpsilon = 0.05;
inline constexpr double kTeacherRateRatio = 1.5;

/// Softened one-hot over kPitchBins bins at `rate_ratio` times the input frame
/// rate: mass 1 - epsilon on the decoded note, epsilon spread over all bins.
MelodyRepresentation teacher_extract(const FeatureSequence& features, const CorpusConfig& config,
                                     double epsilon = kTeacherEpsilon, double rate_ratio = kTeacherRateRatio);

/// Number of teacher frames produced for `frames` input frames.
Eigen::Index teacher_frame_count(Eigen::Index frames, double rate_ratio);

/// (target x source) linear interpolation weights with endpoints aligned.
Matrix interpolation_matrix(Eigen::Index source_frames, Eigen::Index target_frames);

MelodyRepresentation resample_melody(const MelodyRepresentation& rep, Eigen::Index target_frames);

/// Differentiable version used inside training graphs.
Var resample_frames(Var rep, Eigen::Index target_frames);

// Student extractor parameters live under "extractor.*", the projection under
// "proj.weight" (D_m x kPitchBins) and "proj.bias" (1 x kPitchBins).
void add_extractor_parameters(ParameterSet& params, const ExtractorConfig& config, Rng& rng);
void add_projection_parameters(ParameterSet& params, int melody_dim, Rng& rng);

Var student_extract(Tape& tape, Var features, const ExtractorConfig& config);
MelodyRepresentation student_extract(const FeatureSequence& features, const ParameterSet& params,
                                     const ExtractorConfig& config);

/// Mean over frames of KL(softmax(Proj(student_t)) || teacher_t).
/// `student` must already be resampled to the teacher's frame count.
Var kd_loss(Tape& tape, Var student, const MelodyRepresentation& teacher);
double kd_loss(const MelodyRepresentation& student, const MelodyRepresentation& teacher,
               const ParameterSet& params);

}  // namespace melodyflow
