#include <doctest.h>

#include "melodyflow/backbone.hpp"
#include "melodyflow/errors.hpp"
#include "melodyflow/melody.hpp"
#include "oracles.hpp"

using namespace melodyflow;

namespace {

CorpusConfig config;

ParameterSet extractor_params(const ExtractorConfig& ec, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  ParameterSet p;
  add_extractor_parameters(p, ec, rng);
  add_projection_parameters(p, ec.melody_dim, rng);
  return p;
}

}  // namespace

TEST_CASE("teacher rows are softened one-hots on the decoded note") {
  const auto clips = generate_corpus(30, config, 4);
  for (const auto& clip : clips) {
    const MelodyRepresentation t = teacher_extract(clip.features, config);
    CHECK(t.is_distribution);
    CHECK(t.frame_count() == teacher_frame_count(clip.features.frame_count(), kTeacherRateRatio));
    CHECK(t.dim() == kPitchBins);
    for (Eigen::Index r = 0; r < t.frame_count(); ++r) {
      CHECK(std::abs(t.values.row(r).sum() - 1.0) <= 1e-6);
      CHECK(t.values.row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("teacher value at a voiced note 12 frame") {
  LyricSequence lyrics;
  lyrics.total_frames = 32;
  lyrics.sentences.push_back({{3}, 0, 10});
  std::vector<int> pitch(32, 0);
  std::fill(pitch.begin() + 2, pitch.begin() + 8, 12);
  FeatureSequence f = render_features(lyrics, pitch, config, 1);
  const MelodyRepresentation t = teacher_extract(f, config, 0.05, 1.0);
  Eigen::Index arg = 0;
  t.values.row(4).maxCoeff(&arg);
  CHECK(arg == 12);
  CHECK(t.values(4, 12) == doctest::Approx(0.95 + 0.05 / 49).epsilon(1e-12));
  t.values.row(20).maxCoeff(&arg);
  CHECK(arg == 0);
  CHECK(teacher_extract(f, config).values == teacher_extract(f, config).values);
}

TEST_CASE("teacher runs at 1.5x and maps back by nearest source frame") {
  const auto clip = generate_corpus(1, config, 9)[0];
  const MelodyRepresentation t = teacher_extract(clip.features, config);
  CHECK(t.frame_count() == 96);
  for (Eigen::Index j = 0; j < t.frame_count(); ++j) {
    const auto source = static_cast<std::size_t>((j + 0.5) / 1.5);
    Eigen::Index arg = 0;
    t.values.row(j).maxCoeff(&arg);
    CHECK(arg == clip.pitch_contour[source]);
  }
}

TEST_CASE("student extractor shape and zero final layer") {
  ExtractorConfig ec;
  ParameterSet p = extractor_params(ec, 2);
  const auto clip = generate_corpus(1, config, 3)[0];
  const MelodyRepresentation m = student_extract(clip.features, p, ec);
  CHECK(m.frame_count() == clip.features.frame_count());
  CHECK(m.dim() == ec.melody_dim);
  CHECK_FALSE(m.is_distribution);

  p.value("extractor.w2").setZero();
  p.value("extractor.b2").setZero();
  CHECK(student_extract(clip.features, p, ec).values.isZero(0.0));

  FeatureSequence wrong;
  wrong.frames = Matrix::Zero(10, ec.feature_dim + 2);
  CHECK_THROWS_AS(student_extract(wrong, p, ec), ShapeError);
}

TEST_CASE("student extractor gradient matches finite differences") {
  ExtractorConfig ec;
  ec.hidden = 8;
  ParameterSet p = extractor_params(ec, 5);
  const auto clip = generate_corpus(1, config, 6)[0];
  Rng rng = make_rng(11);
  const Matrix probe = standard_normal(clip.features.frame_count(), ec.melody_dim, rng);
  auto value = [&](const ParameterSet& params) {
    return student_extract(clip.features, params, ec).values.cwiseProduct(probe).sum();
  };
  Gradients grads;
  {
    Tape tape(&p);
    Var out = student_extract(tape, tape.constant(clip.features.frames), ec);
    tape.backward(ad::sum(ad::mul(out, tape.constant(probe))), grads);
  }
  for (const char* name : {"extractor.w0", "extractor.b1", "extractor.w2"}) {
    const std::size_t idx = p.index(name);
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(6, p.value(idx).size()); ++k) {
      ParameterSet up = p, down = p;
      const double h = 1e-5;
      up.value(idx)(k) += h;
      down.value(idx)(k) -= h;
      const double numeric = (value(up) - value(down)) / (2 * h);
      CHECK(oracle::relative_error(grads[idx](k), numeric) < 1e-4);
    }
  }
}

TEST_CASE("kd loss against brute-force KL") {
  ExtractorConfig ec;
  ParameterSet p = extractor_params(ec, 8);
  Rng rng = make_rng(13);
  MelodyRepresentation student;
  student.values = standard_normal(5, ec.melody_dim, rng);

  MelodyRepresentation teacher;
  teacher.is_distribution = true;
  teacher.values = Matrix::Constant(5, kPitchBins, 0.05 / kPitchBins);
  for (int r = 0; r < 5; ++r) teacher.values(r, 3 * r + 1) += 0.95;

  const Matrix logits = (student.values * p.value("proj.weight")).rowwise() + p.value("proj.bias").row(0);
  double expected = 0;
  for (int r = 0; r < 5; ++r) {
    std::vector<double> q(kPitchBins), t(kPitchBins);
    double z = 0;
    for (int k = 0; k < kPitchBins; ++k) z += std::exp(logits(r, k));
    for (int k = 0; k < kPitchBins; ++k) {
      q[k] = std::exp(logits(r, k)) / z;
      t[k] = teacher.values(r, k);
    }
    expected += oracle::kl(q, t) / 5;
  }
  CHECK(kd_loss(student, teacher, p) == doctest::Approx(expected).epsilon(1e-10));
  CHECK(kd_loss(student, teacher, p) > 0);
}

TEST_CASE("kd loss is zero exactly when the distributions agree") {
  ExtractorConfig ec;
  ParameterSet p = extractor_params(ec, 9);
  MelodyRepresentation student;
  student.values = Matrix::Zero(4, ec.melody_dim);

  SUBCASE("uniform student and uniform teacher") {
    p.value("proj.bias").setZero();
    MelodyRepresentation teacher;
    teacher.values = Matrix::Constant(4, kPitchBins, 1.0 / kPitchBins);
    CHECK(kd_loss(student, teacher, p) == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("teacher equal to the projected student") {
    Rng rng = make_rng(1);
    p.value("proj.bias") = standard_normal(1, kPitchBins, rng);
    Matrix soft(4, kPitchBins);
    const Eigen::RowVectorXd e = p.value("proj.bias").row(0).array().exp();
    for (int r = 0; r < 4; ++r) soft.row(r) = e / e.sum();
    MelodyRepresentation teacher;
    teacher.values = soft;
    CHECK(kd_loss(student, teacher, p) <= 1e-14);
    const double shift = 0.1 * std::min(teacher.values(0, 0), teacher.values(0, 1));
    teacher.values(0, 0) += shift;
    teacher.values(0, 1) -= shift;
    CHECK(kd_loss(student, teacher, p) > 0);
  }
  SUBCASE("uniform student against the 0.95 teacher") {
    p.value("proj.bias").setZero();
    MelodyRepresentation teacher;
    teacher.values = Matrix::Constant(4, kPitchBins, 0.05 / kPitchBins);
    teacher.values.col(7).array() += 0.95;
    std::vector<double> u(kPitchBins, 1.0 / kPitchBins), t(kPitchBins);
    for (int k = 0; k < kPitchBins; ++k) t[k] = teacher.values(0, k);
    CHECK(kd_loss(student, teacher, p) == doctest::Approx(oracle::kl(u, t)).epsilon(1e-12));
  }
}

TEST_CASE("kd loss needs aligned frames") {
  ExtractorConfig ec;
  ParameterSet p = extractor_params(ec, 10);
  MelodyRepresentation student;
  student.values = Matrix::Zero(4, ec.melody_dim);
  MelodyRepresentation teacher;
  teacher.values = Matrix::Constant(6, kPitchBins, 1.0 / kPitchBins);
  CHECK_THROWS_AS(kd_loss(student, teacher, p), AlignmentError);
}

TEST_CASE("resampling") {
  MelodyRepresentation ramp;
  ramp.values = Matrix(2, 3);
  ramp.values << 0, 2, 4, 2, 6, 10;
  const auto three = resample_melody(ramp, 3);
  CHECK(three.values.row(1).isApprox((ramp.values.row(0) + ramp.values.row(1)) / 2));
  CHECK(three.values.row(0) == ramp.values.row(0));
  CHECK(three.values.row(2) == ramp.values.row(1));

  CHECK(resample_melody(ramp, 2).values == ramp.values);

  MelodyRepresentation constant;
  constant.values = Matrix::Constant(7, 4, 0.25);
  for (Eigen::Index target : {1, 3, 7, 11, 40}) {
    CHECK(resample_melody(constant, target).values.isApprox(Matrix::Constant(target, 4, 0.25)));
  }
  CHECK_THROWS_AS(resample_melody(constant, 0), ConfigError);

  const auto clip = generate_corpus(1, config, 12)[0];
  const auto teacher = teacher_extract(clip.features, config);
  const auto back = resample_melody(teacher, clip.features.frame_count());
  CHECK(back.is_distribution);
  for (Eigen::Index r = 0; r < back.frame_count(); ++r) CHECK(std::abs(back.values.row(r).sum() - 1) < 1e-12);
}

TEST_CASE("graph resampling matches the value path") {
  Rng rng = make_rng(3);
  MelodyRepresentation m;
  m.values = standard_normal(9, 5, rng);
  Tape tape;
  const Var r = resample_frames(tape.constant(m.values), 14);
  CHECK(r.value().isApprox(resample_melody(m, 14).values, 1e-14));
}
