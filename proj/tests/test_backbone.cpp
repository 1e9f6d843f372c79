#include <doctest.h>

#include "melodyflow/backbone.hpp"
#include "melodyflow/errors.hpp"
#include "oracles.hpp"

using namespace melodyflow;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.layers = 2;
  m.hidden = 16;
  m.heads = 2;
  m.extractor_hidden = 16;
  return m;
}

Matrix random_orthogonal(int n, Rng& rng) {
  Eigen::HouseholderQR<Matrix> qr(standard_normal(n, n, rng));
  return qr.householderQ();
}

}  // namespace

TEST_CASE("velocity is deterministic with the documented shapes") {
  const ModelConfig model = small_model();
  CorpusConfig corpus;
  corpus.frames = 32;
  const auto clip = generate_corpus(1, corpus, 1)[0];
  const ParameterSet params = init_parameters(model, 3);
  const ConditionBundle cond = make_condition(clip, clip.features, params, model);
  Rng rng = make_rng(4);
  const Matrix x = standard_normal(32, model.feature_dim, rng);
  const auto a = velocity(x, 0.4, cond, params, model);
  const auto b = velocity(x, 0.4, cond, params, model);
  CHECK(a.velocity == b.velocity);
  CHECK(a.z_l == b.z_l);
  CHECK(a.velocity.rows() == 32);
  CHECK(a.velocity.cols() == model.feature_dim);
  CHECK(a.z_l.rows() == 32);
  CHECK(a.z_l.cols() == model.hidden);
  CHECK_THROWS_AS(velocity(Matrix::Zero(32, model.feature_dim + 1), 0.4, cond, params, model), ShapeError);
}

TEST_CASE("dropping every condition removes input dependence") {
  const ModelConfig model = small_model();
  CorpusConfig corpus;
  corpus.frames = 32;
  const auto clips = generate_corpus(2, corpus, 2);
  const ParameterSet params = init_parameters(model, 5);
  ConditionBundle a = make_condition(clips[0], clips[0].features, params, model);
  ConditionBundle b = make_condition(clips[1], clips[1].features, params, model);
  a.drop = DropFlags::all();
  b.drop = DropFlags::all();
  Rng rng = make_rng(6);
  const Matrix x = standard_normal(32, model.feature_dim, rng);
  CHECK(velocity(x, 0.7, a, params, model).velocity == velocity(x, 0.7, b, params, model).velocity);
  a.drop = DropFlags{};
  CHECK_FALSE(velocity(x, 0.7, a, params, model).velocity == velocity(x, 0.7, b, params, model).velocity);
}

TEST_CASE("flow-matching loss is a non-negative MSE against x1 - noise") {
  const ModelConfig model = small_model();
  CorpusConfig corpus;
  corpus.frames = 32;
  const auto clip = generate_corpus(1, corpus, 7)[0];
  const ParameterSet params = init_parameters(model, 8);
  const ConditionBundle cond = make_condition(clip, clip.features, params, model);
  Rng rng = make_rng(9);
  for (int i = 0; i < 10; ++i) {
    const Matrix noise = standard_normal(32, model.feature_dim, rng);
    CHECK(flow_matching_loss(clip, cond, 0.05 + 0.09 * i, noise, params, model) >= 0.0);
  }
  const Matrix noise = standard_normal(32, model.feature_dim, rng);
  const Matrix target = clip.features.frames - noise;
  Tape tape;
  CHECK(flow_matching_loss(tape.constant(target), clip.features.frames, noise).scalar() == 0.0);
  const Matrix x = interpolate_state(clip.features.frames, noise, 0.25);
  CHECK(x.isApprox(0.75 * noise + 0.25 * clip.features.frames));
  CHECK_THROWS_AS(flow_matching_loss(clip, cond, 0.0, noise, params, model), DomainError);
}

TEST_CASE("flow-matching gradient matches central differences") {
  ModelConfig model = small_model();
  model.layers = 1;
  CorpusConfig corpus;
  corpus.frames = 32;
  const auto clip = generate_corpus(1, corpus, 10)[0];
  ParameterSet params = init_parameters(model, 11);
  const ConditionBundle cond = make_condition(clip, clip.features, params, model);
  Rng rng = make_rng(12);
  const Matrix noise = standard_normal(32, model.feature_dim, rng);
  const double t = 0.37;
  auto graph_loss = [&](Tape& tape) {
    const Matrix x = interpolate_state(clip.features.frames, noise, t);
    const auto out = velocity(tape, model, tape.constant(x), t, cond.padded_lyrics, tape.constant(cond.prompt),
                              tape.constant(cond.melody.values), cond.drop);
    return flow_matching_loss(out.velocity, clip.features.frames, noise);
  };
  Gradients grads;
  {
    Tape tape(&params);
    tape.backward(graph_loss(tape), grads);
  }
  int probed = 0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (grads[p].isZero(0.0)) continue;
    const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(params.value(p).size()));
    const double saved = params.value(p)(k);
    const double h = 1e-5;
    params.value(p)(k) = saved + h;
    const double up = flow_matching_loss(clip, cond, t, noise, params, model);
    params.value(p)(k) = saved - h;
    const double down = flow_matching_loss(clip, cond, t, noise, params, model);
    params.value(p)(k) = saved;
    const double numeric = (up - down) / (2 * h);
    if (std::abs(numeric) < 1e-7 && std::abs(grads[p](k)) < 1e-7) continue;
    CAPTURE(params.name(p));
    CHECK(oracle::relative_error(grads[p](k), numeric) < 1e-4);
    ++probed;
  }
  CHECK(probed > 10);
}

TEST_CASE("linear CKA against the HSIC-ratio oracle") {
  Rng rng = make_rng(13);
  const Matrix a = standard_normal(8, 3, rng);
  const Matrix b = standard_normal(8, 4, rng);
  CHECK(std::abs(linear_cka(a, b) - oracle::cka(a, b)) <= 1e-10);
  for (int i = 0; i < 100; ++i) {
    const int n = 2 + static_cast<int>(rng() % 20);
    const Matrix x = standard_normal(n, 1 + static_cast<int>(rng() % 6), rng);
    const Matrix y = standard_normal(n, 1 + static_cast<int>(rng() % 6), rng);
    const double value = linear_cka(x, y);
    CHECK(std::abs(value - oracle::cka(x, y)) <= 1e-10);
    CHECK(value >= 0.0);
    CHECK(value <= 1.0 + 1e-12);
    CHECK(std::abs(value - linear_cka(y, x)) <= 1e-12);
  }
}

TEST_CASE("linear CKA invariances") {
  Rng rng = make_rng(14);
  for (int i = 0; i < 20; ++i) {
    const Matrix a = standard_normal(12, 4, rng);
    const Matrix b = standard_normal(12, 5, rng);
    const double base = linear_cka(a, b);
    CHECK(linear_cka(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(linear_cka(a * random_orthogonal(4, rng), b) - base) <= 1e-10);
    CHECK(std::abs(linear_cka(a, b * random_orthogonal(5, rng)) - base) <= 1e-10);
    CHECK(std::abs(linear_cka(a * -3.7, b) - base) <= 1e-10);
    CHECK(std::abs(linear_cka(a, b * 0.01) - base) <= 1e-10);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(5);
    perm.setIdentity();
    std::shuffle(perm.indices().data(), perm.indices().data() + 5, rng);
    CHECK(std::abs(linear_cka(a, b * perm) - base) <= 1e-10);
    CHECK(linear_cka(a, a * random_orthogonal(4, rng)) == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("linear CKA rejects degenerate operands") {
  Rng rng = make_rng(15);
  const Matrix a = standard_normal(6, 3, rng);
  CHECK_THROWS_AS(linear_cka(a, Matrix::Constant(6, 2, 4.0)), DegenerateInputError);
  CHECK_THROWS_AS(linear_cka(Matrix::Zero(6, 2), a), DegenerateInputError);
  CHECK_THROWS_AS(linear_cka(a, standard_normal(5, 3, rng)), ShapeError);
}

TEST_CASE("graph CKA agrees with the value path and differentiates") {
  Rng rng = make_rng(16);
  ParameterSet p;
  p.add("a", standard_normal(7, 3, rng));
  p.add("b", standard_normal(7, 2, rng));
  Gradients grads;
  double value = 0;
  {
    Tape tape(&p);
    Var c = linear_cka(tape.parameter("a"), tape.parameter("b"));
    value = c.scalar();
    tape.backward(c, grads);
  }
  CHECK(std::abs(value - linear_cka(p.value("a"), p.value("b"))) <= 1e-12);
  for (Eigen::Index k = 0; k < p.value(0).size(); ++k) {
    ParameterSet up = p, down = p;
    up.value(0)(k) += 1e-6;
    down.value(0)(k) -= 1e-6;
    const double numeric = (linear_cka(up.value("a"), up.value("b")) - linear_cka(down.value("a"), down.value("b"))) / 2e-6;
    CHECK(std::abs(grads[0](k) - numeric) <= 1e-6);
  }
}

TEST_CASE("CKA loss") {
  Rng rng = make_rng(17);
  MelodyRepresentation m;
  m.values = standard_normal(20, 4, rng);
  Matrix padded = Matrix::Zero(20, 9);
  padded.leftCols(4) = m.values;
  CHECK(std::abs(cka_loss(m, padded)) <= 1e-12);

  double mean = 0;
  for (int seed = 0; seed < 20; ++seed) {
    Rng r = make_rng(1000 + seed);
    MelodyRepresentation a;
    a.values = standard_normal(256, 8, r);
    const double loss = cka_loss(a, standard_normal(256, 8, r));
    CHECK(loss > 0.9);
    CHECK(loss <= 1.0);
    mean += loss / 20;
  }
  MESSAGE("mean CKA loss for independent 256-frame draws: " << mean);

  CHECK_THROWS_AS(cka_loss(m, standard_normal(19, 9, rng)), AlignmentError);
}

TEST_CASE("lambda schedule and total loss") {
  CHECK(lambda_cka_schedule(0) == doctest::Approx(0.3));
  CHECK(lambda_cka_schedule(1250) == doctest::Approx(0.155).epsilon(1e-12));
  CHECK(lambda_cka_schedule(2500) == doctest::Approx(0.01));
  CHECK(lambda_cka_schedule(100000) == doctest::Approx(0.01));
  for (long s = 1; s <= 3000; s += 37) CHECK(lambda_cka_schedule(s) <= lambda_cka_schedule(s - 1));

  CHECK(total_loss(1.0, 0.0, 0.0, LossWeights::at_step(17)) == 1.0);
  CHECK(total_loss(0.5, 0.2, 0.1, LossWeights::at_step(0)) == doctest::Approx(0.73).epsilon(1e-12));
  CHECK(total_loss(0.5, 0.2, 0.1, LossWeights::at_step(2500)) == doctest::Approx(0.701).epsilon(1e-12));
  CHECK(total_loss(0.5, 0.2, 0.1, LossWeights::at_step(9000)) == doctest::Approx(0.701).epsilon(1e-12));

  Rng rng = make_rng(18);
  for (int i = 0; i < 100; ++i) {
    const double d = uniform01(rng), k = uniform01(rng), c = uniform01(rng);
    const LossWeights w = LossWeights::at_step(static_cast<long>(rng() % 4000));
    CHECK(total_loss(d, k, c, w) == d + w.lambda_kd * k + w.lambda_cka * c);
    CHECK(w.lambda_kd == 1.0);
    CHECK(w.lambda_cka >= 0.01);
    CHECK(w.lambda_cka <= 0.3);
  }
}

TEST_CASE("condition dropout frequencies") {
  Rng rng = make_rng(19);
  for (int i = 0; i < 100; ++i) {
    CHECK(draw_drop_flags(0.0, rng) == DropFlags{});
    CHECK(draw_drop_flags(1.0, rng) == DropFlags::all());
  }
  int lyrics = 0, prompt = 0, melody = 0;
  const int trials = 100000;
  for (int i = 0; i < trials; ++i) {
    const DropFlags f = draw_drop_flags(0.2, rng);
    lyrics += f.lyrics;
    prompt += f.prompt;
    melody += f.melody;
  }
  CHECK(std::abs(lyrics / double(trials) - 0.2) <= 0.01);
  CHECK(std::abs(prompt / double(trials) - 0.2) <= 0.01);
  CHECK(std::abs(melody / double(trials) - 0.2) <= 0.01);
  CHECK_THROWS_AS(draw_drop_flags(1.5, rng), ConfigError);
}

TEST_CASE("model config validation and json round trip") {
  ModelConfig m;
  CHECK(m.resolved_cka_layer() == 2);
  CHECK(model_config_from_json(to_json(m)) == m);
  ModelConfig bad = m;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = m;
  bad.cka_layer_index = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"layers", "four"}}), ParseError);
}

TEST_CASE("prompt prefix keeps the first eighth") {
  CorpusConfig corpus;
  const auto clip = generate_corpus(1, corpus, 20)[0];
  const Matrix p = prompt_prefix(clip.features);
  CHECK(p.topRows(8) == clip.features.frames.topRows(8));
  CHECK(p.bottomRows(56).isZero(0.0));
}
