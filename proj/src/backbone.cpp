#include "melodyflow/backbone.hpp"

#include <cmath>
#include <numbers>

#include "melodyflow/errors.hpp"

namespace melodyflow {

using nlohmann::json;

namespace {

std::string block_name(int block, const char* leaf) {
  return "backbone.block" + std::to_string(block) + "." + leaf;
}

Matrix init_linear(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng, double gain = 1.0) {
  return standard_normal(fan_in, fan_out, rng) * (gain / std::sqrt(static_cast<double>(fan_in)));
}

Matrix time_features(double t, int count) {
  Matrix out(1, count);
  const int half = count / 2;
  const double angle = t * 1000.0;
  for (int k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    out(0, k) = std::sin(angle * freq);
    out(0, half + k) = std::cos(angle * freq);
  }
  return out;
}

Matrix positional_encoding(Eigen::Index frames, int hidden) {
  Matrix out(frames, hidden);
  for (Eigen::Index pos = 0; pos < frames; ++pos) {
    for (int i = 0; i < hidden; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(2 * (i / 2)) / hidden);
      const double angle = static_cast<double>(pos) * freq;
      out(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return out;
}

Var affine_norm(Tape& tape, Var x, const std::string& prefix) {
  return ad::add_row(ad::mul_row(ad::layer_norm_rows(x), tape.parameter(prefix + ".gain")),
                     tape.parameter(prefix + ".bias"));
}

Var self_attention(Tape& tape, const ModelConfig& config, int block, Var x) {
  const int head_dim = config.hidden / config.heads;
  Var q = ad::matmul(x, tape.parameter(block_name(block, "attn.q")));
  Var k = ad::matmul(x, tape.parameter(block_name(block, "attn.k")));
  Var v = ad::matmul(x, tape.parameter(block_name(block, "attn.v")));
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(config.heads));
  for (int h = 0; h < config.heads; ++h) {
    Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    Var weights = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), scale));
    heads.push_back(ad::matmul(weights, vh));
  }
  Var merged = heads.size() == 1 ? heads.front() : ad::concat_cols(heads);
  return ad::add_row(ad::matmul(merged, tape.parameter(block_name(block, "attn.o"))),
                     tape.parameter(block_name(block, "attn.o_bias")));
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1) throw ConfigError("layers, hidden and heads must be positive");
  if (hidden % heads != 0) throw ConfigError("heads must divide hidden");
  if (feature_dim < 1 || melody_dim < 1 || vocab_size < 2) throw ConfigError("model dimensions must be positive");
  const int cka = resolved_cka_layer();
  if (cka < 0 || cka >= layers) throw ConfigError("cka_layer_index must lie in [0, layers)");
  if (mlp_ratio < 1 || time_features < 2 || time_features % 2 != 0) {
    throw ConfigError("mlp_ratio must be >= 1 and time_features even");
  }
  extractor().validate();
}

ExtractorConfig ModelConfig::extractor() const {
  return ExtractorConfig{feature_dim, extractor_hidden, extractor_layers, melody_dim};
}

json to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"hidden", c.hidden},
              {"heads", c.heads},
              {"feature_dim", c.feature_dim},
              {"melody_dim", c.melody_dim},
              {"vocab_size", c.vocab_size},
              {"cka_layer_index", c.cka_layer_index},
              {"mlp_ratio", c.mlp_ratio},
              {"time_features", c.time_features},
              {"extractor_hidden", c.extractor_hidden},
              {"extractor_layers", c.extractor_layers}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.heads = j.at("heads").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.melody_dim = j.at("melody_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.cka_layer_index = j.at("cka_layer_index").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.time_features = j.at("time_features").get<int>();
    c.extractor_hidden = j.at("extractor_hidden").get<int>();
    c.extractor_layers = j.at("extractor_layers").get<int>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model config: ") + e.what());
  }
}

Matrix prompt_prefix(const FeatureSequence& reference, double fraction) {
  if (fraction < 0.0 || fraction > 1.0) throw ConfigError("prompt fraction must lie in [0, 1]");
  const Eigen::Index frames = reference.frame_count();
  const auto keep = static_cast<Eigen::Index>(std::floor(static_cast<double>(frames) * fraction));
  Matrix prompt = Matrix::Zero(frames, reference.dim());
  prompt.topRows(keep) = reference.frames.topRows(keep);
  return prompt;
}

ConditionBundle make_condition(const GroundTruthClip& clip, const FeatureSequence& melody_source,
                               const ParameterSet& params, const ModelConfig& config, double prompt_fraction) {
  ConditionBundle cond;
  cond.padded_lyrics = pad_lyrics(clip.lyrics);
  cond.prompt = prompt_prefix(clip.features, prompt_fraction);
  cond.melody = resample_melody(student_extract(melody_source, params, config.extractor()), cond.frames());
  return cond;
}

ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, {0x696e6974ull});
  ParameterSet p;
  const int h = config.hidden;
  add_extractor_parameters(p, config.extractor(), rng);
  add_projection_parameters(p, config.melody_dim, rng);

  p.add("backbone.in.x", init_linear(config.feature_dim, h, rng));
  p.add("backbone.in.bias", Matrix::Zero(1, h));
  p.add("backbone.lyrics.embed", standard_normal(config.vocab_size, h, rng) * 0.5);
  p.add("backbone.prompt.proj", init_linear(config.feature_dim, h, rng));
  p.add("backbone.melody.proj", init_linear(config.melody_dim, h, rng));
  p.add("backbone.null.lyrics", standard_normal(1, h, rng) * 0.5);
  p.add("backbone.null.prompt", standard_normal(1, h, rng) * 0.5);
  p.add("backbone.null.melody", standard_normal(1, h, rng) * 0.5);
  p.add("backbone.time.w1", init_linear(config.time_features, h, rng));
  p.add("backbone.time.b1", Matrix::Zero(1, h));
  p.add("backbone.time.w2", init_linear(h, h, rng));
  p.add("backbone.time.b2", Matrix::Zero(1, h));
  for (int b = 0; b < config.layers; ++b) {
    p.add(block_name(b, "time"), init_linear(h, h, rng));
    p.add(block_name(b, "ln1.gain"), Matrix::Ones(1, h));
    p.add(block_name(b, "ln1.bias"), Matrix::Zero(1, h));
    p.add(block_name(b, "attn.q"), init_linear(h, h, rng));
    p.add(block_name(b, "attn.k"), init_linear(h, h, rng));
    p.add(block_name(b, "attn.v"), init_linear(h, h, rng));
    p.add(block_name(b, "attn.o"), init_linear(h, h, rng, 0.5));
    p.add(block_name(b, "attn.o_bias"), Matrix::Zero(1, h));
    p.add(block_name(b, "ln2.gain"), Matrix::Ones(1, h));
    p.add(block_name(b, "ln2.bias"), Matrix::Zero(1, h));
    p.add(block_name(b, "mlp.w1"), init_linear(h, h * config.mlp_ratio, rng));
    p.add(block_name(b, "mlp.b1"), Matrix::Zero(1, h * config.mlp_ratio));
    p.add(block_name(b, "mlp.w2"), init_linear(h * config.mlp_ratio, h, rng, 0.5));
    p.add(block_name(b, "mlp.b2"), Matrix::Zero(1, h));
  }
  p.add("backbone.out.ln.gain", Matrix::Ones(1, h));
  p.add("backbone.out.ln.bias", Matrix::Zero(1, h));
  p.add("backbone.out.w", init_linear(h, config.feature_dim, rng, 0.1));
  p.add("backbone.out.b", Matrix::Zero(1, config.feature_dim));
  return p;
}

VelocityVars velocity(Tape& tape, const ModelConfig& config, Var x_t, double t, const std::vector<int>& padded_lyrics,
                      Var prompt, Var melody, DropFlags drop) {
  if (t < 0.0 || t > 1.0) throw DomainError("velocity time must lie in [0, 1]");
  const Eigen::Index frames = x_t.rows();
  if (x_t.cols() != config.feature_dim) throw ShapeError("x_t has the wrong feature dimension");
  if (static_cast<Eigen::Index>(padded_lyrics.size()) != frames) throw ShapeError("lyrics grid length differs from T");
  if (prompt.rows() != frames || prompt.cols() != config.feature_dim) throw ShapeError("prompt must be T x D_f");
  if (!drop.melody && (melody.rows() != frames || melody.cols() != config.melody_dim)) {
    throw ShapeError("melody must be T x D_m");
  }

  Var h = ad::add_row(ad::matmul(x_t, tape.parameter("backbone.in.x")), tape.parameter("backbone.in.bias"));
  if (drop.lyrics) {
    h = h + ad::broadcast_rows(tape.parameter("backbone.null.lyrics"), frames);
  } else {
    for (int tok : padded_lyrics) {
      if (tok < 0 || tok >= config.vocab_size) throw ShapeError("lyric token outside the model vocabulary");
    }
    h = h + ad::gather_rows(tape.parameter("backbone.lyrics.embed"), padded_lyrics);
  }
  h = h + (drop.prompt ? ad::broadcast_rows(tape.parameter("backbone.null.prompt"), frames)
                       : ad::matmul(prompt, tape.parameter("backbone.prompt.proj")));
  h = h + (drop.melody ? ad::broadcast_rows(tape.parameter("backbone.null.melody"), frames)
                       : ad::matmul(melody, tape.parameter("backbone.melody.proj")));
  h = h + tape.constant(positional_encoding(frames, config.hidden));

  Var temb = ad::add_row(ad::matmul(tape.constant(time_features(t, config.time_features)),
                                    tape.parameter("backbone.time.w1")),
                         tape.parameter("backbone.time.b1"));
  temb = ad::add_row(ad::matmul(ad::silu(temb), tape.parameter("backbone.time.w2")),
                     tape.parameter("backbone.time.b2"));

  VelocityVars out;
  const int cka_layer = config.resolved_cka_layer();
  for (int b = 0; b < config.layers; ++b) {
    h = ad::add_row(h, ad::matmul(temb, tape.parameter(block_name(b, "time"))));
    h = h + self_attention(tape, config, b, affine_norm(tape, h, block_name(b, "ln1")));
    Var m = affine_norm(tape, h, block_name(b, "ln2"));
    m = ad::silu(ad::add_row(ad::matmul(m, tape.parameter(block_name(b, "mlp.w1"))),
                             tape.parameter(block_name(b, "mlp.b1"))));
    h = h + ad::add_row(ad::matmul(m, tape.parameter(block_name(b, "mlp.w2"))), tape.parameter(block_name(b, "mlp.b2")));
    if (b == cka_layer) out.z_l = h;
  }
  Var normed = affine_norm(tape, h, "backbone.out.ln");
  out.velocity = ad::add_row(ad::matmul(normed, tape.parameter("backbone.out.w")), tape.parameter("backbone.out.b"));
  return out;
}

VelocityOutput velocity(const Matrix& x_t, double t, const ConditionBundle& cond, const ParameterSet& params,
                        const ModelConfig& config) {
  Tape tape(&params);
  Var melody = cond.drop.melody ? tape.constant(Matrix()) : tape.constant(cond.melody.values);
  VelocityVars vars = velocity(tape, config, tape.constant(x_t), t, cond.padded_lyrics, tape.constant(cond.prompt),
                               melody, cond.drop);
  return {vars.velocity.value(), vars.z_l.value()};
}

Matrix interpolate_state(const Matrix& x1, const Matrix& noise, double t) {
  if (x1.rows() != noise.rows() || x1.cols() != noise.cols()) throw ShapeError("noise shape differs from x1");
  return (1.0 - t) * noise + t * x1;
}

Var flow_matching_loss(Var predicted_velocity, const Matrix& x1, const Matrix& noise) {
  if (predicted_velocity.rows() != x1.rows() || predicted_velocity.cols() != x1.cols()) {
    throw ShapeError("velocity shape differs from the target");
  }
  Var target = predicted_velocity.tape()->constant(x1 - noise);
  return ad::mean(ad::square(predicted_velocity - target));
}

double flow_matching_loss(const GroundTruthClip& clip, const ConditionBundle& cond, double t, const Matrix& noise,
                          const ParameterSet& params, const ModelConfig& config) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("flow-matching time must lie in (0, 1)");
  const Matrix& x1 = clip.features.frames;
  const VelocityOutput out = velocity(interpolate_state(x1, noise, t), t, cond, params, config);
  return (out.velocity - (x1 - noise)).squaredNorm() / static_cast<double>(x1.size());
}

namespace {

Matrix centred(const Matrix& a) { return a.rowwise() - a.colwise().mean(); }

void require_nondegenerate(const Matrix& original, const Matrix& centred_values, const char* which) {
  const double scale = std::max(1.0, original.norm());
  if (centred_values.norm() <= 1e-12 * scale) {
    throw DegenerateInputError(std::string("CKA operand ") + which + " has zero variance over frames");
  }
}

}  // namespace

double linear_cka(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("CKA operands must share the frame count");
  if (a.rows() < 2) throw ShapeError("CKA needs at least two frames");
  const Matrix ac = centred(a);
  const Matrix bc = centred(b);
  require_nondegenerate(a, ac, "A");
  require_nondegenerate(b, bc, "B");
  const Matrix k = ac * ac.transpose();
  const Matrix l = bc * bc.transpose();
  const double cross = (k.transpose() * l).squaredNorm();
  return cross / ((k.transpose() * k).norm() * (l.transpose() * l).norm());
}

Var linear_cka(Var a, Var b) {
  if (a.rows() != b.rows()) throw ShapeError("CKA operands must share the frame count");
  const Eigen::Index n = a.rows();
  if (n < 2) throw ShapeError("CKA needs at least two frames");
  require_nondegenerate(a.value(), centred(a.value()), "A");
  require_nondegenerate(b.value(), centred(b.value()), "B");
  Tape& tape = *a.tape();
  Var centring = tape.constant(Matrix::Identity(n, n) - Matrix::Constant(n, n, 1.0 / static_cast<double>(n)));
  Var ac = ad::matmul(centring, a);
  Var bc = ad::matmul(centring, b);
  Var k = ad::matmul(ac, ad::transpose(ac));
  Var l = ad::matmul(bc, ad::transpose(bc));
  Var cross = ad::sum(ad::square(ad::matmul(ad::transpose(k), l)));
  Var norm_k = ad::sqrt(ad::sum(ad::square(ad::matmul(ad::transpose(k), k))));
  Var norm_l = ad::sqrt(ad::sum(ad::square(ad::matmul(ad::transpose(l), l))));
  return ad::div(cross, ad::mul(norm_k, norm_l));
}

double cka_loss(const MelodyRepresentation& melody, const Matrix& z_l) {
  if (melody.frame_count() != z_l.rows()) throw AlignmentError("melody and z_l frame counts differ");
  return 1.0 - linear_cka(melody.values, z_l);
}

Var cka_loss(Var melody, Var z_l) {
  if (melody.rows() != z_l.rows()) throw AlignmentError("melody and z_l frame counts differ");
  return ad::add_scalar(ad::scale(linear_cka(melody, z_l), -1.0), 1.0);
}

double lambda_cka_schedule(long step, const LambdaSchedule& schedule) {
  if (!schedule.cka_enabled) return 0.0;
  if (step <= 0) return schedule.cka_start;
  if (schedule.decay_steps <= 0 || step >= schedule.decay_steps) return schedule.cka_end;
  const double frac = static_cast<double>(step) / static_cast<double>(schedule.decay_steps);
  return schedule.cka_start + (schedule.cka_end - schedule.cka_start) * frac;
}

LossWeights LossWeights::at_step(long step, const LambdaSchedule& schedule) {
  return LossWeights{schedule.kd, lambda_cka_schedule(step, schedule), step};
}

double total_loss(double diffusion, double kd, double cka, const LossWeights& weights) {
  return diffusion + weights.lambda_kd * kd + weights.lambda_cka * cka;
}

DropFlags draw_drop_flags(double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("dropout rate must lie in [0, 1]");
  DropFlags flags;
  flags.lyrics = uniform01(rng) < rate;
  flags.prompt = uniform01(rng) < rate;
  flags.melody = uniform01(rng) < rate;
  return flags;
}

ConditionBundle apply_condition_dropout(ConditionBundle cond, double rate, Rng& rng) {
  cond.drop = draw_drop_flags(rate, rng);
  return cond;
}

}  // namespace melodyflow
