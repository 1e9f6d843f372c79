#include "melodyflow/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "melodyflow/errors.hpp"
#include "melodyflow/random.hpp"

namespace melodyflow {

using nlohmann::json;

namespace {

constexpr std::uint64_t kBatchStream = 0x62617463ull;
constexpr std::uint64_t kClipStream = 0x636c6970ull;

}  // namespace

double adamw_step(ParameterSet& params, Gradients grads, AdamState& state, const AdamConfig& config, double lr) {
  if (grads.size() != params.size()) throw ShapeError("gradient buffer does not match the parameter set");
  const double norm = global_norm(grads);
  if (config.max_grad_norm > 0.0 && norm > config.max_grad_norm) {
    const double factor = config.max_grad_norm / norm;
    for (auto& g : grads) g *= factor;
  }
  if (state.empty()) {
    state.first_moment = params.zeros_like();
    state.second_moment = params.zeros_like();
  }
  ++state.updates;
  const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.updates));
  const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.updates));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
    v = config.beta2 * v + (1.0 - config.beta2) * grads[i].cwiseProduct(grads[i]);
    Matrix& p = params.value(i);
    const Matrix step = (m / bias1).array() / ((v / bias2).array().sqrt() + config.eps);
    p -= lr * (step + config.weight_decay * p);
  }
  return norm;
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) throw ConfigError("warmup_steps must lie in [0, total_steps]");
  if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be >= 0");
  if (!(dropout >= 0.0 && dropout <= 1.0)) throw ConfigError("dropout must lie in [0, 1]");
  if (lambdas.kd < 0.0 || lambdas.cka_start < 0.0 || lambdas.cka_end < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
}

json to_json(const TrainConfig& c) {
  return json{{"batch_size", c.batch_size},
              {"total_steps", c.total_steps},
              {"warmup_steps", c.warmup_steps},
              {"peak_lr", c.peak_lr},
              {"seed", c.seed},
              {"dropout", c.dropout},
              {"lambda_kd", c.lambdas.kd},
              {"lambda_cka_start", c.lambdas.cka_start},
              {"lambda_cka_end", c.lambdas.cka_end},
              {"lambda_cka_decay_steps", c.lambdas.decay_steps},
              {"cka_enabled", c.lambdas.cka_enabled},
              {"beta1", c.adam.beta1},
              {"beta2", c.adam.beta2},
              {"adam_eps", c.adam.eps},
              {"weight_decay", c.adam.weight_decay},
              {"max_grad_norm", c.adam.max_grad_norm},
              {"prompt_fraction", c.prompt_fraction},
              {"teacher_epsilon", c.teacher_epsilon},
              {"teacher_rate_ratio", c.teacher_rate_ratio}};
}

double lr_schedule(long step, const TrainConfig& config) {
  if (step < 0 || step > config.total_steps) throw DomainError("lr_schedule step outside [0, total_steps]");
  if (step <= config.warmup_steps) {
    if (config.warmup_steps == 0) return config.peak_lr;
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  const double remaining = static_cast<double>(config.total_steps - step);
  const double span = static_cast<double>(config.total_steps - config.warmup_steps);
  return config.peak_lr * remaining / span;
}

json LossBreakdown::to_log_json() const {
  return json{{"step", step},         {"loss_total", total}, {"loss_diff", diffusion},
              {"loss_kd", kd},        {"loss_cka", cka},     {"lr", lr},
              {"lambda_cka", lambda_cka}};
}

ClipLosses clip_loss_and_gradients(const GroundTruthClip& clip, const ParameterSet& params, const ModelConfig& model,
                                   const CorpusConfig& corpus, const TrainConfig& config, const LossWeights& weights,
                                   Rng& rng, Gradients* grads) {
  const Matrix& x1 = clip.features.frames;
  const double t = 1e-4 + (1.0 - 2e-4) * uniform01(rng);
  const Matrix noise = standard_normal(x1.rows(), x1.cols(), rng);
  const DropFlags drop = draw_drop_flags(config.dropout, rng);

  Tape tape(&params);
  Var features = tape.constant(x1);
  Var melody = student_extract(tape, features, model.extractor());
  const MelodyRepresentation teacher =
      teacher_extract(clip.features, corpus, config.teacher_epsilon, config.teacher_rate_ratio);
  Var kd = kd_loss(tape, resample_frames(melody, teacher.frame_count()), teacher);

  VelocityVars out = velocity(tape, model, tape.constant(interpolate_state(x1, noise, t)), t, pad_lyrics(clip.lyrics),
                              tape.constant(prompt_prefix(clip.features, config.prompt_fraction)),
                              resample_frames(melody, x1.rows()), drop);
  Var diffusion = flow_matching_loss(out.velocity, x1, noise);

  ClipLosses losses;
  losses.diffusion = diffusion.scalar();
  losses.kd = kd.scalar();
  Var total = diffusion + ad::scale(kd, weights.lambda_kd);
  try {
    Var cka = cka_loss(melody, out.z_l);
    losses.cka = cka.scalar();
    total = total + ad::scale(cka, weights.lambda_cka);
  } catch (const DegenerateInputError&) {
    losses.cka_defined = false;
  }
  if (grads != nullptr) tape.backward(total, *grads);
  return losses;
}

LossBreakdown train_step(const std::vector<const GroundTruthClip*>& batch, ParameterSet& params, AdamState& optimizer,
                         long step, const TrainConfig& config, const ModelConfig& model, const CorpusConfig& corpus) {
  if (batch.empty()) throw ConfigError("train_step needs a non-empty batch");
  const LossWeights weights = LossWeights::at_step(step, config.lambdas);
  LossBreakdown report;
  report.step = step;
  report.lr = lr_schedule(step, config);
  report.lambda_kd = weights.lambda_kd;
  report.lambda_cka = weights.lambda_cka;

  Gradients batch_grads = params.zeros_like();
  int cka_count = 0;
  for (const GroundTruthClip* clip : batch) {
    Rng rng = make_rng(config.seed, {kClipStream, static_cast<std::uint64_t>(step), hash_string(clip->clip_id)});
    Gradients clip_grads = params.zeros_like();
    const ClipLosses losses = clip_loss_and_gradients(*clip, params, model, corpus, config, weights, rng, &clip_grads);
    report.diffusion += losses.diffusion;
    report.kd += losses.kd;
    if (losses.cka_defined) {
      report.cka += losses.cka;
      ++cka_count;
    }
    for (std::size_t i = 0; i < batch_grads.size(); ++i) batch_grads[i] += clip_grads[i];
  }
  const double n = static_cast<double>(batch.size());
  report.diffusion /= n;
  report.kd /= n;
  report.cka = cka_count > 0 ? report.cka / cka_count : 0.0;
  report.total = total_loss(report.diffusion, report.kd, report.cka, weights);
  for (auto& g : batch_grads) g /= n;

  if (!std::isfinite(report.total) || !all_finite(batch_grads)) {
    report.skipped = true;
    return report;
  }
  report.grad_norm = adamw_step(params, std::move(batch_grads), optimizer, config.adam, report.lr);
  return report;
}

std::vector<std::size_t> batch_indices(std::size_t corpus_size, long step, const TrainConfig& config) {
  if (corpus_size == 0) throw ConfigError("empty training corpus");
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(config.seed, {kBatchStream, static_cast<std::uint64_t>(step)});
  const std::size_t take = std::min(corpus_size, static_cast<std::size_t>(config.batch_size));
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, corpus_size - 1)(rng);
    std::swap(order[i], order[j]);
  }
  order.resize(take);
  return order;
}

Checkpoint fresh_checkpoint(const ModelConfig& model, std::uint64_t seed) {
  Checkpoint ckpt;
  ckpt.model = model;
  ckpt.params = init_parameters(model, seed);
  return ckpt;
}

void pretrain(Checkpoint& checkpoint, const std::vector<GroundTruthClip>& clips, const CorpusConfig& corpus,
              const TrainConfig& config, long stop_at, const StepCallback& on_step) {
  config.validate();
  checkpoint.model.validate();
  if (checkpoint.model.feature_dim != corpus.feature_dim || checkpoint.model.vocab_size != corpus.vocab_size) {
    throw VersionError("model config does not match the corpus dimensions");
  }
  const long last = stop_at < 0 ? config.total_steps : std::min(stop_at, config.total_steps);
  for (long step = checkpoint.step + 1; step <= last; ++step) {
    std::vector<const GroundTruthClip*> batch;
    for (std::size_t i : batch_indices(clips.size(), step, config)) batch.push_back(&clips[i]);
    const LossBreakdown report =
        train_step(batch, checkpoint.params, checkpoint.optimizer, step, config, checkpoint.model, corpus);
    checkpoint.step = step;
    if (on_step) on_step(report, checkpoint.params);
  }
  checkpoint.meta["train_config"] = to_json(config);
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return std::string();
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(line_no) + " lacks '='");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

void apply_key_values(const std::map<std::string, std::string>& values, TrainConfig& train, ModelConfig& model) {
  for (const auto& [key, raw] : values) {
    try {
      auto as_int = [&raw] { return std::stoi(raw); };
      auto as_long = [&raw] { return std::stol(raw); };
      auto as_double = [&raw] { return std::stod(raw); };
      auto as_bool = [&raw, &key] {
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        throw ConfigError("boolean expected for " + key);
      };
      if (key == "batch_size") train.batch_size = as_int();
      else if (key == "total_steps") train.total_steps = as_long();
      else if (key == "warmup_steps") train.warmup_steps = as_long();
      else if (key == "peak_lr") train.peak_lr = as_double();
      else if (key == "seed") train.seed = std::stoull(raw);
      else if (key == "dropout") train.dropout = as_double();
      else if (key == "lambda_kd") train.lambdas.kd = as_double();
      else if (key == "lambda_cka_start") train.lambdas.cka_start = as_double();
      else if (key == "lambda_cka_end") train.lambdas.cka_end = as_double();
      else if (key == "lambda_cka_decay_steps") train.lambdas.decay_steps = as_long();
      else if (key == "cka_enabled") train.lambdas.cka_enabled = as_bool();
      else if (key == "beta1") train.adam.beta1 = as_double();
      else if (key == "beta2") train.adam.beta2 = as_double();
      else if (key == "adam_eps") train.adam.eps = as_double();
      else if (key == "weight_decay") train.adam.weight_decay = as_double();
      else if (key == "max_grad_norm") train.adam.max_grad_norm = as_double();
      else if (key == "prompt_fraction") train.prompt_fraction = as_double();
      else if (key == "teacher_epsilon") train.teacher_epsilon = as_double();
      else if (key == "teacher_rate_ratio") train.teacher_rate_ratio = as_double();
      else if (key == "model.layers") model.layers = as_int();
      else if (key == "model.hidden") model.hidden = as_int();
      else if (key == "model.heads") model.heads = as_int();
      else if (key == "model.melody_dim") model.melody_dim = as_int();
      else if (key == "model.cka_layer_index") model.cka_layer_index = as_int();
      else if (key == "model.mlp_ratio") model.mlp_ratio = as_int();
      else if (key == "model.time_features") model.time_features = as_int();
      else if (key == "model.extractor_hidden") model.extractor_hidden = as_int();
      else if (key == "model.extractor_layers") model.extractor_layers = as_int();
      else throw ConfigError("unknown config key: " + key);
    } catch (const std::logic_error&) {
      throw ConfigError("invalid value for " + key + ": " + raw);
    }
  }
}

}  // namespace melodyflow
