#include "melodyflow/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "melodyflow/corpus_io.hpp"
#include "melodyflow/errors.hpp"
#include "melodyflow/evaluation.hpp"
#include "melodyflow/grpo.hpp"
#include "melodyflow/report.hpp"
#include "melodyflow/trainer.hpp"

#ifndef MELODYFLOW_BUILD_ID
#define MELODYFLOW_BUILD_ID "unknown"
#endif

namespace melodyflow {

namespace fs = std::filesystem;
using nlohmann::json;

const char* build_id() { return MELODYFLOW_BUILD_ID; }

namespace {

constexpr const char* kCheckpointFile = "checkpoint.mfck";

std::string iso_now() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void require_exists(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no such file or directory: " + path.string());
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MELODYFLOW_SEED")) {
    try {
      std::size_t used = 0;
      const auto value = std::stoull(env, &used);
      if (used == std::string(env).size()) return value;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("MELODYFLOW_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

/// Collects what the manifest records and writes it once the command is done.
class Manifest {
 public:
  Manifest(std::string command, const std::vector<std::string>& args)
      : started_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["argv"] = args;
    doc_["build"] = build_id();
    doc_["started_at"] = iso_now();
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::object();
  }

  void seed(std::uint64_t s) { doc_["seed"] = s; }
  void config(const json& c) { doc_["config"] = c; }
  void input(const std::string& key, const fs::path& p) { doc_["inputs"][key] = p.string(); }
  void output(const std::string& key, const fs::path& p) { doc_["outputs"][key] = p.string(); }

  void write(const fs::path& path) {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    doc_["finished_at"] = iso_now();
    doc_["wall_seconds"] = seconds;
    write_text_atomic(path, doc_.dump(2) + "\n");
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point started_;
};

struct Options {
  // corpus generate
  int n = 0;
  int frames = 64;
  // shared
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string corpus;
  std::string checkpoint;
  // train pretrain
  std::string config;
  // train grpo
  int group_size = 8;
  double beta = 0.04;
  double noise_a = 0.7;
  std::string sigma_time = "grid";
  long steps = 300;
  double lr = GrpoConfig{}.learning_rate;
  int prompts = GrpoConfig{}.prompts_per_step;
  bool no_clip = false;
  // sample / eval
  std::string clip;
  int sample_steps = 32;
  double cfg_scale = 2.0;
  bool wav = false;
  // report
  std::string in;
  std::string before;
  std::string curves;
};

int cmd_corpus_generate(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest manifest("corpus generate", args);
  const std::uint64_t seed = resolve_seed(o.seed);
  CorpusConfig config;
  config.frames = o.frames;
  Corpus corpus{config, seed, generate_corpus(o.n, config, seed)};
  const fs::path dir(o.out);
  save_corpus(dir, corpus);
  manifest.seed(seed);
  manifest.config(to_json(config));
  manifest.output("corpus", dir);
  manifest.write(dir / "manifest.json");
  out << "wrote " << corpus.clips.size() << " clips to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_pretrain(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest manifest("train pretrain", args);
  require_exists(o.corpus);
  const Corpus corpus = load_corpus(o.corpus);
  TrainConfig train;
  ModelConfig model;
  model.feature_dim = corpus.config.feature_dim;
  model.vocab_size = corpus.config.vocab_size;
  if (!o.config.empty()) {
    require_exists(o.config);
    apply_key_values(parse_key_values(read_text(o.config)), train, model);
  }
  if (o.seed || std::getenv("MELODYFLOW_SEED")) train.seed = resolve_seed(o.seed);
  train.validate();

  const fs::path dir(o.out);
  fs::create_directories(dir);
  Checkpoint ckpt = fresh_checkpoint(model, train.seed);
  std::ostringstream log;
  pretrain(ckpt, corpus.clips, corpus.config, train, -1,
           [&log](const LossBreakdown& report, const ParameterSet&) { log << report.to_log_json().dump() << "\n"; });
  save_checkpoint(dir / kCheckpointFile, ckpt);
  write_text_atomic(dir / "train_log.jsonl", log.str());

  manifest.seed(train.seed);
  manifest.config({{"train", to_json(train)}, {"model", to_json(model)}});
  manifest.input("corpus", o.corpus);
  if (!o.config.empty()) manifest.input("config", o.config);
  manifest.output("checkpoint", dir / kCheckpointFile);
  manifest.output("log", dir / "train_log.jsonl");
  manifest.write(dir / "manifest.json");
  out << "pre-trained " << ckpt.step << " steps into " << (dir / kCheckpointFile).string() << "\n";
  return kExitOk;
}

int cmd_grpo(const Options& o, const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Manifest manifest("train grpo", args);
  require_exists(o.checkpoint);
  require_exists(o.corpus);
  Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const Corpus corpus = load_corpus(o.corpus);

  GrpoConfig config;
  config.group_size = o.group_size;
  config.kl_weight = o.beta;
  config.noise_level_a = o.noise_a;
  config.sigma_time = sigma_time_from_string(o.sigma_time);
  config.steps = o.steps;
  config.learning_rate = o.lr;
  config.prompts_per_step = o.prompts;
  if (o.no_clip) config.ratio_clip.reset();
  config.seed = resolve_seed(o.seed);
  config.validate();

  const fs::path dir(o.out);
  fs::create_directories(dir);
  const fs::path curve_path = dir / "reward_curve.jsonl";
  std::ofstream curve(curve_path, std::ios::app);
  if (!curve) throw IoError("cannot open " + curve_path.string());
  post_train(
      ckpt, corpus.clips, corpus.config, config,
      [&curve](const CurvePoint& p) { curve << p.to_json().dump() << "\n" << std::flush; },
      [&err](const std::string& msg) { err << "warning: " << msg << "\n"; });
  curve.close();
  save_checkpoint(dir / kCheckpointFile, ckpt);

  manifest.seed(config.seed);
  manifest.config(to_json(config));
  manifest.input("checkpoint", o.checkpoint);
  manifest.input("corpus", o.corpus);
  manifest.output("checkpoint", dir / kCheckpointFile);
  manifest.output("curve", curve_path);
  manifest.write(dir / "manifest.json");
  out << "post-trained " << config.steps << " steps into " << (dir / kCheckpointFile).string() << "\n";
  return kExitOk;
}

SamplerConfig sampler_from(const Options& o) {
  SamplerConfig s;
  s.steps = o.sample_steps;
  s.cfg_scale = o.cfg_scale;
  s.validate();
  return s;
}

int cmd_sample(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest manifest("sample", args);
  require_exists(o.checkpoint);
  require_exists(o.clip);
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const GroundTruthClip clip = load_clip(o.clip);
  const SamplerConfig sampler = sampler_from(o);
  const std::uint64_t seed = resolve_seed(o.seed);

  CorpusConfig corpus;
  corpus.feature_dim = ckpt.model.feature_dim;
  corpus.vocab_size = ckpt.model.vocab_size;
  corpus.frames = static_cast<int>(clip.features.frames.rows());
  corpus.frame_rate = clip.features.frame_rate;

  const ConditionBundle cond = make_condition(clip, clip.features, ckpt.params, ckpt.model);
  const FeatureSequence generated = sample_ode(cond, sampler, ckpt.params, ckpt.model, seed, corpus.frame_rate);

  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_features_bin(dir / "features.bin", generated);
  manifest.output("features", dir / "features.bin");
  if (o.wav) {
    write_text_atomic(dir / "sample.wav", render_debug_wav(oracle_pitch(generated, corpus), corpus.frame_rate));
    manifest.output("wav", dir / "sample.wav");
  }
  manifest.seed(seed);
  manifest.config({{"steps", sampler.steps}, {"cfg_scale", sampler.cfg_scale}, {"model", to_json(ckpt.model)}});
  manifest.input("checkpoint", o.checkpoint);
  manifest.input("clip", o.clip);
  manifest.write(dir / "manifest.json");
  out << "wrote " << (dir / "features.bin").string() << "\n";
  return kExitOk;
}

fs::path manifest_beside(const fs::path& file) { return fs::path(file.string() + ".manifest.json"); }

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest manifest("eval", args);
  require_exists(o.checkpoint);
  require_exists(o.corpus);
  const Checkpoint ckpt = load_checkpoint(o.checkpoint);
  const Corpus corpus = load_corpus(o.corpus);
  const SamplerConfig sampler = sampler_from(o);
  const std::uint64_t seed = resolve_seed(o.seed);

  const EvaluationReport report = evaluate(corpus.clips, ckpt.params, ckpt.model, corpus.config, sampler, seed);
  const fs::path path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_atomic(path, report.to_json().dump(2) + "\n");

  manifest.seed(seed);
  manifest.config({{"steps", sampler.steps}, {"cfg_scale", sampler.cfg_scale}, {"model", to_json(ckpt.model)}});
  manifest.input("checkpoint", o.checkpoint);
  manifest.input("corpus", o.corpus);
  manifest.output("report", path);
  manifest.write(manifest_beside(path));
  out << "evaluated " << report.clips.size() << " clips into " << path.string() << "\n";
  return kExitOk;
}

int cmd_report(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  Manifest manifest("report", args);
  const json eval = read_json_file(o.in);
  std::optional<json> before;
  if (!o.before.empty()) before = read_json_file(o.before);
  std::optional<std::vector<json>> curve;
  const fs::path path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());

  std::string image;
  if (!o.curves.empty()) {
    require_exists(o.curves);
    curve = parse_json_lines(read_text(o.curves));
    const fs::path svg = path.parent_path() / (path.stem().string() + "_curve.svg");
    write_text_atomic(svg, render_curve_svg(*curve));
    image = svg.filename().string();
    manifest.output("curve_plot", svg);
    manifest.input("curves", o.curves);
  }
  write_text_atomic(path, render_report(eval, before ? &*before : nullptr, curve ? &*curve : nullptr, image));

  manifest.input("eval", o.in);
  if (before) manifest.input("before", o.before);
  manifest.output("report", path);
  manifest.write(manifest_beside(path));
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

int exit_code_for(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::kUsage:
      return kExitUsage;
    case ErrorCategory::kIo:
      return kExitIo;
    default:
      return kExitFailure;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Melody-conditioned flow-matching singing synthesis on a synthetic corpus", "melodyflow"};
  app.require_subcommand(1);
  Options o;

  auto* corpus = app.add_subcommand("corpus", "Synthetic corpus tools");
  corpus->require_subcommand(1);
  auto* generate = corpus->add_subcommand("generate", "Generate a corpus");
  generate->add_option("--n", o.n, "Number of clips")->required();
  generate->add_option("--seed", o.seed, "Random seed");
  generate->add_option("--out", o.out, "Output directory")->required();
  generate->add_option("--frames", o.frames, "Frames per clip");

  auto* train = app.add_subcommand("train", "Training");
  train->require_subcommand(1);
  auto* pre = train->add_subcommand("pretrain", "Joint flow-matching, distillation and alignment pre-training");
  pre->add_option("--corpus", o.corpus, "Corpus directory")->required();
  pre->add_option("--config", o.config, "Key = value config file");
  pre->add_option("--seed", o.seed, "Random seed");
  pre->add_option("--out", o.out, "Output directory")->required();

  auto* grpo = train->add_subcommand("grpo", "Group-relative policy post-training");
  grpo->add_option("--checkpoint", o.checkpoint, "Pre-trained checkpoint")->required();
  grpo->add_option("--corpus", o.corpus, "Prompt corpus directory")->required();
  grpo->add_option("--group-size", o.group_size, "Rollouts per prompt");
  grpo->add_option("--beta", o.beta, "KL weight");
  grpo->add_option("--noise-a", o.noise_a, "SDE noise level a");
  grpo->add_option("--sigma-time", o.sigma_time, "Noise schedule time: noise_remaining or grid");
  grpo->add_option("--steps", o.steps, "Post-training steps");
  grpo->add_option("--lr", o.lr, "Learning rate");
  grpo->add_option("--prompts", o.prompts, "Prompts per step");
  grpo->add_flag("--no-clip", o.no_clip, "Disable ratio clipping");
  grpo->add_option("--seed", o.seed, "Random seed");
  grpo->add_option("--out", o.out, "Output directory")->required();

  auto* sample = app.add_subcommand("sample", "Generate features for one clip");
  sample->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  sample->add_option("--clip", o.clip, "Clip directory")->required();
  sample->add_option("--steps", o.sample_steps, "Euler steps");
  sample->add_option("--cfg-scale", o.cfg_scale, "Guidance scale");
  sample->add_option("--seed", o.seed, "Random seed");
  sample->add_option("--out", o.out, "Output directory")->required();
  sample->add_flag("--wav", o.wav, "Also write a sine-rendered debug WAV");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a corpus");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  eval->add_option("--corpus", o.corpus, "Corpus directory")->required();
  eval->add_option("--steps", o.sample_steps, "Euler steps");
  eval->add_option("--cfg-scale", o.cfg_scale, "Guidance scale");
  eval->add_option("--seed", o.seed, "Random seed");
  eval->add_option("--out", o.out, "Output JSON path")->required();

  auto* report = app.add_subcommand("report", "Markdown report from evaluation output");
  report->add_option("--in", o.in, "Evaluation JSON")->required();
  report->add_option("--out", o.out, "Markdown output path")->required();
  report->add_option("--before", o.before, "Baseline evaluation JSON for delta columns");
  report->add_option("--curves", o.curves, "Reward-curve JSON-lines log");

  std::vector<const char*> argv{"melodyflow"};
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      err << "error: usage: " << e.what() << "\n" << app.help();
      return kExitUsage;
    }

    if (generate->parsed()) return cmd_corpus_generate(o, args, out);
    if (pre->parsed()) return cmd_pretrain(o, args, out);
    if (grpo->parsed()) return cmd_grpo(o, args, out, err);
    if (sample->parsed()) return cmd_sample(o, args, out);
    if (eval->parsed()) return cmd_eval(o, args, out);
    if (report->parsed()) return cmd_report(o, args, out);
    throw UsageError("no command given");
  } catch (const Error& e) {
    err << "error: " << category_name(e.category()) << ": " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace melodyflow
