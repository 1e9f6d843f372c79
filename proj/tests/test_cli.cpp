#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "melodyflow/cli.hpp"
#include "melodyflow/errors.hpp"
#include "melodyflow/evaluation.hpp"
#include "melodyflow/report.hpp"

using namespace melodyflow;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("melodyflow_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

json clip_row(const std::string& id, double wer, double r_mel, double sim) {
  return {{"clip_id", id}, {"wer", wer},          {"S", 1},     {"D", 0},
          {"I", 0},        {"r_con", 1.0 - wer}, {"r_mel", r_mel}, {"fpc", r_mel},
          {"sim", sim},    {"total", 1.0 - wer + r_mel}};
}

const char* kTinyConfig =
    "total_steps = 3\nwarmup_steps = 1\nbatch_size = 2\n"
    "model.layers = 1\nmodel.hidden = 16\nmodel.heads = 2\nmodel.extractor_hidden = 16\n";

}  // namespace

TEST_CASE("corpus generate writes one directory per clip") {
  const fs::path dir = scratch("corpus");
  const Result r = cli({"corpus", "generate", "--n", "50", "--seed", "1", "--out", (dir / "d").string()});
  CHECK(r.code == kExitOk);
  int clips = 0;
  for (const auto& e : fs::directory_iterator(dir / "d")) clips += e.is_directory();
  CHECK(clips == 50);
  CHECK(fs::exists(dir / "d" / "manifest.json"));
  const json manifest = json::parse(slurp(dir / "d" / "manifest.json"));
  CHECK(manifest["command"] == "corpus generate");
  CHECK(manifest["seed"] == 1);
}

TEST_CASE("usage and I/O failures map to their exit codes") {
  Result r = cli({"frobnicate"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.rfind("error: usage:", 0) == 0);
  CHECK(r.err.find("corpus") != std::string::npos);

  r = cli({"corpus", "generate", "--n", "2", "--out", "x", "--bogus"});
  CHECK(r.code == kExitUsage);

  r = cli({});
  CHECK(r.code == kExitUsage);

  const fs::path dir = scratch("io");
  r = cli({"eval", "--checkpoint", (dir / "none.mfck").string(), "--corpus", (dir / "none").string(), "--out",
           (dir / "e.json").string()});
  CHECK(r.code == kExitIo);
  CHECK(r.err.rfind("error: io:", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = cli({"report", "--in", (dir / "none.json").string(), "--out", (dir / "r.md").string()});
  CHECK(r.code == kExitIo);

  write(dir / "bad.json", "{\"clips\": [");
  r = cli({"report", "--in", (dir / "bad.json").string(), "--out", (dir / "r.md").string()});
  CHECK(r.code != kExitOk);
  CHECK(r.err.rfind("error: parse:", 0) == 0);
}

TEST_CASE("report aggregates are the arithmetic means of the clip rows") {
  const fs::path dir = scratch("report");
  const json eval{{"clips", {clip_row("a", 0.0, 0.9, 0.5), clip_row("b", 0.5, 0.6, 0.7), clip_row("c", 0.25, 0.3, 0.9)}}};
  write(dir / "eval.json", eval.dump());
  const Result r = cli({"report", "--in", (dir / "eval.json").string(), "--out", (dir / "report.md").string()});
  REQUIRE(r.code == kExitOk);
  const std::string md = slurp(dir / "report.md");
  // Hand-computed: wer (0 + 0.5 + 0.25) / 3, r_mel (0.9 + 0.6 + 0.3) / 3, sim 0.7.
  CHECK(md.find("| wer | 0.2500 |") != std::string::npos);
  CHECK(md.find("| r_mel | 0.6000 |") != std::string::npos);
  CHECK(md.find("| sim | 0.7000 |") != std::string::npos);
  CHECK(md.find("| total | 1.3500 |") != std::string::npos);
  const auto agg = recompute_aggregates(eval);
  CHECK(agg.at("r_con") == doctest::Approx(0.75));
  CHECK(fs::exists(dir / "report.md.manifest.json"));
}

TEST_CASE("report on an empty clip list") {
  const fs::path dir = scratch("empty");
  write(dir / "eval.json", json{{"clips", json::array()}}.dump());
  const Result r = cli({"report", "--in", (dir / "eval.json").string(), "--out", (dir / "report.md").string()});
  CHECK(r.code == kExitOk);
  const std::string md = slurp(dir / "report.md");
  CHECK(md.find("Clips: 0") != std::string::npos);
  CHECK(md.find("## Per clip") != std::string::npos);
}

TEST_CASE("report delta column is after minus before, with a curve plot") {
  const fs::path dir = scratch("delta");
  write(dir / "before.json", json{{"clips", {clip_row("a", 0.5, 0.5, 0.5)}}}.dump());
  write(dir / "after.json", json{{"clips", {clip_row("a", 0.25, 0.75, 0.5)}}}.dump());
  write(dir / "curve.jsonl",
        "{\"step\":1,\"mean_reward\":1.0,\"mean_r_con\":0.5,\"mean_r_mel\":0.5,\"mean_kl\":0.0}\n\n"
        "{\"step\":2,\"mean_reward\":1.2,\"mean_r_con\":0.6,\"mean_r_mel\":0.6,\"mean_kl\":0.01}\n");
  const Result r = cli({"report", "--in", (dir / "after.json").string(), "--before", (dir / "before.json").string(),
                        "--curves", (dir / "curve.jsonl").string(), "--out", (dir / "report.md").string()});
  REQUIRE(r.code == kExitOk);
  const std::string md = slurp(dir / "report.md");
  CHECK(md.find("| wer | 0.5000 | 0.2500 | -0.2500 |") != std::string::npos);
  CHECK(md.find("| r_mel | 0.5000 | 0.7500 | 0.2500 |") != std::string::npos);
  CHECK(md.find("| total | 1.0000 | 1.5000 | 0.5000 |") != std::string::npos);
  CHECK(md.find("report_curve.svg") != std::string::npos);
  CHECK(slurp(dir / "report_curve.svg").find("<polyline") != std::string::npos);
}

TEST_CASE("json lines parsing") {
  CHECK(parse_json_lines("{\"a\":1}\n\n{\"a\":2}\n").size() == 2);
  CHECK_THROWS_AS(parse_json_lines("{\"a\":1}\n{oops\n"), ParseError);
  CHECK_THROWS_AS(recompute_aggregates(json{{"rows", 1}}), ParseError);
}

TEST_CASE("debug wav layout") {
  const std::string wav = render_debug_wav({0, 12, 12, 0}, 50.0);
  CHECK(wav.substr(0, 4) == "RIFF");
  CHECK(wav.substr(8, 4) == "WAVE");
  // 4 frames at 50 Hz = 0.08 s = 1920 samples of 16-bit mono.
  CHECK(wav.size() == 44 + 2 * 1920);
}

TEST_CASE("full pipeline is reproducible") {
  const fs::path dir = scratch("pipeline");
  write(dir / "tiny.cfg", kTinyConfig);
  auto pipeline = [&](const std::string& tag) {
    const fs::path root = dir / tag;
    REQUIRE(cli({"corpus", "generate", "--n", "3", "--seed", "5", "--frames", "32", "--out", (root / "corpus").string()})
                .code == kExitOk);
    REQUIRE(cli({"train", "pretrain", "--corpus", (root / "corpus").string(), "--config", (dir / "tiny.cfg").string(),
                 "--seed", "6", "--out", (root / "pre").string()})
                .code == kExitOk);
    REQUIRE(cli({"train", "grpo", "--checkpoint", (root / "pre" / "checkpoint.mfck").string(), "--corpus",
                 (root / "corpus").string(), "--group-size", "2", "--steps", "1", "--prompts", "1", "--seed", "7",
                 "--out", (root / "grpo").string()})
                .code == kExitOk);
    REQUIRE(cli({"sample", "--checkpoint", (root / "grpo" / "checkpoint.mfck").string(), "--clip",
                 (root / "corpus" / "clip_00000").string(), "--steps", "4", "--seed", "8", "--wav", "--out",
                 (root / "sample").string()})
                .code == kExitOk);
    REQUIRE(cli({"eval", "--checkpoint", (root / "pre" / "checkpoint.mfck").string(), "--corpus",
                 (root / "corpus").string(), "--steps", "4", "--seed", "9", "--out", (root / "eval.json").string()})
                .code == kExitOk);
    return root;
  };
  const fs::path a = pipeline("a");
  const fs::path b = pipeline("b");
  for (const char* file : {"pre/checkpoint.mfck", "pre/train_log.jsonl", "grpo/checkpoint.mfck",
                           "grpo/reward_curve.jsonl", "sample/features.bin", "sample/sample.wav", "eval.json"}) {
    CAPTURE(file);
    CHECK(fs::exists(a / file));
    CHECK(slurp(a / file) == slurp(b / file));
  }
  const json eval = json::parse(slurp(a / "eval.json"));
  CHECK(eval["clip_count"] == 3);
  CHECK(eval["clips"].size() == 3);
  const json log_line = json::parse(slurp(a / "pre" / "train_log.jsonl").substr(0, slurp(a / "pre" / "train_log.jsonl").find('\n')));
  for (const char* key : {"step", "loss_total", "loss_diff", "loss_kd", "loss_cka", "lr", "lambda_cka"}) {
    CHECK(log_line.contains(key));
  }
  const json curve = json::parse(slurp(a / "grpo" / "reward_curve.jsonl"));
  for (const char* key : {"step", "mean_reward", "mean_r_con", "mean_r_mel", "mean_kl"}) CHECK(curve.contains(key));
  const json manifest = json::parse(slurp(a / "pre" / "manifest.json"));
  for (const char* key : {"command", "config", "seed", "build", "inputs", "outputs"}) CHECK(manifest.contains(key));
}

TEST_CASE("seed falls back to the environment") {
  const fs::path dir = scratch("envseed");
  setenv("MELODYFLOW_SEED", "42", 1);
  REQUIRE(cli({"corpus", "generate", "--n", "1", "--frames", "32", "--out", (dir / "a").string()}).code == kExitOk);
  unsetenv("MELODYFLOW_SEED");
  REQUIRE(cli({"corpus", "generate", "--n", "1", "--frames", "32", "--seed", "42", "--out", (dir / "b").string()})
              .code == kExitOk);
  CHECK(slurp(dir / "a" / "clip_00000" / "features.bin") == slurp(dir / "b" / "clip_00000" / "features.bin"));
}
