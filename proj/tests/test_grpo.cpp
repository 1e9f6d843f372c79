#include <doctest.h>

#include "melodyflow/errors.hpp"
#include "melodyflow/grpo.hpp"
#include "oracles.hpp"

using namespace melodyflow;

namespace {

struct Fixture {
  ModelConfig model;
  CorpusConfig corpus;
  std::vector<GroundTruthClip> clips;
  ParameterSet params;
  GrpoConfig config;

  Fixture() {
    model.layers = 1;
    model.hidden = 16;
    model.heads = 2;
    model.extractor_hidden = 16;
    corpus.frames = 32;
    clips = generate_corpus(4, corpus, 31);
    params = init_parameters(model, 32);
    config.group_size = 4;
    config.sampler_steps = 6;
    config.prompts_per_step = 1;
  }

  ScoredGroup group(std::uint64_t seed, const ParameterSet& p) const {
    return collect_group(clips[0], config, PolicySnapshot(p, SnapshotTag::kOld), model, corpus, seed);
  }
};

// Random unit direction over the full parameter set.
Gradients random_direction(const ParameterSet& p, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  Gradients d = p.zeros_like();
  for (auto& g : d) g = standard_normal(g.rows(), g.cols(), rng);
  const double n = global_norm(d);
  for (auto& g : d) g /= n;
  return d;
}

ParameterSet moved(const ParameterSet& p, const Gradients& d, double step) {
  ParameterSet out = p;
  for (std::size_t i = 0; i < p.size(); ++i) out.value(i) += step * d[i];
  return out;
}

double distance(const ParameterSet& a, const ParameterSet& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.value(i) - b.value(i)).squaredNorm();
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("collected groups are normalised per prompt") {
  Fixture f;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    f.config.group_size = 8;
    const ScoredGroup g = f.group(seed, f.params);
    REQUIRE(g.members.size() == 8);
    double sum = 0;
    for (const auto& m : g.members) {
      sum += m.reward.advantage;
      CHECK(m.rollout.stochastic_step >= 1);
      CHECK(m.rollout.states.front() == g.members[0].rollout.states.front());
    }
    CHECK(std::abs(sum / 8) <= 1e-9);
  }
}

TEST_CASE("degenerate groups get zero advantages") {
  Fixture f;
  SUBCASE("forced identical seeds") {
    const ScoredGroup g = collect_group(f.clips[0], f.config, PolicySnapshot(f.params, SnapshotTag::kOld), f.model,
                                        f.corpus, 9, {5, 5});
    CHECK(g.members[0].reward.total == g.members[1].reward.total);
    CHECK(g.members[0].reward.advantage == 0.0);
    CHECK(g.members[1].reward.advantage == 0.0);
  }
  SUBCASE("noise level zero") {
    f.config.noise_level_a = 0.0;
    const ScoredGroup g = f.group(4, f.params);
    for (const auto& m : g.members) {
      CHECK(m.rollout.sample() == g.members[0].rollout.sample());
      CHECK(m.reward.advantage == 0.0);
    }
    CHECK_THROWS_AS(transition_log_prob(g.context, g.members[0].rollout, f.params, f.model), ContractError);
  }
}

TEST_CASE("ratio is one and KL zero at identical parameters") {
  Fixture f;
  const ScoredGroup g = f.group(5, f.params);
  const ParameterSet other = moved(f.params, random_direction(f.params, 1), 0.05);
  for (const auto& m : g.members) {
    CHECK(policy_ratio(g.context, m.rollout, f.params, f.params, f.model) == 1.0);
    CHECK(policy_ratio(g.context, m.rollout, other, other, f.model) == 1.0);
    CHECK(kl_penalty(g.context, m.rollout, f.params, f.params, f.model) == 0.0);
    CHECK(policy_ratio(g.context, m.rollout, other, f.params, f.model) > 0.0);
    CHECK(kl_penalty(g.context, m.rollout, other, f.params, f.model) > 0.0);
  }
}

TEST_CASE("the stored log-probability is the log-density under the generating parameters") {
  Fixture f;
  const ScoredGroup g = f.group(6, f.params);
  for (const auto& m : g.members) {
    CHECK(transition_log_prob(g.context, m.rollout, f.params, f.model) ==
          doctest::Approx(m.rollout.log_prob).epsilon(1e-10));
  }
}

TEST_CASE("Gaussian KL closed form") {
  Rng rng = make_rng(7);
  const Matrix a = standard_normal(5, 3, rng), b = standard_normal(5, 3, rng);
  for (double s : {0.1, 0.5, 2.0}) {
    Tape tape;
    const double kl = gaussian_kl(tape.constant(a), b, s).scalar();
    CHECK(kl == doctest::Approx((a - b).squaredNorm() / (2 * s * s)).epsilon(1e-12));
    // Same value from the generic multivariate Gaussian formula with Sigma = s^2 I.
    const double n = static_cast<double>(a.size());
    const double generic = 0.5 * (n + (a - b).squaredNorm() / (s * s) - n);
    CHECK(kl == doctest::Approx(generic).epsilon(1e-12));
  }
}

TEST_CASE("KL penalty grows along a fixed direction") {
  Fixture f;
  const ScoredGroup g = f.group(8, f.params);
  const Gradients d = random_direction(f.params, 2);
  for (const auto& m : g.members) {
    double prev = 0.0;
    for (double step : {0.01, 0.02, 0.04, 0.08, 0.16}) {
      const double kl = kl_penalty(g.context, m.rollout, moved(f.params, d, step), f.params, f.model);
      CHECK(kl > prev);
      prev = kl;
    }
  }
}

TEST_CASE("log-ratio follows the first-order Taylor expansion") {
  Fixture f;
  const ScoredGroup g = f.group(9, f.params);
  const Gradients d = random_direction(f.params, 3);
  for (const auto& m : g.members) {
    Gradients grads = f.params.zeros_like();
    {
      Tape tape(&f.params);
      const Var mean = transition_mean(tape, g.context, m.rollout, f.model);
      tape.backward(gaussian_log_density(mean, m.rollout.transition_output(), m.rollout.transition_std()), grads);
    }
    double directional = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) directional += grads[i].cwiseProduct(d[i]).sum();
    std::vector<double> err;
    for (double delta : {1e-2, 1e-3}) {
      const double log_ratio = std::log(policy_ratio(g.context, m.rollout, moved(f.params, d, delta), f.params, f.model));
      err.push_back(std::abs(log_ratio - delta * directional));
    }
    // Quadratic remainder: a 10x smaller step shrinks the error by about 100x.
    CHECK(err[1] < err[0] / 30);
  }
}

TEST_CASE("objective gradient at theta_old equals the score-function estimate") {
  Fixture f;
  f.config.kl_weight = 0.0;
  std::vector<ScoredGroup> groups{f.group(10, f.params), collect_group(f.clips[1], f.config,
                                                                       PolicySnapshot(f.params, SnapshotTag::kOld),
                                                                       f.model, f.corpus, 11)};
  const PolicySnapshot snap(f.params, SnapshotTag::kOld);
  for (auto clip : {std::optional<double>(0.2), std::optional<double>()}) {
    f.config.ratio_clip = clip;
    Gradients grads = f.params.zeros_like();
    const GrpoMetrics metrics = grpo_objective(groups, f.params, snap, snap, f.model, f.config, &grads);
    CHECK(metrics.mean_ratio == 1.0);
    CHECK(metrics.mean_kl == 0.0);
    CHECK(std::abs(metrics.objective) <= 1e-9);

    Gradients expected = f.params.zeros_like();
    const double n = static_cast<double>(metrics.members);
    for (const auto& group : groups) {
      for (const auto& m : group.members) {
        Gradients score = f.params.zeros_like();
        Tape tape(&f.params);
        const Var mean = transition_mean(tape, group.context, m.rollout, f.model);
        tape.backward(gaussian_log_density(mean, m.rollout.transition_output(), m.rollout.transition_std()), score);
        for (std::size_t i = 0; i < score.size(); ++i) expected[i] += m.reward.advantage / n * score[i];
      }
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const double scale = std::max(expected[i].cwiseAbs().maxCoeff(), 1e-12);
      CAPTURE(f.params.name(i));
      CHECK((grads[i] - expected[i]).cwiseAbs().maxCoeff() <= 1e-5 * scale);
    }
  }
}

TEST_CASE("clipped surrogate") {
  Tape tape;
  auto value = [&](double logp_new, double logp_old, double adv, std::optional<double> clip) {
    return clipped_surrogate(tape.scalar(logp_new), logp_old, adv, clip).scalar();
  };
  CHECK(value(0.0, 0.0, 1.5, 0.2) == doctest::Approx(1.5));
  CHECK(value(std::log(2.0), 0.0, 1.0, 0.2) == doctest::Approx(1.2));
  CHECK(value(std::log(2.0), 0.0, -1.0, 0.2) == doctest::Approx(-2.0));
  CHECK(value(std::log(0.5), 0.0, -1.0, 0.2) == doctest::Approx(-0.8));
  CHECK(value(std::log(0.5), 0.0, 1.0, 0.2) == doctest::Approx(0.5));
  CHECK(value(std::log(2.0), 0.0, 1.0, std::nullopt) == doctest::Approx(2.0));
}

TEST_CASE("zero advantages and no KL leave the parameters unchanged") {
  Fixture f;
  f.config.kl_weight = 0.0;
  f.config.learning_rate = 1e-2;
  f.config.noise_level_a = 0.7;
  ScoredGroup g = f.group(12, f.params);
  for (auto& m : g.members) m.reward.advantage = 0.0;
  ParameterSet params = f.params;
  AdamState adam;
  const PolicySnapshot snap(f.params, SnapshotTag::kOld);
  const GrpoMetrics metrics = grpo_step({g}, params, adam, snap, snap, f.model, f.config);
  CHECK_FALSE(metrics.skipped);
  CHECK(params == f.params);
}

TEST_CASE("Gaussian bandit improves under the group objective") {
  // Scalar policy a ~ N(theta, 0.5^2), reward -(a - 2)^2, trained with the
  // same surrogate, advantage and optimizer as the sampler policy.
  ParameterSet p;
  p.add("theta", Matrix::Zero(1, 1));
  AdamState adam;
  AdamConfig ac;
  Rng rng = make_rng(13);
  const double std = 0.5;
  std::vector<double> curve;
  for (int step = 0; step < 200; ++step) {
    const double theta_old = p.value(0)(0, 0);
    std::vector<double> actions, rewards;
    for (int i = 0; i < 8; ++i) {
      actions.push_back(theta_old + std * standard_normal(1, 1, rng)(0, 0));
      rewards.push_back(-(actions.back() - 2.0) * (actions.back() - 2.0));
    }
    const auto adv = group_advantage(rewards);
    Gradients grads = p.zeros_like();
    double mean_reward = 0;
    for (int i = 0; i < 8; ++i) {
      const Matrix a = Matrix::Constant(1, 1, actions[i]);
      const double logp_old = gaussian_log_density(a, Matrix::Constant(1, 1, theta_old), std);
      Tape tape(&p);
      const Var logp = gaussian_log_density(tape.parameter("theta"), a, std);
      tape.backward(ad::scale(clipped_surrogate(logp, logp_old, adv[i], 0.2), 1.0 / 8), grads);
      mean_reward += rewards[i] / 8;
    }
    for (auto& g : grads) g = -g;
    adamw_step(p, grads, adam, ac, 0.02);
    curve.push_back(mean_reward);
  }
  double first = 0, last = 0;
  for (int i = 0; i < 50; ++i) {
    first += curve[i] / 50;
    last += curve[150 + i] / 50;
  }
  CHECK(last > first);
  CHECK(std::abs(p.value(0)(0, 0) - 2.0) < 0.3);
}

TEST_CASE("post-training with zero learning rate keeps the checkpoint") {
  Fixture f;
  f.config.learning_rate = 0.0;
  f.config.steps = 2;
  Checkpoint ck{f.model, f.params, 0, {}, nlohmann::json::object()};
  std::vector<CurvePoint> curve;
  post_train(ck, f.clips, f.corpus, f.config, [&](const CurvePoint& p) { curve.push_back(p); });
  CHECK(ck.params == f.params);
  CHECK(curve.size() == 2);
  CHECK(ck.meta["grpo_step"] == 2);
}

TEST_CASE("a heavy KL weight keeps the policy near the reference") {
  Fixture f;
  f.config.steps = 8;
  f.config.learning_rate = 1e-3;
  auto run = [&](double beta) {
    GrpoConfig c = f.config;
    c.kl_weight = beta;
    Checkpoint ck{f.model, f.params, 0, {}, nlohmann::json::object()};
    post_train(ck, f.clips, f.corpus, c);
    return distance(ck.params, f.params);
  };
  const double heavy = run(1e3);
  const double light = run(0.04);
  MESSAGE("distance to reference: beta 1e3 " << heavy << ", beta 0.04 " << light);
  CHECK(heavy < light);
}

TEST_CASE("post-training is deterministic and validates its config") {
  Fixture f;
  f.config.steps = 2;
  f.config.learning_rate = 1e-3;
  Checkpoint a{f.model, f.params, 0, {}, nlohmann::json::object()};
  Checkpoint b = a;
  post_train(a, f.clips, f.corpus, f.config);
  post_train(b, f.clips, f.corpus, f.config);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == f.params);

  GrpoConfig bad = f.config;
  bad.group_size = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = f.config;
  bad.kl_weight = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = f.config;
  bad.noise_level_a = 0.0;
  CHECK_THROWS_AS(post_train(a, f.clips, f.corpus, bad), ConfigError);
}
