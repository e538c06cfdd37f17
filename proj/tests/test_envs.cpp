#include "cvflow/envs.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace cvflow;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

// Moves straight toward the target as fast as A allows.
Policy ball_greedy(int k) {
  return [k](const Vector& s, Rng&) {
    Vector a = ((s.tail(k) - s.head(k)) / BallEnv::kGain).cwiseMax(-1.0).cwiseMin(1.0);
    return Decision{a, a, 0.0, false};
  };
}

}  // namespace

TEST(Envs, MakeEnvIds) {
  EXPECT_EQ(make_env("ball1d")->id(), "ball1d");
  EXPECT_EQ(make_env("ball3d")->action_dim(), 3);
  EXPECT_EQ(make_env("pointmass2d")->id(), "pointmass2d:R+L2");
  EXPECT_EQ(make_env("pointmass2d:R+D")->action_constraint()->id(), "R+D");
  EXPECT_THROW(make_env("cartpole"), UnknownEnvironment);
}

TEST(Envs, BallResetInUnitBox) {
  Rng rng(1);
  for (const char* id : {"ball1d", "ball3d"}) {
    auto env = make_env(id);
    for (int i = 0; i < 100; ++i) {
      const Vector s = env->reset(rng);
      EXPECT_TRUE((s.array() >= 0).all() && (s.array() <= 1).all());
    }
  }
}

TEST(Envs, BallViolationTerminates) {
  BallEnv env(1);
  Rng rng(2);
  env.reset(rng);
  // Force pos = 1.0 by stepping from a known state via dynamics.
  const Vector s = vec({1.0, 0.5});
  const Vector next = env.dynamics(s, vec({1.0}));
  EXPECT_NEAR(next(0), 1.2, 1e-15);
  EXPECT_NEAR(env.violation(s, vec({1.0}), next), 0.2, 1e-12);

  // Drive the real episode into the wall.
  env.reset(rng);
  StepResult r;
  int steps = 0;
  do {
    r = env.step(vec({1.0}));
    ++steps;
  } while (!r.done);
  EXPECT_TRUE(r.terminal);
  EXPECT_GT(r.violation, 0.0);
  EXPECT_GT(r.state(0), 1.0);
  EXPECT_LE(steps, 6);
}

TEST(Envs, StepRejectsActionsOutsideA) {
  BallEnv env(1);
  Rng rng(3);
  EXPECT_THROW(env.step(vec({0.0})), std::logic_error);
  env.reset(rng);
  EXPECT_THROW(env.step(vec({1.5})), DomainError);
  EXPECT_THROW(env.step(vec({0.1, 0.1})), ShapeError);
}

TEST(Envs, PointMassZeroActionsGiveStaticReturn) {
  auto env = make_env("pointmass2d");
  Rng rng(4);
  const Vector s0 = env->reset(rng);
  double ret = 0.0;
  StepResult r;
  int steps = 0;
  do {
    r = env->step(Vector::Zero(2));
    ret += r.reward;
    ++steps;
  } while (!r.done);
  EXPECT_EQ(steps, 200);
  EXPECT_FALSE(r.terminal);
  EXPECT_NEAR(ret, -200.0 * (s0.head(2) - s0.tail(2)).norm(), 1e-9);
}

TEST(Envs, PointMassViolationUsesActionConstraint) {
  auto env = make_env("pointmass2d:R+L2");
  Rng rng(5);
  env->reset(rng);
  EXPECT_EQ(env->step(vec({0.1, 0.1})).violation, 0.0);
  EXPECT_NEAR(env->step(vec({0.3, 0.4})).violation, 0.25 - 0.05, 1e-12);
  EXPECT_FALSE(env->terminate_on_violation);
}

TEST(Envs, ResetIsDeterministic) {
  auto a = make_env("ball3d"), b = make_env("ball3d");
  Rng r1(6), r2(6);
  EXPECT_EQ(a->reset(r1), b->reset(r2));
}

TEST(Rollout, RandomPolicyStepCountAndBookkeeping) {
  BallEnv env(1);
  Rng rng(7);
  Rollout r = rollout(env, random_policy(1), 100, rng);
  EXPECT_EQ(r.transitions.size(), 100u);
  double total = 0.0;
  for (const auto& t : r.transitions) total += t.reward;
  double episodes = 0.0;
  for (double x : r.stats.episode_returns) episodes += x;
  // Completed-episode returns plus the unfinished tail equal the reward sum.
  double tail = 0.0;
  for (std::size_t i = r.records.size(); i-- > 0 && !r.records[i].done;) tail += r.records[i].reward;
  EXPECT_NEAR(total, episodes + tail, 1e-9);
  EXPECT_EQ(r.stats.violation_episodes, r.stats.post_violations);
}

TEST(Rollout, StopOnDoneEndsEarly) {
  BallEnv env(1);
  Rng rng(8);
  Rollout r = rollout(env, random_policy(1), 1000, rng, true);
  EXPECT_LE(r.transitions.size(), 50u);
  EXPECT_TRUE(r.records.back().done);
}

TEST(Rollout, ZeroLengthIsEmpty) {
  BallEnv env(1);
  Rng rng(9);
  EXPECT_TRUE(rollout(env, random_policy(1), 0, rng).transitions.empty());
}

TEST(Rollout, GreedyBeatsRandomOnBall) {
  BallEnv env(1);
  Rng rng(10);
  Rollout greedy = rollout(env, ball_greedy(1), 5000, rng);
  Rng rng2(10);
  Rollout random = rollout(env, random_policy(1), 5000, rng2);
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  EXPECT_EQ(greedy.stats.violation_episodes, 0);
  EXPECT_GT(mean(greedy.stats.episode_returns), mean(random.stats.episode_returns));
}

TEST(Rollout, FeasibleBallActionsStayInSafeRegion) {
  BallEnv env(3);
  Rng rng(11);
  Rollout r = rollout(env, ball_greedy(3), 2000, rng);
  for (const auto& t : r.transitions) {
    EXPECT_TRUE((t.next_state.head(3).array() >= 0).all() && (t.next_state.head(3).array() <= 1).all());
  }
  EXPECT_EQ(r.stats.post_violations, 0);
}

TEST(Rollout, CsvHasHeaderAndOneRowPerStep) {
  BallEnv env(1);
  Rng rng(12);
  Rollout r = rollout(env, random_policy(1), 30, rng);
  const auto path = (std::filesystem::temp_directory_path() / "cvflow_rollout.csv").string();
  write_rollout_csv(path, r.records, 2, 1);
  const csv::Table t = csv::read(path);
  EXPECT_EQ(t.header, (std::vector<std::string>{"step", "s_0", "s_1", "a_0", "r", "cv_pre", "cv_post", "done"}));
  EXPECT_EQ(t.rows.size(), 30u);
  std::filesystem::remove(path);
}
