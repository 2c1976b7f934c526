#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rtcache/error.hpp"
#include "rtcache/trajectory.hpp"
#include "test_support.hpp"

using namespace rtcache;
using rtcache::testing::make_source;

namespace {

void expect_throws_code(auto&& fn, ErrorCode code) {
  try {
    fn();
    FAIL() << "expected an exception";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Independent piecewise-linear evaluator used as the resampling oracle.
double piecewise_linear(const std::vector<double>& ts, const std::vector<double>& ys, double t) {
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    if (t >= ts[i] - 1e-12 && t <= ts[i + 1] + 1e-12) {
      const double u = (t - ts[i]) / (ts[i + 1] - ts[i]);
      return (1.0 - u) * ys[i] + u * ys[i + 1];
    }
  }
  return ys.back();
}

}  // namespace

TEST(IntegrateVelocity, ConstantVelocity) {
  const auto d = integrate_velocity(std::vector<double>{0.2, 0.0, 0.0}, 0.1);
  EXPECT_EQ(d, (std::vector<double>{0.2 * 0.1, 0.0, 0.0}));
  EXPECT_NEAR(d[0], 0.02, 1e-15);
}

TEST(IntegrateVelocity, ZeroAndLinear) {
  EXPECT_EQ(integrate_velocity(std::vector<double>{0, 0, 0}, 0.1), (std::vector<double>{0, 0, 0}));
  const auto d = integrate_velocity(std::vector<double>{-0.1, 0.3, 0.05}, 0.1);
  EXPECT_DOUBLE_EQ(d[0], -0.01);
  EXPECT_DOUBLE_EQ(d[1], 0.03);
  EXPECT_DOUBLE_EQ(d[2], 0.005);
}

TEST(IntegrateVelocity, Linearity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v{u(rng), u(rng), u(rng)};
    const double a = 4.0;  // power of two keeps the scaling exact
    std::vector<double> av{a * v[0], a * v[1], a * v[2]};
    const auto lhs = integrate_velocity(av, 0.1);
    const auto rhs = integrate_velocity(v, 0.1);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(lhs[i], a * rhs[i]);
  }
}

TEST(IntegrateVelocity, RejectsBadInput) {
  expect_throws_code([] { integrate_velocity(std::vector<double>{NAN, 0, 0}, 0.1); },
                     ErrorCode::kValidation);
  expect_throws_code([] { integrate_velocity(std::vector<double>{0, 0, 0}, 0.0); },
                     ErrorCode::kValidation);
  expect_throws_code([] { integrate_velocity(std::vector<double>{0, 0, 0}, -1.0); },
                     ErrorCode::kValidation);
}

TEST(Resample, FiveHzMidpoint) {
  auto src = make_source(5.0, 2);
  src.steps[1].action[0] = 1.0;
  const UnifiedEpisode out = resample_episode(src);
  ASSERT_EQ(out.steps.size(), 3u);
  EXPECT_EQ(out.steps[0].action.dx(), 0.0);
  EXPECT_DOUBLE_EQ(out.steps[1].action.dx(), 0.5);
  EXPECT_EQ(out.steps[2].action.dx(), 1.0);
  EXPECT_NEAR(out.steps[1].timestamp, 0.1, 1e-12);
  EXPECT_NEAR(out.steps[2].timestamp, 0.2, 1e-12);
}

TEST(Resample, TwentyHzKeepsAlternateSamples) {
  auto src = make_source(20.0, 21);
  for (std::size_t i = 0; i < src.steps.size(); ++i) src.steps[i].action[1] = 0.37 * static_cast<double>(i * i);
  const UnifiedEpisode out = resample_episode(src);
  ASSERT_EQ(out.steps.size(), 11u);
  for (std::size_t k = 0; k < out.steps.size(); ++k) {
    EXPECT_EQ(out.steps[k].action.dy(), src.steps[2 * k].action[1]);
    EXPECT_EQ(out.steps[k].observation_ref, src.steps[2 * k].observation_ref);
  }
}

TEST(Resample, TwelvePointFiveHzMatchesPiecewiseLinearOracle) {
  auto src = make_source(12.5, 8);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> ts;
  std::vector<std::vector<double>> channel(6);
  for (auto& s : src.steps) {
    ts.push_back(s.timestamp);
    for (int c = 0; c < 6; ++c) {
      s.action[c] = u(rng);
      channel[c].push_back(s.action[c]);
    }
  }
  const UnifiedEpisode out = resample_episode(src);
  // 0.56 s span: grid points 0.0 .. 0.5
  ASSERT_EQ(out.steps.size(), 6u);
  for (const auto& step : out.steps) {
    for (int c = 0; c < 6; ++c) {
      EXPECT_NEAR(step.action.v[c], piecewise_linear(ts, channel[c], step.timestamp), 1e-12);
    }
  }
}

TEST(Resample, IdentityAtOwnFrequency) {
  auto src = make_source(10.0, 30);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& s : src.steps) {
    for (int c = 0; c < 6; ++c) s.action[c] = u(rng);
    s.action[6] = 0.5 * (1 + u(rng));
  }
  const UnifiedEpisode out = resample_episode(src);
  ASSERT_EQ(out.steps.size(), src.steps.size());
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    for (int c = 0; c < 7; ++c) EXPECT_NEAR(out.steps[i].action.v[c], src.steps[i].action[c], 1e-12);
  }
}

TEST(Resample, UpsampleThenDecimateIsExact) {
  auto src = make_source(5.0, 12);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& s : src.steps) {
    for (int c = 0; c < 6; ++c) s.action[c] = u(rng);
  }
  const UnifiedEpisode up = resample_episode(src);
  ASSERT_EQ(up.steps.size(), 2 * src.steps.size() - 1);
  for (std::size_t i = 0; i < src.steps.size(); ++i) {
    for (int c = 0; c < 7; ++c) EXPECT_EQ(up.steps[2 * i].action.v[c], src.steps[i].action[c]);
  }
}

TEST(Resample, GripUsesZeroOrderHold) {
  auto src = make_source(5.0, 3);
  src.steps[0].action[6] = 0.0;
  src.steps[1].action[6] = 1.0;
  src.steps[2].action[6] = 1.0;
  const UnifiedEpisode out = resample_episode(src);
  ASSERT_EQ(out.steps.size(), 5u);
  EXPECT_EQ(out.steps[1].action.grip(), 0.0);  // not 0.5
  EXPECT_EQ(out.steps[2].action.grip(), 1.0);
  EXPECT_EQ(out.steps[1].observation_ref, "obs0");
}

TEST(Resample, DropsTrailingRemainder) {
  auto src = make_source(10.0, 2);
  src.steps[1].timestamp = 0.15;
  const UnifiedEpisode out = resample_episode(src);
  EXPECT_EQ(out.steps.size(), 2u);
}

TEST(Resample, RejectsShortAndNonMonotone) {
  expect_throws_code([] { resample_episode(make_source(10.0, 1)); }, ErrorCode::kValidation);
  auto bad = make_source(10.0, 4);
  bad.steps[2].timestamp = bad.steps[1].timestamp;
  expect_throws_code([&] { resample_episode(bad); }, ErrorCode::kValidation);
}

TEST(Resample, StepSpacingInvariant) {
  for (double hz : {3.0, 5.0, 7.5, 10.0, 12.5, 15.0, 20.0, 30.0}) {
    auto src = make_source(hz, 57);
    const UnifiedEpisode out = resample_episode(src);
    EXPECT_EQ(check_unified(out), std::nullopt) << hz;
  }
}

TEST(VelocityToPosition, TenHzConstant) {
  auto src = make_source(10.0, 3, ActionSpace::kCartesianVelocity);
  for (auto& s : src.steps) s.action[0] = 0.2;
  const SourceEpisode out = velocity_to_position(src);
  EXPECT_EQ(out.action_space, ActionSpace::kCartesianPosition);
  for (const auto& s : out.steps) EXPECT_NEAR(s.action[0], 0.02, 1e-15);
}

TEST(VelocityToPosition, TwentyHzUsesOwnPeriod) {
  auto src = make_source(20.0, 4, ActionSpace::kCartesianVelocity);
  for (auto& s : src.steps) s.action[0] = 0.2;
  for (const auto& s : velocity_to_position(src).steps) EXPECT_NEAR(s.action[0], 0.01, 1e-15);
}

TEST(VelocityToPosition, MatchesRectangularSumOracle) {
  auto src = make_source(15.0, 40, ActionSpace::kCartesianVelocity);
  std::mt19937_64 rng(44);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  double integral[6] = {};
  for (auto& s : src.steps) {
    for (int c = 0; c < 6; ++c) {
      s.action[c] = u(rng);
      integral[c] += s.action[c] / 15.0;
    }
    s.action[6] = 1.0;
  }
  const SourceEpisode out = velocity_to_position(src);
  double total[6] = {};
  for (std::size_t i = 0; i < out.steps.size(); ++i) {
    for (int c = 0; c < 6; ++c) {
      EXPECT_NEAR(out.steps[i].action[c], src.steps[i].action[c] * (1.0 / 15.0), 1e-15);
      total[c] += out.steps[i].action[c];
    }
    EXPECT_EQ(out.steps[i].action[6], 1.0);
  }
  for (int c = 0; c < 6; ++c) EXPECT_NEAR(total[c], integral[c], 1e-9);
}

TEST(VelocityToPosition, RejectsBadFrequencyOrSpace) {
  auto src = make_source(10.0, 3, ActionSpace::kCartesianVelocity);
  src.frequency_hz = 0.0;
  expect_throws_code([&] { velocity_to_position(src); }, ErrorCode::kValidation);
  src.frequency_hz = -5.0;
  expect_throws_code([&] { velocity_to_position(src); }, ErrorCode::kValidation);
  expect_throws_code([] { velocity_to_position(make_source(10.0, 3)); }, ErrorCode::kValidation);
}

TEST(FilterEpisode, Reasons) {
  EXPECT_EQ(filter_episode(make_source(10, 5, ActionSpace::kJoint)).reason, RejectReason::kJointSpaceOnly);
  EXPECT_TRUE(filter_episode(make_source(10, 5)).accepted);
  EXPECT_EQ(filter_episode(make_source(10, 5, ActionSpace::kCartesianPosition, 6)).reason,
            RejectReason::kBadActionWidth);
  EXPECT_EQ(filter_episode(make_source(10, 1)).reason, RejectReason::kTooShort);
  auto bad = make_source(10, 4);
  std::swap(bad.steps[1].timestamp, bad.steps[2].timestamp);
  EXPECT_EQ(filter_episode(bad).reason, RejectReason::kNonMonotoneTime);
  auto nan = make_source(10, 4);
  nan.steps[2].action[3] = NAN;
  EXPECT_EQ(filter_episode(nan).reason, RejectReason::kParseError);
}

TEST(RejectReason, RoundTrip) {
  for (auto r : {RejectReason::kJointSpaceOnly, RejectReason::kBadActionWidth, RejectReason::kTooShort,
                 RejectReason::kNonMonotoneTime, RejectReason::kParseError}) {
    EXPECT_EQ(parse_reject_reason(to_string(r)), r);
  }
  EXPECT_EQ(to_string(RejectReason::kJointSpaceOnly), "joint_space_only");
  EXPECT_EQ(to_string(RejectReason::kBadActionWidth), "bad_action_width");
}

TEST(UnifyEpisode, VelocitySourcesIntegrateOverUnifiedPeriod) {
  for (double hz : {10.0, 20.0, 30.0}) {
    auto src = make_source(hz, static_cast<std::size_t>(hz) + 1, ActionSpace::kCartesianVelocity);
    for (auto& s : src.steps) s.action[0] = 0.2;
    const UnifyOutcome out = unify_episode(src);
    ASSERT_TRUE(out.episode) << hz;
    EXPECT_EQ(out.episode->steps.size(), 11u);
    for (const auto& s : out.episode->steps) EXPECT_NEAR(s.action.dx(), 0.02, 1e-12) << hz;
  }
}

TEST(UnifyEpisode, ClampsGripAndRejects) {
  auto src = make_source(10.0, 3);
  src.steps[1].action[6] = 1.7;
  src.steps[2].action[6] = -0.3;
  const UnifyOutcome ok = unify_episode(src);
  ASSERT_TRUE(ok.episode);
  EXPECT_EQ(ok.episode->steps[1].action.grip(), 1.0);
  EXPECT_EQ(ok.episode->steps[2].action.grip(), 0.0);
  EXPECT_EQ(unify_episode(make_source(10, 3, ActionSpace::kJoint)).reason, RejectReason::kJointSpaceOnly);
}

TEST(CheckUnified, FlagsBadSpacing) {
  UnifiedEpisode ep = resample_episode(make_source(10.0, 5));
  EXPECT_EQ(check_unified(ep), std::nullopt);
  ep.steps[3].timestamp += 0.01;
  EXPECT_NE(check_unified(ep), std::nullopt);
}
