#include "rtcache/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "rtcache/error.hpp"

namespace rtcache {

namespace {

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double x) { return std::isfinite(x); });
}

bool timestamps_increasing(const std::vector<RawStep>& steps) {
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (!(steps[i].timestamp > steps[i - 1].timestamp)) return false;
    if (steps[i].step_id <= steps[i - 1].step_id) return false;
  }
  return true;
}

double clamp_grip(double g) { return std::clamp(g, 0.0, 1.0); }

}  // namespace

Action7 Action7::from(std::span<const double> values) {
  if (values.size() != kWidth) {
    fail(ErrorCode::kValidation,
         "action must have 7 components, got " + std::to_string(values.size()));
  }
  Action7 a;
  std::copy(values.begin(), values.end(), a.v.begin());
  return a;
}

bool Action7::valid() const {
  return all_finite(v) && v[kGrip] >= 0.0 && v[kGrip] <= 1.0;
}

std::string_view to_string(ActionSpace space) {
  switch (space) {
    case ActionSpace::kCartesianPosition: return "cartesian_position";
    case ActionSpace::kCartesianVelocity: return "cartesian_velocity";
    case ActionSpace::kJoint: return "joint";
  }
  return "unknown";
}

std::optional<ActionSpace> parse_action_space(std::string_view text) {
  if (text == "cartesian_position") return ActionSpace::kCartesianPosition;
  if (text == "cartesian_velocity") return ActionSpace::kCartesianVelocity;
  if (text == "joint") return ActionSpace::kJoint;
  return std::nullopt;
}

std::string_view to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::kJointSpaceOnly: return "joint_space_only";
    case RejectReason::kBadActionWidth: return "bad_action_width";
    case RejectReason::kTooShort: return "too_short";
    case RejectReason::kNonMonotoneTime: return "non_monotone_time";
    case RejectReason::kParseError: return "parse_error";
  }
  return "unknown";
}

std::optional<RejectReason> parse_reject_reason(std::string_view text) {
  for (auto r : {RejectReason::kJointSpaceOnly, RejectReason::kBadActionWidth,
                 RejectReason::kTooShort, RejectReason::kNonMonotoneTime,
                 RejectReason::kParseError}) {
    if (to_string(r) == text) return r;
  }
  return std::nullopt;
}

std::vector<double> integrate_velocity(std::span<const double> velocity, double dt) {
  if (!std::isfinite(dt) || dt <= 0.0) {
    fail(ErrorCode::kValidation, "integration step must be positive and finite");
  }
  if (!all_finite(velocity)) {
    fail(ErrorCode::kValidation, "velocity has non-finite components");
  }
  std::vector<double> out(velocity.size());
  for (std::size_t i = 0; i < velocity.size(); ++i) out[i] = velocity[i] * dt;
  return out;
}

UnifiedEpisode resample_episode(const SourceEpisode& src, double target_hz) {
  if (!(target_hz > 0.0) || !std::isfinite(target_hz)) {
    fail(ErrorCode::kValidation, "target rate must be positive");
  }
  if (src.action_space == ActionSpace::kJoint) {
    fail(ErrorCode::kValidation, "joint-space episodes cannot be resampled");
  }
  const auto& steps = src.steps;
  if (steps.size() < 2) {
    fail(ErrorCode::kValidation, "resampling needs at least two steps");
  }
  for (const auto& s : steps) {
    if (s.action.size() != Action7::kWidth || !all_finite(s.action)) {
      fail(ErrorCode::kValidation, "resampling needs finite 7-D actions");
    }
  }
  if (!timestamps_increasing(steps)) {
    fail(ErrorCode::kValidation, "timestamps must be strictly increasing");
  }

  const double t0 = steps.front().timestamp;
  const double span = steps.back().timestamp - t0;
  const auto count = static_cast<std::size_t>(std::floor(span * target_hz + kTimeTolerance)) + 1;

  UnifiedEpisode out;
  out.dataset_id = src.dataset_id;
  out.episode_id = src.episode_id;
  out.steps.reserve(count);

  std::size_t j = 0;  // index of the nearest preceding sample
  for (std::size_t k = 0; k < count; ++k) {
    const double t = t0 + static_cast<double>(k) / target_hz;
    while (j + 1 < steps.size() && steps[j + 1].timestamp <= t + kTimeTolerance) ++j;

    const RawStep& lo = steps[j];
    Action7 a;
    if (std::abs(t - lo.timestamp) <= kTimeTolerance || j + 1 == steps.size()) {
      std::copy(lo.action.begin(), lo.action.end(), a.v.begin());
    } else {
      const RawStep& hi = steps[j + 1];
      const double u = (t - lo.timestamp) / (hi.timestamp - lo.timestamp);
      for (std::size_t c = 0; c < Action7::kGrip; ++c) {
        a.v[c] = lo.action[c] + u * (hi.action[c] - lo.action[c]);
      }
      a.v[Action7::kGrip] = lo.action[Action7::kGrip];
    }
    a.v[Action7::kGrip] = clamp_grip(a.v[Action7::kGrip]);

    TrajectoryStep step;
    step.episode_id = src.episode_id;
    step.step_id = k;
    step.timestamp = t;
    step.action = a;
    step.observation_ref = lo.observation_ref;
    out.steps.push_back(std::move(step));
  }
  return out;
}

SourceEpisode velocity_to_position(const SourceEpisode& src) {
  if (src.action_space != ActionSpace::kCartesianVelocity) {
    fail(ErrorCode::kValidation, "episode is not in cartesian velocity form");
  }
  if (!(src.frequency_hz > 0.0) || !std::isfinite(src.frequency_hz)) {
    fail(ErrorCode::kValidation, "source frequency must be positive");
  }
  const double dt = 1.0 / src.frequency_hz;

  SourceEpisode out = src;
  out.action_space = ActionSpace::kCartesianPosition;
  out.units = "m";
  for (auto& step : out.steps) {
    if (step.action.size() < Action7::kGrip) {
      fail(ErrorCode::kValidation, "velocity step has fewer than 6 channels");
    }
    auto moved = integrate_velocity(std::span(step.action).first(Action7::kGrip), dt);
    std::copy(moved.begin(), moved.end(), step.action.begin());
  }
  return out;
}

FilterResult filter_episode(const SourceEpisode& src) {
  if (src.action_space == ActionSpace::kJoint) {
    return FilterResult::reject(RejectReason::kJointSpaceOnly);
  }
  for (const auto& s : src.steps) {
    if (s.action.size() != Action7::kWidth) {
      return FilterResult::reject(RejectReason::kBadActionWidth);
    }
    if (!all_finite(s.action)) return FilterResult::reject(RejectReason::kParseError);
  }
  if (src.steps.size() < 2) return FilterResult::reject(RejectReason::kTooShort);
  if (!(src.frequency_hz > 0.0)) return FilterResult::reject(RejectReason::kParseError);
  if (!timestamps_increasing(src.steps)) {
    return FilterResult::reject(RejectReason::kNonMonotoneTime);
  }
  return FilterResult::accept();
}

UnifyOutcome unify_episode(const SourceEpisode& src) {
  const FilterResult verdict = filter_episode(src);
  if (!verdict.accepted) return {std::nullopt, verdict.reason};

  if (src.action_space == ActionSpace::kCartesianPosition) {
    return {resample_episode(src, kUnifiedHz), std::nullopt};
  }

  // Velocity sources: bring the velocities onto the unified grid first, then
  // integrate each one over the unified period.
  UnifiedEpisode grid = resample_episode(src, kUnifiedHz);
  SourceEpisode as_velocity;
  as_velocity.dataset_id = grid.dataset_id;
  as_velocity.episode_id = grid.episode_id;
  as_velocity.frequency_hz = kUnifiedHz;
  as_velocity.action_space = ActionSpace::kCartesianVelocity;
  as_velocity.units = src.units;
  as_velocity.steps.reserve(grid.steps.size());
  for (const auto& s : grid.steps) {
    as_velocity.steps.push_back(RawStep{static_cast<std::int64_t>(s.step_id), s.timestamp,
                                        {s.action.v.begin(), s.action.v.end()},
                                        s.observation_ref});
  }
  const SourceEpisode positions = velocity_to_position(as_velocity);
  for (std::size_t i = 0; i < grid.steps.size(); ++i) {
    grid.steps[i].action = Action7::from(positions.steps[i].action);
  }
  return {std::move(grid), std::nullopt};
}

std::optional<std::string> check_unified(const UnifiedEpisode& episode, double hz) {
  const double period = 1.0 / hz;
  for (std::size_t i = 0; i < episode.steps.size(); ++i) {
    const auto& s = episode.steps[i];
    if (!s.action.valid()) {
      std::ostringstream os;
      os << "step " << i << " has an invalid action";
      return os.str();
    }
    if (s.episode_id != episode.episode_id) return "step episode id mismatch";
    if (i == 0) continue;
    const auto& prev = episode.steps[i - 1];
    if (s.step_id <= prev.step_id) return "step ids not strictly increasing";
    if (std::abs((s.timestamp - prev.timestamp) - period) > kTimeTolerance) {
      std::ostringstream os;
      os.precision(17);
      os << "step spacing " << (s.timestamp - prev.timestamp) << " at step " << i;
      return os.str();
    }
  }
  return std::nullopt;
}

}  // namespace rtcache
