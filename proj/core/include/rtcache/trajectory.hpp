#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rtcache {

inline constexpr double kUnifiedHz = 10.0;
inline constexpr double kTimeTolerance = 1e-9;

// End-effector delta command laid out as (dx, dy, dz, rx, ry, rz, grip).
// Translation in meters, rotation in radians, grip in [0, 1].
struct Action7 {
  static constexpr std::size_t kWidth = 7;
  static constexpr std::size_t kGrip = 6;

  std::array<double, kWidth> v{};

  static Action7 from(std::span<const double> values);
  static Action7 translation(double dx, double dy, double dz, double grip = 0.0) {
    return Action7{{dx, dy, dz, 0.0, 0.0, 0.0, grip}};
  }

  double dx() const { return v[0]; }
  double dy() const { return v[1]; }
  double dz() const { return v[2]; }
  double rx() const { return v[3]; }
  double ry() const { return v[4]; }
  double rz() const { return v[5]; }
  double grip() const { return v[kGrip]; }

  bool valid() const;

  friend bool operator==(const Action7&, const Action7&) = default;
};

struct TrajectoryStep {
  std::string episode_id;
  std::uint64_t step_id = 0;
  double timestamp = 0.0;
  Action7 action;
  std::string observation_ref;

  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

enum class ActionSpace { kCartesianPosition, kCartesianVelocity, kJoint };

std::string_view to_string(ActionSpace space);
std::optional<ActionSpace> parse_action_space(std::string_view text);

// One record of a source log before unification; the action width is
// whatever the source dataset logged.
struct RawStep {
  std::int64_t step_id = 0;
  double timestamp = 0.0;
  std::vector<double> action;
  std::string observation_ref;
};

struct SourceEpisode {
  std::string dataset_id;
  std::string episode_id;
  double frequency_hz = kUnifiedHz;
  ActionSpace action_space = ActionSpace::kCartesianPosition;
  std::string units = "m";
  std::vector<RawStep> steps;
};

struct UnifiedEpisode {
  std::string dataset_id;
  std::string episode_id;
  std::vector<TrajectoryStep> steps;
};

enum class RejectReason {
  kJointSpaceOnly,
  kBadActionWidth,
  kTooShort,
  kNonMonotoneTime,
  kParseError,
};

std::string_view to_string(RejectReason reason);
std::optional<RejectReason> parse_reject_reason(std::string_view text);

struct FilterResult {
  bool accepted = true;
  std::optional<RejectReason> reason;

  static FilterResult accept() { return {}; }
  static FilterResult reject(RejectReason r) { return {false, r}; }
};

/// Displacement covered by a constant velocity over dt seconds (v * dt,
/// componentwise). Throws kValidation for non-finite input or dt <= 0.
std::vector<double> integrate_velocity(std::span<const double> velocity, double dt);

/// Resamples a Cartesian episode onto the grid t0 + k / target_hz.
///
/// Translation and rotation channels are interpolated linearly; the grip
/// channel and observation reference take the nearest preceding sample.
/// Grid points that coincide with a source timestamp (within 1e-9 s) copy
/// that sample verbatim, so endpoints and identity resampling are exact. A
/// trailing remainder shorter than one grid period is dropped.
///
/// Throws kValidation for joint-space input, widths other than 7, fewer than
/// two steps, non-monotone timestamps or a non-positive target rate.
UnifiedEpisode resample_episode(const SourceEpisode& src, double target_hz = kUnifiedHz);

/// Replaces per-step velocities with per-step displacements using the
/// episode's own period 1 / frequency_hz. The grip channel is copied.
SourceEpisode velocity_to_position(const SourceEpisode& src);

// Total; never throws.
FilterResult filter_episode(const SourceEpisode& src);

/// filter -> resample -> (velocity sources) integrate over the unified period.
/// Returns the rejection reason instead of throwing for filterable input.
struct UnifyOutcome {
  std::optional<UnifiedEpisode> episode;
  std::optional<RejectReason> reason;
};
UnifyOutcome unify_episode(const SourceEpisode& src);

/// Checks the unified-episode invariants: 0.1 s spacing, strictly increasing
/// step ids, valid actions. Returns an explanation on violation.
std::optional<std::string> check_unified(const UnifiedEpisode& episode,
                                         double hz = kUnifiedHz);

}  // namespace rtcache
