#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtcache/embedder.hpp"
#include "rtcache/memory_store.hpp"
#include "rtcache/retrieval.hpp"
#include "rtcache/trajectory.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache::sim {

using Vec3 = std::array<double, 3>;

enum class ObjectKind { kBottle, kMug, kBowl };
enum class Viewpoint { kWrist, kSide, kFront };

inline constexpr std::array<ObjectKind, 3> kAllObjects{ObjectKind::kBottle, ObjectKind::kMug,
                                                        ObjectKind::kBowl};
inline constexpr std::array<Viewpoint, 3> kAllViewpoints{Viewpoint::kWrist, Viewpoint::kSide,
                                                         Viewpoint::kFront};

std::string_view to_string(ObjectKind object);
std::string_view to_string(Viewpoint viewpoint);
std::optional<ObjectKind> parse_object(std::string_view text);
std::optional<Viewpoint> parse_viewpoint(std::string_view text);

struct Workspace {
  Vec3 lo{0.20, -0.50, 0.0};
  Vec3 hi{0.90, 0.50, 0.60};
  bool contains(const Vec3& p) const;
  Vec3 clamp(const Vec3& p) const;
};

struct SimConfig {
  Workspace workspace;
  double graspable_radius = 0.05;
  std::size_t max_steps = 30;
  std::size_t demo_steps = 15;
  double demo_noise = 0.002;  // meters, per intermediate waypoint and axis
  // Scene-code layout: viewpoint one-hot, object one-hot, then the
  // object-minus-EEF offset rotated into the camera's frame.
  double viewpoint_weight = 1.0;
  double object_weight = 1.5;
  double offset_scale = 0.1;  // meters per code unit
  MockEncoderConfig encoder;
};

struct Scene {
  ObjectKind object = ObjectKind::kMug;
  Vec3 object_pos{0.55, 0.0, 0.05};
  Viewpoint viewpoint = Viewpoint::kWrist;
  std::uint64_t seed = 0;
};

struct AgentState {
  Vec3 eef_pos{0.55, 0.0, 0.30};
  Vec3 eef_rot{0.0, 0.0, 0.0};
  double grip = 0.0;
  std::size_t step_count = 0;
};

/// Low-dimensional stand-in for a camera frame.
std::vector<double> observe(const Scene& scene, const AgentState& agent, const SimConfig& config = {});
std::vector<std::byte> render(const Scene& scene, const AgentState& agent, const SimConfig& config = {});

/// Kinematic point EEF: position and rotation integrate the deltas (position
/// clamped to the workspace), grip is set from the action.
AgentState step_dynamics(const AgentState& agent, const Action7& action,
                         const Workspace& workspace = {});

double distance_to_object(const Scene& scene, const AgentState& agent);

struct Demonstration {
  Scene scene;
  Vec3 start{};
  UnifiedEpisode episode;
  std::vector<std::vector<std::byte>> frames;  // one per step, named by observation_ref
};

/// Straight-line-with-noise demo through the waypoints (start first, object
/// last) with config.demo_steps steps at 10 Hz. Step i carries the action
/// that moved the EEF to its position at step i; the final step closes the
/// gripper. kValidation when a waypoint leaves the workspace or the path
/// does not end inside the graspable region.
Demonstration record_demonstration(const Scene& scene, const std::vector<Vec3>& waypoints,
                                   const std::string& dataset_id, const std::string& episode_id,
                                   std::uint64_t noise_seed, const SimConfig& config = {});

// Desk layout shared by demos and trials.
Vec3 region_position(ObjectKind object, std::size_t region);  // region in [0, 3)
Vec3 approach_start(const Vec3& object_pos, std::size_t approach, double angle_jitter = 0.0,
                    double radius_jitter = 0.0, double height_jitter = 0.0);

std::string demo_dataset_id(Viewpoint viewpoint);

/// 27 demos for one viewpoint: 3 objects x 3 table regions x 3 approach
/// directions.
std::vector<Demonstration> make_demonstrations(Viewpoint viewpoint, std::uint64_t seed,
                                               const SimConfig& config = {});

struct Trial {
  Scene scene;
  AgentState start;
  std::size_t region = 0;
  std::size_t approach = 0;
};

/// Nine jittered trials (3 regions x 3 approach directions) for one
/// (object, viewpoint) cell. With jitter disabled the trials coincide with
/// the demos' own start poses.
std::vector<Trial> make_trials(ObjectKind object, Viewpoint viewpoint, std::uint64_t seed,
                               bool jitter = true);

/// In-memory store and index holding a set of demonstrations.
struct SimMemory {
  MemoryStore store;
  VectorIndex index;
};
void add_demonstration(SimMemory& memory, const Demonstration& demo, EmbeddingBackend& backend);
SimMemory build_memory(const std::vector<const Demonstration*>& demos, EmbeddingBackend& backend);

struct TraceRow {
  std::size_t step = 0;
  double t = 0.0;
  Vec3 eef_pos{};
  Action7 action;
  bool queried = false;
};

struct RetrievalEvent {
  std::size_t step = 0;
  Vec3 origin{};
  std::vector<Neighbor> top;                     // up to 3 neighbors with snippets
  std::vector<std::vector<Action7>> snippets;    // their snippets, same order
};

struct EpisodeOutcome {
  bool success = false;
  bool halted = false;
  std::size_t steps_used = 0;
  std::size_t retrieval_calls = 0;
  double wall_time = 0.0;  // seconds
  double final_distance = 0.0;
  std::vector<TraceRow> trace;
  std::vector<RetrievalEvent> retrievals;
};

struct RunOptions {
  std::size_t max_steps = 30;
  bool record_trace = false;
  // Moves the object to a new position just before the given step.
  std::optional<std::pair<std::size_t, Vec3>> teleport;
};

/// Closed loop: observe, policy_step, step_dynamics until the EEF enters the
/// graspable region, the policy halts, or max_steps is reached.
EpisodeOutcome run_episode(const Scene& scene, const AgentState& start, const SimMemory& memory,
                           EmbeddingBackend& backend, const RetrievalParams& params,
                           const SimConfig& config = {}, const RunOptions& options = {});

}  // namespace rtcache::sim
