#include "rtcache/sim.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <map>
#include <random>

#include "rtcache/error.hpp"
#include "rtcache/ingest.hpp"

namespace rtcache::sim {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double viewpoint_yaw(Viewpoint v) {
  switch (v) {
    case Viewpoint::kWrist: return 0.0;
    case Viewpoint::kSide: return 120.0 * kDeg;
    case Viewpoint::kFront: return 240.0 * kDeg;
  }
  return 0.0;
}

double norm(const Vec3& v) { return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]); }

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

std::string_view to_string(ObjectKind object) {
  switch (object) {
    case ObjectKind::kBottle: return "bottle";
    case ObjectKind::kMug: return "mug";
    case ObjectKind::kBowl: return "bowl";
  }
  return "?";
}

std::string_view to_string(Viewpoint viewpoint) {
  switch (viewpoint) {
    case Viewpoint::kWrist: return "wrist";
    case Viewpoint::kSide: return "side";
    case Viewpoint::kFront: return "front";
  }
  return "?";
}

std::optional<ObjectKind> parse_object(std::string_view text) {
  for (ObjectKind o : kAllObjects) {
    if (to_string(o) == text) return o;
  }
  return std::nullopt;
}

std::optional<Viewpoint> parse_viewpoint(std::string_view text) {
  for (Viewpoint v : kAllViewpoints) {
    if (to_string(v) == text) return v;
  }
  return std::nullopt;
}

bool Workspace::contains(const Vec3& p) const {
  for (int i = 0; i < 3; ++i) {
    if (!(p[i] >= lo[i] && p[i] <= hi[i])) return false;
  }
  return true;
}

Vec3 Workspace::clamp(const Vec3& p) const {
  return {std::clamp(p[0], lo[0], hi[0]), std::clamp(p[1], lo[1], hi[1]),
          std::clamp(p[2], lo[2], hi[2])};
}

std::vector<double> observe(const Scene& scene, const AgentState& agent, const SimConfig& config) {
  std::vector<double> code(9, 0.0);
  code[static_cast<std::size_t>(scene.viewpoint)] = config.viewpoint_weight;
  code[3 + static_cast<std::size_t>(scene.object)] = config.object_weight;

  // Offset seen from the camera: rotate the world-frame offset by the
  // camera's yaw.
  const Vec3 rel = sub(scene.object_pos, agent.eef_pos);
  const double yaw = viewpoint_yaw(scene.viewpoint);
  const double c = std::cos(yaw), s = std::sin(yaw);
  code[6] = (c * rel[0] - s * rel[1]) / config.offset_scale;
  code[7] = (s * rel[0] + c * rel[1]) / config.offset_scale;
  code[8] = rel[2] / config.offset_scale;
  return code;
}

std::vector<std::byte> render(const Scene& scene, const AgentState& agent, const SimConfig& config) {
  return encode_scene_code(observe(scene, agent, config));
}

AgentState step_dynamics(const AgentState& agent, const Action7& action, const Workspace& workspace) {
  AgentState next = agent;
  next.eef_pos = workspace.clamp(
      {agent.eef_pos[0] + action.dx(), agent.eef_pos[1] + action.dy(), agent.eef_pos[2] + action.dz()});
  next.eef_rot = {agent.eef_rot[0] + action.rx(), agent.eef_rot[1] + action.ry(),
                  agent.eef_rot[2] + action.rz()};
  next.grip = std::clamp(action.grip(), 0.0, 1.0);
  ++next.step_count;
  return next;
}

double distance_to_object(const Scene& scene, const AgentState& agent) {
  return norm(sub(scene.object_pos, agent.eef_pos));
}

Demonstration record_demonstration(const Scene& scene, const std::vector<Vec3>& waypoints,
                                   const std::string& dataset_id, const std::string& episode_id,
                                   std::uint64_t noise_seed, const SimConfig& config) {
  if (waypoints.size() < 2) fail(ErrorCode::kValidation, "a demonstration needs at least two waypoints");
  if (config.demo_steps < 2) fail(ErrorCode::kValidation, "a demonstration needs at least two steps");
  for (const Vec3& w : waypoints) {
    if (!config.workspace.contains(w)) fail(ErrorCode::kValidation, "waypoint outside the workspace");
  }
  if (norm(sub(waypoints.back(), scene.object_pos)) > config.graspable_radius) {
    fail(ErrorCode::kValidation, "waypoints do not reach the object");
  }

  // Arc-length parameterisation of the waypoint polyline.
  std::vector<double> cumulative{0.0};
  for (std::size_t i = 1; i < waypoints.size(); ++i) {
    cumulative.push_back(cumulative.back() + norm(sub(waypoints[i], waypoints[i - 1])));
  }
  const double total = cumulative.back();
  auto point_at = [&](double u) {
    const double target = u * total;
    std::size_t seg = 1;
    while (seg + 1 < waypoints.size() && cumulative[seg] < target) ++seg;
    const double len = cumulative[seg] - cumulative[seg - 1];
    const double f = len > 0.0 ? (target - cumulative[seg - 1]) / len : 1.0;
    const Vec3& a = waypoints[seg - 1];
    const Vec3& b = waypoints[seg];
    return Vec3{a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2])};
  };

  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> noise(0.0, config.demo_noise);
  const std::size_t last = config.demo_steps - 1;
  std::vector<Vec3> positions(config.demo_steps);
  for (std::size_t i = 0; i <= last; ++i) {
    positions[i] = point_at(static_cast<double>(i) / static_cast<double>(last));
    if (i != 0 && i != last) {
      for (double& x : positions[i]) x += noise(rng);
      positions[i] = config.workspace.clamp(positions[i]);
    }
  }

  Demonstration demo;
  demo.scene = scene;
  demo.start = waypoints.front();
  demo.episode.dataset_id = dataset_id;
  demo.episode.episode_id = episode_id;
  AgentState agent;
  agent.eef_pos = positions.front();
  for (std::size_t i = 0; i <= last; ++i) {
    TrajectoryStep step;
    step.episode_id = episode_id;
    step.step_id = i;
    step.timestamp = static_cast<double>(i) / kUnifiedHz;
    if (i > 0) {
      const Vec3 d = sub(positions[i], positions[i - 1]);
      step.action = Action7::translation(d[0], d[1], d[2], i == last ? 1.0 : 0.0);
      agent = step_dynamics(agent, step.action, config.workspace);
    }
    auto frame = render(scene, agent, config);
    step.observation_ref = sha256_hex(frame);
    demo.frames.push_back(std::move(frame));
    demo.episode.steps.push_back(std::move(step));
  }
  return demo;
}

Vec3 region_position(ObjectKind object, std::size_t region) {
  static constexpr double kHeight[] = {0.10, 0.05, 0.03};  // bottle, mug, bowl centers
  static constexpr double kY[] = {0.25, 0.0, -0.25};
  static constexpr double kX[] = {0.58, 0.52, 0.58};
  if (region >= 3) fail(ErrorCode::kValidation, "region must be 0, 1 or 2");
  return {kX[region], kY[region], kHeight[static_cast<std::size_t>(object)]};
}

Vec3 approach_start(const Vec3& object_pos, std::size_t approach, double angle_jitter,
                    double radius_jitter, double height_jitter) {
  static constexpr double kAngles[] = {30.0, 150.0, 270.0};
  if (approach >= 3) fail(ErrorCode::kValidation, "approach must be 0, 1 or 2");
  const double angle = (kAngles[approach] + angle_jitter) * kDeg;
  const double radius = 0.18 + radius_jitter;
  const double height = 0.15 + height_jitter;
  return {object_pos[0] + radius * std::cos(angle), object_pos[1] + radius * std::sin(angle),
          object_pos[2] + height};
}

std::string demo_dataset_id(Viewpoint viewpoint) {
  return "demo_" + std::string(to_string(viewpoint));
}

std::vector<Demonstration> make_demonstrations(Viewpoint viewpoint, std::uint64_t seed,
                                               const SimConfig& config) {
  std::vector<Demonstration> demos;
  for (ObjectKind object : kAllObjects) {
    for (std::size_t region = 0; region < 3; ++region) {
      for (std::size_t approach = 0; approach < 3; ++approach) {
        Scene scene;
        scene.object = object;
        scene.viewpoint = viewpoint;
        scene.object_pos = region_position(object, region);
        scene.seed = seed;
        const Vec3 start = approach_start(scene.object_pos, approach);
        const std::string id = "demo-" + std::string(to_string(viewpoint)) + "-" +
                               std::string(to_string(object)) + "-r" + std::to_string(region) +
                               "-a" + std::to_string(approach);
        const std::uint64_t noise_seed =
            mix(seed, demos.size() + 100 * static_cast<std::uint64_t>(viewpoint));
        demos.push_back(record_demonstration(scene, {start, scene.object_pos},
                                             demo_dataset_id(viewpoint), id, noise_seed, config));
      }
    }
  }
  return demos;
}

std::vector<Trial> make_trials(ObjectKind object, Viewpoint viewpoint, std::uint64_t seed,
                               bool jitter) {
  std::vector<Trial> trials;
  for (std::size_t region = 0; region < 3; ++region) {
    for (std::size_t approach = 0; approach < 3; ++approach) {
      std::mt19937_64 rng(mix(seed, 1000 * static_cast<std::uint64_t>(object) +
                                        100 * static_cast<std::uint64_t>(viewpoint) +
                                        10 * region + approach));
      std::uniform_real_distribution<double> u(-1.0, 1.0);
      Trial t;
      t.region = region;
      t.approach = approach;
      t.scene.object = object;
      t.scene.viewpoint = viewpoint;
      t.scene.seed = seed;
      t.scene.object_pos = region_position(object, region);
      double angle = 0.0, radius = 0.0, height = 0.0;
      if (jitter) {
        t.scene.object_pos[0] += 0.02 * u(rng);
        t.scene.object_pos[1] += 0.02 * u(rng);
        angle = 10.0 * u(rng);
        radius = 0.03 * u(rng);
        height = 0.03 * u(rng);
      }
      t.start.eef_pos = approach_start(t.scene.object_pos, approach, angle, radius, height);
      trials.push_back(t);
    }
  }
  return trials;
}

namespace {

void stage_demonstration(SimMemory& memory, const Demonstration& demo, EmbeddingBackend& backend) {
  std::map<std::string, const std::vector<std::byte>*> by_ref;
  for (std::size_t i = 0; i < demo.frames.size(); ++i) {
    by_ref[demo.episode.steps[i].observation_ref] = &demo.frames[i];
  }
  ingest_episode(demo.episode, memory.store, memory.index, backend,
                 [&](const std::string& ref) -> std::optional<std::vector<std::byte>> {
                   auto it = by_ref.find(ref);
                   if (it == by_ref.end()) return std::nullopt;
                   return *it->second;
                 });
}

}  // namespace

void add_demonstration(SimMemory& memory, const Demonstration& demo, EmbeddingBackend& backend) {
  stage_demonstration(memory, demo, backend);
  memory.index.compute_centroids();
}

SimMemory build_memory(const std::vector<const Demonstration*>& demos, EmbeddingBackend& backend) {
  SimMemory memory;
  for (const Demonstration* d : demos) stage_demonstration(memory, *d, backend);
  if (!demos.empty()) memory.index.compute_centroids();
  return memory;
}

EpisodeOutcome run_episode(const Scene& initial_scene, const AgentState& start,
                           const SimMemory& memory, EmbeddingBackend& backend,
                           const RetrievalParams& params, const SimConfig& config,
                           const RunOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  Scene scene = initial_scene;
  AgentState agent = start;
  agent.step_count = 0;

  RetrievalContext context{&backend, memory.index.snapshot(), &memory.store};
  ReplayState replay;
  EpisodeOutcome out;

  auto reached = [&] { return distance_to_object(scene, agent) <= config.graspable_radius; };

  while (!reached() && agent.step_count < options.max_steps) {
    if (options.teleport && options.teleport->first == agent.step_count) {
      scene.object_pos = options.teleport->second;
      if (reached()) break;
    }
    const auto frame = render(scene, agent, config);
    PolicyDecision decision = policy_step(frame, replay, context, params);
    if (decision.halt) {
      out.halted = true;
      break;
    }
    if (options.record_trace && decision.retrieval) {
      RetrievalEvent ev;
      ev.step = agent.step_count;
      ev.origin = agent.eef_pos;
      for (const Neighbor& nb : decision.retrieval->neighbors) {
        if (ev.top.size() == 3) break;
        auto snippet = memory.store.get_snippet(nb.state, params.n);
        if (snippet.empty()) continue;
        ev.top.push_back(nb);
        ev.snippets.push_back(std::move(snippet));
      }
      out.retrievals.push_back(std::move(ev));
    }
    if (options.record_trace) {
      out.trace.push_back({agent.step_count, static_cast<double>(agent.step_count) / kUnifiedHz,
                           agent.eef_pos, decision.action, decision.queried});
    }
    agent = step_dynamics(agent, decision.action, config.workspace);
  }

  out.steps_used = agent.step_count;
  out.retrieval_calls = replay.retrieval_calls;
  out.final_distance = distance_to_object(scene, agent);
  out.success = out.final_distance <= config.graspable_radius;
  if (options.record_trace) {
    out.trace.push_back({agent.step_count, static_cast<double>(agent.step_count) / kUnifiedHz,
                         agent.eef_pos, Action7{}, false});
  }
  out.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace rtcache::sim
