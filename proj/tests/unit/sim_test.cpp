#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rtcache/error.hpp"
#include "rtcache/sim.hpp"

using namespace rtcache;
using namespace rtcache::sim;

namespace {

double code_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(sq);
}

std::vector<const Demonstration*> pointers(const std::vector<Demonstration>& demos) {
  std::vector<const Demonstration*> out;
  for (const auto& d : demos) out.push_back(&d);
  return out;
}

}  // namespace

TEST(Observe, DeterministicAndViewpointSeparated) {
  MockBackend backend;
  Scene wrist{ObjectKind::kMug, {0.55, 0.1, 0.05}, Viewpoint::kWrist, 0};
  Scene side = wrist;
  side.viewpoint = Viewpoint::kSide;
  AgentState agent;
  agent.eef_pos = {0.5, 0.0, 0.25};
  EXPECT_EQ(observe(wrist, agent), observe(wrist, agent));
  EXPECT_EQ(render(wrist, agent), render(wrist, agent));

  const auto ew = embed(render(wrist, agent), backend);
  const auto es = embed(render(side, agent), backend);
  AgentState nearby = agent;
  for (double dx : {0.01, 0.02, 0.04}) {
    nearby.eef_pos[0] = agent.eef_pos[0] + dx;
    EXPECT_LT(cosine_similarity(ew, es), cosine_similarity(ew, embed(render(wrist, nearby), backend)));
  }
  for (auto obj : {ObjectKind::kBottle, ObjectKind::kBowl}) {
    Scene other = wrist;
    other.object = obj;
    EXPECT_LT(cosine_similarity(ew, embed(render(other, agent), backend)), 0.5);
  }
}

TEST(Observe, LipschitzInEefPosition) {
  const SimConfig cfg;
  Scene scene{ObjectKind::kBowl, {0.58, -0.25, 0.03}, Viewpoint::kFront, 0};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  for (int i = 0; i < 200; ++i) {
    AgentState a, b;
    a.eef_pos = {0.5 + u(rng), u(rng), 0.2 + u(rng)};
    b.eef_pos = {a.eef_pos[0] + 0.1 * u(rng), a.eef_pos[1] + 0.1 * u(rng), a.eef_pos[2] + 0.1 * u(rng)};
    double moved = 0.0;
    for (int c = 0; c < 3; ++c) moved += (a.eef_pos[c] - b.eef_pos[c]) * (a.eef_pos[c] - b.eef_pos[c]);
    EXPECT_LE(code_distance(observe(scene, a, cfg), observe(scene, b, cfg)),
              std::sqrt(moved) / cfg.offset_scale + 1e-12);
  }
}

TEST(StepDynamics, IntegratesAndClamps) {
  AgentState a;
  a.eef_pos = {0.5, 0.0, 0.2};
  const AgentState same = step_dynamics(a, Action7{});
  EXPECT_EQ(same.eef_pos, a.eef_pos);
  EXPECT_EQ(same.step_count, 1u);

  AgentState b = a;
  const Vec3 target{0.61, -0.07, 0.05};
  for (int i = 0; i < 10; ++i) {
    b = step_dynamics(b, Action7::translation((target[0] - a.eef_pos[0]) / 10, (target[1] - a.eef_pos[1]) / 10,
                                              (target[2] - a.eef_pos[2]) / 10, 1.0));
  }
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(b.eef_pos[c], target[c], 1e-9);
  EXPECT_EQ(b.grip, 1.0);
  EXPECT_EQ(b.step_count, 10u);

  const AgentState out = step_dynamics(a, Action7::translation(5.0, -5.0, -5.0));
  const Workspace ws;
  EXPECT_EQ(out.eef_pos, (Vec3{ws.hi[0], ws.lo[1], ws.lo[2]}));
}

TEST(Demonstrations, PassInvariantsAndCount) {
  for (auto view : kAllViewpoints) {
    const auto demos = make_demonstrations(view, 7);
    ASSERT_EQ(demos.size(), 27u);
    for (const auto& d : demos) {
      EXPECT_EQ(d.episode.steps.size(), 15u);
      EXPECT_EQ(d.frames.size(), 15u);
      EXPECT_EQ(check_unified(d.episode), std::nullopt) << d.episode.episode_id;
      EXPECT_EQ(d.episode.dataset_id, demo_dataset_id(view));
      EXPECT_EQ(d.episode.steps.back().action.grip(), 1.0);
      // the recorded actions carry the EEF from its start to the object
      AgentState a;
      a.eef_pos = d.start;
      for (const auto& s : d.episode.steps) a = step_dynamics(a, s.action);
      EXPECT_LE(distance_to_object(d.scene, a), 1e-9);
    }
    MockBackend backend;
    const SimMemory mem = build_memory(pointers(demos), backend);
    EXPECT_EQ(mem.store.stats().episodes, 27u);
    EXPECT_EQ(mem.store.stats().steps, 27u * 15u);
    EXPECT_EQ(mem.index.size(), 27u * 15u);
    EXPECT_TRUE(mem.index.snapshot()->centroids_clean());
  }
}

TEST(Demonstrations, UnreachableWaypointsRejected) {
  Scene scene{ObjectKind::kMug, region_position(ObjectKind::kMug, 0), Viewpoint::kWrist, 0};
  try {
    record_demonstration(scene, {{0.5, 0.0, 0.2}, {1.5, 0.0, 0.2}, scene.object_pos}, "demo_wrist", "bad", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kValidation);
  }
  EXPECT_THROW(record_demonstration(scene, {{0.5, 0.0, 0.2}, {0.5, 0.3, 0.2}}, "demo_wrist", "short", 1), Error);
}

TEST(RunEpisode, ReplayingOwnDemoSucceeds) {
  MockBackend backend;
  const auto demos = make_demonstrations(Viewpoint::kFront, 3);
  for (const auto& demo : demos) {
    if (demo.scene.object != ObjectKind::kBowl) continue;
    const SimMemory mem = build_memory({&demo}, backend);
    AgentState start;
    start.eef_pos = demo.start;
    RetrievalParams p;
    p.n = 3;
    const EpisodeOutcome out = run_episode(demo.scene, start, mem, backend, p);
    EXPECT_TRUE(out.success) << demo.episode.episode_id;
    EXPECT_LE(out.final_distance, SimConfig{}.graspable_radius);
  }
}

TEST(RunEpisode, OutcomeConsistency) {
  MockBackend backend;
  const auto demos = make_demonstrations(Viewpoint::kWrist, 7);
  const SimMemory mem = build_memory(pointers(demos), backend);
  for (std::size_t n : {1u, 3u}) {
    RetrievalParams p;
    p.n = n;
    for (const auto& trial : make_trials(ObjectKind::kMug, Viewpoint::kWrist, 11)) {
      RunOptions opts;
      opts.record_trace = true;
      const EpisodeOutcome out = run_episode(trial.scene, trial.start, mem, backend, p, {}, opts);
      if (out.success) {
        EXPECT_LE(out.final_distance, SimConfig{}.graspable_radius);
      } else {
        EXPECT_TRUE(out.halted || out.final_distance > SimConfig{}.graspable_radius);
      }
      EXPECT_GE(out.retrieval_calls, (out.steps_used + n - 1) / n);
      const std::size_t halted = out.halted ? 1 : 0;
      if (n == 1) {
        EXPECT_EQ(out.retrieval_calls, out.steps_used + halted);
      }
      EXPECT_EQ(out.trace.size(), out.steps_used + 1);  // final pose row
      EXPECT_EQ(out.retrievals.size(), out.retrieval_calls - halted);
      const EpisodeOutcome again = run_episode(trial.scene, trial.start, mem, backend, p, {}, opts);
      EXPECT_EQ(again.steps_used, out.steps_used);
      EXPECT_EQ(again.final_distance, out.final_distance);
    }
  }
}

TEST(RunEpisode, ZeroShotFailsAndOneDemoAnchors) {
  MockBackend backend;
  const auto side = make_demonstrations(Viewpoint::kSide, 7);
  const auto front = make_demonstrations(Viewpoint::kFront, 7);
  const auto wrist = make_demonstrations(Viewpoint::kWrist, 7);
  std::vector<const Demonstration*> other = pointers(side);
  for (const auto* d : pointers(front)) other.push_back(d);
  SimMemory mem = build_memory(other, backend);

  RetrievalParams p;
  const auto trials = make_trials(ObjectKind::kBottle, Viewpoint::kWrist, 11, /*jitter=*/false);
  const Trial& t = trials.front();
  EXPECT_FALSE(run_episode(t.scene, t.start, mem, backend, p).success);

  const Demonstration* own = nullptr;
  for (const auto& d : wrist) {
    if (d.scene.object == t.scene.object && d.start == t.start.eef_pos) own = &d;
  }
  ASSERT_NE(own, nullptr);
  add_demonstration(mem, *own, backend);
  EXPECT_TRUE(run_episode(t.scene, t.start, mem, backend, p).success);
}

TEST(RunEpisode, TeleportedObjectIsTracked) {
  MockBackend backend;
  const auto demos = make_demonstrations(Viewpoint::kWrist, 7);
  const SimMemory mem = build_memory(pointers(demos), backend);
  const auto trial = make_trials(ObjectKind::kMug, Viewpoint::kWrist, 11).front();
  RunOptions opts;
  const Vec3 moved{trial.scene.object_pos[0], -trial.scene.object_pos[1], trial.scene.object_pos[2]};
  opts.teleport = std::make_pair(std::size_t{4}, moved);
  opts.record_trace = true;
  const EpisodeOutcome a = run_episode(trial.scene, trial.start, mem, backend, RetrievalParams{}, {}, opts);
  const EpisodeOutcome b = run_episode(trial.scene, trial.start, mem, backend, RetrievalParams{}, {}, opts);
  EXPECT_EQ(a.steps_used, b.steps_used);
  EXPECT_EQ(a.success, b.success);
  EXPECT_GE(a.steps_used, 4u);
  Scene after = trial.scene;
  after.object_pos = moved;
  AgentState last;
  last.eef_pos = a.trace.back().eef_pos;
  EXPECT_NEAR(a.final_distance, distance_to_object(after, last), 1e-12);
}

TEST(Names, RoundTrip) {
  for (auto o : kAllObjects) EXPECT_EQ(parse_object(to_string(o)), o);
  for (auto v : kAllViewpoints) EXPECT_EQ(parse_viewpoint(to_string(v)), v);
  EXPECT_EQ(parse_object("teapot"), std::nullopt);
}
