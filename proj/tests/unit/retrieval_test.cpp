#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rtcache/error.hpp"
#include "rtcache/retrieval.hpp"
#include "test_support.hpp"

using namespace rtcache;

namespace {

std::vector<double> code_for(std::size_t episode, std::size_t step) {
  return {0.3 * static_cast<double>(episode), 0.05 * static_cast<double>(step), 1.0};
}

Action7 action_for(std::size_t episode, std::size_t step) {
  return Action7::translation(0.001 * static_cast<double>(step), 0.01 * static_cast<double>(episode),
                              -0.002, step % 3 == 0 ? 1.0 : 0.0);
}

// Episodes with distinct, recognizable actions; each step indexed by the mock
// embedding of its scene code.
struct Memory {
  MemoryStore store;
  VectorIndex index;
  MockBackend backend;

  void add(std::size_t episode, std::size_t steps, const std::string& dataset, bool index_all = true) {
    const std::string id = "ep" + std::to_string(episode);
    for (std::size_t t = 0; t < steps; ++t) {
      StepRecord r;
      r.episode_id = id;
      r.step_id = t;
      r.timestamp = 0.1 * static_cast<double>(t);
      r.action = action_for(episode, t);
      r.dataset_id = dataset;
      store.put_step(r);
      if (index_all || t == 0) {
        index.insert(r.state(), dataset, embed(encode_scene_code(code_for(episode, t)), backend).to_float());
      }
    }
  }
};

std::vector<Action7> slice(const MemoryStore& store, const StateId& s, std::size_t n) {
  return store.get_snippet(s, n);
}

}  // namespace

TEST(AverageSnippets, Basics) {
  const std::vector<std::vector<Action7>> two{{Action7::translation(0.1, 0, 0)}, {Action7::translation(0.3, 0, 0)}};
  const auto avg = average_snippets(two, 3);
  ASSERT_EQ(avg.size(), 1u);
  EXPECT_DOUBLE_EQ(avg[0].dx(), 0.2);
  EXPECT_THROW(average_snippets({}, 3), Error);
  EXPECT_THROW(average_snippets(two, 0), Error);
}

TEST(AverageSnippets, IdenticalSnippetsAreReturnedExactly) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1), g(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Action7> snip(5);
    for (auto& a : snip) {
      for (std::size_t c = 0; c < 6; ++c) a.v[c] = u(rng);
      a.v[6] = g(rng);
    }
    const std::size_t copies = 1 + trial % 9;
    const std::vector<std::vector<Action7>> many(copies, snip);
    ASSERT_EQ(average_snippets(many, 5), snip);
  }
}

TEST(AverageSnippets, RaggedMatchesIndexWiseOracle) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  auto random_snip = [&](std::size_t len) {
    std::vector<Action7> s(len);
    for (auto& a : s) {
      for (std::size_t c = 0; c < 6; ++c) a.v[c] = u(rng);
      a.v[6] = (u(rng) + 1) / 2;
    }
    return s;
  };
  const std::vector<std::vector<Action7>> snips{random_snip(3), random_snip(5)};
  const auto avg = average_snippets(snips, 5);
  ASSERT_EQ(avg.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t c = 0; c < 7; ++c) {
      const double want = t < 3 ? (snips[0][t].v[c] + snips[1][t].v[c]) / 2 : snips[1][t].v[c];
      EXPECT_NEAR(avg[t].v[c], want, 1e-15);
    }
  }
  EXPECT_EQ(average_snippets(snips, 2).size(), 2u);
}

TEST(AverageSnippets, PermutationAndScaling) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<Action7>> snips(1 + trial % 6);
    for (auto& s : snips) {
      s.resize(1 + rng() % 5);
      for (auto& a : s) {
        for (std::size_t c = 0; c < 6; ++c) a.v[c] = u(rng);
        a.v[6] = (u(rng) + 1) / 2;
      }
    }
    const auto base = average_snippets(snips, 5);
    auto shuffled = snips;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto perm = average_snippets(shuffled, 5);
    auto scaled = snips;
    const double alpha = 0.37;
    for (auto& s : scaled) {
      for (auto& a : s) {
        for (double& x : a.v) x *= alpha;
      }
    }
    const auto sc = average_snippets(scaled, 5);
    ASSERT_EQ(perm.size(), base.size());
    for (std::size_t t = 0; t < base.size(); ++t) {
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_NEAR(perm[t].v[c], base[t].v[c], 1e-12);
        EXPECT_NEAR(sc[t].v[c], alpha * base[t].v[c], 1e-12);
      }
    }
  }
}

TEST(AverageSnippets, GripClamped) {
  std::vector<Action7> a{Action7::translation(0, 0, 0, 1.0)};
  a[0].v[6] = 1.5;
  const std::vector<std::vector<Action7>> s{a, a};
  EXPECT_EQ(average_snippets(s, 1)[0].grip(), 1.0);
}

TEST(Retrieve, SelfRetrievalReturnsNextActions) {
  Memory mem;
  for (std::size_t e = 0; e < 4; ++e) mem.add(e, 20, "ds" + std::to_string(e % 2));
  mem.index.compute_centroids();
  const auto snap = mem.index.snapshot();
  for (std::size_t e = 0; e < 4; ++e) {
    for (std::size_t t : {0u, 7u, 16u, 18u}) {
      RetrievalParams p;
      p.n = 3;
      const auto r = retrieve(encode_scene_code(code_for(e, t)), mem.backend, *snap, mem.store, p);
      const StateId want{"ep" + std::to_string(e), t};
      EXPECT_EQ(r.neighbors[0].state, want);
      EXPECT_EQ(r.chosen[0], want);
      EXPECT_EQ(r.actions, slice(mem.store, want, 3));
      EXPECT_LE(r.telemetry.candidates_scanned, p.m * p.s);
      EXPECT_GT(r.telemetry.latency.total_ms, 0.0);
    }
  }
}

TEST(Retrieve, SingleBestIgnoresOtherNeighbors) {
  Memory mem;
  for (std::size_t e = 0; e < 5; ++e) mem.add(e, 15, "ds");
  mem.index.compute_centroids();
  const auto snap = mem.index.snapshot();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);
  for (int q = 0; q < 30; ++q) {
    auto code = code_for(rng() % 5, rng() % 14);
    for (double& x : code) x += jitter(rng);
    const auto e = embed(encode_scene_code(code), mem.backend);
    RetrievalParams p1, p50;
    p1.k = 1;
    p50.k = 50;
    EXPECT_EQ(retrieve(e, *snap, mem.store, p1).actions, retrieve(e, *snap, mem.store, p50).actions);
  }
}

TEST(Retrieve, MatchesBruteForceStageOracle) {
  Memory mem;
  for (std::size_t e = 0; e < 12; ++e) mem.add(e, 25, "ds" + std::to_string(e % 4));
  mem.index.compute_centroids();
  const auto snap = mem.index.snapshot();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 3.5);
  for (int q = 0; q < 40; ++q) {
    const std::vector<double> code{u(rng), u(rng) * 0.3, 1.0};
    const FusedEmbedding e = embed(encode_scene_code(code), mem.backend);
    RetrievalParams p;
    p.m = 2;
    p.s = 30;
    p.k = 5;
    p.n = 4;
    p.mode = q % 2 ? SelectionMode::kAveraged : SelectionMode::kSingleBest;
    p.seed = static_cast<std::uint64_t>(q);
    const RetrievalResult got = retrieve(e, *snap, mem.store, p);

    // oracle: exhaustive centroid ranking, same subset draws, exhaustive scoring
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& c : snap->centroid_table().centroids) {
      double dot = 0, cc = 0;
      for (std::size_t i = 0; i < kFusedDim; ++i) {
        dot += e[i] * c.mean[i];
        cc += c.mean[i] * c.mean[i];
      }
      ranked.emplace_back(1.0 - dot / std::sqrt(cc), c.dataset_id);
    }
    std::sort(ranked.begin(), ranked.end());
    struct Cand {
      double sim;
      std::string ds;
      StateId id;
    };
    std::vector<Cand> cands;
    const PreparedQuery pq(e);
    for (std::size_t i = 0; i < p.m; ++i) {
      const auto h = snap->sample_subset(ranked[i].second, p.s, p.seed);
      for (const RowRef& r : h.rows) cands.push_back({snap->similarity(pq, r), ranked[i].second, snap->key(r).state()});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sim != b.sim) return a.sim > b.sim;
      if (a.ds != b.ds) return a.ds < b.ds;
      return a.id < b.id;
    });
    cands.resize(std::min(cands.size(), p.k));
    ASSERT_EQ(got.neighbors.size(), cands.size());
    std::vector<std::vector<Action7>> snips;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      EXPECT_EQ(got.neighbors[i].state, cands[i].id);
      auto s = mem.store.get_snippet(cands[i].id, p.n);
      if (!s.empty()) snips.push_back(s);
    }
    ASSERT_FALSE(snips.empty());
    const auto want = p.mode == SelectionMode::kSingleBest ? snips[0] : average_snippets(snips, p.n);
    EXPECT_EQ(got.actions, want);
  }
}

TEST(Retrieve, Errors) {
  Memory mem;
  RetrievalParams p;
  const auto frame = encode_scene_code(code_for(0, 0));
  try {
    retrieve(frame, mem.backend, *mem.index.snapshot(), mem.store, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoMatch);
  }
  // only the final step of a one-step episode is indexed: nothing to replay
  mem.add(0, 1, "ds");
  mem.index.compute_centroids();
  try {
    retrieve(frame, mem.backend, *mem.index.snapshot(), mem.store, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNoActionableSnippet);
  }
  mem.add(1, 10, "ds");
  mem.index.publish();
  try {
    retrieve(frame, mem.backend, *mem.index.snapshot(), mem.store, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kStaleCentroids);
  }
  mem.index.compute_centroids();
  const auto r = retrieve(frame, mem.backend, *mem.index.snapshot(), mem.store, p);
  EXPECT_EQ(r.chosen[0].episode_id, "ep1");
  EXPECT_GE(r.telemetry.snippets_skipped, 1u);
  p.k = 0;
  EXPECT_THROW(retrieve(frame, mem.backend, *mem.index.snapshot(), mem.store, p), Error);
}

TEST(PolicyStep, CadenceIsCeilingOfHorizon) {
  Memory mem;
  mem.add(0, 200, "ds");
  mem.index.compute_centroids();
  RetrievalContext ctx{&mem.backend, mem.index.snapshot(), &mem.store};
  const auto frame = encode_scene_code(code_for(0, 0));
  for (std::size_t n : {1u, 2u, 3u, 5u}) {
    for (std::size_t T : {1u, 8u, 9u, 10u, 30u}) {
      RetrievalParams p;
      p.n = n;
      ReplayState st;
      for (std::size_t t = 0; t < T; ++t) {
        const auto d = policy_step(frame, st, ctx, p);
        ASSERT_FALSE(d.halt);
        EXPECT_EQ(d.queried, t % n == 0);
        EXPECT_EQ(d.action, action_for(0, 1 + t % n));
      }
      EXPECT_EQ(st.retrieval_calls, (T + n - 1) / n) << "n=" << n << " T=" << T;
    }
  }
}

TEST(PolicyStep, TruncatedSnippetTriggersEarlyRequery) {
  Memory mem;
  mem.add(0, 5, "ds", /*index_all=*/false);  // only step 0 indexed, 4 actions follow it
  mem.index.compute_centroids();
  RetrievalContext ctx{&mem.backend, mem.index.snapshot(), &mem.store};
  const auto frame = encode_scene_code(code_for(0, 0));
  RetrievalParams p;
  p.n = 5;
  ReplayState st;
  std::vector<bool> queried;
  for (int t = 0; t < 10; ++t) {
    const auto d = policy_step(frame, st, ctx, p);
    queried.push_back(d.queried);
    if (d.queried) {
      EXPECT_EQ(d.retrieval->actions.size(), 4u);
    }
  }
  EXPECT_EQ(queried, (std::vector<bool>{true, false, false, false, true, false, false, false, true, false}));
  EXPECT_EQ(st.retrieval_calls, 3u);
}

TEST(PolicyStep, HaltsWhenNothingMatches) {
  Memory mem;
  mem.index.compute_centroids();
  RetrievalContext ctx{&mem.backend, mem.index.snapshot(), &mem.store};
  ReplayState st;
  const auto d = policy_step(encode_scene_code(code_for(0, 0)), st, ctx, RetrievalParams{});
  EXPECT_TRUE(d.halt);
  EXPECT_EQ(d.halt_reason, ErrorCode::kNoMatch);
  EXPECT_EQ(st.retrieval_calls, 1u);
}

TEST(Retrieve, DeterministicForFixedSeed) {
  Memory mem;
  for (std::size_t e = 0; e < 6; ++e) mem.add(e, 40, "ds" + std::to_string(e % 3));
  mem.index.compute_centroids();
  const auto snap = mem.index.snapshot();
  RetrievalParams p;
  p.s = 17;
  p.mode = SelectionMode::kAveraged;
  p.seed = 99;
  const auto frame = encode_scene_code(code_for(2, 3));
  const auto a = retrieve(frame, mem.backend, *snap, mem.store, p);
  const auto b = retrieve(frame, mem.backend, *snap, mem.store, p);
  EXPECT_EQ(a.neighbors, b.neighbors);
  EXPECT_EQ(a.actions, b.actions);
  EXPECT_EQ(a.chosen, b.chosen);
}
