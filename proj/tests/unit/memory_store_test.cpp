#include <gtest/gtest.h>

#include <algorithm>
#include <csignal>
#include <cstring>
#include <map>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "rtcache/error.hpp"
#include "rtcache/memory_store.hpp"
#include "test_support.hpp"

using namespace rtcache;
using rtcache::testing::TempDir;
namespace fs = std::filesystem;

namespace {

StepRecord rec(const std::string& ep, std::uint64_t step, const std::string& ds = "ds") {
  StepRecord r;
  r.episode_id = ep;
  r.step_id = step;
  r.timestamp = 0.1 * static_cast<double>(step);
  r.action = Action7::translation(0.001 * static_cast<double>(step), -0.5, 0.25, step % 2);
  r.dataset_id = ds;
  return r;
}

std::vector<std::byte> bytes_of(const std::string& s) {
  std::vector<std::byte> b(s.size());
  std::memcpy(b.data(), s.data(), s.size());
  return b;
}

fs::path last_segment(const fs::path& dir) {
  std::vector<fs::path> segs;
  for (const auto& e : fs::directory_iterator(dir / "segments")) segs.push_back(e.path());
  std::sort(segs.begin(), segs.end());
  return segs.back();
}

}  // namespace

TEST(MemoryStore, PutGetAndSnippet) {
  MemoryStore store;
  for (std::uint64_t i = 0; i < 10; ++i) store.put_step(rec("e", i));
  EXPECT_EQ(store.get_step({"e", 4}), rec("e", 4));
  EXPECT_TRUE(store.contains({"e", 9}));
  EXPECT_FALSE(store.contains({"e", 10}));

  const auto snip = store.get_snippet({"e", 2}, 3);
  ASSERT_EQ(snip.size(), 3u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(snip[j], rec("e", 3 + j).action);
  EXPECT_EQ(store.get_snippet({"e", 8}, 5).size(), 1u);
  EXPECT_TRUE(store.get_snippet({"e", 9}, 5).empty());
  EXPECT_THROW(store.get_snippet({"e", 2}, 0), Error);
  try {
    store.get_step({"nope", 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNotFound);
  }
}

TEST(MemoryStore, SnippetMatchesOracleOnRandomEpisodes) {
  MemoryStore store;
  std::mt19937_64 rng(5);
  std::map<std::string, std::vector<StepRecord>> truth;
  for (int e = 0; e < 20; ++e) {
    const std::string id = "ep" + std::to_string(e);
    const std::size_t len = 1 + rng() % 40;
    for (std::size_t s = 0; s < len; ++s) truth[id].push_back(rec(id, s));
  }
  // insertion order shuffled across episodes
  std::vector<StepRecord> all;
  for (auto& [id, steps] : truth) all.insert(all.end(), steps.begin(), steps.end());
  std::shuffle(all.begin(), all.end(), rng);
  for (const auto& r : all) store.put_step(r);

  for (const auto& [id, steps] : truth) {
    for (std::size_t t = 0; t < steps.size(); ++t) {
      for (std::size_t n : {1u, 3u, 7u}) {
        const auto got = store.get_snippet({id, t}, n);
        const std::size_t want = std::min(n, steps.size() - 1 - t);
        ASSERT_EQ(got.size(), want);
        for (std::size_t j = 0; j < want; ++j) EXPECT_EQ(got[j], steps[t + 1 + j].action);
      }
    }
  }
}

TEST(MemoryStore, IdempotentAndConflicts) {
  MemoryStore store;
  store.put_step(rec("e", 0));
  store.put_step(rec("e", 0));
  EXPECT_EQ(store.stats().steps, 1u);
  StepRecord changed = rec("e", 0);
  changed.timestamp = 9.0;
  try {
    store.put_step(changed);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConflict);
  }
  EXPECT_THROW(store.put_step(rec("e", 1, "other")), Error);
}

TEST(MemoryStore, BlobsAreContentAddressed) {
  MemoryStore store;
  const auto a = store.put_blob(bytes_of("abc"));
  EXPECT_EQ(a, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(store.put_blob(bytes_of("abc")), a);
  EXPECT_EQ(store.stats().blobs, 1u);
  EXPECT_EQ(*store.get_blob(a), bytes_of("abc"));
  EXPECT_FALSE(store.get_blob(std::string(64, '0')));
}

TEST(MemoryStore, ListingAndStats) {
  MemoryStore store;
  store.put_step(rec("b", 0, "d1"));
  store.put_step(rec("a", 0, "d2"));
  store.put_step(rec("a", 1, "d2"));
  EXPECT_EQ(store.list_episodes(), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(store.list_episodes(std::string_view("d1")), (std::vector<std::string>{"b"}));
  EXPECT_EQ(store.list_datasets(), (std::vector<std::string>{"d1", "d2"}));
  EXPECT_EQ(store.episode_steps("a").size(), 2u);
  EXPECT_TRUE(store.has_episode("a"));
  EXPECT_FALSE(store.has_episode("c"));
  const auto st = store.stats();
  EXPECT_EQ(st.episodes, 2u);
  EXPECT_EQ(st.steps, 3u);
  EXPECT_EQ(st.datasets, 2u);
}

TEST(MemoryStore, PersistsAcrossReopen) {
  TempDir tmp;
  std::string hash;
  {
    MemoryStore store(tmp.path());
    for (std::uint64_t i = 0; i < 50; ++i) store.put_step(rec("e", i));
    hash = store.put_blob(bytes_of("frame"));
    store.flush();
  }
  MemoryStore again(tmp.path());
  EXPECT_EQ(again.stats().steps, 50u);
  EXPECT_EQ(again.get_step({"e", 17}), rec("e", 17));
  EXPECT_TRUE(again.has_blob(hash));
  again.put_step(rec("e", 50));
}

TEST(MemoryStore, TornTailIsDropped) {
  TempDir tmp;
  {
    MemoryStore store(tmp.path());
    for (std::uint64_t i = 0; i < 20; ++i) store.put_step(rec("e", i));
    store.flush();
  }
  const fs::path seg = last_segment(tmp.path());
  const auto full = fs::file_size(seg);
  fs::resize_file(seg, full - 5);  // cut into the last record
  {
    MemoryStore store(tmp.path());
    EXPECT_EQ(store.stats().steps, 19u);
    EXPECT_FALSE(store.contains({"e", 19}));
    store.put_step(rec("e", 19));
    store.flush();
  }
  {
    std::ofstream junk(seg, std::ios::binary | std::ios::app);
    junk << "\x10\x00\x00\x00garbage";
  }
  MemoryStore store(tmp.path());
  EXPECT_EQ(store.stats().steps, 20u);
  EXPECT_EQ(store.get_step({"e", 19}), rec("e", 19));
}

TEST(MemoryStore, SurvivesKillMidWrite) {
  TempDir tmp;
  constexpr std::uint64_t kFlushed = 500;
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    MemoryStore store(tmp.path());
    for (std::uint64_t i = 0; i < kFlushed; ++i) store.put_step(rec("e", i));
    store.flush();
    for (std::uint64_t i = kFlushed;; ++i) {
      store.put_step(rec("e", i));
      if (i == 2 * kFlushed) raise(SIGKILL);
    }
  }
  int status = 0;
  waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFSIGNALED(status));

  MemoryStore store(tmp.path());
  const std::size_t n = store.stats().steps;
  EXPECT_GE(n, kFlushed);
  // every surviving record is whole and the episode is a gap-free prefix
  for (std::uint64_t i = 0; i < n; ++i) ASSERT_EQ(store.get_step({"e", i}), rec("e", i));
  store.put_step(rec("e", n));
}

TEST(MemoryStore, HundredThousandInserts) {
  TempDir tmp;
  std::mt19937_64 rng(9);
  {
    MemoryStore store(tmp.path());
    for (std::uint64_t e = 0; e < 1000; ++e) {
      for (std::uint64_t s = 0; s < 100; ++s) store.put_step(rec("ep" + std::to_string(e), s));
    }
    store.flush();
  }
  MemoryStore store(tmp.path());
  ASSERT_EQ(store.stats().steps, 100000u);
  for (int q = 0; q < 1000; ++q) {
    const std::uint64_t e = rng() % 1000, s = rng() % 100;
    const std::string id = "ep" + std::to_string(e);
    ASSERT_EQ(store.get_step({id, s}), rec(id, s));
  }
}
