#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtcache/retrieval.hpp"
#include "rtcache/sim.hpp"

namespace rtcache::sim {

enum class MemoryRegime { kZeroShot, kFewShot };

std::string_view to_string(MemoryRegime regime);
std::optional<MemoryRegime> parse_regime(std::string_view text);

struct ExperimentGrid {
  std::vector<ObjectKind> objects{kAllObjects.begin(), kAllObjects.end()};
  std::vector<Viewpoint> viewpoints{Viewpoint::kWrist};
  std::vector<std::size_t> horizons{1, 3, 5};
  std::vector<MemoryRegime> regimes{MemoryRegime::kZeroShot, MemoryRegime::kFewShot};
  bool jitter = true;
  std::uint64_t demo_seed = 7;
  std::uint64_t trial_seed = 11;
  RetrievalParams params;  // n is replaced by each horizon
  SimConfig sim;
  std::size_t threads = 1;
  bool record_wall_time = true;  // false writes "-" so reports are byte-stable
  bool record_traces = false;
};

/// Grid file (JSON), every key optional:
///   {"objects":["bottle","mug","bowl"], "viewpoints":["wrist"],
///    "horizons":[1,3,5], "regimes":["zero_shot","few_shot"],
///    "jitter":true, "demo_seed":7, "trial_seed":11, "threads":1,
///    "max_steps":30, "graspable_radius":0.05, "wall_time":true,
///    "traces":false, "params":{"m":3,"s":2000,"k":50,"mode":"single_best","seed":0}}
ExperimentGrid parse_grid(const std::string& json_text);

struct TrialRecord {
  Trial trial;
  EpisodeOutcome outcome;
};

struct CellResult {
  ObjectKind object = ObjectKind::kMug;
  Viewpoint viewpoint = Viewpoint::kWrist;
  std::size_t horizon = 3;
  MemoryRegime regime = MemoryRegime::kFewShot;
  std::vector<TrialRecord> trials;

  std::size_t successes() const;
  double success_pct() const;
  double mean_time_s() const;
  double mean_retrieval_calls() const;
};

struct ExperimentReport {
  std::vector<CellResult> cells;
  bool wall_time = true;

  // One row per cell: object,viewpoint,N,regime,success_pct,mean_time_s,mean_retrieval_calls
  std::string table_csv() const;
  // One row per trial.
  std::string outcomes_csv() const;
};

ExperimentReport run_experiment(const ExperimentGrid& grid);

/// Writes report.csv and outcomes.csv, plus traces/ when traces were recorded.
void write_report(const ExperimentReport& report, const std::filesystem::path& dir);

// Per-episode trace: step,t,x,y,z,dx,dy,dz,rx,ry,rz,grip,queried
std::string trace_csv(const EpisodeOutcome& outcome);
// Snippet polylines per retrieval: query_step,rank,episode_id,step_id,similarity,offset,x,y,z
std::string retrievals_csv(const EpisodeOutcome& outcome);

}  // namespace rtcache::sim
