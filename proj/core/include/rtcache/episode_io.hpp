#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "rtcache/trajectory.hpp"

namespace rtcache {

// Canonical episode files are UTF-8 JSON lines, one step per line:
//   {"dataset_id":..,"episode_id":..,"step_id":..,"timestamp_s":..,
//    "action":[..],"observation_ref":..}
// A file may hold several episodes; records are grouped by episode_id in
// order of first appearance.

struct DatasetEntry {
  std::string dataset_id;
  double frequency_hz = kUnifiedHz;
  ActionSpace action_space = ActionSpace::kCartesianPosition;
  std::string units = "m";
  std::vector<std::filesystem::path> files;
  // Optional directory of observation blobs named by observation_ref.
  std::filesystem::path observations_dir;
};

struct Manifest {
  std::vector<DatasetEntry> datasets;
};

/// Parses a JSON manifest:
///   {"datasets":[{"dataset_id":"bridge","frequency_hz":5,
///                 "action_space":"cartesian_position","units":"m",
///                 "files":["bridge/ep0.jsonl"],"observations_dir":"bridge/obs"}]}
/// Relative paths resolve against the manifest's directory.
Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir);
std::string manifest_to_json(const Manifest& manifest);

std::string to_canonical_line(const TrajectoryStep& step, const std::string& dataset_id);
std::string to_canonical_line(const RawStep& step, const std::string& dataset_id,
                              const std::string& episode_id);

struct EpisodeParseError {
  std::string file;
  std::string episode_id;  // empty when the failure is file-level
  std::string message;
};

struct ParsedEpisodes {
  std::vector<SourceEpisode> episodes;
  std::vector<EpisodeParseError> errors;
};

/// Parses canonical lines into source episodes stamped with the dataset's
/// frequency, action space and units. Lines that fail to parse poison their
/// episode (reported as an error, the episode is dropped).
ParsedEpisodes parse_episode_lines(const std::string& text, const DatasetEntry& entry,
                                   const std::string& file_label = "<memory>");
ParsedEpisodes read_episode_file(const std::filesystem::path& path, const DatasetEntry& entry);

void write_episode_file(const std::filesystem::path& path,
                        const std::vector<UnifiedEpisode>& episodes);
void write_source_episode_file(const std::filesystem::path& path,
                               const std::vector<SourceEpisode>& episodes);

struct UnifyReport {
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::map<std::string, std::size_t> rejected_by_reason;
  std::map<std::string, std::size_t> accepted_by_dataset;
  std::size_t unified_steps = 0;
  std::vector<EpisodeParseError> errors;

  void record_rejection(RejectReason reason);
  std::string to_json() const;
};

// Receives each unified episode along with the manifest entry it came from.
using UnifiedSink = std::function<void(UnifiedEpisode&&, const DatasetEntry&)>;

/// Runs every episode named by the manifest through unify_episode and hands
/// accepted results to the sink. Unreadable files and unparsable episodes are
/// recorded in the report; processing continues.
UnifyReport unify_dataset(const Manifest& manifest, const UnifiedSink& sink);

}  // namespace rtcache
