#include "rtcache/episode_io.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "rtcache/error.hpp"

namespace rtcache {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

Manifest parse_manifest(const std::string& text, const fs::path& base_dir) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("manifest is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("datasets") || !doc["datasets"].is_array()) {
    fail(ErrorCode::kParse, "manifest needs a \"datasets\" array");
  }
  Manifest m;
  for (const auto& d : doc["datasets"]) {
    try {
      DatasetEntry e;
      e.dataset_id = d.at("dataset_id").get<std::string>();
      e.frequency_hz = d.at("frequency_hz").get<double>();
      const auto space = parse_action_space(d.at("action_space").get<std::string>());
      if (!space) fail(ErrorCode::kParse, "unknown action_space in manifest");
      e.action_space = *space;
      e.units = d.value("units", std::string("m"));
      for (const auto& f : d.at("files")) e.files.push_back(resolve(base_dir, f.get<std::string>()));
      if (d.contains("observations_dir")) {
        e.observations_dir = resolve(base_dir, d["observations_dir"].get<std::string>());
      }
      if (e.dataset_id.empty()) fail(ErrorCode::kParse, "empty dataset_id in manifest");
      m.datasets.push_back(std::move(e));
    } catch (const json::exception& ex) {
      fail(ErrorCode::kParse, std::string("bad manifest entry: ") + ex.what());
    }
  }
  return m;
}

Manifest load_manifest(const fs::path& path) {
  return parse_manifest(read_text(path), path.parent_path());
}

std::string manifest_to_json(const Manifest& manifest) {
  json doc;
  doc["datasets"] = json::array();
  for (const auto& d : manifest.datasets) {
    json e;
    e["dataset_id"] = d.dataset_id;
    e["frequency_hz"] = d.frequency_hz;
    e["action_space"] = std::string(to_string(d.action_space));
    e["units"] = d.units;
    e["files"] = json::array();
    for (const auto& f : d.files) e["files"].push_back(f.string());
    if (!d.observations_dir.empty()) e["observations_dir"] = d.observations_dir.string();
    doc["datasets"].push_back(std::move(e));
  }
  return doc.dump(2);
}

std::string to_canonical_line(const TrajectoryStep& step, const std::string& dataset_id) {
  json j;
  j["dataset_id"] = dataset_id;
  j["episode_id"] = step.episode_id;
  j["step_id"] = step.step_id;
  j["timestamp_s"] = step.timestamp;
  j["action"] = step.action.v;
  j["observation_ref"] = step.observation_ref;
  return j.dump();
}

std::string to_canonical_line(const RawStep& step, const std::string& dataset_id,
                              const std::string& episode_id) {
  json j;
  j["dataset_id"] = dataset_id;
  j["episode_id"] = episode_id;
  j["step_id"] = step.step_id;
  j["timestamp_s"] = step.timestamp;
  j["action"] = step.action;
  j["observation_ref"] = step.observation_ref;
  return j.dump();
}

ParsedEpisodes parse_episode_lines(const std::string& text, const DatasetEntry& entry,
                                   const std::string& file_label) {
  ParsedEpisodes out;
  std::unordered_map<std::string, std::size_t> slot;
  std::set<std::string> poisoned;

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

    json j;
    std::string episode_id;
    try {
      j = json::parse(line);
      episode_id = j.at("episode_id").get<std::string>();
    } catch (const json::exception& e) {
      out.errors.push_back({file_label, "",
                            "line " + std::to_string(line_no) + ": " + e.what()});
      continue;
    }

    try {
      RawStep step;
      step.step_id = j.at("step_id").get<std::int64_t>();
      step.timestamp = j.at("timestamp_s").get<double>();
      step.action = j.at("action").get<std::vector<double>>();
      step.observation_ref = j.value("observation_ref", std::string());
      if (j.contains("dataset_id") && j["dataset_id"].get<std::string>() != entry.dataset_id) {
        throw std::runtime_error("dataset_id does not match manifest entry");
      }

      auto [it, inserted] = slot.try_emplace(episode_id, out.episodes.size());
      if (inserted) {
        SourceEpisode ep;
        ep.dataset_id = entry.dataset_id;
        ep.episode_id = episode_id;
        ep.frequency_hz = entry.frequency_hz;
        ep.action_space = entry.action_space;
        ep.units = entry.units;
        out.episodes.push_back(std::move(ep));
      }
      out.episodes[it->second].steps.push_back(std::move(step));
    } catch (const std::exception& e) {
      if (poisoned.insert(episode_id).second) {
        out.errors.push_back({file_label, episode_id,
                              "line " + std::to_string(line_no) + ": " + e.what()});
      }
    }
  }

  if (!poisoned.empty()) {
    std::vector<SourceEpisode> kept;
    for (auto& ep : out.episodes) {
      if (!poisoned.count(ep.episode_id)) kept.push_back(std::move(ep));
    }
    out.episodes = std::move(kept);
  }
  return out;
}

ParsedEpisodes read_episode_file(const fs::path& path, const DatasetEntry& entry) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    ParsedEpisodes out;
    out.errors.push_back({path.string(), "", e.what()});
    return out;
  }
  return parse_episode_lines(text, entry, path.string());
}

void write_episode_file(const fs::path& path, const std::vector<UnifiedEpisode>& episodes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& ep : episodes) {
    for (const auto& s : ep.steps) out << to_canonical_line(s, ep.dataset_id) << '\n';
  }
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

void write_source_episode_file(const fs::path& path, const std::vector<SourceEpisode>& episodes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& ep : episodes) {
    for (const auto& s : ep.steps) {
      out << to_canonical_line(s, ep.dataset_id, ep.episode_id) << '\n';
    }
  }
  if (!out) fail(ErrorCode::kIo, "write failed for " + path.string());
}

void UnifyReport::record_rejection(RejectReason reason) {
  ++rejected;
  ++rejected_by_reason[std::string(to_string(reason))];
}

std::string UnifyReport::to_json() const {
  json j;
  j["accepted"] = accepted;
  j["rejected"] = rejected;
  j["rejected_by_reason"] = rejected_by_reason;
  j["accepted_by_dataset"] = accepted_by_dataset;
  j["unified_steps"] = unified_steps;
  j["errors"] = json::array();
  for (const auto& e : errors) {
    j["errors"].push_back({{"file", e.file}, {"episode_id", e.episode_id}, {"message", e.message}});
  }
  return j.dump(2);
}

UnifyReport unify_dataset(const Manifest& manifest, const UnifiedSink& sink) {
  UnifyReport report;
  for (const auto& entry : manifest.datasets) {
    for (const auto& file : entry.files) {
      ParsedEpisodes parsed = read_episode_file(file, entry);
      for (auto& e : parsed.errors) {
        if (!e.episode_id.empty()) report.record_rejection(RejectReason::kParseError);
        report.errors.push_back(std::move(e));
      }
      for (const auto& src : parsed.episodes) {
        UnifyOutcome outcome = unify_episode(src);
        if (!outcome.episode) {
          report.record_rejection(*outcome.reason);
          continue;
        }
        ++report.accepted;
        ++report.accepted_by_dataset[entry.dataset_id];
        report.unified_steps += outcome.episode->steps.size();
        sink(std::move(*outcome.episode), entry);
      }
    }
  }
  return report;
}

}  // namespace rtcache
