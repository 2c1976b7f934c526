#include "rtcache/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <future>
#include <map>
#include <sstream>

#include <json.hpp>

#include "rtcache/error.hpp"

namespace rtcache::sim {

using nlohmann::json;

std::string_view to_string(MemoryRegime regime) {
  return regime == MemoryRegime::kZeroShot ? "zero_shot" : "few_shot";
}

std::optional<MemoryRegime> parse_regime(std::string_view text) {
  if (text == "zero_shot") return MemoryRegime::kZeroShot;
  if (text == "few_shot") return MemoryRegime::kFewShot;
  return std::nullopt;
}

namespace {

template <typename T, typename Parse>
std::vector<T> parse_list(const json& j, const char* key, Parse parse) {
  std::vector<T> out;
  for (const auto& v : j.at(key)) {
    auto parsed = parse(v.template get<std::string>());
    if (!parsed) fail(ErrorCode::kValidation, std::string("unknown ") + key + " entry " + v.dump());
    out.push_back(*parsed);
  }
  return out;
}

std::string fmt(double x, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, x);
  return buf;
}

}  // namespace

ExperimentGrid parse_grid(const std::string& json_text) {
  ExperimentGrid grid;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("grid is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::kParse, "grid must be a JSON object");
  try {
    if (j.contains("objects")) grid.objects = parse_list<ObjectKind>(j, "objects", parse_object);
    if (j.contains("viewpoints")) {
      grid.viewpoints = parse_list<Viewpoint>(j, "viewpoints", parse_viewpoint);
    }
    if (j.contains("regimes")) grid.regimes = parse_list<MemoryRegime>(j, "regimes", parse_regime);
    if (j.contains("horizons")) grid.horizons = j.at("horizons").get<std::vector<std::size_t>>();
    grid.jitter = j.value("jitter", grid.jitter);
    grid.demo_seed = j.value("demo_seed", grid.demo_seed);
    grid.trial_seed = j.value("trial_seed", grid.trial_seed);
    grid.threads = j.value("threads", grid.threads);
    grid.sim.max_steps = j.value("max_steps", grid.sim.max_steps);
    grid.sim.graspable_radius = j.value("graspable_radius", grid.sim.graspable_radius);
    grid.record_wall_time = j.value("wall_time", grid.record_wall_time);
    grid.record_traces = j.value("traces", grid.record_traces);
    if (j.contains("params")) {
      const json& p = j.at("params");
      grid.params.m = p.value("m", grid.params.m);
      grid.params.s = p.value("s", grid.params.s);
      grid.params.k = p.value("k", grid.params.k);
      grid.params.seed = p.value("seed", grid.params.seed);
      if (p.contains("mode")) {
        auto mode = parse_selection_mode(p.at("mode").get<std::string>());
        if (!mode) fail(ErrorCode::kValidation, "unknown selection mode");
        grid.params.mode = *mode;
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("bad grid field: ") + e.what());
  }
  for (std::size_t n : grid.horizons) {
    if (n == 0) fail(ErrorCode::kValidation, "horizons must be positive");
  }
  if (!(grid.sim.graspable_radius > 0.0)) fail(ErrorCode::kValidation, "graspable_radius must be positive");
  return grid;
}

std::size_t CellResult::successes() const {
  std::size_t n = 0;
  for (const auto& t : trials) n += t.outcome.success ? 1 : 0;
  return n;
}

double CellResult::success_pct() const {
  return trials.empty() ? 0.0 : 100.0 * static_cast<double>(successes()) / static_cast<double>(trials.size());
}

double CellResult::mean_time_s() const {
  double sum = 0.0;
  for (const auto& t : trials) sum += t.outcome.wall_time;
  return trials.empty() ? 0.0 : sum / static_cast<double>(trials.size());
}

double CellResult::mean_retrieval_calls() const {
  double sum = 0.0;
  for (const auto& t : trials) sum += static_cast<double>(t.outcome.retrieval_calls);
  return trials.empty() ? 0.0 : sum / static_cast<double>(trials.size());
}

std::string ExperimentReport::table_csv() const {
  std::ostringstream out;
  out << "object,viewpoint,N,regime,success_pct,mean_time_s,mean_retrieval_calls\n";
  for (const auto& c : cells) {
    out << to_string(c.object) << ',' << to_string(c.viewpoint) << ',' << c.horizon << ','
        << to_string(c.regime) << ',' << fmt(c.success_pct(), 2) << ','
        << (wall_time ? fmt(c.mean_time_s(), 6) : std::string("-")) << ','
        << fmt(c.mean_retrieval_calls(), 3) << '\n';
  }
  return out.str();
}

std::string ExperimentReport::outcomes_csv() const {
  std::ostringstream out;
  out << "object,viewpoint,N,regime,region,approach,success,halted,steps_used,retrieval_calls,"
         "final_distance,wall_time_s\n";
  for (const auto& c : cells) {
    for (const auto& t : c.trials) {
      out << to_string(c.object) << ',' << to_string(c.viewpoint) << ',' << c.horizon << ','
          << to_string(c.regime) << ',' << t.trial.region << ',' << t.trial.approach << ','
          << (t.outcome.success ? 1 : 0) << ',' << (t.outcome.halted ? 1 : 0) << ','
          << t.outcome.steps_used << ',' << t.outcome.retrieval_calls << ','
          << fmt(t.outcome.final_distance, 6) << ','
          << (wall_time ? fmt(t.outcome.wall_time, 6) : std::string("-")) << '\n';
    }
  }
  return out.str();
}

ExperimentReport run_experiment(const ExperimentGrid& grid) {
  MockBackend backend(grid.sim.encoder);

  std::map<Viewpoint, std::vector<Demonstration>> demos;
  for (Viewpoint v : kAllViewpoints) demos[v] = make_demonstrations(v, grid.demo_seed, grid.sim);

  // Few-shot memory holds every viewpoint's demos; zero-shot memory for a
  // viewpoint leaves that viewpoint's demos out.
  auto memory_for = [&](MemoryRegime regime, Viewpoint tested) {
    std::vector<const Demonstration*> chosen;
    for (Viewpoint v : kAllViewpoints) {
      if (regime == MemoryRegime::kZeroShot && v == tested) continue;
      for (const auto& d : demos[v]) chosen.push_back(&d);
    }
    return build_memory(chosen, backend);
  };

  ExperimentReport report;
  report.wall_time = grid.record_wall_time;

  RunOptions options;
  options.max_steps = grid.sim.max_steps;
  options.record_trace = grid.record_traces;

  for (MemoryRegime regime : grid.regimes) {
    for (Viewpoint viewpoint : grid.viewpoints) {
      const SimMemory memory = memory_for(regime, viewpoint);
      for (ObjectKind object : grid.objects) {
        const std::vector<Trial> trials = make_trials(object, viewpoint, grid.trial_seed, grid.jitter);
        for (std::size_t n : grid.horizons) {
          RetrievalParams params = grid.params;
          params.n = n;
          CellResult cell;
          cell.object = object;
          cell.viewpoint = viewpoint;
          cell.horizon = n;
          cell.regime = regime;

          auto run_one = [&](const Trial& t) {
            MockBackend local(grid.sim.encoder);
            return TrialRecord{t, run_episode(t.scene, t.start, memory, local, params, grid.sim, options)};
          };
          if (grid.threads <= 1) {
            for (const auto& t : trials) cell.trials.push_back(run_one(t));
          } else {
            std::vector<std::future<TrialRecord>> pending;
            for (const auto& t : trials) pending.push_back(std::async(std::launch::async, run_one, t));
            for (auto& f : pending) cell.trials.push_back(f.get());
          }
          report.cells.push_back(std::move(cell));
        }
      }
    }
  }
  return report;
}

std::string trace_csv(const EpisodeOutcome& outcome) {
  std::ostringstream out;
  out << "step,t,x,y,z,dx,dy,dz,rx,ry,rz,grip,queried\n";
  for (const auto& r : outcome.trace) {
    out << r.step << ',' << fmt(r.t, 3) << ',' << fmt(r.eef_pos[0], 6) << ',' << fmt(r.eef_pos[1], 6)
        << ',' << fmt(r.eef_pos[2], 6);
    for (double a : r.action.v) out << ',' << fmt(a, 6);
    out << ',' << (r.queried ? 1 : 0) << '\n';
  }
  return out.str();
}

std::string retrievals_csv(const EpisodeOutcome& outcome) {
  std::ostringstream out;
  out << "query_step,rank,episode_id,step_id,similarity,offset,x,y,z\n";
  for (const auto& ev : outcome.retrievals) {
    for (std::size_t rank = 0; rank < ev.snippets.size(); ++rank) {
      Vec3 p = ev.origin;
      const auto& nb = ev.top[rank];
      auto row = [&](std::size_t offset) {
        out << ev.step << ',' << rank + 1 << ',' << nb.state.episode_id << ',' << nb.state.step_id
            << ',' << fmt(nb.similarity, 6) << ',' << offset << ',' << fmt(p[0], 6) << ','
            << fmt(p[1], 6) << ',' << fmt(p[2], 6) << '\n';
      };
      row(0);
      for (std::size_t i = 0; i < ev.snippets[rank].size(); ++i) {
        const Action7& a = ev.snippets[rank][i];
        p = {p[0] + a.dx(), p[1] + a.dy(), p[2] + a.dz()};
        row(i + 1);
      }
    }
  }
  return out.str();
}

void write_report(const ExperimentReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto write = [](const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
    out << text;
  };
  write(dir / "report.csv", report.table_csv());
  write(dir / "outcomes.csv", report.outcomes_csv());
  for (const auto& c : report.cells) {
    for (std::size_t i = 0; i < c.trials.size(); ++i) {
      const auto& o = c.trials[i].outcome;
      if (o.trace.empty()) continue;
      const std::filesystem::path traces = dir / "traces";
      std::filesystem::create_directories(traces);
      const std::string stem = std::string(to_string(c.regime)) + "_" +
                               std::string(to_string(c.viewpoint)) + "_" +
                               std::string(to_string(c.object)) + "_N" + std::to_string(c.horizon) +
                               "_t" + std::to_string(i);
      write(traces / (stem + ".csv"), trace_csv(o));
      write(traces / (stem + ".retrievals.csv"), retrievals_csv(o));
    }
  }
}

}  // namespace rtcache::sim
