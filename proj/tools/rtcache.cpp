// rtcache command-line tool.

#include <csignal>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rtcache/bench.hpp"
#include "rtcache/episode_io.hpp"
#include "rtcache/error.hpp"
#include "rtcache/experiment.hpp"
#include "rtcache/ingest.hpp"
#include "rtcache/retrieval.hpp"
#include "rtcache/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rtcache;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kBackend = 3 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUsage: return kUsage;
    case ErrorCode::kTransport:
    case ErrorCode::kProtocol: return kBackend;
    default: return kData;
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::byte> read_bytes(const fs::path& path) {
  const std::string s = read_file(path);
  std::vector<std::byte> out(s.size());
  std::memcpy(out.data(), s.data(), s.size());
  return out;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << '\n';
    return;
  }
  std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + out_path);
  out << text;
}

struct Common {
  std::string config;
  std::string data_dir;

  ServiceConfig load() const {
    ServiceConfig c = load_service_config(config.empty() ? std::nullopt
                                                         : std::optional<fs::path>(config));
    if (!data_dir.empty()) c.data_dir = data_dir;
    return c;
  }
  ServiceConfig load_persistent() const {
    ServiceConfig c = load();
    if (c.data_dir.empty()) c.data_dir = "rtcache-data";
    return c;
  }
};

struct ParamFlags {
  std::size_t m = 0, s = 0, k = 0, n = 0;
  std::string mode;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--m", m, "datasets to shortlist");
    app->add_option("--s", s, "subset size per dataset");
    app->add_option("--k", k, "neighbors");
    app->add_option("--n", n, "horizon (snippet length)");
    app->add_option("--mode", mode, "single_best or averaged");
    app->add_option("--seed", seed, "sampling seed");
  }
  RetrievalParams apply(RetrievalParams p) const {
    if (m) p.m = m;
    if (s) p.s = s;
    if (k) p.k = k;
    if (n) p.n = n;
    if (seed) p.seed = *seed;
    if (!mode.empty()) {
      auto parsed = parse_selection_mode(mode);
      if (!parsed) fail(ErrorCode::kUsage, "--mode must be single_best or averaged");
      p.mode = *parsed;
    }
    p.validate();
    return p;
  }
};

int cmd_ingest(const Common& common, const std::string& manifest_path) {
  Service service(common.load_persistent());
  const Manifest manifest = load_manifest(manifest_path);
  std::size_t indexed = 0;
  json skipped = json::array();
  auto backend = make_backend(service.config());
  UnifyReport report = unify_dataset(manifest, [&](UnifiedEpisode&& ep, const DatasetEntry& entry) {
    FrameSource frames = [&](const std::string& ref) -> std::optional<std::vector<std::byte>> {
      if (entry.observations_dir.empty() || ref.empty()) return std::nullopt;
      const fs::path p = entry.observations_dir / ref;
      if (!fs::exists(p)) return std::nullopt;
      return read_bytes(p);
    };
    try {
      indexed += ingest_episode(ep, service.store(), service.index(), *backend, frames);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kConflict && e.code() != ErrorCode::kNotFound) throw;
      skipped.push_back({{"episode_id", ep.episode_id}, {"reason", to_string(e.code())},
                         {"message", e.what()}});
    }
  });
  service.flush();
  json out = json::parse(report.to_json());
  out["indexed_steps"] = indexed;
  out["skipped"] = skipped;
  std::cout << out.dump(2) << '\n';
  return kOk;
}

int cmd_build_centroids(const Common& common) {
  Service service(common.load_persistent());
  if (service.index().size() == 0) fail(ErrorCode::kValidation, "index is empty; ingest first");
  const CentroidTable table = service.index().compute_centroids();
  service.flush();
  json out = json::array();
  for (const auto& c : table.centroids) {
    double sq = 0.0;
    for (double x : c.mean) sq += x * x;
    out.push_back({{"dataset_id", c.dataset_id}, {"count", c.count},
                   {"mean_norm", std::sqrt(sq)}, {"degenerate", c.degenerate}});
  }
  std::cout << out.dump(2) << '\n';
  return kOk;
}

int cmd_query(const Common& common, const std::string& image, const std::string& trace,
              const std::string& observations, const std::string& scene_code,
              const ParamFlags& flags, const std::string& out_path) {
  Service service(common.load_persistent());
  const RetrievalParams params = flags.apply(service.config().defaults);
  if (service.index().size() == 0) fail(ErrorCode::kNoMatch, "index is empty");
  if (!service.index().snapshot()->centroids_clean()) service.index().compute_centroids();
  const auto snap = service.index().snapshot();
  auto backend = make_backend(service.config());

  if (!image.empty() || !scene_code.empty()) {
    std::vector<std::byte> frame;
    if (!image.empty()) {
      frame = read_bytes(image);
    } else {
      std::vector<double> code;
      std::istringstream in(scene_code);
      std::string item;
      while (std::getline(in, item, ',')) code.push_back(std::stod(item));
      frame = encode_scene_code(code);
    }
    const RetrievalResult r = retrieve(frame, *backend, *snap, service.store(), params);
    emit(retrieval_result_json(r, 2), out_path);
    return kOk;
  }

  // --trace: query every step of a recorded episode and line the retrieved
  // actions up against the episode's own next actions.
  DatasetEntry entry;
  entry.dataset_id = "trace";
  std::string text = read_file(trace);
  {
    // Accept whichever dataset_id the file carries.
    std::istringstream in(text);
    std::string first;
    while (std::getline(in, first) && first.find_first_not_of(" \t\r") == std::string::npos) {
    }
    if (!first.empty()) entry.dataset_id = json::parse(first).value("dataset_id", entry.dataset_id);
  }
  const ParsedEpisodes parsed = parse_episode_lines(text, entry, trace);
  if (!parsed.errors.empty()) fail(ErrorCode::kParse, parsed.errors.front().message);
  const fs::path obs_dir = observations.empty() ? fs::path(trace).parent_path() : fs::path(observations);
  std::ostringstream out;
  for (const auto& ep : parsed.episodes) {
    for (std::size_t i = 0; i < ep.steps.size(); ++i) {
      const auto& step = ep.steps[i];
      json line;
      line["episode_id"] = ep.episode_id;
      line["step_id"] = step.step_id;
      json truth = json::array();
      for (std::size_t j = i + 1; j < ep.steps.size() && j <= i + params.n; ++j) {
        truth.push_back(ep.steps[j].action);
      }
      line["ground_truth"] = truth;
      try {
        const RetrievalResult r =
            retrieve(read_bytes(obs_dir / step.observation_ref), *backend, *snap, service.store(), params);
        json rj = json::parse(retrieval_result_json(r));
        line["retrieved"] = rj["actions"];
        line["top"] = rj["chosen"];
        line["telemetry"] = rj["telemetry"];
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNoActionableSnippet) throw;
        line["error"] = e.what();
      }
      out << line.dump() << '\n';
    }
  }
  emit(out.str(), out_path);
  return kOk;
}

int cmd_bench(const std::string& sizes, const std::string& strategies, std::size_t datasets,
              std::size_t queries, std::size_t full_queries, const std::string& work_dir,
              const ParamFlags& flags, double sigma, const std::string& out_path) {
  BenchConfig cfg;
  cfg.sizes = parse_sizes(sizes);
  cfg.strategies.clear();
  std::istringstream in(strategies);
  std::string item;
  while (std::getline(in, item, ',')) {
    auto s = parse_strategy(item);
    if (!s) fail(ErrorCode::kUsage, "unknown strategy '" + item + "'");
    cfg.strategies.push_back(*s);
  }
  if (cfg.strategies.empty()) fail(ErrorCode::kUsage, "no strategies given");
  cfg.datasets = datasets;
  cfg.queries = queries;
  cfg.full_queries = full_queries;
  cfg.sigma = sigma;
  cfg.work_dir = work_dir;
  cfg.params = flags.apply(cfg.params);
  emit(run_bench(cfg).to_json(), out_path);
  return kOk;
}

int cmd_simulate(const std::string& grid_path, const std::string& out_dir) {
  const sim::ExperimentGrid grid = sim::parse_grid(read_file(grid_path));
  const sim::ExperimentReport report = sim::run_experiment(grid);
  if (!out_dir.empty()) sim::write_report(report, out_dir);
  std::cout << report.table_csv();
  return kOk;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

int cmd_export_plot(const std::string& trace_path, std::optional<std::size_t> query_step,
                    const std::string& out_dir) {
  const auto trace = read_csv(trace_path);
  if (trace.empty() || trace[0].size() < 5 || trace[0][2] != "x") {
    fail(ErrorCode::kParse, trace_path + " is not a trace file");
  }
  fs::path retrievals_path = trace_path;
  retrievals_path.replace_extension(".retrievals.csv");
  const auto retrievals = read_csv(retrievals_path);
  if (retrievals.empty()) fail(ErrorCode::kParse, retrievals_path.string() + " is empty");

  // Ground truth from the query step onward; snippets anchored at it.
  std::size_t step = 0;
  if (query_step) {
    step = *query_step;
  } else if (retrievals.size() > 1) {
    step = std::stoul(retrievals[1][0]);
  }
  std::ostringstream truth;
  truth << "index,x,y,z\n";
  std::size_t idx = 0;
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (std::stoul(trace[i][0]) < step) continue;
    truth << idx++ << ',' << trace[i][2] << ',' << trace[i][3] << ',' << trace[i][4] << '\n';
  }
  std::map<std::string, std::ostringstream> snippets;
  for (std::size_t i = 1; i < retrievals.size(); ++i) {
    const auto& r = retrievals[i];
    if (std::stoul(r[0]) != step) continue;
    auto& os = snippets[r[1]];
    if (os.tellp() == 0) os << "index,x,y,z,episode_id,step_id,similarity\n";
    os << r[5] << ',' << r[6] << ',' << r[7] << ',' << r[8] << ',' << r[2] << ',' << r[3] << ','
       << r[4] << '\n';
  }
  if (snippets.empty()) fail(ErrorCode::kNotFound, "no retrieval at step " + std::to_string(step));

  if (out_dir.empty()) {
    std::cout << "series,index,x,y,z\n";
    auto dump = [](const std::string& name, const std::string& body) {
      std::istringstream in(body);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string a, b, c, d;
        std::getline(ls, a, ',');
        std::getline(ls, b, ',');
        std::getline(ls, c, ',');
        std::getline(ls, d, ',');
        std::cout << name << ',' << a << ',' << b << ',' << c << ',' << d << '\n';
      }
    };
    dump("ground_truth", truth.str());
    for (auto& [rank, os] : snippets) dump("snippet_" + rank, os.str());
    return kOk;
  }
  fs::create_directories(out_dir);
  emit(truth.str(), (fs::path(out_dir) / "ground_truth.csv").string());
  for (auto& [rank, os] : snippets) {
    emit(os.str(), (fs::path(out_dir) / ("snippet_" + rank + ".csv")).string());
  }
  return kOk;
}

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int cmd_serve(const Common& common) {
  Service service(common.load());
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << service.config().listen << '\n';
  service.serve();
  g_service = nullptr;
  return kOk;
}

int cmd_stats(const Common& common) {
  Service service(common.load_persistent());
  std::cout << json::parse(service.stats().body).dump(2) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rtcache: trajectory memory retrieval engine"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "service config file (JSON)");
  app.add_option("--data-dir", common.data_dir, "store and index directory");

  std::string manifest;
  auto* ingest = app.add_subcommand("ingest", "unify, store and index a dataset manifest");
  ingest->add_option("manifest", manifest, "manifest JSON")->required();

  auto* centroids = app.add_subcommand("build-centroids", "recompute per-dataset centroids");

  std::string image, trace, observations, scene_code, query_out;
  ParamFlags query_flags;
  auto* query = app.add_subcommand("query", "retrieve snippets for an observation");
  auto* image_opt = query->add_option("--image", image, "observation bytes");
  auto* trace_opt = query->add_option("--trace", trace, "canonical episode file to replay as queries");
  auto* code_opt = query->add_option("--scene-code", scene_code, "comma-separated mock scene code");
  query->add_option("--observations", observations, "frames directory for --trace");
  query->add_option("--out", query_out, "write results here instead of stdout");
  image_opt->excludes(trace_opt)->excludes(code_opt);
  trace_opt->excludes(code_opt);
  query_flags.add(query);

  std::string sizes = "1e4,1e5,1e6", strategies = "full,centroid,subset,hierarchical";
  std::string work_dir = "rtcache-bench", bench_out;
  std::size_t datasets = 20, queries = 101, full_queries = 9;
  double sigma = 0.006;
  ParamFlags bench_flags;
  auto* bench = app.add_subcommand("bench", "time search strategies on clustered corpora");
  bench->add_option("--sizes", sizes, "corpus sizes, e.g. 1e4,1e5,1e6");
  bench->add_option("--strategies", strategies, "full,centroid,subset,hierarchical");
  bench->add_option("--datasets", datasets, "datasets per corpus");
  bench->add_option("--queries", queries, "queries per strategy");
  bench->add_option("--full-queries", full_queries, "queries for the full and centroid scans");
  bench->add_option("--sigma", sigma, "per-dimension cluster noise");
  bench->add_option("--work-dir", work_dir, "where corpus files are kept");
  bench->add_option("--out", bench_out, "write the JSON report here");
  bench_flags.add(bench);

  std::string grid, sim_out;
  auto* simulate = app.add_subcommand("simulate", "run the closed-loop experiment grid");
  simulate->add_option("--grid", grid, "grid JSON")->required();
  simulate->add_option("--out", sim_out, "report directory");

  std::string plot_trace, plot_out;
  std::optional<std::size_t> plot_step;
  auto* plot = app.add_subcommand("export-plot", "ground truth and top-3 snippet polylines");
  plot->add_option("trace", plot_trace, "trace CSV written by simulate")->required();
  plot->add_option("--step", plot_step, "query step to plot (default: first)");
  plot->add_option("--out", plot_out, "directory for the polyline files");

  auto* serve = app.add_subcommand("serve", "run the HTTP service");
  auto* stats = app.add_subcommand("stats", "print store and index counts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*ingest) return cmd_ingest(common, manifest);
    if (*centroids) return cmd_build_centroids(common);
    if (*query) {
      if (image.empty() && trace.empty() && scene_code.empty()) {
        fail(ErrorCode::kUsage, "query needs --image, --trace or --scene-code");
      }
      return cmd_query(common, image, trace, observations, scene_code, query_flags, query_out);
    }
    if (*bench) {
      return cmd_bench(sizes, strategies, datasets, queries, full_queries, work_dir, bench_flags,
                       sigma, bench_out);
    }
    if (*simulate) return cmd_simulate(grid, sim_out);
    if (*plot) return cmd_export_plot(plot_trace, plot_step, plot_out);
    if (*serve) return cmd_serve(common);
    if (*stats) return cmd_stats(common);
  } catch (const Error& e) {
    std::cerr << json{{"error", to_string(e.code())}, {"message", e.what()}}.dump() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return kData;
  }
  return kUsage;
}
