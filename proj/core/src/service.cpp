#include "rtcache/service.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "base64.hpp"
#include "rtcache/episode_io.hpp"
#include "rtcache/error.hpp"
#include "rtcache/ingest.hpp"

namespace rtcache {

using nlohmann::json;
namespace fs = std::filesystem;

ServiceConfig parse_service_config(const std::string& json_text) {
  ServiceConfig c;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::kParse, "config must be a JSON object");
  try {
    if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
    c.listen = j.value("listen", c.listen);
    if (j.contains("backend")) {
      const json& b = j["backend"];
      c.backend = b.value("kind", c.backend);
      c.remote.url = b.value("url", c.remote.url);
      c.remote.timeout = std::chrono::milliseconds(b.value("timeout_ms", c.remote.timeout.count()));
      c.remote.max_in_flight = b.value("max_in_flight", c.remote.max_in_flight);
    }
    if (j.contains("mock")) {
      c.mock.seed = j["mock"].value("seed", c.mock.seed);
      c.mock.sigma = j["mock"].value("sigma", c.mock.sigma);
    }
    if (j.contains("retrieval")) {
      const json& r = j["retrieval"];
      c.defaults.m = r.value("m", c.defaults.m);
      c.defaults.s = r.value("s", c.defaults.s);
      c.defaults.k = r.value("k", c.defaults.k);
      c.defaults.n = r.value("n", c.defaults.n);
      c.defaults.seed = r.value("seed", c.defaults.seed);
      if (r.contains("mode")) {
        auto mode = parse_selection_mode(r["mode"].get<std::string>());
        if (!mode) fail(ErrorCode::kValidation, "unknown retrieval mode in config");
        c.defaults.mode = *mode;
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kParse, std::string("bad config field: ") + e.what());
  }
  if (c.backend != "mock" && c.backend != "remote") {
    fail(ErrorCode::kValidation, "backend must be mock or remote");
  }
  c.defaults.validate();
  return c;
}

ServiceConfig load_service_config(const std::optional<fs::path>& path) {
  ServiceConfig c;
  if (path) {
    std::ifstream in(*path);
    if (!in) fail(ErrorCode::kIo, "cannot open config " + path->string());
    std::ostringstream os;
    os << in.rdbuf();
    c = parse_service_config(os.str());
  }
  if (const char* dir = std::getenv("RTCACHE_DATA_DIR"); dir && *dir) c.data_dir = dir;
  if (const char* listen = std::getenv("RTCACHE_LISTEN"); listen && *listen) c.listen = listen;
  return c;
}

std::unique_ptr<EmbeddingBackend> make_backend(const ServiceConfig& config) {
  if (config.backend == "remote") return std::make_unique<RemoteBackend>(config.remote);
  return std::make_unique<MockBackend>(config.mock);
}

namespace {

json state_json(const StateId& s) { return {{"episode_id", s.episode_id}, {"step_id", s.step_id}}; }

json actions_json(const std::vector<Action7>& actions) {
  json out = json::array();
  for (const auto& a : actions) out.push_back(a.v);
  return out;
}

json result_to_json(const RetrievalResult& r) {
  json j;
  j["neighbors"] = json::array();
  for (const auto& nb : r.neighbors) {
    json n = state_json(nb.state);
    n["dataset_id"] = nb.dataset_id;
    n["similarity"] = nb.similarity;
    j["neighbors"].push_back(std::move(n));
  }
  j["chosen"] = json::array();
  for (const auto& s : r.chosen) j["chosen"].push_back(state_json(s));
  j["snippets"] = json::array();
  for (const auto& s : r.snippets) j["snippets"].push_back(actions_json(s));
  j["actions"] = actions_json(r.actions);
  const auto& t = r.telemetry;
  json tel;
  tel["candidates_scanned"] = t.candidates_scanned;
  tel["snippets_skipped"] = t.snippets_skipped;
  tel["shortlist"] = json::array();
  for (const auto& d : t.shortlist) {
    tel["shortlist"].push_back({{"dataset_id", d.dataset_id}, {"distance", d.distance},
                                {"degenerate", d.degenerate}});
  }
  tel["latency_ms"] = {{"embed", t.latency.embed_ms},   {"select", t.latency.select_ms},
                       {"sample", t.latency.sample_ms}, {"knn", t.latency.knn_ms},
                       {"snippet", t.latency.snippet_ms}, {"total", t.latency.total_ms}};
  j["telemetry"] = std::move(tel);
  return j;
}

HttpResponse error_response(int status, std::string_view code, const std::string& message) {
  return {status, json{{"code", code}, {"message", message}}.dump()};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kValidation:
    case ErrorCode::kParse:
    case ErrorCode::kUsage:
      return 400;
    case ErrorCode::kNotFound:
    case ErrorCode::kNoActionableSnippet:
      return 404;
    case ErrorCode::kConflict:
      return 409;
    case ErrorCode::kDegenerateInput:
      return 422;
    case ErrorCode::kNoMatch:
    case ErrorCode::kStaleCentroids:
      return 503;
    case ErrorCode::kTransport:
    case ErrorCode::kProtocol:
      return 502;
    case ErrorCode::kIo:
      return 500;
  }
  return 500;
}

RetrievalParams parse_params(const json& body, const RetrievalParams& defaults) {
  RetrievalParams p = defaults;
  if (!body.contains("params")) return p;
  const json& j = body["params"];
  if (!j.is_object()) fail(ErrorCode::kValidation, "params must be an object");
  auto positive = [&](const char* key, std::size_t& field) {
    if (!j.contains(key)) return;
    const json& v = j[key];
    if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
      fail(ErrorCode::kValidation, std::string("params.") + key + " must be a positive integer");
    }
    field = v.get<std::size_t>();
  };
  positive("m", p.m);
  positive("s", p.s);
  positive("k", p.k);
  positive("n", p.n);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) fail(ErrorCode::kValidation, "params.seed must be unsigned");
    p.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("mode")) {
    auto mode = j["mode"].is_string() ? parse_selection_mode(j["mode"].get<std::string>())
                                      : std::nullopt;
    if (!mode) fail(ErrorCode::kValidation, "params.mode must be single_best or averaged");
    p.mode = *mode;
  }
  p.validate();
  return p;
}

}  // namespace

std::string retrieval_result_json(const RetrievalResult& result, int indent) {
  return result_to_json(result).dump(indent);
}

struct Service::Impl {
  ServiceConfig config;
  std::unique_ptr<EmbeddingBackend> backend;
  MemoryStore store;
  VectorIndex index;
  std::mutex writer_mu;
  httplib::Server server;
  std::atomic<bool> serving{false};

  fs::path index_path() const { return config.data_dir / "index.rtc"; }

  // Embeds stored episodes that the saved index does not cover, e.g. after
  // a crash between a store flush and the next index save.
  void reconcile() {
    const auto snap = index.snapshot();
    for (const std::string& ep : store.list_episodes()) {
      auto steps = store.episode_steps(ep);
      if (steps.empty() || snap->find(steps.front().state())) continue;
      for (const auto& s : steps) {
        if (snap->find(s.state())) continue;
        if (!s.image_blob_ref) fail(ErrorCode::kNotFound, "stored step without observation: " + to_string(s.state()));
        auto blob = store.get_blob(*s.image_blob_ref);
        if (!blob) fail(ErrorCode::kNotFound, "missing blob " + *s.image_blob_ref);
        index.insert(s.state(), s.dataset_id, embed(*blob, *backend).to_float());
      }
    }
    index.publish();
  }
};

Service::Service(ServiceConfig config, std::unique_ptr<EmbeddingBackend> backend)
    : impl_(std::make_unique<Impl>()) {
  config.defaults.validate();
  impl_->config = std::move(config);
  impl_->backend = backend ? std::move(backend) : make_backend(impl_->config);
  if (!impl_->config.data_dir.empty()) {
    fs::create_directories(impl_->config.data_dir);
    impl_->store = MemoryStore(impl_->config.data_dir / "store");
    if (fs::exists(impl_->index_path())) impl_->index = VectorIndex::load(impl_->index_path());
    impl_->reconcile();
  }
}

Service::~Service() {
  stop();
}

MemoryStore& Service::store() { return impl_->store; }
VectorIndex& Service::index() { return impl_->index; }
const ServiceConfig& Service::config() const { return impl_->config; }

HttpResponse Service::ingest_episode(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return error_response(400, "parse", std::string("body is not valid JSON: ") + e.what());
  }
  DatasetEntry entry;
  std::string lines;
  std::map<std::string, std::vector<std::byte>> frames;
  try {
    entry.dataset_id = j.at("dataset_id").get<std::string>();
    entry.frequency_hz = j.at("frequency_hz").get<double>();
    auto space = parse_action_space(j.at("action_space").get<std::string>());
    if (!space) return error_response(400, "validation", "unknown action_space");
    entry.action_space = *space;
    entry.units = j.value("units", std::string("m"));
    const json& records = j.at("records");
    if (!records.is_array() || records.empty()) {
      return error_response(400, "validation", "records must be a non-empty array");
    }
    for (const auto& r : records) lines += r.dump() + "\n";
    if (j.contains("observations")) {
      for (const auto& [ref, data] : j.at("observations").items()) {
        auto bytes = detail::base64_decode(data.get<std::string>());
        if (!bytes) return error_response(400, "validation", "observation " + ref + " is not base64");
        frames[ref] = std::move(*bytes);
      }
    }
  } catch (const json::exception& e) {
    return error_response(400, "validation", std::string("malformed ingest body: ") + e.what());
  }
  if (entry.dataset_id.empty() || entry.dataset_id.size() > kMaxDatasetIdBytes) {
    return error_response(400, "validation", "dataset_id must be 1..31 bytes");
  }

  ParsedEpisodes parsed = parse_episode_lines(lines, entry, "request");
  if (!parsed.errors.empty()) return error_response(400, "parse", parsed.errors.front().message);

  json response;
  response["accepted"] = 0;
  response["episodes"] = json::array();
  response["rejected"] = json::array();

  std::lock_guard lock(impl_->writer_mu);
  for (const auto& ep : parsed.episodes) {
    if (impl_->store.has_episode(ep.episode_id)) {
      return error_response(409, "conflict", "episode " + ep.episode_id + " is already stored");
    }
  }
  FrameSource source = [&](const std::string& ref) -> std::optional<std::vector<std::byte>> {
    auto it = frames.find(ref);
    if (it == frames.end()) return std::nullopt;
    return it->second;
  };
  std::size_t accepted = 0;
  for (const auto& ep : parsed.episodes) {
    UnifyOutcome outcome = unify_episode(ep);
    if (!outcome.episode) {
      response["rejected"].push_back(
          {{"episode_id", ep.episode_id}, {"reason", to_string(*outcome.reason)}});
      continue;
    }
    try {
      accepted += rtcache::ingest_episode(*outcome.episode, impl_->store, impl_->index,
                                          *impl_->backend, source);
    } catch (const Error& e) {
      impl_->index.publish();
      impl_->store.flush();
      const int status = e.code() == ErrorCode::kNotFound ? 400 : status_for(e.code());
      return error_response(status, to_string(e.code()), e.what());
    }
    response["episodes"].push_back(ep.episode_id);
  }
  impl_->index.publish();
  impl_->store.flush();
  response["accepted"] = accepted;
  return {200, response.dump()};
}

HttpResponse Service::query(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    return error_response(400, "parse", std::string("body is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) return error_response(400, "parse", "body must be a JSON object");

  RetrievalParams params;
  try {
    params = parse_params(j, impl_->config.defaults);
  } catch (const Error& e) {
    return error_response(422, "validation", e.what());
  }

  try {
    bool recomputed = false;
    auto snap = impl_->index.snapshot();
    if (snap->empty()) return error_response(503, "no_match", "index is empty");
    if (!snap->centroids_clean()) {
      std::lock_guard lock(impl_->writer_mu);
      if (!impl_->index.snapshot()->centroids_clean()) {
        impl_->index.compute_centroids();
        recomputed = true;
      }
      snap = impl_->index.snapshot();
    }

    RetrievalResult result;
    if (j.contains("embedding")) {
      std::vector<double> v;
      try {
        v = j["embedding"].get<std::vector<double>>();
      } catch (const json::exception&) {
        return error_response(400, "validation", "embedding must be an array of numbers");
      }
      double sq = 0.0;
      for (double x : v) sq += x * x;
      if (v.size() == kFusedDim && sq > 0.0) {
        const double inv = 1.0 / std::sqrt(sq);
        for (double& x : v) x *= inv;
      }
      result = retrieve(FusedEmbedding::from_unit_vector(std::move(v)), *snap, impl_->store, params);
    } else if (j.contains("scene_code")) {
      std::vector<double> code;
      try {
        code = j["scene_code"].get<std::vector<double>>();
      } catch (const json::exception&) {
        return error_response(400, "validation", "scene_code must be an array of numbers");
      }
      if (code.size() > kMaxSceneCodeDims) {
        return error_response(400, "validation", "scene_code has more than 16 entries");
      }
      result = retrieve(encode_scene_code(code), *impl_->backend, *snap, impl_->store, params);
    } else if (j.contains("image")) {
      auto bytes = j["image"].is_string() ? detail::base64_decode(j["image"].get<std::string>())
                                          : std::nullopt;
      if (!bytes) return error_response(400, "validation", "image must be base64");
      result = retrieve(*bytes, *impl_->backend, *snap, impl_->store, params);
    } else {
      return error_response(400, "validation", "query needs image, scene_code or embedding");
    }
    json out = result_to_json(result);
    out["telemetry"]["centroids_recomputed"] = recomputed;
    out["params"] = {{"m", params.m}, {"s", params.s},   {"k", params.k},
                     {"n", params.n}, {"mode", to_string(params.mode)}, {"seed", params.seed}};
    return {200, out.dump()};
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kValidation) return error_response(400, "validation", e.what());
    return error_response(status_for(e.code()), to_string(e.code()), e.what());
  }
}

HttpResponse Service::stats() const {
  const StoreStats s = impl_->store.stats();
  const auto snap = impl_->index.snapshot();
  json j;
  j["episodes"] = s.episodes;
  j["steps"] = s.steps;
  j["embeddings"] = snap->size();
  j["datasets"] = s.datasets;
  j["index_bytes"] = snap->byte_size();
  j["store_bytes"] = s.log_bytes + s.blob_bytes;
  j["centroids_clean"] = snap->empty() || snap->centroids_clean();
  return {200, j.dump()};
}

void Service::flush() {
  std::lock_guard lock(impl_->writer_mu);
  impl_->index.publish();
  impl_->store.flush();
  if (!impl_->config.data_dir.empty() && impl_->store.persistent()) {
    impl_->index.save(impl_->index_path());
  }
}

void Service::serve() {
  auto& srv = impl_->server;
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  srv.Post("/ingest/episode", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, ingest_episode(req.body));
  });
  srv.Post("/query", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, query(req.body));
  });
  srv.Get("/stats", [this, reply](const httplib::Request&, httplib::Response& res) {
    reply(res, stats());
  });

  const std::string& listen = impl_->config.listen;
  const auto colon = listen.rfind(':');
  if (colon == std::string::npos) fail(ErrorCode::kValidation, "listen must be host:port");
  const std::string host = listen.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(listen.substr(colon + 1));
  } catch (const std::exception&) {
    fail(ErrorCode::kValidation, "listen port is not a number");
  }
  impl_->serving = true;
  const bool ok = srv.listen(host, port);
  impl_->serving = false;
  flush();
  if (!ok) fail(ErrorCode::kIo, "cannot listen on " + listen);
}

void Service::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace rtcache
