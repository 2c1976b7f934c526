#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "rtcache/embedder.hpp"
#include "rtcache/memory_store.hpp"
#include "rtcache/retrieval.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache {

struct ServiceConfig {
  // Store under <data_dir>/store, index at <data_dir>/index.rtc. Empty keeps
  // everything in memory.
  std::filesystem::path data_dir;
  std::string backend = "mock";  // mock | remote
  RemoteBackendConfig remote;
  MockEncoderConfig mock;
  RetrievalParams defaults;
  std::string listen = "127.0.0.1:8080";
};

/// Config file (JSON), every key optional:
///   {"data_dir":"data", "listen":"0.0.0.0:8080",
///    "backend":{"kind":"remote","url":"http://127.0.0.1:8090","timeout_ms":5000,"max_in_flight":4},
///    "mock":{"seed":1592598902,"sigma":1.0},
///    "retrieval":{"m":3,"s":2000,"k":50,"n":3,"mode":"single_best","seed":0}}
/// RTCACHE_DATA_DIR and RTCACHE_LISTEN override the file.
ServiceConfig parse_service_config(const std::string& json_text);
ServiceConfig load_service_config(const std::optional<std::filesystem::path>& path);

std::unique_ptr<EmbeddingBackend> make_backend(const ServiceConfig& config);

std::string retrieval_result_json(const RetrievalResult& result, int indent = -1);

struct HttpResponse {
  int status = 200;
  std::string body;  // JSON
};

/// Ingest/query service. The handlers take request bodies and return
/// responses so they can be driven without a socket; serve() binds them to
/// an HTTP listener.
class Service {
 public:
  explicit Service(ServiceConfig config, std::unique_ptr<EmbeddingBackend> backend = nullptr);
  ~Service();

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // POST /ingest/episode
  //   {"dataset_id":..,"frequency_hz":..,"action_space":..,"units":"m",
  //    "records":[canonical step objects], "observations":{"<ref>":"<base64>"}}
  HttpResponse ingest_episode(const std::string& body);
  // POST /query  {"image":"<base64>"} | {"scene_code":[..]} | {"embedding":[2176]}, "params":{..}
  HttpResponse query(const std::string& body);
  // GET /stats
  HttpResponse stats() const;

  /// Flushes the store and writes the index to disk (no-op in memory).
  void flush();

  // Blocks until stop() is called; flushes on the way out.
  void serve();
  void stop();

  MemoryStore& store();
  VectorIndex& index();
  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace rtcache
