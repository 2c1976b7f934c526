#include <atomic>
#include <condition_variable>
#include <mutex>

#include <httplib.h>
#include <json.hpp>

#include "base64.hpp"
#include "rtcache/embedder.hpp"
#include "rtcache/error.hpp"

namespace rtcache {

using nlohmann::json;

struct RemoteBackend::Impl {
  RemoteBackendConfig config;
  std::mutex mu;
  std::condition_variable cv;
  std::size_t in_flight = 0;
  std::atomic<std::uint64_t> next_id{0};

  class Slot {
   public:
    explicit Slot(Impl& impl) : impl_(impl) {
      std::unique_lock lock(impl_.mu);
      impl_.cv.wait(lock, [&] { return impl_.in_flight < impl_.config.max_in_flight; });
      ++impl_.in_flight;
    }
    ~Slot() {
      {
        std::lock_guard lock(impl_.mu);
        --impl_.in_flight;
      }
      impl_.cv.notify_one();
    }
    Slot(const Slot&) = delete;
    Slot& operator=(const Slot&) = delete;

   private:
    Impl& impl_;
  };
};

RemoteBackend::RemoteBackend(RemoteBackendConfig config) : impl_(std::make_unique<Impl>()) {
  if (config.max_in_flight == 0) fail(ErrorCode::kValidation, "max_in_flight must be positive");
  impl_->config = std::move(config);
}

RemoteBackend::~RemoteBackend() = default;

namespace {

std::vector<double> read_features(const json& body, const char* key, std::size_t want) {
  if (!body.contains(key) || !body[key].is_array()) {
    fail(ErrorCode::kProtocol, std::string("response lacks array '") + key + "'");
  }
  const auto& arr = body[key];
  if (arr.size() != want) {
    fail(ErrorCode::kProtocol, std::string("'") + key + "' has " + std::to_string(arr.size()) +
                                   " entries, expected " + std::to_string(want));
  }
  std::vector<double> out;
  out.reserve(want);
  for (const auto& v : arr) {
    if (!v.is_number()) fail(ErrorCode::kProtocol, std::string("non-numeric entry in '") + key + "'");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

FeaturePair RemoteBackend::features(std::span<const std::byte> image) {
  Impl::Slot slot(*impl_);

  const std::string id = "req-" + std::to_string(impl_->next_id.fetch_add(1));
  json request;
  request["image"] = detail::base64_encode(image);
  request["id"] = id;

  httplib::Client client(impl_->config.url);
  const auto timeout = impl_->config.timeout;
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(),
                                static_cast<time_t>((timeout.count() % 1000) * 1000));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(),
                          static_cast<time_t>((timeout.count() % 1000) * 1000));
  client.set_write_timeout(std::chrono::duration_cast<std::chrono::seconds>(timeout).count(),
                           static_cast<time_t>((timeout.count() % 1000) * 1000));

  auto res = client.Post("/embed", request.dump(), "application/json");
  if (!res) {
    fail(ErrorCode::kTransport, "embedder unreachable at " + impl_->config.url + ": " +
                                    httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    std::string message = "embedder replied " + std::to_string(res->status);
    try {
      const json err = json::parse(res->body);
      message += ": " + err.value("code", std::string("?")) + " " +
                 err.value("message", std::string());
    } catch (const json::exception&) {
    }
    fail(res->status >= 500 ? ErrorCode::kTransport : ErrorCode::kProtocol, message);
  }

  json body;
  try {
    body = json::parse(res->body);
  } catch (const json::exception& e) {
    fail(ErrorCode::kProtocol, std::string("embedder sent invalid JSON: ") + e.what());
  }
  if (!body.is_object()) fail(ErrorCode::kProtocol, "embedder response is not an object");
  if (body.value("id", std::string()) != id) {
    fail(ErrorCode::kProtocol, "embedder response id does not echo the request");
  }
  FeaturePair pair;
  pair.d = read_features(body, "d", kFirstEncoderDim);
  pair.s = read_features(body, "s", kSecondEncoderDim);
  return pair;
}

}  // namespace rtcache
