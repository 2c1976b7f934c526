#include "rtcache/memory_store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <unordered_map>

#include <openssl/sha.h>
#include <unistd.h>
#include <zlib.h>

#include <json.hpp>

#include "rtcache/error.hpp"

namespace rtcache {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSegmentLimit = 64ull << 20;
constexpr std::uint32_t kMaxRecordBytes = 1u << 20;

std::string state_key(std::string_view episode_id, std::uint64_t step_id) {
  std::string key(episode_id);
  key.push_back('\x1f');
  key += std::to_string(step_id);
  return key;
}

json record_to_json(const StepRecord& r) {
  json j;
  j["e"] = r.episode_id;
  j["s"] = r.step_id;
  j["t"] = r.timestamp;
  j["a"] = r.action.v;
  j["b"] = r.image_blob_ref ? json(*r.image_blob_ref) : json(nullptr);
  j["d"] = r.dataset_id;
  return j;
}

StepRecord record_from_json(const json& j) {
  StepRecord r;
  r.episode_id = j.at("e").get<std::string>();
  r.step_id = j.at("s").get<std::uint64_t>();
  r.timestamp = j.at("t").get<double>();
  r.action.v = j.at("a").get<std::array<double, 7>>();
  if (!j.at("b").is_null()) r.image_blob_ref = j.at("b").get<std::string>();
  r.dataset_id = j.at("d").get<std::string>();
  return r;
}

std::uint32_t crc_of(const std::string& payload) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), static_cast<uInt>(payload.size())));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(p[i]);
  return v;
}

std::string segment_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "seg-%06zu.log", index);
  return buf;
}

}  // namespace

std::string to_string(const StateId& id) {
  return id.episode_id + "#" + std::to_string(id.step_id);
}

std::string sha256_hex(std::span<const std::byte> bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * SHA256_DIGEST_LENGTH);
  for (unsigned char c : digest) {
    out.push_back(kHex[c >> 4]);
    out.push_back(kHex[c & 0xf]);
  }
  return out;
}

struct MemoryStore::Impl {
  struct Episode {
    std::string dataset_id;
    std::vector<std::size_t> rows;  // ordered by step_id
  };

  fs::path dir;
  mutable std::shared_mutex mu;

  std::vector<StepRecord> records;
  std::unordered_map<std::string, std::size_t> by_key;
  std::unordered_map<std::string, Episode> episodes;

  std::unordered_map<std::string, std::vector<std::byte>> volatile_blobs;
  std::set<std::string> blob_index;
  std::uint64_t blob_bytes = 0;

  std::FILE* log = nullptr;
  std::size_t segment_index = 0;
  std::uint64_t segment_bytes = 0;
  std::uint64_t log_bytes = 0;

  ~Impl() {
    if (log) {
      std::fflush(log);
      std::fclose(log);
    }
  }

  bool persistent() const { return !dir.empty(); }
  fs::path segments_dir() const { return dir / "segments"; }
  fs::path blobs_dir() const { return dir / "blobs"; }
  fs::path blob_path(std::string_view hash) const {
    return blobs_dir() / std::string(hash.substr(0, 2)) / std::string(hash);
  }

  // Applies a record to the in-memory tables. Returns false when an
  // identical record is already present.
  bool apply(const StepRecord& r) {
    const std::string key = state_key(r.episode_id, r.step_id);
    if (auto it = by_key.find(key); it != by_key.end()) {
      if (records[it->second] == r) return false;
      fail(ErrorCode::kConflict, "state " + to_string(r.state()) + " exists with different content");
    }
    auto ep = episodes.find(r.episode_id);
    if (ep != episodes.end() && ep->second.dataset_id != r.dataset_id) {
      fail(ErrorCode::kConflict, "episode " + r.episode_id + " belongs to dataset " +
                                     ep->second.dataset_id);
    }
    const std::size_t row = records.size();
    records.push_back(r);
    by_key.emplace(key, row);
    Episode& e = episodes[r.episode_id];
    e.dataset_id = r.dataset_id;
    auto pos = std::upper_bound(e.rows.begin(), e.rows.end(), r.step_id,
                                [this](std::uint64_t s, std::size_t idx) {
                                  return s < records[idx].step_id;
                                });
    e.rows.insert(pos, row);
    return true;
  }

  void open_segment_for_append() {
    const fs::path path = segments_dir() / segment_name(segment_index);
    log = std::fopen(path.c_str(), "ab");
    if (!log) fail(ErrorCode::kIo, "cannot open log segment " + path.string());
    segment_bytes = fs::file_size(path);
  }

  void append_to_log(const StepRecord& r) {
    const std::string payload = record_to_json(r).dump();
    std::string frame;
    frame.reserve(payload.size() + 8);
    put_u32(frame, static_cast<std::uint32_t>(payload.size()));
    put_u32(frame, crc_of(payload));
    frame += payload;

    if (segment_bytes > 0 && segment_bytes + frame.size() > kSegmentLimit) {
      std::fflush(log);
      ::fsync(fileno(log));
      std::fclose(log);
      log = nullptr;
      ++segment_index;
      open_segment_for_append();
    }
    if (std::fwrite(frame.data(), 1, frame.size(), log) != frame.size()) {
      fail(ErrorCode::kIo, "log append failed");
    }
    segment_bytes += frame.size();
    log_bytes += frame.size();
  }

  // Replays one segment; returns the byte length of its valid prefix.
  std::uint64_t replay_segment(const fs::path& path, bool last) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::kIo, "cannot read " + path.string());
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::uint64_t pos = 0;
    while (pos + 8 <= data.size()) {
      const std::uint32_t len = get_u32(data.data() + pos);
      const std::uint32_t crc = get_u32(data.data() + pos + 4);
      if (len > kMaxRecordBytes || pos + 8 + len > data.size()) break;
      std::string payload = data.substr(pos + 8, len);
      if (crc_of(payload) != crc) break;
      StepRecord r;
      try {
        r = record_from_json(json::parse(payload));
      } catch (const json::exception&) {
        break;
      }
      apply(r);
      pos += 8 + len;
    }
    if (pos != data.size() && !last) {
      fail(ErrorCode::kIo, "corrupt record inside sealed segment " + path.string());
    }
    return pos;
  }

  void open(const fs::path& d) {
    dir = d;
    fs::create_directories(segments_dir());
    fs::create_directories(blobs_dir());

    std::vector<fs::path> segs;
    for (const auto& entry : fs::directory_iterator(segments_dir())) {
      if (entry.path().extension() == ".log") segs.push_back(entry.path());
    }
    std::sort(segs.begin(), segs.end());
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const bool last = i + 1 == segs.size();
      const std::uint64_t valid = replay_segment(segs[i], last);
      if (last && valid != fs::file_size(segs[i])) {
        fs::resize_file(segs[i], valid);  // drop the torn tail
      }
      log_bytes += valid;
    }
    segment_index = segs.empty() ? 0 : segs.size() - 1;
    open_segment_for_append();

    for (const auto& entry : fs::recursive_directory_iterator(blobs_dir())) {
      if (!entry.is_regular_file()) continue;
      const std::string name = entry.path().filename().string();
      if (name.size() != 64) continue;  // skip temporaries
      blob_index.insert(name);
      blob_bytes += entry.file_size();
    }
  }
};

MemoryStore::MemoryStore() : impl_(std::make_unique<Impl>()) {}

MemoryStore::MemoryStore(const fs::path& dir) : impl_(std::make_unique<Impl>()) {
  impl_->open(dir);
}

MemoryStore::~MemoryStore() = default;
MemoryStore::MemoryStore(MemoryStore&&) noexcept = default;
MemoryStore& MemoryStore::operator=(MemoryStore&&) noexcept = default;

void MemoryStore::put_step(const StepRecord& record) {
  if (record.episode_id.empty()) fail(ErrorCode::kValidation, "empty episode_id");
  if (record.dataset_id.empty()) fail(ErrorCode::kValidation, "empty dataset_id");
  if (!record.action.valid()) fail(ErrorCode::kValidation, "invalid action in step record");
  if (!std::isfinite(record.timestamp)) fail(ErrorCode::kValidation, "non-finite timestamp");

  std::unique_lock lock(impl_->mu);
  if (record.image_blob_ref && !impl_->blob_index.count(*record.image_blob_ref)) {
    fail(ErrorCode::kValidation, "image blob " + *record.image_blob_ref + " is not stored");
  }
  if (impl_->apply(record) && impl_->persistent()) impl_->append_to_log(record);
}

std::string MemoryStore::put_blob(std::span<const std::byte> bytes) {
  const std::string hash = sha256_hex(bytes);
  std::unique_lock lock(impl_->mu);
  if (impl_->blob_index.count(hash)) return hash;
  if (impl_->persistent()) {
    const fs::path path = impl_->blob_path(hash);
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      if (!out) fail(ErrorCode::kIo, "blob write failed for " + hash);
    }
    fs::rename(tmp, path);
  } else {
    impl_->volatile_blobs.emplace(hash, std::vector<std::byte>(bytes.begin(), bytes.end()));
  }
  impl_->blob_index.insert(hash);
  impl_->blob_bytes += bytes.size();
  return hash;
}

std::optional<std::vector<std::byte>> MemoryStore::get_blob(std::string_view hash) const {
  std::shared_lock lock(impl_->mu);
  if (!impl_->blob_index.count(std::string(hash))) return std::nullopt;
  if (!impl_->persistent()) return impl_->volatile_blobs.at(std::string(hash));
  std::ifstream in(impl_->blob_path(hash), std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "blob file missing for " + std::string(hash));
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

bool MemoryStore::has_blob(std::string_view hash) const {
  std::shared_lock lock(impl_->mu);
  return impl_->blob_index.count(std::string(hash)) > 0;
}

StepRecord MemoryStore::get_step(const StateId& state) const {
  std::shared_lock lock(impl_->mu);
  auto it = impl_->by_key.find(state_key(state.episode_id, state.step_id));
  if (it == impl_->by_key.end()) fail(ErrorCode::kNotFound, "unknown state " + to_string(state));
  return impl_->records[it->second];
}

bool MemoryStore::contains(const StateId& state) const {
  std::shared_lock lock(impl_->mu);
  return impl_->by_key.count(state_key(state.episode_id, state.step_id)) > 0;
}

std::vector<Action7> MemoryStore::get_snippet(const StateId& state, std::size_t n) const {
  if (n == 0) fail(ErrorCode::kValidation, "snippet length must be positive");
  std::shared_lock lock(impl_->mu);
  auto it = impl_->by_key.find(state_key(state.episode_id, state.step_id));
  if (it == impl_->by_key.end()) fail(ErrorCode::kNotFound, "unknown state " + to_string(state));

  const auto& rows = impl_->episodes.at(state.episode_id).rows;
  auto pos = std::find(rows.begin(), rows.end(), it->second);
  std::vector<Action7> out;
  for (auto next = pos + 1; next != rows.end() && out.size() < n; ++next) {
    out.push_back(impl_->records[*next].action);
  }
  return out;
}

std::vector<StepRecord> MemoryStore::episode_steps(std::string_view episode_id) const {
  std::shared_lock lock(impl_->mu);
  auto it = impl_->episodes.find(std::string(episode_id));
  if (it == impl_->episodes.end()) {
    fail(ErrorCode::kNotFound, "unknown episode " + std::string(episode_id));
  }
  std::vector<StepRecord> out;
  out.reserve(it->second.rows.size());
  for (std::size_t row : it->second.rows) out.push_back(impl_->records[row]);
  return out;
}

bool MemoryStore::has_episode(std::string_view episode_id) const {
  std::shared_lock lock(impl_->mu);
  return impl_->episodes.count(std::string(episode_id)) > 0;
}

std::vector<std::string> MemoryStore::list_episodes(std::optional<std::string_view> dataset_id) const {
  std::shared_lock lock(impl_->mu);
  std::vector<std::string> out;
  for (const auto& [id, ep] : impl_->episodes) {
    if (!dataset_id || ep.dataset_id == *dataset_id) out.push_back(id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> MemoryStore::list_datasets() const {
  std::shared_lock lock(impl_->mu);
  std::set<std::string> ids;
  for (const auto& [id, ep] : impl_->episodes) ids.insert(ep.dataset_id);
  return {ids.begin(), ids.end()};
}

void MemoryStore::flush() {
  std::unique_lock lock(impl_->mu);
  if (!impl_->log) return;
  if (std::fflush(impl_->log) != 0 || ::fsync(fileno(impl_->log)) != 0) {
    fail(ErrorCode::kIo, "flush failed");
  }
}

StoreStats MemoryStore::stats() const {
  std::shared_lock lock(impl_->mu);
  StoreStats s;
  s.episodes = impl_->episodes.size();
  s.steps = impl_->records.size();
  std::set<std::string> ds;
  for (const auto& [id, ep] : impl_->episodes) ds.insert(ep.dataset_id);
  s.datasets = ds.size();
  s.blobs = impl_->blob_index.size();
  s.log_bytes = impl_->log_bytes;
  s.blob_bytes = impl_->blob_bytes;
  return s;
}

bool MemoryStore::persistent() const { return impl_->persistent(); }
const fs::path& MemoryStore::directory() const { return impl_->dir; }

}  // namespace rtcache
