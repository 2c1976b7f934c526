#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtcache/trajectory.hpp"

namespace rtcache {

// Join key shared by the raw store and the vector index.
struct StateId {
  std::string episode_id;
  std::uint64_t step_id = 0;

  friend auto operator<=>(const StateId&, const StateId&) = default;
  friend bool operator==(const StateId&, const StateId&) = default;
};

std::string to_string(const StateId& id);

struct StepRecord {
  std::string episode_id;
  std::uint64_t step_id = 0;
  double timestamp = 0.0;
  Action7 action;
  std::optional<std::string> image_blob_ref;  // content hash, or explicitly null
  std::string dataset_id;

  StateId state() const { return {episode_id, step_id}; }
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct StoreStats {
  std::size_t episodes = 0;
  std::size_t steps = 0;
  std::size_t datasets = 0;
  std::size_t blobs = 0;
  std::uint64_t log_bytes = 0;
  std::uint64_t blob_bytes = 0;
};

/// Raw trajectory store: per-step records keyed by (episode_id, step_id)
/// plus content-addressed observation blobs.
///
/// Persistent stores keep an append-only log of CRC-framed records in
/// `<dir>/segments/` and blobs under `<dir>/blobs/<hash>`. Opening a store
/// replays the log; a torn record at the tail of the last segment is cut
/// off. Records become durable on flush().
///
/// Any number of threads may read concurrently; writes are serialized.
class MemoryStore {
 public:
  MemoryStore();  // volatile, in-memory store
  explicit MemoryStore(const std::filesystem::path& dir);
  ~MemoryStore();

  MemoryStore(MemoryStore&&) noexcept;
  MemoryStore& operator=(MemoryStore&&) noexcept;
  MemoryStore(const MemoryStore&) = delete;
  MemoryStore& operator=(const MemoryStore&) = delete;

  // Idempotent for identical records; kConflict when the key exists with
  // different content or the episode already belongs to another dataset.
  void put_step(const StepRecord& record);

  // Returns the hex SHA-256 of the bytes; storing the same bytes twice is a no-op.
  std::string put_blob(std::span<const std::byte> bytes);
  std::optional<std::vector<std::byte>> get_blob(std::string_view hash) const;
  bool has_blob(std::string_view hash) const;

  StepRecord get_step(const StateId& state) const;  // kNotFound on miss
  bool contains(const StateId& state) const;

  /// Actions of the n steps that follow `state` in its episode, truncated at
  /// the episode end (possibly empty). kNotFound for unknown states,
  /// kValidation for n == 0.
  std::vector<Action7> get_snippet(const StateId& state, std::size_t n) const;

  std::vector<StepRecord> episode_steps(std::string_view episode_id) const;  // kNotFound on miss
  bool has_episode(std::string_view episode_id) const;

  // Sorted lexicographically.
  std::vector<std::string> list_episodes(std::optional<std::string_view> dataset_id = {}) const;
  std::vector<std::string> list_datasets() const;

  void flush();
  StoreStats stats() const;

  bool persistent() const;
  const std::filesystem::path& directory() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(std::span<const std::byte> bytes);

}  // namespace rtcache
