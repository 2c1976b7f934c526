#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rtcache/embedder.hpp"
#include "rtcache/memory_store.hpp"
#include "rtcache/trajectory.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache {

// Resolves an observation_ref to its frame bytes.
using FrameSource = std::function<std::optional<std::vector<std::byte>>(const std::string& ref)>;

/// Embeds every frame of a unified episode, then writes the steps and blobs
/// to the store and stages one embedding per step in the index (unpublished).
/// Nothing is written when a frame is missing (kNotFound), the backend
/// fails, or the episode is already stored (kConflict).
std::size_t ingest_episode(const UnifiedEpisode& episode, MemoryStore& store, VectorIndex& index,
                           EmbeddingBackend& backend, const FrameSource& frames);

}  // namespace rtcache
