#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtcache/embedder.hpp"
#include "rtcache/error.hpp"
#include "rtcache/memory_store.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache {

enum class SelectionMode { kSingleBest, kAveraged };

std::string_view to_string(SelectionMode mode);
std::optional<SelectionMode> parse_selection_mode(std::string_view text);

struct RetrievalParams {
  std::size_t m = 3;
  std::size_t s = 2000;  // kUnboundedSubset disables subsampling
  std::size_t k = 50;
  std::size_t n = 3;
  SelectionMode mode = SelectionMode::kSingleBest;
  std::uint64_t seed = 0;
  SamplingMode sampling = SamplingMode::kUniform;

  void validate() const;  // kValidation unless m, s, k, n are positive
};

struct StageLatencies {
  double embed_ms = 0.0;
  double select_ms = 0.0;
  double sample_ms = 0.0;
  double knn_ms = 0.0;
  double snippet_ms = 0.0;
  double total_ms = 0.0;
};

struct RetrievalTelemetry {
  std::size_t candidates_scanned = 0;
  std::vector<DatasetScore> shortlist;
  std::size_t snippets_skipped = 0;  // neighbors sitting at an episode end
  StageLatencies latency;
};

struct RetrievalResult {
  std::vector<Neighbor> neighbors;            // descending similarity
  std::vector<StateId> chosen;                // neighbors whose snippets fed the output
  std::vector<std::vector<Action7>> snippets;  // one per chosen neighbor
  std::vector<Action7> actions;               // at most n
  RetrievalTelemetry telemetry;
};

/// Stages 2-4 for an already embedded query: shortlist datasets by centroid,
/// sample each, exact k-NN over the union, resolve snippets and select.
/// kNoMatch on an empty index, kStaleCentroids when centroids need a
/// recompute, kNoActionableSnippet when every neighbor's snippet is empty.
RetrievalResult retrieve(const FusedEmbedding& q, const IndexSnapshot& index,
                         const MemoryStore& store, const RetrievalParams& params);

/// Embeds the observation first and records the embedding stage latency.
RetrievalResult retrieve(std::span<const std::byte> observation, EmbeddingBackend& backend,
                         const IndexSnapshot& index, const MemoryStore& store,
                         const RetrievalParams& params);

/// Index-wise mean over ragged snippets, each index divided by the number of
/// snippets long enough to reach it. Output length is the longest snippet
/// capped at n; grip is clamped to [0, 1]. kValidation on no snippets.
std::vector<Action7> average_snippets(std::span<const std::vector<Action7>> snippets, std::size_t n);

struct ReplayState {
  std::deque<Action7> queue;
  std::size_t steps_since_query = 0;
  std::size_t retrieval_calls = 0;
};

struct PolicyDecision {
  bool halt = false;  // no action available; the caller should stop
  Action7 action;
  bool queried = false;
  std::optional<RetrievalResult> retrieval;  // set when queried and successful
  std::optional<ErrorCode> halt_reason;
  std::string message;
};

struct RetrievalContext {
  EmbeddingBackend* backend = nullptr;
  std::shared_ptr<const IndexSnapshot> index;
  const MemoryStore* store = nullptr;
};

/// Pops the next queued action, or retrieves and queues a fresh snippet when
/// the queue is empty. kNoMatch and kNoActionableSnippet become a halt
/// decision; other errors propagate.
PolicyDecision policy_step(std::span<const std::byte> observation, ReplayState& state,
                           const RetrievalContext& context, const RetrievalParams& params);

}  // namespace rtcache
