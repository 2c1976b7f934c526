#include "rtcache/retrieval.hpp"

#include <algorithm>
#include <array>
#include <chrono>

namespace rtcache {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

std::string_view to_string(SelectionMode mode) {
  return mode == SelectionMode::kAveraged ? "averaged" : "single_best";
}

std::optional<SelectionMode> parse_selection_mode(std::string_view text) {
  if (text == "single_best") return SelectionMode::kSingleBest;
  if (text == "averaged") return SelectionMode::kAveraged;
  return std::nullopt;
}

void RetrievalParams::validate() const {
  if (m == 0) fail(ErrorCode::kValidation, "m must be positive");
  if (s == 0) fail(ErrorCode::kValidation, "s must be positive");
  if (k == 0) fail(ErrorCode::kValidation, "k must be positive");
  if (n == 0) fail(ErrorCode::kValidation, "n must be positive");
}

std::vector<Action7> average_snippets(std::span<const std::vector<Action7>> snippets,
                                      std::size_t n) {
  if (snippets.empty()) fail(ErrorCode::kValidation, "average_snippets needs at least one snippet");
  if (n == 0) fail(ErrorCode::kValidation, "n must be positive");
  std::size_t longest = 0;
  for (const auto& s : snippets) longest = std::max(longest, s.size());
  const std::size_t len = std::min(longest, n);

  std::vector<Action7> out(len);
  for (std::size_t t = 0; t < len; ++t) {
    // Mean taken as an offset from the first present value, so identical
    // inputs come back bit-for-bit.
    const Action7* base = nullptr;
    std::array<double, Action7::kWidth> offset{};
    std::size_t present = 0;
    for (const auto& s : snippets) {
      if (t >= s.size()) continue;
      ++present;
      if (!base) base = &s[t];
      for (std::size_t c = 0; c < Action7::kWidth; ++c) offset[c] += s[t].v[c] - base->v[c];
    }
    for (std::size_t c = 0; c < Action7::kWidth; ++c) {
      out[t].v[c] = base->v[c] + offset[c] / static_cast<double>(present);
    }
    out[t].v[Action7::kGrip] = std::clamp(out[t].v[Action7::kGrip], 0.0, 1.0);
  }
  return out;
}

namespace {

RetrievalResult retrieve_timed(const FusedEmbedding& q, const IndexSnapshot& index,
                               const MemoryStore& store, const RetrievalParams& params,
                               Clock::time_point start, Clock::time_point embedded) {
  params.validate();
  if (index.empty()) fail(ErrorCode::kNoMatch, "index is empty");

  RetrievalResult result;
  auto& tel = result.telemetry;
  tel.latency.embed_ms = ms_between(start, embedded);

  tel.shortlist = index.select_datasets(q, params.m);
  const auto selected = Clock::now();
  tel.latency.select_ms = ms_between(embedded, selected);

  std::vector<SubsetHandle> handles;
  handles.reserve(tel.shortlist.size());
  for (const auto& d : tel.shortlist) {
    handles.push_back(index.sample_subset(d.dataset_id, params.s, params.seed, params.sampling));
  }
  const auto sampled = Clock::now();
  tel.latency.sample_ms = ms_between(selected, sampled);

  KnnResult knn = index.knn(q, params.k, handles);
  result.neighbors = std::move(knn.neighbors);
  tel.candidates_scanned = knn.candidates_scanned;
  const auto searched = Clock::now();
  tel.latency.knn_ms = ms_between(sampled, searched);

  if (result.neighbors.empty()) fail(ErrorCode::kNoMatch, "no candidates matched the query");

  for (const Neighbor& nb : result.neighbors) {
    std::vector<Action7> snippet = store.get_snippet(nb.state, params.n);
    if (snippet.empty()) {
      ++tel.snippets_skipped;
      continue;
    }
    result.chosen.push_back(nb.state);
    result.snippets.push_back(std::move(snippet));
    if (params.mode == SelectionMode::kSingleBest) break;
  }
  if (result.snippets.empty()) {
    fail(ErrorCode::kNoActionableSnippet, "every neighbor sits at the end of its episode");
  }
  result.actions = params.mode == SelectionMode::kSingleBest
                       ? result.snippets.front()
                       : average_snippets(result.snippets, params.n);
  const auto done = Clock::now();
  tel.latency.snippet_ms = ms_between(searched, done);
  tel.latency.total_ms = ms_between(start, done);
  return result;
}

}  // namespace

RetrievalResult retrieve(const FusedEmbedding& q, const IndexSnapshot& index,
                         const MemoryStore& store, const RetrievalParams& params) {
  const auto start = Clock::now();
  return retrieve_timed(q, index, store, params, start, start);
}

RetrievalResult retrieve(std::span<const std::byte> observation, EmbeddingBackend& backend,
                         const IndexSnapshot& index, const MemoryStore& store,
                         const RetrievalParams& params) {
  const auto start = Clock::now();
  const FusedEmbedding q = embed(observation, backend);
  return retrieve_timed(q, index, store, params, start, Clock::now());
}

PolicyDecision policy_step(std::span<const std::byte> observation, ReplayState& state,
                           const RetrievalContext& context, const RetrievalParams& params) {
  PolicyDecision decision;
  if (state.queue.empty()) {
    if (!context.backend || !context.index || !context.store) {
      fail(ErrorCode::kValidation, "retrieval context is incomplete");
    }
    decision.queried = true;
    ++state.retrieval_calls;
    state.steps_since_query = 0;
    try {
      RetrievalResult r = retrieve(observation, *context.backend, *context.index, *context.store,
                                   params);
      state.queue.assign(r.actions.begin(), r.actions.end());
      decision.retrieval = std::move(r);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNoMatch && e.code() != ErrorCode::kNoActionableSnippet) throw;
      decision.halt = true;
      decision.halt_reason = e.code();
      decision.message = e.what();
      return decision;
    }
  }
  decision.action = state.queue.front();
  state.queue.pop_front();
  ++state.steps_since_query;
  return decision;
}

}  // namespace rtcache
