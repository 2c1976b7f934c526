#include "rtcache/ingest.hpp"

#include "rtcache/error.hpp"

namespace rtcache {

std::size_t ingest_episode(const UnifiedEpisode& episode, MemoryStore& store, VectorIndex& index,
                           EmbeddingBackend& backend, const FrameSource& frames) {
  if (episode.steps.empty()) fail(ErrorCode::kValidation, "episode has no steps");
  if (auto problem = check_unified(episode)) {
    fail(ErrorCode::kValidation, "episode " + episode.episode_id + ": " + *problem);
  }
  if (store.has_episode(episode.episode_id)) {
    fail(ErrorCode::kConflict, "episode " + episode.episode_id + " is already stored");
  }

  std::vector<std::vector<std::byte>> blobs;
  std::vector<std::vector<float>> vectors;
  blobs.reserve(episode.steps.size());
  vectors.reserve(episode.steps.size());
  for (const auto& step : episode.steps) {
    auto frame = frames ? frames(step.observation_ref) : std::nullopt;
    if (!frame) {
      fail(ErrorCode::kNotFound, "no observation '" + step.observation_ref + "' for " +
                                     episode.episode_id + "#" + std::to_string(step.step_id));
    }
    vectors.push_back(embed(*frame, backend).to_float());
    blobs.push_back(std::move(*frame));
  }

  for (std::size_t i = 0; i < episode.steps.size(); ++i) {
    const auto& step = episode.steps[i];
    StepRecord rec;
    rec.episode_id = step.episode_id;
    rec.step_id = step.step_id;
    rec.timestamp = step.timestamp;
    rec.action = step.action;
    rec.image_blob_ref = store.put_blob(blobs[i]);
    rec.dataset_id = episode.dataset_id;
    store.put_step(rec);
  }
  for (std::size_t i = 0; i < episode.steps.size(); ++i) {
    const auto& step = episode.steps[i];
    index.insert({step.episode_id, step.step_id}, episode.dataset_id, vectors[i]);
  }
  return episode.steps.size();
}

}  // namespace rtcache
