#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rtcache/embedder.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache {

// Per-dataset Gaussian clusters on the unit sphere:
// x = normalize(c_d + sigma * g), c_d = normalize(shared_weight * u + v_d).
struct SyntheticCorpusConfig {
  std::size_t datasets = 20;
  std::size_t vectors_per_dataset = 1000;
  double sigma = 0.006;          // per-dimension noise scale
  double shared_weight = 0.0;    // pulls every center toward one common direction
  std::size_t steps_per_episode = 100;
  std::uint64_t seed = 2176;
};

class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(SyntheticCorpusConfig config);

  const SyntheticCorpusConfig& config() const { return config_; }
  std::size_t size() const { return config_.datasets * config_.vectors_per_dataset; }

  std::string dataset_id(std::size_t d) const;
  StateId state(std::size_t d, std::size_t i) const;
  std::span<const float> center(std::size_t d) const;

  /// Streams the vectors of dataset d in order; identical on every call.
  void for_each(std::size_t d,
                const std::function<void(std::size_t i, std::span<const float>)>& visit) const;

  /// Fresh draw from dataset d's cluster, for queries.
  std::vector<float> draw(std::size_t d, std::mt19937_64& rng) const;

  void insert_into(VectorIndex& index) const;
  void write_to(IndexFileWriter& writer) const;

  // Expected cosine between two members of one cluster.
  double expected_intra_cosine() const;

 private:
  void draw_into(std::size_t d, std::mt19937_64& rng, float* out) const;

  SyntheticCorpusConfig config_;
  std::vector<float> centers_;  // datasets x kFusedDim
};

}  // namespace rtcache
