#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "rtcache/embedder.hpp"
#include "rtcache/memory_store.hpp"

namespace rtcache {

inline constexpr std::size_t kMaxDatasetIdBytes = 31;
inline constexpr std::size_t kMaxEpisodeIdBytes = 47;
inline constexpr std::size_t kUnboundedSubset = std::numeric_limits<std::size_t>::max();

// Fixed-width key record, identical in memory and on disk (little-endian).
struct IndexKey {
  char dataset_id[kMaxDatasetIdBytes + 1];
  char episode_id[kMaxEpisodeIdBytes + 1];
  std::uint64_t step_id;
  double norm;  // norm of the stored float32 vector, computed in double

  std::string_view dataset() const;
  std::string_view episode() const;
  StateId state() const { return {std::string(episode()), step_id}; }
};
static_assert(sizeof(IndexKey) == 96);

struct IndexedEmbedding {
  StateId state_id;
  std::string dataset_id;
  FusedEmbedding e;
};

// Stable address of a stored embedding: segments are only ever appended.
struct RowRef {
  std::uint32_t segment = 0;
  std::uint32_t row = 0;
  friend auto operator<=>(const RowRef&, const RowRef&) = default;
};

struct Centroid {
  std::string dataset_id;
  std::vector<double> mean;  // unnormalized arithmetic mean
  std::size_t count = 0;
  bool degenerate = false;   // zero-norm mean; ranked last by select_datasets
  bool dirty = false;
};

struct CentroidTable {
  std::vector<Centroid> centroids;  // ordered by dataset_id
  const Centroid* find(std::string_view dataset_id) const;
};

struct DatasetScore {
  std::string dataset_id;
  double distance = 0.0;  // 1 - cosine similarity
  bool degenerate = false;
};

enum class SamplingMode { kUniform, kCluster };

struct SubsetHandle {
  std::string dataset_id;
  std::uint64_t seed = 0;
  SamplingMode mode = SamplingMode::kUniform;
  std::vector<RowRef> rows;  // sorted by RowRef
};

struct Neighbor {
  StateId state;
  std::string dataset_id;
  double similarity = 0.0;
  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

struct KnnResult {
  std::vector<Neighbor> neighbors;  // descending similarity, ties by (dataset_id, state)
  std::size_t candidates_scanned = 0;
};

/// Similarity kernel shared by every search path: float32 inputs,
/// float64 accumulation.
double dot_f32(const float* a, const float* b, std::size_t n);

class IndexSnapshot;

/// Query vector prepared once per search (float32 copy plus its norm).
class PreparedQuery {
 public:
  explicit PreparedQuery(const FusedEmbedding& q);
  const float* data() const { return values_.data(); }
  double norm() const { return norm_; }

 private:
  std::vector<float> values_;
  double norm_ = 0.0;
};

/// Immutable, shareable view of the index. All read operations live here so
/// concurrent queries never contend with the writer.
class IndexSnapshot {
 public:
  struct Segment {
    std::shared_ptr<const void> owner;
    const IndexKey* keys = nullptr;
    const float* values = nullptr;
    std::size_t count = 0;
  };

  struct Partition {
    std::string dataset_id;
    std::vector<RowRef> rows;  // sorted by (episode_id, step_id)
    std::optional<Centroid> centroid;
    bool dirty = true;
  };

  IndexSnapshot() = default;
  IndexSnapshot(std::vector<Segment> segments,
                std::vector<std::shared_ptr<const Partition>> partitions);

  std::size_t size() const { return total_; }
  bool empty() const { return total_ == 0; }
  std::size_t dataset_count() const { return partitions_.size(); }
  std::vector<std::string> dataset_ids() const;
  std::size_t dataset_size(std::string_view dataset_id) const;  // 0 if unknown

  const IndexKey& key(RowRef r) const { return segments_[r.segment].keys[r.row]; }
  const float* vector(RowRef r) const {
    return segments_[r.segment].values + static_cast<std::size_t>(r.row) * kFusedDim;
  }
  std::optional<RowRef> find(const StateId& state) const;
  std::vector<StateId> all_states() const;

  bool centroids_clean() const;
  CentroidTable centroid_table() const;

  /// Datasets ranked by ascending cosine distance between q and their
  /// centroids, top min(m, D). Degenerate centroids rank last.
  /// kStaleCentroids when any centroid is dirty.
  std::vector<DatasetScore> select_datasets(const FusedEmbedding& q, std::size_t m) const;

  /// Uniform without-replacement sample of min(s, N_d) rows, determined by
  /// (dataset contents, s, seed). kNotFound for unknown datasets.
  SubsetHandle sample_subset(std::string_view dataset_id, std::size_t s, std::uint64_t seed,
                             SamplingMode mode = SamplingMode::kUniform) const;
  std::vector<StateId> subset_states(const SubsetHandle& handle) const;

  /// Exact top-k by cosine similarity over the union of the handles' rows.
  KnnResult knn(const FusedEmbedding& q, std::size_t k,
                std::span<const SubsetHandle> candidates) const;
  /// Exact scan over every stored embedding.
  KnnResult brute_force_knn(const FusedEmbedding& q, std::size_t k) const;

  double similarity(const PreparedQuery& q, RowRef r) const;

  std::uint64_t byte_size() const;

  const std::vector<Segment>& segments() const { return segments_; }
  const Partition* partition(std::string_view dataset_id) const;
  const std::vector<std::shared_ptr<const Partition>>& partitions() const { return partitions_; }

 private:
  bool ranks_before(double sim_a, RowRef a, double sim_b, RowRef b) const;
  template <typename ForEachRow>
  KnnResult top_k(const FusedEmbedding& q, std::size_t k, ForEachRow&& for_each_row) const;

  std::vector<Segment> segments_;
  std::vector<std::shared_ptr<const Partition>> partitions_;  // sorted by dataset_id
  std::size_t total_ = 0;
};

/// Single-writer vector store. Inserts are staged and become visible to
/// readers when publish() swaps in a new snapshot.
class VectorIndex {
 public:
  VectorIndex();
  ~VectorIndex();
  VectorIndex(VectorIndex&&) noexcept;
  VectorIndex& operator=(VectorIndex&&) noexcept;

  /// Memory-maps an index file and its centroid side file (if present).
  static VectorIndex load(const std::filesystem::path& path);

  // kConflict on a duplicate state id; kValidation on bad ids or vectors.
  void insert(const IndexedEmbedding& item);
  void insert(const StateId& state, std::string_view dataset_id, std::span<const float> unit_vector);

  std::size_t pending() const;
  void publish();

  /// Publishes pending inserts, recomputes every dirty centroid and
  /// publishes the clean table.
  CentroidTable compute_centroids();

  std::shared_ptr<const IndexSnapshot> snapshot() const;

  /// Writes the published snapshot to `path` and `path.centroids`.
  void save(const std::filesystem::path& path) const;

  // Conveniences over snapshot().
  std::size_t size() const { return snapshot()->size(); }
  KnnResult brute_force_knn(const FusedEmbedding& q, std::size_t k) const {
    return snapshot()->brute_force_knn(q, k);
  }

 private:
  struct Writer;
  std::unique_ptr<Writer> writer_;
};

/// Streams records straight into the on-disk index format without holding
/// the vectors in memory. Centroid sums are accumulated in append order.
class IndexFileWriter {
 public:
  IndexFileWriter(const std::filesystem::path& path, std::size_t count);
  ~IndexFileWriter();
  IndexFileWriter(const IndexFileWriter&) = delete;
  IndexFileWriter& operator=(const IndexFileWriter&) = delete;

  void append(const StateId& state, std::string_view dataset_id, std::span<const float> unit_vector);
  void append(const IndexKey& key, const float* values);
  // Writes the centroid side file and renames both files into place. With no
  // table, the accumulated means are written as clean centroids.
  void finish(const CentroidTable* table = nullptr);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::filesystem::path centroid_path(const std::filesystem::path& index_path);

IndexKey make_index_key(const StateId& state, std::string_view dataset_id,
                        std::span<const float> values);

}  // namespace rtcache
