#include "rtcache/vector_index.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <queue>
#include <random>
#include <unordered_map>

#include "index_format.hpp"
#include "rtcache/error.hpp"

namespace rtcache {

static_assert(std::endian::native == std::endian::little,
              "index records are stored in host byte order and must be little-endian");

namespace {

std::string_view fixed_string(const char* data, std::size_t capacity) {
  return {data, ::strnlen(data, capacity)};
}

bool key_less(const IndexKey& a, const IndexKey& b) {
  if (int c = a.dataset().compare(b.dataset()); c != 0) return c < 0;
  if (int c = a.episode().compare(b.episode()); c != 0) return c < 0;
  return a.step_id < b.step_id;
}

// Stable across platforms, unlike std::hash.
std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view dataset_id, std::size_t s) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(dataset_id)),
                    static_cast<std::uint32_t>(fnv1a(dataset_id) >> 32),
                    static_cast<std::uint32_t>(s)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double vector_norm(std::span<const float> v) {
  return std::sqrt(dot_f32(v.data(), v.data(), v.size()));
}

void validate_id(std::string_view id, std::size_t max_bytes, const char* what) {
  if (id.empty() || id.size() > max_bytes || id.find('\0') != std::string_view::npos) {
    fail(ErrorCode::kValidation, std::string(what) + " must be 1.." + std::to_string(max_bytes) +
                                     " bytes without NUL: '" + std::string(id) + "'");
  }
}

std::string state_key(std::string_view episode, std::uint64_t step) {
  std::string k(episode);
  k.push_back('\x1f');
  k += std::to_string(step);
  return k;
}

struct HeapSegment {
  std::vector<IndexKey> keys;
  std::vector<float> values;
};

}  // namespace

std::string_view IndexKey::dataset() const {
  return fixed_string(dataset_id, sizeof(dataset_id));
}

std::string_view IndexKey::episode() const {
  return fixed_string(episode_id, sizeof(episode_id));
}

IndexKey make_index_key(const StateId& state, std::string_view dataset_id,
                        std::span<const float> values) {
  validate_id(dataset_id, kMaxDatasetIdBytes, "dataset_id");
  validate_id(state.episode_id, kMaxEpisodeIdBytes, "episode_id");
  if (values.size() != kFusedDim) {
    fail(ErrorCode::kValidation, "indexed vectors must have 2176 dimensions");
  }
  for (float x : values) {
    if (!std::isfinite(x)) fail(ErrorCode::kValidation, "indexed vector has non-finite entries");
  }
  const double norm = vector_norm(values);
  if (std::abs(norm - 1.0) > kUnitNormTolerance) {
    fail(ErrorCode::kValidation, "indexed vector is not unit norm");
  }
  IndexKey key{};
  std::memcpy(key.dataset_id, dataset_id.data(), dataset_id.size());
  std::memcpy(key.episode_id, state.episode_id.data(), state.episode_id.size());
  key.step_id = state.step_id;
  key.norm = norm;
  return key;
}

double dot_f32(const float* a, const float* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  const std::size_t body = n - n % 4;
  std::size_t i = 0;
  for (; i < body; i += 4) {
    s0 += static_cast<double>(a[i]) * b[i];
    s1 += static_cast<double>(a[i + 1]) * b[i + 1];
    s2 += static_cast<double>(a[i + 2]) * b[i + 2];
    s3 += static_cast<double>(a[i + 3]) * b[i + 3];
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * b[i];
  return (s0 + s1) + (s2 + s3);
}

PreparedQuery::PreparedQuery(const FusedEmbedding& q) : values_(q.to_float()) {
  if (values_.size() != kFusedDim) fail(ErrorCode::kValidation, "query must have 2176 dimensions");
  norm_ = vector_norm(values_);
  if (!(norm_ > 0.0)) fail(ErrorCode::kDegenerateInput, "query has zero norm");
}

const Centroid* CentroidTable::find(std::string_view dataset_id) const {
  auto it = std::lower_bound(centroids.begin(), centroids.end(), dataset_id,
                             [](const Centroid& c, std::string_view id) { return c.dataset_id < id; });
  return it != centroids.end() && it->dataset_id == dataset_id ? &*it : nullptr;
}

// ---------------------------------------------------------------------------
// IndexSnapshot

IndexSnapshot::IndexSnapshot(std::vector<Segment> segments,
                             std::vector<std::shared_ptr<const Partition>> partitions)
    : segments_(std::move(segments)), partitions_(std::move(partitions)) {
  for (const auto& s : segments_) total_ += s.count;
}

std::vector<std::string> IndexSnapshot::dataset_ids() const {
  std::vector<std::string> out;
  for (const auto& p : partitions_) out.push_back(p->dataset_id);
  return out;
}

const IndexSnapshot::Partition* IndexSnapshot::partition(std::string_view dataset_id) const {
  auto it = std::lower_bound(partitions_.begin(), partitions_.end(), dataset_id,
                             [](const auto& p, std::string_view id) { return p->dataset_id < id; });
  return it != partitions_.end() && (*it)->dataset_id == dataset_id ? it->get() : nullptr;
}

std::size_t IndexSnapshot::dataset_size(std::string_view dataset_id) const {
  const Partition* p = partition(dataset_id);
  return p ? p->rows.size() : 0;
}

std::optional<RowRef> IndexSnapshot::find(const StateId& state) const {
  for (const auto& p : partitions_) {
    auto it = std::lower_bound(p->rows.begin(), p->rows.end(), state, [this](RowRef r, const StateId& s) {
      const IndexKey& k = key(r);
      if (int c = k.episode().compare(s.episode_id); c != 0) return c < 0;
      return k.step_id < s.step_id;
    });
    if (it != p->rows.end() && key(*it).episode() == state.episode_id &&
        key(*it).step_id == state.step_id) {
      return *it;
    }
  }
  return std::nullopt;
}

std::vector<StateId> IndexSnapshot::all_states() const {
  std::vector<StateId> out;
  out.reserve(total_);
  for (const auto& p : partitions_) {
    for (RowRef r : p->rows) out.push_back(key(r).state());
  }
  return out;
}

bool IndexSnapshot::centroids_clean() const {
  return std::none_of(partitions_.begin(), partitions_.end(),
                      [](const auto& p) { return p->dirty || !p->centroid; });
}

CentroidTable IndexSnapshot::centroid_table() const {
  CentroidTable t;
  for (const auto& p : partitions_) {
    if (!p->centroid) continue;
    Centroid c = *p->centroid;
    c.dirty = p->dirty;
    t.centroids.push_back(std::move(c));
  }
  return t;
}

std::vector<DatasetScore> IndexSnapshot::select_datasets(const FusedEmbedding& q, std::size_t m) const {
  if (m == 0) fail(ErrorCode::kValidation, "m must be positive");
  if (q.size() != kFusedDim) fail(ErrorCode::kValidation, "query must have 2176 dimensions");
  if (!centroids_clean()) {
    fail(ErrorCode::kStaleCentroids, "centroid table is stale; recompute centroids first");
  }
  double qn = 0.0;
  for (double x : q.values()) qn += x * x;
  qn = std::sqrt(qn);

  std::vector<DatasetScore> scores;
  scores.reserve(partitions_.size());
  for (const auto& p : partitions_) {
    const Centroid& c = *p->centroid;
    DatasetScore s;
    s.dataset_id = p->dataset_id;
    s.degenerate = c.degenerate;
    if (c.degenerate) {
      s.distance = 2.0;
    } else {
      double dot = 0.0, cn = 0.0;
      for (std::size_t i = 0; i < kFusedDim; ++i) {
        dot += q[i] * c.mean[i];
        cn += c.mean[i] * c.mean[i];
      }
      s.distance = 1.0 - dot / (qn * std::sqrt(cn));
    }
    scores.push_back(std::move(s));
  }
  std::sort(scores.begin(), scores.end(), [](const DatasetScore& a, const DatasetScore& b) {
    if (a.degenerate != b.degenerate) return !a.degenerate;
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.dataset_id < b.dataset_id;
  });
  if (scores.size() > m) scores.resize(m);
  return scores;
}

namespace {

// Stratified sample: a short k-means pass groups the partition, then each
// group contributes rows in proportion to its size.
std::vector<RowRef> cluster_sample(const IndexSnapshot& snap, const std::vector<RowRef>& rows,
                                   std::size_t s, std::mt19937_64& rng) {
  const std::size_t n = rows.size();
  const std::size_t groups =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(double(s)))), 1, 64);

  std::vector<RowRef> train;
  std::sample(rows.begin(), rows.end(), std::back_inserter(train),
              std::min(n, 20 * groups), rng);
  std::shuffle(train.begin(), train.end(), rng);

  std::vector<std::vector<float>> centers;
  for (std::size_t g = 0; g < groups && g < train.size(); ++g) {
    const float* v = snap.vector(train[g]);
    centers.emplace_back(v, v + kFusedDim);
  }

  auto nearest = [&](const float* v) {
    std::size_t best = 0;
    double best_dot = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < centers.size(); ++g) {
      const double d = dot_f32(v, centers[g].data(), kFusedDim);
      if (d > best_dot) {
        best_dot = d;
        best = g;
      }
    }
    return best;
  };

  for (int iter = 0; iter < 5; ++iter) {
    std::vector<std::vector<double>> sums(centers.size(), std::vector<double>(kFusedDim, 0.0));
    std::vector<std::size_t> counts(centers.size(), 0);
    for (RowRef r : train) {
      const float* v = snap.vector(r);
      const std::size_t g = nearest(v);
      ++counts[g];
      for (std::size_t i = 0; i < kFusedDim; ++i) sums[g][i] += v[i];
    }
    for (std::size_t g = 0; g < centers.size(); ++g) {
      if (counts[g] == 0) continue;
      for (std::size_t i = 0; i < kFusedDim; ++i) {
        centers[g][i] = static_cast<float>(sums[g][i] / static_cast<double>(counts[g]));
      }
    }
  }

  std::vector<std::vector<RowRef>> buckets(centers.size());
  for (RowRef r : rows) buckets[nearest(snap.vector(r))].push_back(r);

  // Largest-remainder apportionment of s across buckets.
  std::vector<std::size_t> quota(buckets.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < buckets.size(); ++g) {
    const double exact = double(s) * double(buckets[g].size()) / double(n);
    quota[g] = static_cast<std::size_t>(exact);
    assigned += quota[g];
    remainders.emplace_back(exact - double(quota[g]), g);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < s && i < remainders.size(); ++i) {
    const std::size_t g = remainders[i].second;
    if (quota[g] < buckets[g].size()) {
      ++quota[g];
      ++assigned;
    }
  }

  std::vector<RowRef> out;
  for (std::size_t g = 0; g < buckets.size(); ++g) {
    std::sample(buckets[g].begin(), buckets[g].end(), std::back_inserter(out), quota[g], rng);
  }
  return out;
}

}  // namespace

SubsetHandle IndexSnapshot::sample_subset(std::string_view dataset_id, std::size_t s,
                                          std::uint64_t seed, SamplingMode mode) const {
  if (s == 0) fail(ErrorCode::kValidation, "subset size must be positive");
  const Partition* p = partition(dataset_id);
  if (!p) fail(ErrorCode::kNotFound, "unknown dataset " + std::string(dataset_id));

  SubsetHandle h;
  h.dataset_id = p->dataset_id;
  h.seed = seed;
  h.mode = mode;
  if (s >= p->rows.size()) {
    h.rows = p->rows;
  } else {
    std::mt19937_64 rng(mix_seed(seed, dataset_id, s));
    if (mode == SamplingMode::kCluster) {
      h.rows = cluster_sample(*this, p->rows, s, rng);
    } else {
      h.rows.reserve(s);
      std::sample(p->rows.begin(), p->rows.end(), std::back_inserter(h.rows), s, rng);
    }
  }
  std::sort(h.rows.begin(), h.rows.end());
  return h;
}

std::vector<StateId> IndexSnapshot::subset_states(const SubsetHandle& handle) const {
  std::vector<StateId> out;
  out.reserve(handle.rows.size());
  for (RowRef r : handle.rows) out.push_back(key(r).state());
  return out;
}

double IndexSnapshot::similarity(const PreparedQuery& q, RowRef r) const {
  return dot_f32(q.data(), vector(r), kFusedDim) / (q.norm() * key(r).norm);
}

bool IndexSnapshot::ranks_before(double sim_a, RowRef a, double sim_b, RowRef b) const {
  if (sim_a != sim_b) return sim_a > sim_b;
  return key_less(key(a), key(b));
}

template <typename ForEachRow>
KnnResult IndexSnapshot::top_k(const FusedEmbedding& q, std::size_t k,
                               ForEachRow&& for_each_row) const {
  if (k == 0) fail(ErrorCode::kValidation, "k must be positive");
  const PreparedQuery prepared(q);

  struct Scored {
    double sim;
    RowRef row;
  };
  // Worst-ranked candidate on top.
  auto cmp = [this](const Scored& a, const Scored& b) {
    return ranks_before(a.sim, a.row, b.sim, b.row);
  };
  std::priority_queue<Scored, std::vector<Scored>, decltype(cmp)> heap(cmp);

  std::size_t scanned = 0;
  for_each_row([&](RowRef r) {
    ++scanned;
    const double sim = similarity(prepared, r);
    if (heap.size() < k) {
      heap.push({sim, r});
    } else if (ranks_before(sim, r, heap.top().sim, heap.top().row)) {
      heap.pop();
      heap.push({sim, r});
    }
  });

  KnnResult result;
  result.candidates_scanned = scanned;
  result.neighbors.resize(heap.size());
  for (std::size_t i = heap.size(); i-- > 0;) {
    const Scored& s = heap.top();
    const IndexKey& kr = key(s.row);
    result.neighbors[i] = Neighbor{kr.state(), std::string(kr.dataset()), s.sim};
    heap.pop();
  }
  return result;
}

KnnResult IndexSnapshot::knn(const FusedEmbedding& q, std::size_t k,
                             std::span<const SubsetHandle> candidates) const {
  if (candidates.empty()) fail(ErrorCode::kValidation, "knn needs at least one candidate set");
  std::vector<RowRef> rows;
  for (const auto& h : candidates) rows.insert(rows.end(), h.rows.begin(), h.rows.end());
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  return top_k(q, k, [&](auto&& visit) {
    for (RowRef r : rows) visit(r);
  });
}

KnnResult IndexSnapshot::brute_force_knn(const FusedEmbedding& q, std::size_t k) const {
  return top_k(q, k, [&](auto&& visit) {
    for (std::uint32_t s = 0; s < segments_.size(); ++s) {
      for (std::uint32_t r = 0; r < segments_[s].count; ++r) visit(RowRef{s, r});
    }
  });
}

std::uint64_t IndexSnapshot::byte_size() const {
  return static_cast<std::uint64_t>(total_) * (sizeof(IndexKey) + kFusedDim * sizeof(float));
}

// ---------------------------------------------------------------------------
// VectorIndex

struct VectorIndex::Writer {
  mutable std::mutex snapshot_mu;
  std::shared_ptr<const IndexSnapshot> current = std::make_shared<IndexSnapshot>();

  std::mutex write_mu;
  std::vector<IndexKey> pending_keys;
  std::vector<float> pending_values;
  std::unordered_set<std::string> known;
  bool known_loaded = false;

  std::shared_ptr<const IndexSnapshot> get() const {
    std::lock_guard lock(snapshot_mu);
    return current;
  }
  void set(std::shared_ptr<const IndexSnapshot> next) {
    std::lock_guard lock(snapshot_mu);
    current = std::move(next);
  }

  void load_known() {
    if (known_loaded) return;
    const auto snap = get();
    known.reserve(snap->size() + pending_keys.size());
    for (const auto& seg : snap->segments()) {
      for (std::size_t r = 0; r < seg.count; ++r) {
        known.insert(state_key(seg.keys[r].episode(), seg.keys[r].step_id));
      }
    }
    known_loaded = true;
  }

  void publish_locked() {
    if (pending_keys.empty()) return;
    const auto old = get();

    auto heap = std::make_shared<HeapSegment>();
    heap->keys = std::move(pending_keys);
    heap->values = std::move(pending_values);
    pending_keys.clear();
    pending_values.clear();

    std::vector<IndexSnapshot::Segment> segments = old->segments();
    const auto seg_index = static_cast<std::uint32_t>(segments.size());
    segments.push_back({heap, heap->keys.data(), heap->values.data(), heap->keys.size()});

    std::map<std::string, std::vector<RowRef>, std::less<>> added;
    for (std::uint32_t r = 0; r < heap->keys.size(); ++r) {
      added[std::string(heap->keys[r].dataset())].push_back(RowRef{seg_index, r});
    }

    // Temporary snapshot so the new rows' keys can be read while sorting.
    IndexSnapshot lookup(segments, {});
    auto by_key = [&lookup](RowRef a, RowRef b) { return key_less(lookup.key(a), lookup.key(b)); };

    std::vector<std::shared_ptr<const IndexSnapshot::Partition>> partitions;
    auto old_it = old->partitions().begin();
    auto old_end = old->partitions().end();
    auto add_it = added.begin();
    while (old_it != old_end || add_it != added.end()) {
      if (add_it == added.end() || (old_it != old_end && (*old_it)->dataset_id < add_it->first)) {
        partitions.push_back(*old_it++);
        continue;
      }
      auto p = std::make_shared<IndexSnapshot::Partition>();
      if (old_it != old_end && (*old_it)->dataset_id == add_it->first) {
        *p = **old_it++;
      } else {
        p->dataset_id = add_it->first;
      }
      auto& fresh = add_it->second;
      std::sort(fresh.begin(), fresh.end(), by_key);
      const auto mid = p->rows.size();
      p->rows.insert(p->rows.end(), fresh.begin(), fresh.end());
      std::inplace_merge(p->rows.begin(), p->rows.begin() + static_cast<std::ptrdiff_t>(mid),
                         p->rows.end(), by_key);
      p->dirty = true;
      partitions.push_back(std::move(p));
      ++add_it;
    }
    set(std::make_shared<IndexSnapshot>(std::move(segments), std::move(partitions)));
  }
};

VectorIndex::VectorIndex() : writer_(std::make_unique<Writer>()) {}
VectorIndex::~VectorIndex() = default;
VectorIndex::VectorIndex(VectorIndex&&) noexcept = default;
VectorIndex& VectorIndex::operator=(VectorIndex&&) noexcept = default;

void VectorIndex::insert(const IndexedEmbedding& item) {
  const std::vector<float> values = item.e.to_float();
  insert(item.state_id, item.dataset_id, values);
}

void VectorIndex::insert(const StateId& state, std::string_view dataset_id,
                         std::span<const float> unit_vector) {
  const IndexKey key = make_index_key(state, dataset_id, unit_vector);
  std::lock_guard lock(writer_->write_mu);
  writer_->load_known();
  if (!writer_->known.insert(state_key(state.episode_id, state.step_id)).second) {
    fail(ErrorCode::kConflict, "state " + to_string(state) + " is already indexed");
  }
  writer_->pending_keys.push_back(key);
  writer_->pending_values.insert(writer_->pending_values.end(), unit_vector.begin(),
                                 unit_vector.end());
}

std::size_t VectorIndex::pending() const {
  std::lock_guard lock(writer_->write_mu);
  return writer_->pending_keys.size();
}

void VectorIndex::publish() {
  std::lock_guard lock(writer_->write_mu);
  writer_->publish_locked();
}

CentroidTable VectorIndex::compute_centroids() {
  std::lock_guard lock(writer_->write_mu);
  writer_->publish_locked();
  const auto snap = writer_->get();
  if (snap->empty()) return {};

  std::vector<std::shared_ptr<const IndexSnapshot::Partition>> partitions;
  for (const auto& p : snap->partitions()) {
    if (!p->dirty && p->centroid) {
      partitions.push_back(p);
      continue;
    }
    auto next = std::make_shared<IndexSnapshot::Partition>(*p);
    Centroid c;
    c.dataset_id = p->dataset_id;
    c.count = p->rows.size();
    c.mean.assign(kFusedDim, 0.0);
    for (RowRef r : p->rows) {
      const float* v = snap->vector(r);
      for (std::size_t i = 0; i < kFusedDim; ++i) c.mean[i] += v[i];
    }
    double sq = 0.0;
    for (double& x : c.mean) {
      x /= static_cast<double>(c.count);
      sq += x * x;
    }
    c.degenerate = std::sqrt(sq) <= 1e-12;
    next->centroid = std::move(c);
    next->dirty = false;
    partitions.push_back(std::move(next));
  }
  auto fresh = std::make_shared<IndexSnapshot>(snap->segments(), std::move(partitions));
  CentroidTable table = fresh->centroid_table();
  writer_->set(std::move(fresh));
  return table;
}

std::shared_ptr<const IndexSnapshot> VectorIndex::snapshot() const { return writer_->get(); }

void VectorIndex::save(const std::filesystem::path& path) const {
  const auto snap = snapshot();
  IndexFileWriter out(path, snap->size());
  for (const auto& seg : snap->segments()) {
    for (std::size_t r = 0; r < seg.count; ++r) out.append(seg.keys[r], seg.values + r * kFusedDim);
  }
  const CentroidTable table = snap->centroid_table();
  out.finish(&table);
}

VectorIndex VectorIndex::load(const std::filesystem::path& path) {
  detail::LoadedIndex loaded = detail::load_index_file(path);

  IndexSnapshot::Segment seg{loaded.mapping, loaded.keys, loaded.values, loaded.count};
  std::vector<IndexSnapshot::Segment> segments;
  if (loaded.count > 0) segments.push_back(seg);
  IndexSnapshot lookup(segments, {});

  std::map<std::string, std::vector<RowRef>, std::less<>> grouped;
  for (std::uint32_t r = 0; r < loaded.count; ++r) {
    grouped[std::string(loaded.keys[r].dataset())].push_back(RowRef{0, r});
  }
  std::vector<std::shared_ptr<const IndexSnapshot::Partition>> partitions;
  for (auto& [id, rows] : grouped) {
    auto p = std::make_shared<IndexSnapshot::Partition>();
    p->dataset_id = id;
    std::sort(rows.begin(), rows.end(),
              [&](RowRef a, RowRef b) { return key_less(lookup.key(a), lookup.key(b)); });
    p->rows = std::move(rows);
    if (const Centroid* c = loaded.centroids.find(id); c && c->count == p->rows.size()) {
      p->centroid = *c;
      p->dirty = c->dirty;
    }
    partitions.push_back(std::move(p));
  }

  VectorIndex index;
  index.writer_->set(std::make_shared<IndexSnapshot>(std::move(segments), std::move(partitions)));
  return index;
}

}  // namespace rtcache
