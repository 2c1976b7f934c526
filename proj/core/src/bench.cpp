#include "rtcache/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "rtcache/error.hpp"

namespace rtcache {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(SearchStrategy s) {
  switch (s) {
    case SearchStrategy::kFull: return "full";
    case SearchStrategy::kCentroid: return "centroid";
    case SearchStrategy::kSubset: return "subset";
    case SearchStrategy::kHierarchical: return "hierarchical";
  }
  return "?";
}

std::optional<SearchStrategy> parse_strategy(std::string_view text) {
  for (auto s : {SearchStrategy::kFull, SearchStrategy::kCentroid, SearchStrategy::kSubset,
                 SearchStrategy::kHierarchical}) {
    if (to_string(s) == text) return s;
  }
  return std::nullopt;
}

std::vector<std::size_t> parse_sizes(std::string_view text) {
  std::vector<std::size_t> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorCode::kUsage, "bad size '" + item + "'");
    }
    if (!(v >= 1.0) || v != std::floor(v) || v > 4e9) fail(ErrorCode::kUsage, "bad size '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) fail(ErrorCode::kUsage, "no sizes given");
  return out;
}

const StrategyStats* SizeReport::find(SearchStrategy s) const {
  for (const auto& st : strategies) {
    if (st.strategy == s) return &st;
  }
  return nullptr;
}

namespace {

double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double rank = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = static_cast<std::size_t>(std::ceil(rank));
  return v[lo] + (v[hi] - v[lo]) * (rank - static_cast<double>(lo));
}

json corpus_descriptor(const SyntheticCorpusConfig& c) {
  return {{"datasets", c.datasets},         {"vectors_per_dataset", c.vectors_per_dataset},
          {"sigma", c.sigma},               {"shared_weight", c.shared_weight},
          {"steps_per_episode", c.steps_per_episode}, {"seed", c.seed},
          {"noise", "irwin-hall-4"},         {"dim", kFusedDim}};
}

// Returns seconds spent building, 0 when the cached file matched.
double ensure_corpus(const SyntheticCorpus& corpus, const fs::path& path) {
  const fs::path meta = fs::path(path.string() + ".json");
  const std::string want = corpus_descriptor(corpus.config()).dump();
  if (fs::exists(path) && fs::exists(meta) && fs::exists(centroid_path(path))) {
    std::ifstream in(meta);
    std::ostringstream os;
    os << in.rdbuf();
    if (os.str() == want) return 0.0;
  }
  const auto t0 = std::chrono::steady_clock::now();
  IndexFileWriter writer(path, corpus.size());
  corpus.write_to(writer);
  writer.finish();
  std::ofstream(meta, std::ios::trunc) << want;
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

KnnResult run_strategy(SearchStrategy s, const IndexSnapshot& snap, const FusedEmbedding& q,
                       const RetrievalParams& p) {
  std::vector<SubsetHandle> handles;
  switch (s) {
    case SearchStrategy::kFull:
      return snap.brute_force_knn(q, p.k);
    case SearchStrategy::kCentroid:
      for (const auto& d : snap.select_datasets(q, p.m)) {
        handles.push_back(snap.sample_subset(d.dataset_id, kUnboundedSubset, p.seed));
      }
      break;
    case SearchStrategy::kSubset:
      for (const auto& id : snap.dataset_ids()) {
        handles.push_back(snap.sample_subset(id, p.s, p.seed, p.sampling));
      }
      break;
    case SearchStrategy::kHierarchical:
      for (const auto& d : snap.select_datasets(q, p.m)) {
        handles.push_back(snap.sample_subset(d.dataset_id, p.s, p.seed, p.sampling));
      }
      break;
  }
  return snap.knn(q, p.k, handles);
}

}  // namespace

BenchReport run_bench(const BenchConfig& config) {
  if (config.datasets == 0 || config.queries == 0) {
    fail(ErrorCode::kValidation, "bench needs datasets and queries");
  }
  config.params.validate();
  fs::create_directories(config.work_dir);

  BenchReport report;
  report.config = config;

  // Scans over whole datasets run last, so they cannot evict the cheaper
  // strategies' pages.
  auto heavy = [](SearchStrategy s) {
    return s == SearchStrategy::kFull || s == SearchStrategy::kCentroid;
  };
  std::vector<SearchStrategy> order = config.strategies;
  std::stable_sort(order.begin(), order.end(), [](SearchStrategy a, SearchStrategy b) {
    auto rank = [](SearchStrategy s) {
      return s == SearchStrategy::kFull ? 2 : s == SearchStrategy::kCentroid ? 1 : 0;
    };
    return rank(a) < rank(b);
  });

  for (std::size_t size : config.sizes) {
    SyntheticCorpusConfig cc;
    cc.datasets = config.datasets;
    cc.vectors_per_dataset = std::max<std::size_t>(1, size / config.datasets);
    cc.sigma = config.sigma;
    cc.shared_weight = config.shared_weight;
    cc.seed = config.corpus_seed;
    const SyntheticCorpus corpus(cc);

    SizeReport sr;
    sr.size = corpus.size();
    sr.per_dataset = cc.vectors_per_dataset;
    sr.expected_intra_cosine = corpus.expected_intra_cosine();
    const fs::path path = config.work_dir / ("corpus-" + std::to_string(corpus.size()) + ".rtc");
    sr.build_seconds = ensure_corpus(corpus, path);

    VectorIndex index = VectorIndex::load(path);
    const auto snap = index.snapshot();
    if (!snap->centroids_clean()) index.compute_centroids();
    const auto ready = index.snapshot();

    std::mt19937_64 rng(config.query_seed);
    std::uniform_int_distribution<std::size_t> pick(0, cc.datasets - 1);
    std::vector<FusedEmbedding> queries;
    for (std::size_t i = 0; i < config.queries; ++i) {
      queries.push_back(FusedEmbedding::from_unit_vector(corpus.draw(pick(rng), rng)));
    }

    std::vector<std::optional<StateId>> full_top(queries.size());
    std::vector<std::pair<SearchStrategy, std::vector<std::optional<StateId>>>> tops;
    for (SearchStrategy s : order) {
      const std::size_t count =
          heavy(s) ? std::min(config.full_queries, queries.size()) : queries.size();
      StrategyStats st;
      st.strategy = s;
      st.queries = count;
      std::vector<double> latencies;
      std::vector<std::optional<StateId>> top(queries.size());
      double cand_sum = 0.0;
      for (std::size_t i = 0; i < count; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        KnnResult r = run_strategy(s, *ready, queries[i], config.params);
        latencies.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        st.max_candidates = std::max(st.max_candidates, r.candidates_scanned);
        cand_sum += static_cast<double>(r.candidates_scanned);
        if (!r.neighbors.empty()) top[i] = r.neighbors.front().state;
      }
      st.median_ms = percentile(latencies, 0.5);
      st.p90_ms = percentile(latencies, 0.9);
      st.p99_ms = percentile(latencies, 0.99);
      double sum = 0.0;
      for (double l : latencies) sum += l;
      st.mean_ms = count ? sum / static_cast<double>(count) : 0.0;
      st.mean_candidates = count ? cand_sum / static_cast<double>(count) : 0.0;
      if (s == SearchStrategy::kFull) full_top = top;
      tops.emplace_back(s, std::move(top));
      sr.strategies.push_back(st);
    }

    for (std::size_t j = 0; j < sr.strategies.size(); ++j) {
      std::size_t hits = 0, compared = 0;
      for (std::size_t i = 0; i < queries.size(); ++i) {
        if (!full_top[i] || !tops[j].second[i]) continue;
        ++compared;
        hits += *full_top[i] == *tops[j].second[i] ? 1 : 0;
      }
      if (compared > 0) {
        sr.strategies[j].recall_at_1 = static_cast<double>(hits) / static_cast<double>(compared);
        sr.strategies[j].recall_queries = compared;
      }
    }
    report.sizes.push_back(std::move(sr));
  }
  return report;
}

std::string BenchReport::to_json() const {
  json j;
  j["generator"] = {{"kind", "clustered-gaussian-sphere"},
                    {"datasets", config.datasets},
                    {"sigma", config.sigma},
                    {"shared_weight", config.shared_weight},
                    {"corpus_seed", config.corpus_seed},
                    {"query_seed", config.query_seed},
                    {"noise", "irwin-hall-4"},
                    {"dim", kFusedDim}};
  j["params"] = {{"m", config.params.m}, {"s", config.params.s}, {"k", config.params.k},
                 {"seed", config.params.seed}};
  j["sizes"] = json::array();
  for (const auto& sr : sizes) {
    json s;
    s["size"] = sr.size;
    s["per_dataset"] = sr.per_dataset;
    s["build_seconds"] = sr.build_seconds;
    s["expected_intra_cosine"] = sr.expected_intra_cosine;
    s["strategies"] = json::array();
    for (const auto& st : sr.strategies) {
      json t = {{"strategy", to_string(st.strategy)}, {"queries", st.queries},
                {"median_ms", st.median_ms},          {"p90_ms", st.p90_ms},
                {"p99_ms", st.p99_ms},                {"mean_ms", st.mean_ms},
                {"max_candidates", st.max_candidates}, {"mean_candidates", st.mean_candidates}};
      if (st.recall_at_1) {
        t["recall_at_1"] = *st.recall_at_1;
        t["recall_queries"] = st.recall_queries;
      }
      s["strategies"].push_back(std::move(t));
    }
    j["sizes"].push_back(std::move(s));
  }
  return j.dump(2);
}

}  // namespace rtcache
