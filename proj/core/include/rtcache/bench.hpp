#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtcache/retrieval.hpp"
#include "rtcache/synthetic.hpp"

namespace rtcache {

enum class SearchStrategy {
  kFull,          // exact scan of every vector
  kCentroid,      // top-m datasets, every vector in them
  kSubset,        // S sampled vectors from every dataset
  kHierarchical,  // top-m datasets, S sampled vectors from each
};

std::string_view to_string(SearchStrategy s);
std::optional<SearchStrategy> parse_strategy(std::string_view text);

struct BenchConfig {
  std::vector<std::size_t> sizes{10'000};
  std::vector<SearchStrategy> strategies{SearchStrategy::kHierarchical, SearchStrategy::kFull};
  std::size_t datasets = 20;
  double sigma = 0.006;
  double shared_weight = 0.0;
  std::uint64_t corpus_seed = 2176;
  std::uint64_t query_seed = 99;
  std::size_t queries = 101;      // per strategy
  std::size_t full_queries = 9;   // samples for the full and centroid scans
  RetrievalParams params;         // m, s, k, seed
  std::filesystem::path work_dir = "rtcache-bench";
};

struct StrategyStats {
  SearchStrategy strategy = SearchStrategy::kFull;
  std::size_t queries = 0;
  double median_ms = 0.0;
  double p90_ms = 0.0;
  double p99_ms = 0.0;
  double mean_ms = 0.0;
  std::size_t max_candidates = 0;
  double mean_candidates = 0.0;
  // Fraction of the queries that also had a full scan whose top-1 matches
  // the full-scan top-1; empty when no full scan ran.
  std::optional<double> recall_at_1;
  std::size_t recall_queries = 0;
};

struct SizeReport {
  std::size_t size = 0;
  std::size_t per_dataset = 0;
  double build_seconds = 0.0;  // 0 when a cached corpus file was reused
  double expected_intra_cosine = 0.0;
  std::vector<StrategyStats> strategies;
  const StrategyStats* find(SearchStrategy s) const;
};

struct BenchReport {
  BenchConfig config;
  std::vector<SizeReport> sizes;
  std::string to_json() const;
};

/// Builds (or reuses) a memory-mapped clustered corpus per size under
/// work_dir and times each strategy on the same query set. Cheap strategies
/// run before the full scan so the scan does not evict their working set.
BenchReport run_bench(const BenchConfig& config);

/// Parses sizes like "1e4,100000,1e6".
std::vector<std::size_t> parse_sizes(std::string_view text);

}  // namespace rtcache
