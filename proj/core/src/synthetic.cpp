#include "rtcache/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "rtcache/error.hpp"

namespace rtcache {

namespace {

// Sum of four 16-bit uniforms per 64-bit draw, rescaled to zero mean and
// unit variance. Close enough to a normal for cluster noise and much cheaper
// than std::normal_distribution at corpus scale.
inline double approx_normal(std::mt19937_64& rng) {
  const std::uint64_t bits = rng();
  const double sum = static_cast<double>(bits & 0xffff) + static_cast<double>((bits >> 16) & 0xffff) +
                     static_cast<double>((bits >> 32) & 0xffff) + static_cast<double>(bits >> 48);
  constexpr double kMean = 4.0 * 65535.0 / 2.0;
  constexpr double kScale = 1.0 / (65536.0 * 0.5773502691896258);  // 1 / sqrt(4 * 65536^2 / 12)
  return (sum - kMean) * kScale;
}

void normalize(std::span<double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double inv = 1.0 / std::sqrt(sq);
  for (double& x : v) x *= inv;
}

}  // namespace

SyntheticCorpus::SyntheticCorpus(SyntheticCorpusConfig config) : config_(config) {
  if (config_.datasets == 0 || config_.vectors_per_dataset == 0 || config_.steps_per_episode == 0) {
    fail(ErrorCode::kValidation, "synthetic corpus needs datasets, vectors and episode length");
  }
  if (!(config_.sigma >= 0.0) || !(config_.shared_weight >= 0.0)) {
    fail(ErrorCode::kValidation, "synthetic corpus sigma and shared_weight must be non-negative");
  }
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> gauss;
  std::vector<double> shared(kFusedDim);
  for (double& x : shared) x = gauss(rng);
  normalize(shared);

  centers_.resize(config_.datasets * kFusedDim);
  std::vector<double> c(kFusedDim);
  for (std::size_t d = 0; d < config_.datasets; ++d) {
    for (double& x : c) x = gauss(rng);
    normalize(c);
    for (std::size_t i = 0; i < kFusedDim; ++i) c[i] += config_.shared_weight * shared[i];
    normalize(c);
    for (std::size_t i = 0; i < kFusedDim; ++i) centers_[d * kFusedDim + i] = static_cast<float>(c[i]);
  }
}

std::string SyntheticCorpus::dataset_id(std::size_t d) const {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth-%03zu", d);
  return buf;
}

StateId SyntheticCorpus::state(std::size_t d, std::size_t i) const {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "synth-%03zu-e%06zu", d, i / config_.steps_per_episode);
  return {buf, i % config_.steps_per_episode};
}

std::span<const float> SyntheticCorpus::center(std::size_t d) const {
  return {centers_.data() + d * kFusedDim, kFusedDim};
}

void SyntheticCorpus::draw_into(std::size_t d, std::mt19937_64& rng, float* out) const {
  const float* c = centers_.data() + d * kFusedDim;
  double tmp[kFusedDim];
  double sq = 0.0;
  for (std::size_t i = 0; i < kFusedDim; ++i) {
    tmp[i] = c[i] + config_.sigma * approx_normal(rng);
    sq += tmp[i] * tmp[i];
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t i = 0; i < kFusedDim; ++i) out[i] = static_cast<float>(tmp[i] * inv);
}

void SyntheticCorpus::for_each(
    std::size_t d, const std::function<void(std::size_t, std::span<const float>)>& visit) const {
  std::mt19937_64 rng(config_.seed ^ (0x9e3779b97f4a7c15ull * (d + 1)));
  std::vector<float> v(kFusedDim);
  for (std::size_t i = 0; i < config_.vectors_per_dataset; ++i) {
    draw_into(d, rng, v.data());
    visit(i, v);
  }
}

std::vector<float> SyntheticCorpus::draw(std::size_t d, std::mt19937_64& rng) const {
  std::vector<float> v(kFusedDim);
  draw_into(d, rng, v.data());
  return v;
}

void SyntheticCorpus::insert_into(VectorIndex& index) const {
  for (std::size_t d = 0; d < config_.datasets; ++d) {
    const std::string id = dataset_id(d);
    for_each(d, [&](std::size_t i, std::span<const float> v) { index.insert(state(d, i), id, v); });
  }
}

void SyntheticCorpus::write_to(IndexFileWriter& writer) const {
  for (std::size_t d = 0; d < config_.datasets; ++d) {
    const std::string id = dataset_id(d);
    for_each(d, [&](std::size_t i, std::span<const float> v) { writer.append(state(d, i), id, v); });
  }
}

double SyntheticCorpus::expected_intra_cosine() const {
  const double noise = config_.sigma * config_.sigma * static_cast<double>(kFusedDim);
  return 1.0 / (1.0 + noise);
}

}  // namespace rtcache
