#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rtcache {

inline constexpr std::size_t kFirstEncoderDim = 1024;
inline constexpr std::size_t kSecondEncoderDim = 1152;
inline constexpr std::size_t kFusedDim = kFirstEncoderDim + kSecondEncoderDim;
inline constexpr double kUnitNormTolerance = 1e-6;

// Raw, unnormalized outputs of the two image encoders.
struct FeaturePair {
  std::vector<double> d;  // first encoder, 1024 dims
  std::vector<double> s;  // second encoder, 1152 dims
};

// Unit-norm 2176-D concatenation of a FeaturePair.
class FusedEmbedding {
 public:
  FusedEmbedding() = default;

  /// Wraps an existing vector; throws kValidation unless it has 2176 finite
  /// entries with norm 1 +- 1e-6.
  static FusedEmbedding from_unit_vector(std::vector<double> values);
  static FusedEmbedding from_unit_vector(std::span<const float> values);

  std::span<const double> values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  bool empty() const { return values_.empty(); }

  std::vector<float> to_float() const;

  friend bool operator==(const FusedEmbedding&, const FusedEmbedding&) = default;

 private:
  explicit FusedEmbedding(std::vector<double> v) : values_(std::move(v)) {}
  friend FusedEmbedding fuse(const FeaturePair& pair);

  std::vector<double> values_;
};

/// e = [d || s] / ||[d || s]||_2.
/// kValidation on wrong dimensions or non-finite entries; kDegenerateInput
/// when the concatenation has zero norm.
FusedEmbedding fuse(const FeaturePair& pair);

double cosine_similarity(const FusedEmbedding& a, const FusedEmbedding& b);

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual FeaturePair features(std::span<const std::byte> image) = 0;
  virtual std::string name() const = 0;
};

/// fuse(backend.features(image)). kProtocol when the backend hands back
/// vectors of the wrong size.
FusedEmbedding embed(std::span<const std::byte> image, EmbeddingBackend& backend);

// ---------------------------------------------------------------------------
// Mock encoder used by the simulator and the tests.

struct MockEncoderConfig {
  std::uint64_t seed = 0x5eed2176;
  // Frequency scale: codes that differ by sigma along any direction keep a
  // fused cosine of about exp(-1/2).
  double sigma = 1.0;
};

inline constexpr std::size_t kMaxSceneCodeDims = 16;

/// Random Fourier feature lift of a low-dimensional scene code:
/// feature_i = cos(w_i . x + b_i), w_i ~ N(0, I / sigma^2), b_i ~ U[0, 2pi).
/// Rows [0, 1024) feed the first encoder, [1024, 2176) the second.
class MockFeatureLift {
 public:
  explicit MockFeatureLift(MockEncoderConfig config = {});

  FeaturePair features(std::span<const double> scene_code) const;

  // ||features(x) - features(y)|| <= lipschitz_bound() * ||x - y||.
  double lipschitz_bound() const { return lipschitz_; }
  const MockEncoderConfig& config() const { return config_; }

 private:
  MockEncoderConfig config_;
  std::vector<double> weights_;  // kFusedDim x kMaxSceneCodeDims, row-major
  std::vector<double> phases_;
  double lipschitz_ = 0.0;
};

// Uses a lift with the default configuration.
FeaturePair mock_features(std::span<const double> scene_code);

// Synthetic "frames" for the mock backend: "SCN1" | u32 count | count x f64, little-endian.
std::vector<std::byte> encode_scene_code(std::span<const double> code);
std::vector<double> decode_scene_code(std::span<const std::byte> bytes);
bool is_scene_code(std::span<const std::byte> bytes);

/// Deterministic backend. Scene-code frames are lifted directly; any other
/// byte string is hashed into a 16-D code first.
class MockBackend : public EmbeddingBackend {
 public:
  explicit MockBackend(MockEncoderConfig config = {}) : lift_(config) {}

  FeaturePair features(std::span<const std::byte> image) override;
  std::string name() const override { return "mock"; }
  const MockFeatureLift& lift() const { return lift_; }

 private:
  MockFeatureLift lift_;
};

// ---------------------------------------------------------------------------
// Client for the encoder sidecar (POST /embed, JSON).

struct RemoteBackendConfig {
  std::string url = "http://127.0.0.1:8090";
  std::chrono::milliseconds timeout{5000};
  std::size_t max_in_flight = 4;
};

class RemoteBackend : public EmbeddingBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig config);
  ~RemoteBackend() override;

  // kTransport on connection failures, timeouts and 5xx replies; kProtocol
  // on malformed bodies, id mismatches or wrong dimensions.
  FeaturePair features(std::span<const std::byte> image) override;
  std::string name() const override { return "remote"; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace rtcache
