#include "rtcache/embedder.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include <openssl/evp.h>

#include "base64.hpp"
#include "rtcache/error.hpp"
#include "rtcache/memory_store.hpp"

namespace rtcache {

namespace detail {

std::string base64_encode(std::span<const std::byte> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::optional<std::vector<std::byte>> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) return std::nullopt;
  std::vector<std::byte> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) return std::nullopt;
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock counts padding bytes as output.
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() > 1 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

}  // namespace detail

namespace {

bool finite(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

FusedEmbedding FusedEmbedding::from_unit_vector(std::vector<double> values) {
  if (values.size() != kFusedDim) {
    fail(ErrorCode::kValidation, "embedding must have 2176 dimensions, got " +
                                     std::to_string(values.size()));
  }
  if (!finite(values)) fail(ErrorCode::kValidation, "embedding has non-finite entries");
  double sq = 0.0;
  for (double x : values) sq += x * x;
  if (std::abs(std::sqrt(sq) - 1.0) > kUnitNormTolerance) {
    fail(ErrorCode::kValidation, "embedding is not unit norm");
  }
  return FusedEmbedding(std::move(values));
}

FusedEmbedding FusedEmbedding::from_unit_vector(std::span<const float> values) {
  return from_unit_vector(std::vector<double>(values.begin(), values.end()));
}

std::vector<float> FusedEmbedding::to_float() const {
  return {values_.begin(), values_.end()};
}

FusedEmbedding fuse(const FeaturePair& pair) {
  if (pair.d.size() != kFirstEncoderDim || pair.s.size() != kSecondEncoderDim) {
    fail(ErrorCode::kValidation, "feature pair must be (1024, 1152), got (" +
                                     std::to_string(pair.d.size()) + ", " +
                                     std::to_string(pair.s.size()) + ")");
  }
  if (!finite(pair.d) || !finite(pair.s)) {
    fail(ErrorCode::kValidation, "feature pair has non-finite entries");
  }

  // Scale by the largest magnitude first so tiny or huge inputs neither
  // underflow nor overflow the squared norm.
  double peak = 0.0;
  for (double x : pair.d) peak = std::max(peak, std::abs(x));
  for (double x : pair.s) peak = std::max(peak, std::abs(x));
  if (peak == 0.0) fail(ErrorCode::kDegenerateInput, "feature pair has zero norm");

  std::vector<double> e;
  e.reserve(kFusedDim);
  double sq = 0.0;
  for (double x : pair.d) {
    e.push_back(x / peak);
    sq += e.back() * e.back();
  }
  for (double x : pair.s) {
    e.push_back(x / peak);
    sq += e.back() * e.back();
  }
  const double norm = std::sqrt(sq);
  for (double& x : e) x /= norm;
  return FusedEmbedding(std::move(e));
}

double cosine_similarity(const FusedEmbedding& a, const FusedEmbedding& b) {
  if (a.size() != b.size()) fail(ErrorCode::kValidation, "embedding size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

FusedEmbedding embed(std::span<const std::byte> image, EmbeddingBackend& backend) {
  FeaturePair pair = backend.features(image);
  if (pair.d.size() != kFirstEncoderDim || pair.s.size() != kSecondEncoderDim) {
    fail(ErrorCode::kProtocol, "backend " + backend.name() + " returned dims (" +
                                   std::to_string(pair.d.size()) + ", " +
                                   std::to_string(pair.s.size()) + ")");
  }
  return fuse(pair);
}

MockFeatureLift::MockFeatureLift(MockEncoderConfig config) : config_(config) {
  if (!(config_.sigma > 0.0)) fail(ErrorCode::kValidation, "mock encoder sigma must be positive");
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> gauss(0.0, 1.0 / config_.sigma);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  weights_.resize(kFusedDim * kMaxSceneCodeDims);
  phases_.resize(kFusedDim);
  double frob = 0.0;
  for (std::size_t i = 0; i < kFusedDim; ++i) {
    for (std::size_t j = 0; j < kMaxSceneCodeDims; ++j) {
      const double w = gauss(rng);
      weights_[i * kMaxSceneCodeDims + j] = w;
      frob += w * w;
    }
    phases_[i] = phase(rng);
  }
  lipschitz_ = std::sqrt(frob);
}

FeaturePair MockFeatureLift::features(std::span<const double> scene_code) const {
  if (scene_code.size() > kMaxSceneCodeDims) {
    fail(ErrorCode::kValidation, "scene code has more than 16 dimensions");
  }
  if (!finite(scene_code)) fail(ErrorCode::kValidation, "scene code has non-finite entries");

  FeaturePair out;
  out.d.resize(kFirstEncoderDim);
  out.s.resize(kSecondEncoderDim);
  for (std::size_t i = 0; i < kFusedDim; ++i) {
    const double* w = &weights_[i * kMaxSceneCodeDims];
    double arg = phases_[i];
    for (std::size_t j = 0; j < scene_code.size(); ++j) arg += w[j] * scene_code[j];
    const double f = std::cos(arg);
    if (i < kFirstEncoderDim) {
      out.d[i] = f;
    } else {
      out.s[i - kFirstEncoderDim] = f;
    }
  }
  return out;
}

FeaturePair mock_features(std::span<const double> scene_code) {
  static const MockFeatureLift lift{};
  return lift.features(scene_code);
}

namespace {
constexpr char kSceneMagic[4] = {'S', 'C', 'N', '1'};
}

std::vector<std::byte> encode_scene_code(std::span<const double> code) {
  std::vector<std::byte> out(8 + 8 * code.size());
  std::memcpy(out.data(), kSceneMagic, 4);
  const auto n = static_cast<std::uint32_t>(code.size());
  for (int i = 0; i < 4; ++i) out[4 + i] = static_cast<std::byte>((n >> (8 * i)) & 0xff);
  for (std::size_t k = 0; k < code.size(); ++k) {
    std::uint64_t bits;
    std::memcpy(&bits, &code[k], 8);
    for (int i = 0; i < 8; ++i) {
      out[8 + 8 * k + i] = static_cast<std::byte>((bits >> (8 * i)) & 0xff);
    }
  }
  return out;
}

bool is_scene_code(std::span<const std::byte> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSceneMagic, 4) != 0) return false;
  std::uint32_t n = 0;
  for (int i = 3; i >= 0; --i) n = (n << 8) | std::to_integer<std::uint32_t>(bytes[4 + i]);
  return n <= kMaxSceneCodeDims && bytes.size() == 8 + 8 * static_cast<std::size_t>(n);
}

std::vector<double> decode_scene_code(std::span<const std::byte> bytes) {
  if (!is_scene_code(bytes)) fail(ErrorCode::kParse, "not a scene-code frame");
  const std::size_t n = (bytes.size() - 8) / 8;
  std::vector<double> code(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) bits = (bits << 8) | std::to_integer<std::uint64_t>(bytes[8 + 8 * k + i]);
    std::memcpy(&code[k], &bits, 8);
  }
  return code;
}

FeaturePair MockBackend::features(std::span<const std::byte> image) {
  if (is_scene_code(image)) return lift_.features(decode_scene_code(image));

  // Arbitrary bytes: derive a code in [-1, 1]^16 from their SHA-256.
  const std::string hex = sha256_hex(image);
  std::vector<double> code(kMaxSceneCodeDims);
  for (std::size_t i = 0; i < kMaxSceneCodeDims; ++i) {
    const unsigned v = std::stoul(hex.substr(4 * i, 4), nullptr, 16);
    code[i] = static_cast<double>(v) / 32767.5 - 1.0;
  }
  return lift_.features(code);
}

}  // namespace rtcache
