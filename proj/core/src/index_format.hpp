#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>

#include "rtcache/vector_index.hpp"

namespace rtcache::detail {

struct LoadedIndex {
  std::shared_ptr<const void> mapping;  // keeps the file mapped
  const IndexKey* keys = nullptr;
  const float* values = nullptr;
  std::size_t count = 0;
  CentroidTable centroids;
};

LoadedIndex load_index_file(const std::filesystem::path& path);

}  // namespace rtcache::detail
