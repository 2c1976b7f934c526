#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "index_format.hpp"
#include "rtcache/error.hpp"
#include "rtcache/vector_index.hpp"

namespace rtcache {

namespace {

constexpr char kIndexMagic[8] = {'R', 'T', 'C', 'I', 'D', 'X', '0', '1'};
constexpr char kCentroidMagic[8] = {'R', 'T', 'C', 'C', 'E', 'N', '0', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kPage = 4096;

struct FileHeader {
  char magic[8];
  std::uint32_t version;
  std::uint32_t dim;
  std::uint64_t count;
  std::uint64_t keys_offset;
  std::uint64_t values_offset;
  std::uint8_t reserved[24];
};
static_assert(sizeof(FileHeader) == 64);

struct CentroidRecord {
  char dataset_id[kMaxDatasetIdBytes + 1];
  std::uint64_t count;
  std::uint8_t degenerate;
  std::uint8_t dirty;
  std::uint8_t reserved[6];
};
static_assert(sizeof(CentroidRecord) == 48);

std::uint64_t values_offset_for(std::uint64_t count) {
  const std::uint64_t end_of_keys = sizeof(FileHeader) + count * sizeof(IndexKey);
  return (end_of_keys + kPage - 1) / kPage * kPage;
}

[[noreturn]] void io_fail(const std::string& what, const std::filesystem::path& path) {
  fail(ErrorCode::kIo, what + " " + path.string() + ": " + std::strerror(errno));
}

void pwrite_all(int fd, const void* data, std::size_t size, std::uint64_t offset,
                const std::filesystem::path& path) {
  const char* p = static_cast<const char*>(data);
  while (size > 0) {
    const ssize_t n = ::pwrite(fd, p, size, static_cast<off_t>(offset));
    if (n < 0) {
      if (errno == EINTR) continue;
      io_fail("write failed on", path);
    }
    p += n;
    size -= static_cast<std::size_t>(n);
    offset += static_cast<std::uint64_t>(n);
  }
}

std::filesystem::path tmp_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".tmp");
}

void write_centroids(const std::filesystem::path& path, const CentroidTable& table) {
  const auto tmp = tmp_path(path);
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot create " + tmp.string());
    out.write(kCentroidMagic, 8);
    const std::uint32_t version = kVersion;
    const std::uint32_t dim = kFusedDim;
    const std::uint64_t n = table.centroids.size();
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&dim), 4);
    out.write(reinterpret_cast<const char*>(&n), 8);
    for (const Centroid& c : table.centroids) {
      if (c.mean.size() != kFusedDim) fail(ErrorCode::kValidation, "centroid has wrong dimension");
      CentroidRecord rec{};
      std::memcpy(rec.dataset_id, c.dataset_id.data(),
                  std::min(c.dataset_id.size(), kMaxDatasetIdBytes));
      rec.count = c.count;
      rec.degenerate = c.degenerate ? 1 : 0;
      rec.dirty = c.dirty ? 1 : 0;
      out.write(reinterpret_cast<const char*>(&rec), sizeof(rec));
      out.write(reinterpret_cast<const char*>(c.mean.data()),
                static_cast<std::streamsize>(kFusedDim * sizeof(double)));
    }
    out.flush();
    if (!out) fail(ErrorCode::kIo, "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CentroidTable read_centroids(const std::filesystem::path& path) {
  CentroidTable table;
  std::ifstream in(path, std::ios::binary);
  if (!in) return table;
  char magic[8];
  std::uint32_t version = 0, dim = 0;
  std::uint64_t n = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  in.read(reinterpret_cast<char*>(&n), 8);
  if (!in || std::memcmp(magic, kCentroidMagic, 8) != 0 || version != kVersion ||
      dim != kFusedDim) {
    fail(ErrorCode::kParse, "bad centroid file " + path.string());
  }
  for (std::uint64_t i = 0; i < n; ++i) {
    CentroidRecord rec{};
    in.read(reinterpret_cast<char*>(&rec), sizeof(rec));
    Centroid c;
    c.dataset_id.assign(rec.dataset_id, ::strnlen(rec.dataset_id, sizeof(rec.dataset_id)));
    c.count = rec.count;
    c.degenerate = rec.degenerate != 0;
    c.dirty = rec.dirty != 0;
    c.mean.resize(kFusedDim);
    in.read(reinterpret_cast<char*>(c.mean.data()),
            static_cast<std::streamsize>(kFusedDim * sizeof(double)));
    if (!in) fail(ErrorCode::kParse, "truncated centroid file " + path.string());
    table.centroids.push_back(std::move(c));
  }
  std::sort(table.centroids.begin(), table.centroids.end(),
            [](const Centroid& a, const Centroid& b) { return a.dataset_id < b.dataset_id; });
  return table;
}

}  // namespace

std::filesystem::path centroid_path(const std::filesystem::path& index_path) {
  return std::filesystem::path(index_path.string() + ".centroids");
}

struct IndexFileWriter::Impl {
  std::filesystem::path path;
  std::filesystem::path tmp;
  int fd = -1;
  std::uint64_t count = 0;
  std::uint64_t written = 0;
  std::uint64_t values_offset = 0;
  std::vector<IndexKey> key_buffer;
  std::map<std::string, std::pair<std::vector<double>, std::size_t>, std::less<>> sums;
  bool finished = false;

  void flush_keys() {
    if (key_buffer.empty()) return;
    const std::uint64_t first = written - key_buffer.size();
    pwrite_all(fd, key_buffer.data(), key_buffer.size() * sizeof(IndexKey),
               sizeof(FileHeader) + first * sizeof(IndexKey), tmp);
    key_buffer.clear();
  }
};

IndexFileWriter::IndexFileWriter(const std::filesystem::path& path, std::size_t count)
    : impl_(std::make_unique<Impl>()) {
  impl_->path = path;
  impl_->tmp = tmp_path(path);
  impl_->count = count;
  impl_->values_offset = values_offset_for(count);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  impl_->fd = ::open(impl_->tmp.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (impl_->fd < 0) io_fail("cannot create", impl_->tmp);
  const std::uint64_t size = impl_->values_offset + count * kFusedDim * sizeof(float);
  if (::ftruncate(impl_->fd, static_cast<off_t>(size)) != 0) io_fail("cannot size", impl_->tmp);

  FileHeader header{};
  std::memcpy(header.magic, kIndexMagic, 8);
  header.version = kVersion;
  header.dim = kFusedDim;
  header.count = count;
  header.keys_offset = sizeof(FileHeader);
  header.values_offset = impl_->values_offset;
  pwrite_all(impl_->fd, &header, sizeof(header), 0, impl_->tmp);
}

IndexFileWriter::~IndexFileWriter() {
  if (impl_ && impl_->fd >= 0) {
    ::close(impl_->fd);
    if (!impl_->finished) {
      std::error_code ec;
      std::filesystem::remove(impl_->tmp, ec);
    }
  }
}

void IndexFileWriter::append(const StateId& state, std::string_view dataset_id,
                             std::span<const float> unit_vector) {
  append(make_index_key(state, dataset_id, unit_vector), unit_vector.data());
}

void IndexFileWriter::append(const IndexKey& key, const float* values) {
  Impl& w = *impl_;
  if (w.finished) fail(ErrorCode::kValidation, "index writer already finished");
  if (w.written >= w.count) fail(ErrorCode::kValidation, "more records appended than declared");
  pwrite_all(w.fd, values, kFusedDim * sizeof(float),
             w.values_offset + w.written * kFusedDim * sizeof(float), w.tmp);
  ++w.written;
  w.key_buffer.push_back(key);
  if (w.key_buffer.size() >= 4096) w.flush_keys();

  auto it = w.sums.find(key.dataset());
  if (it == w.sums.end()) {
    it = w.sums.emplace(std::string(key.dataset()),
                        std::make_pair(std::vector<double>(kFusedDim, 0.0), std::size_t{0}))
             .first;
  }
  auto& [sum, n] = it->second;
  for (std::size_t i = 0; i < kFusedDim; ++i) sum[i] += values[i];
  ++n;
}

void IndexFileWriter::finish(const CentroidTable* table) {
  Impl& w = *impl_;
  if (w.finished) return;
  if (w.written != w.count) {
    fail(ErrorCode::kValidation, "index writer declared " + std::to_string(w.count) +
                                     " records but received " + std::to_string(w.written));
  }
  w.flush_keys();
  if (::fsync(w.fd) != 0) io_fail("fsync failed on", w.tmp);
  ::close(w.fd);
  w.fd = -1;

  CentroidTable accumulated;
  if (!table) {
    for (auto& [id, entry] : w.sums) {
      Centroid c;
      c.dataset_id = id;
      c.count = entry.second;
      c.mean = std::move(entry.first);
      double sq = 0.0;
      for (double& x : c.mean) {
        x /= static_cast<double>(c.count);
        sq += x * x;
      }
      c.degenerate = std::sqrt(sq) <= 1e-12;
      accumulated.centroids.push_back(std::move(c));
    }
    table = &accumulated;
  }
  write_centroids(centroid_path(w.path), *table);
  std::filesystem::rename(w.tmp, w.path);
  w.finished = true;
}

namespace detail {

LoadedIndex load_index_file(const std::filesystem::path& path) {
  const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) {
    if (errno == ENOENT) fail(ErrorCode::kNotFound, "no index file at " + path.string());
    io_fail("cannot open", path);
  }
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    io_fail("cannot stat", path);
  }
  const auto size = static_cast<std::uint64_t>(st.st_size);
  if (size < sizeof(FileHeader)) {
    ::close(fd);
    fail(ErrorCode::kParse, "index file too small: " + path.string());
  }
  void* base = ::mmap(nullptr, size, PROT_READ, MAP_SHARED, fd, 0);
  ::close(fd);
  if (base == MAP_FAILED) io_fail("cannot map", path);
  std::shared_ptr<const void> mapping(base, [size](const void* p) {
    ::munmap(const_cast<void*>(p), size);
  });

  FileHeader header;
  std::memcpy(&header, base, sizeof(header));
  if (std::memcmp(header.magic, kIndexMagic, 8) != 0) {
    fail(ErrorCode::kParse, "not an index file: " + path.string());
  }
  if (header.version != kVersion || header.dim != kFusedDim) {
    fail(ErrorCode::kParse, "unsupported index version or dimension in " + path.string());
  }
  if (header.keys_offset != sizeof(FileHeader) ||
      header.values_offset != values_offset_for(header.count) ||
      size < header.values_offset + header.count * kFusedDim * sizeof(float)) {
    fail(ErrorCode::kParse, "index file layout is inconsistent: " + path.string());
  }

  LoadedIndex out;
  const auto* bytes = static_cast<const char*>(base);
  out.keys = reinterpret_cast<const IndexKey*>(bytes + header.keys_offset);
  out.values = reinterpret_cast<const float*>(bytes + header.values_offset);
  out.count = header.count;
  out.mapping = std::move(mapping);
  out.centroids = read_centroids(centroid_path(path));
  return out;
}

}  // namespace detail

}  // namespace rtcache
