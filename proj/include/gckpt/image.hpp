#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <string>
#include <string_view>
#include <vector>

#include "gckpt/bytes.hpp"
#include "gckpt/compress.hpp"
#include "gckpt/digest.hpp"
#include "gckpt/error.hpp"
#include "gckpt/guest.hpp"

namespace gckpt {

// Checkpoint image container. Layout:
//
//   "GCKP" | version u32 | flags u32 | count u32
//   count * { type u16 | name_len u16 | name | offset u64 |
//             stored_len u64 | raw_len u64 | crc32 u32 }
//   payloads at their offsets
//
// All integers little endian. The crc is over the raw (decoded) payload.
// Whether a payload is stored compressed is a function of (flags, type)
// alone, never inferred from lengths. The first table entry is always the
// manifest.

enum class SectionType : uint16_t {
  Manifest = 1,
  Memory = 2,
  Device = 3,
  PluginBlob = 4,
  LaunchLog = 5,
  DiskSnapshotRef = 6,
  DeltaIndex = 7,
};

inline const char* section_type_name(SectionType t) {
  switch (t) {
    case SectionType::Manifest: return "manifest";
    case SectionType::Memory: return "memory";
    case SectionType::Device: return "device";
    case SectionType::PluginBlob: return "plugin_blob";
    case SectionType::LaunchLog: return "launch_log";
    case SectionType::DiskSnapshotRef: return "disk_snapshot_ref";
    case SectionType::DeltaIndex: return "delta_index";
  }
  return "?";
}

constexpr uint32_t kFlagCompressed = 1u << 0;
constexpr uint32_t kFlagFastRestart = 1u << 1;
constexpr uint32_t kFlagIncremental = 1u << 2;
constexpr uint32_t kKnownFlags =
    kFlagCompressed | kFlagFastRestart | kFlagIncremental;

constexpr uint32_t kImageVersion = 1;
constexpr size_t kMaxSections = 1u << 16;
constexpr size_t kMaxSectionName = 4096;

// Only bulk state is worth deflating, and a fast-restart image keeps memory
// raw so it can be mapped straight out of the file.
inline bool section_compressed(uint32_t flags, SectionType type) {
  if (!(flags & kFlagCompressed)) return false;
  if (type != SectionType::Memory && type != SectionType::Device) return false;
  if ((flags & kFlagFastRestart) && type == SectionType::Memory) return false;
  return true;
}

struct Section {
  SectionType type{};
  std::string name;
  Bytes raw;
};

struct Manifest {
  uint32_t version = kImageVersion;
  uint64_t instr_count = 0;
  uint64_t created_unix = 0;
  Digest content_hash{};
};

constexpr size_t kManifestSize = 52;

inline Bytes encode_manifest(const Manifest& m) {
  Bytes out;
  put_u32(out, m.version);
  put_u64(out, m.instr_count);
  put_u64(out, m.created_unix);
  put_bytes(out, m.content_hash.data(), m.content_hash.size());
  return out;
}

inline Manifest decode_manifest(std::span<const uint8_t> in) {
  if (in.size() != kManifestSize)
    raise(ErrorCode::CorruptImage, "manifest has wrong size");
  ByteReader r(in);
  Manifest m;
  m.version = r.u32();
  m.instr_count = r.u64();
  m.created_unix = r.u64();
  Bytes h = r.bytes(32);
  std::copy(h.begin(), h.end(), m.content_hash.begin());
  return m;
}

// Identity of an image is the hash of its payload sections (manifest
// excluded, since it contains this hash), bound to their type, name, and
// order. Incremental chains link on this value.
inline Digest image_content_hash(const std::vector<Section>& sections) {
  Sha256 h;
  Bytes prefix;
  for (const auto& s : sections) {
    prefix.clear();
    put_u16(prefix, static_cast<uint16_t>(s.type));
    put_u16(prefix, static_cast<uint16_t>(s.name.size()));
    put_bytes(prefix, s.name.data(), s.name.size());
    put_u64(prefix, s.raw.size());
    h.update(prefix.data(), prefix.size());
    h.update(s.raw.data(), s.raw.size());
  }
  return h.finish();
}

struct TableEntry {
  SectionType type{};
  std::string name;
  uint64_t offset = 0;
  uint64_t stored_len = 0;
  uint64_t raw_len = 0;
  uint32_t crc = 0;
};

inline Bytes write_image(uint32_t flags, Manifest manifest,
                         const std::vector<Section>& sections) {
  if (flags & ~kKnownFlags) raise(ErrorCode::BadConfig, "unknown image flags");
  if (sections.size() + 1 > kMaxSections)
    raise(ErrorCode::BadConfig, "too many sections");
  for (const auto& s : sections) {
    if (s.type == SectionType::Manifest)
      raise(ErrorCode::BadConfig, "manifest is written by the container");
    if (s.name.size() > kMaxSectionName)
      raise(ErrorCode::BadConfig, "section name too long");
  }

  manifest.version = kImageVersion;
  manifest.content_hash = image_content_hash(sections);

  std::vector<Section> all;
  all.reserve(sections.size() + 1);
  all.push_back({SectionType::Manifest, "manifest", encode_manifest(manifest)});
  for (const auto& s : sections) all.push_back(s);

  std::vector<Bytes> stored(all.size());
  for (size_t i = 0; i < all.size(); i++) {
    if (section_compressed(flags, all[i].type))
      stored[i] = deflate_bytes(all[i].raw);
    else
      stored[i] = all[i].raw;
  }

  size_t header_size = 16;
  for (const auto& s : all) header_size += 32 + s.name.size();

  std::vector<uint64_t> offsets(all.size());
  uint64_t pos = header_size;
  for (size_t i = 0; i < all.size(); i++) {
    bool align = (flags & kFlagFastRestart) && all[i].type == SectionType::Memory;
    if (align) pos = (pos + kPageSize - 1) & ~uint64_t(kPageSize - 1);
    offsets[i] = pos;
    pos += stored[i].size();
  }

  Bytes out;
  out.reserve(pos);
  put_bytes(out, "GCKP", 4);
  put_u32(out, kImageVersion);
  put_u32(out, flags);
  put_u32(out, static_cast<uint32_t>(all.size()));
  for (size_t i = 0; i < all.size(); i++) {
    put_u16(out, static_cast<uint16_t>(all[i].type));
    put_u16(out, static_cast<uint16_t>(all[i].name.size()));
    put_bytes(out, all[i].name.data(), all[i].name.size());
    put_u64(out, offsets[i]);
    put_u64(out, stored[i].size());
    put_u64(out, all[i].raw.size());
    put_u32(out, crc32_bytes(all[i].raw));
  }
  for (size_t i = 0; i < all.size(); i++) {
    out.resize(offsets[i], 0);  // alignment gap, if any
    out.insert(out.end(), stored[i].begin(), stored[i].end());
  }
  return out;
}

inline void write_file_atomic(const std::string& path, const Bytes& data) {
  std::string tmp = path + ".tmp." + std::to_string(::getpid());
  int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) raise(ErrorCode::IoFailure, "cannot create " + tmp);
  size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n <= 0) {
      ::close(fd);
      ::unlink(tmp.c_str());
      raise(ErrorCode::IoFailure, "short write to " + tmp);
    }
    off += static_cast<size_t>(n);
  }
  ::close(fd);
  if (::rename(tmp.c_str(), path.c_str()) != 0) {
    ::unlink(tmp.c_str());
    raise(ErrorCode::IoFailure, "cannot rename into " + path);
  }
}

inline void write_image_file(const std::string& path, uint32_t flags,
                             const Manifest& manifest,
                             const std::vector<Section>& sections) {
  write_file_atomic(path, write_image(flags, manifest, sections));
}

// Reads the header and manifest eagerly, payloads on demand. Keeps the file
// descriptor so a fast-restart image can be mapped rather than read.
class ImageFile {
 public:
  static ImageFile open(const std::string& path) {
    ImageFile img;
    img.path_ = path;
    img.fd_ = ::open(path.c_str(), O_RDONLY);
    if (img.fd_ < 0) raise(ErrorCode::IoFailure, "cannot open " + path);
    struct stat st{};
    if (::fstat(img.fd_, &st) != 0)
      raise(ErrorCode::IoFailure, "cannot stat " + path);
    img.file_size_ = static_cast<uint64_t>(st.st_size);
    img.parse_header();
    return img;
  }

  ImageFile(const ImageFile&) = delete;
  ImageFile& operator=(const ImageFile&) = delete;
  ImageFile(ImageFile&& o) noexcept { *this = std::move(o); }
  ImageFile& operator=(ImageFile&& o) noexcept {
    if (this != &o) {
      close_fd();
      path_ = std::move(o.path_);
      fd_ = o.fd_;
      o.fd_ = -1;
      file_size_ = o.file_size_;
      flags_ = o.flags_;
      table_ = std::move(o.table_);
      manifest_ = o.manifest_;
    }
    return *this;
  }
  ~ImageFile() { close_fd(); }

  const std::string& path() const { return path_; }
  uint32_t flags() const { return flags_; }
  const Manifest& manifest() const { return manifest_; }
  const std::vector<TableEntry>& table() const { return table_; }

  static constexpr size_t npos = static_cast<size_t>(-1);

  size_t find(SectionType type, std::string_view name) const {
    for (size_t i = 0; i < table_.size(); i++)
      if (table_[i].type == type && table_[i].name == name) return i;
    return npos;
  }

  size_t require(SectionType type, std::string_view name) const {
    size_t i = find(type, name);
    if (i == npos)
      raise(ErrorCode::CorruptImage, std::string("image lacks section: ") +
                                         section_type_name(type) + "/" +
                                         std::string(name));
    return i;
  }

  // Decoded payload, crc checked.
  Bytes read_section(size_t idx) const {
    const TableEntry& e = entry(idx);
    Bytes stored = read_stored(e);
    Bytes raw;
    if (section_compressed(flags_, e.type))
      raw = inflate_bytes(stored, e.raw_len);
    else
      raw = std::move(stored);
    if (crc32_bytes(raw) != e.crc)
      raise(ErrorCode::CorruptImage, "crc mismatch in section " + e.name);
    return raw;
  }

  // Private mapping of an uncompressed page-aligned memory payload. Pages
  // materialize on first touch; writes stay local to the mapping.
  GuestMemory map_section(size_t idx) const {
    const TableEntry& e = entry(idx);
    if (section_compressed(flags_, e.type))
      raise(ErrorCode::CorruptImage, "cannot map compressed section");
    if (e.offset % kPageSize != 0)
      raise(ErrorCode::CorruptImage, "section not aligned for mapping");
    if (e.raw_len != e.stored_len)
      raise(ErrorCode::CorruptImage, "stored and raw length differ");
    return GuestMemory::from_file(fd_, e.offset, e.raw_len);
  }

  std::vector<Section> load_all() const {
    std::vector<Section> out;
    for (size_t i = 1; i < table_.size(); i++)
      out.push_back({table_[i].type, table_[i].name, read_section(i)});
    return out;
  }

  // Recomputes every crc and the content hash. skip_memory_payloads leaves
  // memory sections unread so a fast-restart image can be checked without
  // pulling the whole of guest memory through the page cache; the content
  // hash is only compared when nothing was skipped.
  void verify(bool skip_memory_payloads = false) const {
    Sha256 h;
    Bytes prefix;
    bool skipped = false;
    for (size_t i = 1; i < table_.size(); i++) {
      const TableEntry& e = table_[i];
      if (skip_memory_payloads && e.type == SectionType::Memory) {
        skipped = true;
        continue;
      }
      Bytes raw = read_section(i);
      prefix.clear();
      put_u16(prefix, static_cast<uint16_t>(e.type));
      put_u16(prefix, static_cast<uint16_t>(e.name.size()));
      put_bytes(prefix, e.name.data(), e.name.size());
      put_u64(prefix, raw.size());
      h.update(prefix.data(), prefix.size());
      h.update(raw.data(), raw.size());
    }
    if (!skipped && h.finish() != manifest_.content_hash)
      raise(ErrorCode::CorruptImage, "image content does not match manifest");
  }

 private:
  ImageFile() = default;

  void close_fd() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

  const TableEntry& entry(size_t idx) const {
    if (idx >= table_.size()) raise(ErrorCode::OutOfRange, "no such section");
    return table_[idx];
  }

  Bytes read_stored(const TableEntry& e) const {
    Bytes out(e.stored_len);
    size_t off = 0;
    while (off < out.size()) {
      ssize_t n = ::pread(fd_, out.data() + off, out.size() - off,
                          static_cast<off_t>(e.offset + off));
      if (n <= 0) raise(ErrorCode::IoFailure, "short read from " + path_);
      off += static_cast<size_t>(n);
    }
    return out;
  }

  void parse_header() {
    uint8_t head[16];
    if (::pread(fd_, head, 16, 0) != 16)
      raise(ErrorCode::CorruptImage, "file too small for header");
    if (std::memcmp(head, "GCKP", 4) != 0)
      raise(ErrorCode::CorruptImage, "bad magic");
    ByteReader r(std::span<const uint8_t>(head + 4, 12));
    uint32_t version = r.u32();
    if (version != kImageVersion)
      raise(ErrorCode::CorruptImage, "unsupported image version");
    flags_ = r.u32();
    if (flags_ & ~kKnownFlags)
      raise(ErrorCode::CorruptImage, "unknown image flags");
    uint32_t count = r.u32();
    if (count == 0 || count > kMaxSections)
      raise(ErrorCode::CorruptImage, "section count out of range");

    // The table is variable length; read generously and parse.
    size_t cap = std::min<uint64_t>(file_size_, 16 + uint64_t(count) * (32 + kMaxSectionName));
    Bytes blob(cap);
    size_t off = 0;
    while (off < blob.size()) {
      ssize_t n = ::pread(fd_, blob.data() + off, blob.size() - off,
                          static_cast<off_t>(off));
      if (n < 0) raise(ErrorCode::IoFailure, "read failed on " + path_);
      if (n == 0) break;
      off += static_cast<size_t>(n);
    }
    blob.resize(off);

    ByteReader t(std::span<const uint8_t>(blob.data() + 16, blob.size() - 16));
    try {
      for (uint32_t i = 0; i < count; i++) {
        TableEntry e;
        uint16_t type = t.u16();
        if (type < 1 || type > 7)
          raise(ErrorCode::CorruptImage, "unknown section type");
        e.type = static_cast<SectionType>(type);
        uint16_t name_len = t.u16();
        if (name_len > kMaxSectionName)
          raise(ErrorCode::CorruptImage, "section name too long");
        e.name = t.str(name_len);
        e.offset = t.u64();
        e.stored_len = t.u64();
        e.raw_len = t.u64();
        e.crc = t.u32();
        if (e.offset > file_size_ || e.stored_len > file_size_ - e.offset)
          raise(ErrorCode::CorruptImage, "section extends past end of file");
        if (!section_compressed(flags_, e.type) && e.stored_len != e.raw_len)
          raise(ErrorCode::CorruptImage, "stored and raw length differ");
        // DEFLATE expands at most ~1032:1, so a larger claim cannot come
        // from a real stream and would otherwise size the inflate buffer.
        if (section_compressed(flags_, e.type) && e.raw_len > e.stored_len * 1032)
          raise(ErrorCode::CorruptImage, "raw length implausible for stored bytes");
        table_.push_back(std::move(e));
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::DecodeError)
        raise(ErrorCode::CorruptImage, "section table truncated");
      throw;
    }

    if (table_[0].type != SectionType::Manifest)
      raise(ErrorCode::CorruptImage, "first section is not the manifest");
    if (table_[0].raw_len != kManifestSize)
      raise(ErrorCode::CorruptImage, "manifest has wrong size");
    manifest_ = decode_manifest(read_section(0));
  }

  std::string path_;
  int fd_ = -1;
  uint64_t file_size_ = 0;
  uint32_t flags_ = 0;
  std::vector<TableEntry> table_;
  Manifest manifest_;
};

// An incremental image stores only dirty pages; this section names the full
// image (or earlier delta) it builds on, by content hash, plus which pages
// the image carries.
struct DeltaIndex {
  Digest base_hash{};
  std::vector<uint32_t> pages;  // strictly ascending page numbers
};

inline Bytes encode_delta_index(const DeltaIndex& d) {
  Bytes out;
  put_bytes(out, d.base_hash.data(), d.base_hash.size());
  put_u32(out, static_cast<uint32_t>(d.pages.size()));
  for (uint32_t p : d.pages) put_u32(out, p);
  return out;
}

inline DeltaIndex decode_delta_index(std::span<const uint8_t> in) {
  ByteReader r(in);
  DeltaIndex d;
  Bytes h = r.bytes(32);
  std::copy(h.begin(), h.end(), d.base_hash.begin());
  uint32_t n = r.u32();
  d.pages.reserve(n);
  for (uint32_t i = 0; i < n; i++) {
    uint32_t p = r.u32();
    if (!d.pages.empty() && p <= d.pages.back())
      raise(ErrorCode::DecodeError, "delta pages not ascending");
    d.pages.push_back(p);
  }
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in delta index");
  return d;
}

}  // namespace gckpt
