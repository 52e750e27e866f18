#pragma once

#include <fcntl.h>
#include <sys/ioctl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <filesystem>
#include <string>

#include "gckpt/bytes.hpp"
#include "gckpt/digest.hpp"
#include "gckpt/error.hpp"

#ifndef FICLONE
#define FICLONE _IOW(0x94, 9, int)
#endif

namespace gckpt {

// Disk snapshots are stored content-addressed next to the checkpoint image:
// the file name is the digest, so identical disks share one snapshot and a
// snapshot can never silently drift from its reference.

constexpr size_t kSnapBlock = 64 * 1024;

struct SnapshotRef {
  std::string path;    // snapshot file name, relative to the image directory
  std::string origin;  // path the disk was snapshotted from
  enum class Method : uint8_t { Reflink = 1, FullCopy = 2 };
  Method method = Method::FullCopy;
  Digest digest{};
  uint64_t length = 0;
};

inline Bytes encode_snapshot_ref(const SnapshotRef& r) {
  Bytes out;
  put_u16(out, static_cast<uint16_t>(r.path.size()));
  put_bytes(out, r.path.data(), r.path.size());
  put_u16(out, static_cast<uint16_t>(r.origin.size()));
  put_bytes(out, r.origin.data(), r.origin.size());
  put_u8(out, static_cast<uint8_t>(r.method));
  put_bytes(out, r.digest.data(), r.digest.size());
  put_u64(out, r.length);
  return out;
}

inline SnapshotRef decode_snapshot_ref(std::span<const uint8_t> in) {
  ByteReader r(in);
  SnapshotRef ref;
  ref.path = r.str(r.u16());
  ref.origin = r.str(r.u16());
  uint8_t m = r.u8();
  if (m < 1 || m > 2) raise(ErrorCode::DecodeError, "bad snapshot method");
  ref.method = static_cast<SnapshotRef::Method>(m);
  Bytes d = r.bytes(32);
  std::copy(d.begin(), d.end(), ref.digest.begin());
  ref.length = r.u64();
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in snapshot ref");
  return ref;
}

namespace detail {

inline const Digest& zero_block_leaf() {
  static const Digest d = [] {
    Bytes zeros(kSnapBlock, 0);
    return sha256(zeros);
  }();
  return d;
}

struct Fd {
  int fd = -1;
  explicit Fd(int f) : fd(f) {}
  ~Fd() {
    if (fd >= 0) ::close(fd);
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
};

}  // namespace detail

// Root hash over 64 KiB block leaves. Holes hash as zeros without being
// read, so a sparse disk digests at the speed of its data extents.
inline Digest file_digest(const std::string& path) {
  detail::Fd f(::open(path.c_str(), O_RDONLY));
  if (f.fd < 0) raise(ErrorCode::IoFailure, "cannot open " + path);
  struct stat st{};
  if (::fstat(f.fd, &st) != 0) raise(ErrorCode::IoFailure, "cannot stat " + path);
  uint64_t size = static_cast<uint64_t>(st.st_size);

  Sha256 root;
  Bytes buf(kSnapBlock);
  uint64_t next_data = 0;
  bool seek_data_works = true;
  bool exhausted = false;

  for (uint64_t base = 0; base < size; base += kSnapBlock) {
    size_t len = static_cast<size_t>(std::min<uint64_t>(kSnapBlock, size - base));

    if (seek_data_works && !exhausted && next_data < base) {
      off_t r = ::lseek(f.fd, static_cast<off_t>(base), SEEK_DATA);
      if (r < 0) {
        if (errno == ENXIO)
          exhausted = true;  // nothing but hole to EOF
        else
          seek_data_works = false;
      } else {
        next_data = static_cast<uint64_t>(r);
      }
    }

    bool is_hole =
        seek_data_works && (exhausted || next_data >= base + len);
    if (is_hole && len == kSnapBlock) {
      const Digest& leaf = detail::zero_block_leaf();
      root.update(leaf.data(), leaf.size());
      continue;
    }
    if (is_hole) {
      Bytes zeros(len, 0);
      Digest leaf = sha256(zeros);
      root.update(leaf.data(), leaf.size());
      continue;
    }

    size_t off = 0;
    while (off < len) {
      ssize_t n = ::pread(f.fd, buf.data() + off, len - off,
                          static_cast<off_t>(base + off));
      if (n < 0) raise(ErrorCode::IoFailure, "read failed on " + path);
      if (n == 0) {
        std::memset(buf.data() + off, 0, len - off);
        break;
      }
      off += static_cast<size_t>(n);
    }
    Sha256 leaf;
    leaf.update(buf.data(), len);
    Digest d = leaf.finish();
    root.update(d.data(), d.size());
  }
  return root.finish();
}

namespace detail {

inline bool try_reflink(int dst_fd, int src_fd) {
  return ::ioctl(dst_fd, FICLONE, src_fd) == 0;
}

// Clone if the filesystem can, plain copy otherwise. A plain copy writes
// holes out as zeros; the digest is over logical content, so that is fine.
inline SnapshotRef::Method copy_into(const std::string& src,
                                     const std::string& dst_tmp,
                                     bool allow_reflink = true) {
  Fd in(::open(src.c_str(), O_RDONLY));
  if (in.fd < 0) raise(ErrorCode::IoFailure, "cannot open " + src);
  Fd out(::open(dst_tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644));
  if (out.fd < 0) raise(ErrorCode::IoFailure, "cannot create " + dst_tmp);

  if (allow_reflink && try_reflink(out.fd, in.fd))
    return SnapshotRef::Method::Reflink;

  Bytes buf(1 << 20);
  for (;;) {
    ssize_t n = ::read(in.fd, buf.data(), buf.size());
    if (n < 0) raise(ErrorCode::IoFailure, "read failed on " + src);
    if (n == 0) break;
    ssize_t off = 0;
    while (off < n) {
      ssize_t w = ::write(out.fd, buf.data() + off, static_cast<size_t>(n - off));
      if (w <= 0) raise(ErrorCode::IoFailure, "write failed on " + dst_tmp);
      off += w;
    }
  }
  return SnapshotRef::Method::FullCopy;
}

inline bool same_file(const std::string& a, const std::string& b) {
  struct stat sa{}, sb{};
  if (::stat(a.c_str(), &sa) != 0 || ::stat(b.c_str(), &sb) != 0) return false;
  return sa.st_dev == sb.st_dev && sa.st_ino == sb.st_ino;
}

}  // namespace detail

// Probe used to report whether snapshots on this filesystem can be clones.
inline bool reflink_supported(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string a = (fs::path(dir) / (".reflink-probe-a." + std::to_string(::getpid()))).string();
  std::string b = (fs::path(dir) / (".reflink-probe-b." + std::to_string(::getpid()))).string();
  bool ok = false;
  {
    detail::Fd fa(::open(a.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644));
    if (fa.fd < 0) return false;
    if (::write(fa.fd, "x", 1) != 1) {
      ::unlink(a.c_str());
      return false;
    }
    detail::Fd fb(::open(b.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644));
    if (fb.fd >= 0) ok = detail::try_reflink(fb.fd, fa.fd);
  }
  ::unlink(a.c_str());
  ::unlink(b.c_str());
  return ok;
}

namespace detail {
inline SnapshotRef snapshot_file_impl(const std::string& disk_path,
                                      const std::string& out_dir,
                                      bool allow_reflink) {
  namespace fs = std::filesystem;
  SnapshotRef ref;
  ref.origin = disk_path;
  ref.digest = file_digest(disk_path);

  struct stat st{};
  if (::stat(disk_path.c_str(), &st) != 0)
    raise(ErrorCode::IoFailure, "cannot stat " + disk_path);
  ref.length = static_cast<uint64_t>(st.st_size);
  ref.path = digest_hex(ref.digest) + ".disk";

  fs::path target = fs::path(out_dir) / ref.path;
  if (fs::exists(target)) {
    // Content-addressed: an existing file with this name is this content.
    ref.method = SnapshotRef::Method::FullCopy;
    return ref;
  }
  std::string tmp = target.string() + ".tmp." + std::to_string(::getpid());
  ref.method = detail::copy_into(disk_path, tmp, allow_reflink);
  if (::rename(tmp.c_str(), target.string().c_str()) != 0) {
    ::unlink(tmp.c_str());
    raise(ErrorCode::IoFailure, "cannot rename into " + target.string());
  }
  return ref;
}
}  // namespace detail

inline SnapshotRef snapshot_file(const std::string& disk_path,
                                 const std::string& out_dir) {
  return detail::snapshot_file_impl(disk_path, out_dir, true);
}

// Byte-copy even where the filesystem could clone. Exists so the clone
// path and the copy path can be compared on the same disk.
inline SnapshotRef snapshot_file_dense(const std::string& disk_path,
                                       const std::string& out_dir) {
  return detail::snapshot_file_impl(disk_path, out_dir, false);
}

// Verifies the stored snapshot against its reference before any byte lands
// in the target, then copies. Restoring a snapshot onto itself is a no-op.
inline void restore_file(const SnapshotRef& ref, const std::string& snap_dir,
                         const std::string& target) {
  namespace fs = std::filesystem;
  std::string src = (fs::path(snap_dir) / ref.path).string();
  if (!fs::exists(src))
    raise(ErrorCode::IoFailure, "snapshot missing: " + src);
  if (file_digest(src) != ref.digest)
    raise(ErrorCode::HashMismatch, "snapshot content changed: " + src);
  if (detail::same_file(src, target)) return;

  std::string tmp = target + ".tmp." + std::to_string(::getpid());
  detail::copy_into(src, tmp);
  if (::rename(tmp.c_str(), target.c_str()) != 0) {
    ::unlink(tmp.c_str());
    raise(ErrorCode::IoFailure, "cannot rename into " + target);
  }
}

}  // namespace gckpt
