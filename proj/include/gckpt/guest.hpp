#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gckpt/bytes.hpp"
#include "gckpt/error.hpp"

namespace gckpt {

inline constexpr uint64_t kPageSize = 4096;
inline constexpr uint64_t kSectorSize = 512;
inline constexpr uint64_t kInstrSize = 8;

// Instruction encoding, fixed 8 bytes little-endian:
//   [0] opcode  [1] a  [2] b  [3] c  [4..8) imm (u32)
//
//   LOADI      r[a] = sign_extend(imm)
//   MOV        r[a] = r[b]
//   ADD/SUB/MUL r[a] = r[b] op r[c], wrapping u64
//   LOAD       r[a] = zero-extended c-byte read at r[b] + sign_extend(imm)
//   STORE      c-byte write of r[a] at r[b] + sign_extend(imm)
//   JMP        pc = imm
//   JNZ        pc = imm when r[a] != 0
//   HYPERCALL  sub-op in a, arguments in r0..r3, result in r0
//   HALT       stop
//
// Widths c in {1,2,4,8}; accesses must be width-aligned. Any violation is a
// fault, and faults halt the machine.
enum class Op : uint8_t {
  Loadi = 1,
  Mov = 2,
  Add = 3,
  Sub = 4,
  Mul = 5,
  Load = 6,
  Store = 7,
  Jmp = 8,
  Jnz = 9,
  Hypercall = 10,
  Halt = 11,
};

enum class Hc : uint8_t {
  ConsoleWrite = 1,  // r0 low byte appended to console log
  DiskRead = 2,      // sector r0 -> guest address r1
  DiskWrite = 3,     // sector r0 <- guest address r1
  GetVtime = 4,      // r0 = instructions completed before this one
  Yield = 5,         // scheduling hint, no architectural effect
  Send = 6,          // peer r0, guest address r1, length r2
  Recv = 7,          // peer r0, guest address r1, capacity r2; r0 = length or ~0
};

enum class StepReason : uint8_t {
  BudgetExhausted,
  Halted,
  QuiesceRequested,
  Faulted,
};

struct StepOutcome {
  uint64_t steps_executed = 0;
  StepReason reason = StepReason::BudgetExhausted;

  bool operator==(const StepOutcome&) const = default;
};

struct FaultInfo {
  enum class Cause : uint8_t {
    None,
    BadOpcode,
    BadRegister,
    Unaligned,
    OutOfRange,
    BadHypercall,
  };
  Cause cause = Cause::None;
  uint64_t pc = 0;
  uint64_t addr = 0;
};

struct GuestProgram {
  Bytes code;
  uint64_t entry = 0;
};

// Anonymous or file-backed private mapping holding guest memory. File-backed
// mappings are what make restart lazy: pages fault in from the image on first
// touch and copy-on-write keeps the image file pristine.
class GuestMemory {
 public:
  GuestMemory() = default;

  static GuestMemory anonymous(size_t size) {
    void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE,
                     MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (p == MAP_FAILED) raise(ErrorCode::IoFailure, "mmap failed");
    return GuestMemory(static_cast<uint8_t*>(p), size);
  }

  // offset must be page-aligned in the file.
  static GuestMemory from_file(int fd, off_t offset, size_t size) {
    void* p = ::mmap(nullptr, size, PROT_READ | PROT_WRITE,
                     MAP_PRIVATE | MAP_NORESERVE, fd, offset);
    if (p == MAP_FAILED) raise(ErrorCode::IoFailure, "mmap of image failed");
    return GuestMemory(static_cast<uint8_t*>(p), size);
  }

  GuestMemory(GuestMemory&& o) noexcept { *this = std::move(o); }
  GuestMemory& operator=(GuestMemory&& o) noexcept {
    reset();
    base_ = std::exchange(o.base_, nullptr);
    size_ = std::exchange(o.size_, 0);
    return *this;
  }
  GuestMemory(const GuestMemory&) = delete;
  GuestMemory& operator=(const GuestMemory&) = delete;
  ~GuestMemory() { reset(); }

  uint8_t* data() { return base_; }
  const uint8_t* data() const { return base_; }
  size_t size() const { return size_; }

  // Pages of this mapping actually backed by private frames, counted from
  // /proc/self/smaps. mincore is useless here: it reports page-cache residency
  // for file pages, which a freshly written image always satisfies.
  size_t resident_pages() const {
    if (!base_ || size_ == 0) return 0;
    uintptr_t lo = reinterpret_cast<uintptr_t>(base_);
    uintptr_t hi = lo + size_;
    std::ifstream f("/proc/self/smaps");
    std::string line;
    uintptr_t cur_lo = 0, cur_hi = 0;
    size_t rss_kb = 0;
    while (std::getline(f, line)) {
      if (!line.empty() && std::isxdigit(static_cast<unsigned char>(line[0])) &&
          line.find('-') != std::string::npos &&
          line.find(' ') > line.find('-')) {
        cur_lo = std::stoull(line, nullptr, 16);
        cur_hi = std::stoull(line.substr(line.find('-') + 1), nullptr, 16);
      } else if (line.rfind("Rss:", 0) == 0 && cur_hi > lo && cur_lo < hi) {
        std::istringstream ss(line.substr(4));
        size_t kb = 0;
        ss >> kb;
        rss_kb += kb;
      }
    }
    return rss_kb * 1024 / kPageSize;
  }

 private:
  GuestMemory(uint8_t* base, size_t size) : base_(base), size_(size) {}

  void reset() {
    if (base_) ::munmap(base_, size_);
    base_ = nullptr;
    size_ = 0;
  }

  uint8_t* base_ = nullptr;
  size_t size_ = 0;
};

// Flat-file block device, 512-byte sectors. The file length must be a sector
// multiple; out-of-range sector numbers fault the guest rather than trap.
class DiskDevice {
 public:
  DiskDevice() = default;

  static DiskDevice open(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDWR | O_CLOEXEC);
    if (fd < 0) {
      if (errno == ENOENT) raise(ErrorCode::BadConfig, "disk file missing: " + path);
      raise(ErrorCode::IoFailure, "cannot open disk: " + path);
    }
    struct stat st{};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      raise(ErrorCode::IoFailure, "cannot stat disk: " + path);
    }
    if (st.st_size % kSectorSize != 0) {
      ::close(fd);
      raise(ErrorCode::BadConfig, "disk length not a sector multiple: " + path);
    }
    DiskDevice d;
    d.fd_ = fd;
    d.sectors_ = static_cast<uint64_t>(st.st_size) / kSectorSize;
    d.path_ = path;
    return d;
  }

  DiskDevice(DiskDevice&& o) noexcept { *this = std::move(o); }
  DiskDevice& operator=(DiskDevice&& o) noexcept {
    reset();
    fd_ = std::exchange(o.fd_, -1);
    sectors_ = std::exchange(o.sectors_, 0);
    path_ = std::move(o.path_);
    return *this;
  }
  DiskDevice(const DiskDevice&) = delete;
  DiskDevice& operator=(const DiskDevice&) = delete;
  ~DiskDevice() { reset(); }

  bool attached() const { return fd_ >= 0; }
  uint64_t sector_count() const { return sectors_; }
  const std::string& path() const { return path_; }

  void read_sector(uint64_t sector, uint8_t* out) const {
    if (pread_full(out, kSectorSize, static_cast<off_t>(sector * kSectorSize)) !=
        static_cast<ssize_t>(kSectorSize))
      raise(ErrorCode::IoFailure, "disk read failed");
  }

  void write_sector(uint64_t sector, const uint8_t* in) {
    ssize_t n = ::pwrite(fd_, in, kSectorSize, static_cast<off_t>(sector * kSectorSize));
    if (n != static_cast<ssize_t>(kSectorSize))
      raise(ErrorCode::IoFailure, "disk write failed");
  }

  Bytes read_all() const {
    Bytes out(sectors_ * kSectorSize);
    if (!out.empty() &&
        pread_full(out.data(), out.size(), 0) != static_cast<ssize_t>(out.size()))
      raise(ErrorCode::IoFailure, "disk read failed");
    return out;
  }

 private:
  ssize_t pread_full(uint8_t* buf, size_t n, off_t off) const {
    size_t got = 0;
    while (got < n) {
      ssize_t r = ::pread(fd_, buf + got, n - got, off + static_cast<off_t>(got));
      if (r <= 0) return r;
      got += static_cast<size_t>(r);
    }
    return static_cast<ssize_t>(got);
  }

  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
    sectors_ = 0;
  }

  int fd_ = -1;
  uint64_t sectors_ = 0;
  std::string path_;
};

// Test seam: invoked at every instruction boundary with the completed
// instruction count, before the quiesce flag is checked.
using BoundaryHook = void (*)(void* ctx, uint64_t instr_count);

// The machine is the half of the world an engine can save by plain
// introspection: memory, console log, disk, instruction count, dirty map.
// Register and interrupt state deliberately does not live here.
class GuestMachine {
 public:
  GuestMachine(GuestMemory memory, uint64_t entry)
      : memory_(std::move(memory)),
        entry_(entry),
        dirty_((memory_.size() / kPageSize + 63) / 64, 0) {}

  GuestMachine(const GuestMachine&) = delete;
  GuestMachine& operator=(const GuestMachine&) = delete;

  GuestMemory& memory() { return memory_; }
  const GuestMemory& memory() const { return memory_; }
  uint64_t mem_size() const { return memory_.size(); }
  uint64_t entry() const { return entry_; }

  bool halted() const { return halted_; }
  void set_halted(bool h) { halted_ = h; }

  const FaultInfo& fault() const { return fault_; }
  void set_fault(FaultInfo f) { fault_ = f; }

  uint64_t instr_count() const { return instr_count_.load(std::memory_order_relaxed); }
  void store_instr_count(uint64_t v) { instr_count_.store(v, std::memory_order_relaxed); }

  const Bytes& console() const { return console_; }
  void console_push(uint8_t b) { console_.push_back(b); }
  void set_console(Bytes c) { console_ = std::move(c); }

  void attach_disk(DiskDevice d) { disk_ = std::move(d); }
  DiskDevice& disk() { return disk_; }
  const DiskDevice& disk() const { return disk_; }

  void request_quiesce() { quiesce_.store(true, std::memory_order_release); }
  bool consume_quiesce() {
    bool expect = true;
    return quiesce_.compare_exchange_strong(expect, false, std::memory_order_acq_rel);
  }
  void clear_quiesce() { quiesce_.store(false, std::memory_order_release); }
  bool quiesce_pending() const { return quiesce_.load(std::memory_order_acquire); }

  void set_boundary_hook(BoundaryHook hook, void* ctx) {
    hook_ = hook;
    hook_ctx_ = ctx;
  }
  BoundaryHook boundary_hook() const { return hook_; }
  void* boundary_hook_ctx() const { return hook_ctx_; }

  void mark_dirty(uint64_t offset, uint64_t len) {
    if (len == 0) return;
    uint64_t first = offset / kPageSize;
    uint64_t last = (offset + len - 1) / kPageSize;
    for (uint64_t p = first; p <= last; p++) dirty_[p >> 6] |= 1ull << (p & 63);
  }

  bool page_dirty(uint64_t page) const {
    return (dirty_[page >> 6] >> (page & 63)) & 1;
  }

  std::vector<uint32_t> dirty_pages() const {
    std::vector<uint32_t> out;
    uint64_t npages = mem_size() / kPageSize;
    for (uint64_t p = 0; p < npages; p++)
      if (page_dirty(p)) out.push_back(static_cast<uint32_t>(p));
    return out;
  }

  void clear_dirty() { std::fill(dirty_.begin(), dirty_.end(), 0); }

  void mark_all_dirty() {
    std::fill(dirty_.begin(), dirty_.end(), ~0ull);
  }

 private:
  GuestMemory memory_;
  uint64_t entry_ = 0;
  std::vector<uint64_t> dirty_;
  std::atomic<uint64_t> instr_count_{0};
  Bytes console_;
  DiskDevice disk_;
  bool halted_ = false;
  FaultInfo fault_{};
  std::atomic<bool> quiesce_{false};
  BoundaryHook hook_ = nullptr;
  void* hook_ctx_ = nullptr;
};

inline std::unique_ptr<GuestMachine> load_program(const GuestProgram& program,
                                                  uint64_t mem_size) {
  if (program.code.size() % kInstrSize != 0)
    raise(ErrorCode::BadProgram, "code length not an instruction multiple");
  if (mem_size == 0 || mem_size % kPageSize != 0)
    raise(ErrorCode::BadProgram, "memory size not a page multiple");
  if (program.entry % kInstrSize != 0)
    raise(ErrorCode::BadProgram, "entry point misaligned");
  if (program.code.size() > mem_size)
    raise(ErrorCode::OutOfRange, "program larger than guest memory");
  if (program.entry >= mem_size && !(program.entry == 0 && program.code.empty()))
    raise(ErrorCode::OutOfRange, "entry point outside guest memory");

  GuestMemory mem = GuestMemory::anonymous(mem_size);
  std::memcpy(mem.data(), program.code.data(), program.code.size());
  auto m = std::make_unique<GuestMachine>(std::move(mem), program.entry);
  m->mark_dirty(0, program.code.size());
  return m;
}

}  // namespace gckpt
