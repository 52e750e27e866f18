#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "gckpt/bytes.hpp"
#include "gckpt/error.hpp"
#include "gckpt/guest.hpp"

namespace gckpt {

using VmHandle = uint64_t;
using BufferHandle = uint64_t;
using RegionHandle = uint64_t;

// VCPU, IRQCHIP, TSS_ADDR, SLOTS and REGIONS round-trip through get/set. PIT
// is set-only: the driver never exposes it back, so anything that wants to
// reproduce a PIT configuration later has to have watched it being set.
enum class StateKind : uint16_t {
  Vcpu = 1,
  Irqchip = 2,
  TssAddr = 3,
  Slots = 4,
  Regions = 5,
  Pit = 6,
};

struct VcpuState {
  uint64_t regs[16] = {};
  uint64_t pc = 0;
  uint64_t irqs_acknowledged = 0;

  bool operator==(const VcpuState&) const = default;
};

struct IrqchipState {
  uint32_t pending = 0;
  uint32_t mask = 0;

  bool operator==(const IrqchipState&) const = default;
};

struct PitState {
  uint64_t period = 0;
  uint32_t irq_line = 0;
  bool enabled = false;

  bool operator==(const PitState&) const = default;
};

struct MemorySlot {
  uint32_t slot_id = 0;
  uint64_t guest_base = 0;
  uint64_t len = 0;
  BufferHandle buffer = 0;

  bool operator==(const MemorySlot&) const = default;
};

struct RegionInfo {
  RegionHandle handle = 0;
  uint64_t key = 0;
  uint64_t len = 0;
  BufferHandle buffer = 0;
  Bytes content;  // filled by get_state, consumed by set_state

  bool operator==(const RegionInfo&) const = default;
};

// Full driver-side state of one shell; diagnostic mirror for tests and the
// images listing, not part of the call API.
struct DriverState {
  VcpuState vcpu;
  IrqchipState irqchip;
  PitState pit;
  uint64_t tss_addr = 0;
  std::vector<MemorySlot> slots;
  std::vector<RegionInfo> regions;
};

namespace detail {
inline std::atomic<uint64_t>& buffer_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}
inline std::atomic<uint64_t>& region_counter() {
  static std::atomic<uint64_t> c{0};
  return c;
}
}  // namespace detail

// Process-wide launcher-side registry of raw buffers that shells may map.
// Handles are never reused; invalidated entries are kept so a lookup can tell
// "died" apart from "never existed".
class BufferRegistry {
 public:
  struct Entry {
    uint8_t* data = nullptr;
    size_t len = 0;
    bool alive = false;
  };

  BufferHandle add(uint8_t* data, size_t len) {
    BufferHandle h = ++detail::buffer_counter();
    entries_[h] = Entry{data, len, true};
    return h;
  }

  void invalidate(BufferHandle h) {
    auto it = entries_.find(h);
    if (it != entries_.end()) {
      it->second.alive = false;
      it->second.data = nullptr;
    }
  }

  const Entry* find(BufferHandle h) const {
    auto it = entries_.find(h);
    return it == entries_.end() ? nullptr : &it->second;
  }

  // Live buffer or error; the distinction between StaleBuffer and
  // InvalidHandle is what a forgotten patch step gets diagnosed with.
  const Entry& require(BufferHandle h) const {
    const Entry* e = find(h);
    if (!e) raise(ErrorCode::InvalidHandle, "unknown buffer handle");
    if (!e->alive) raise(ErrorCode::StaleBuffer, "buffer handle refers to a dead buffer");
    return *e;
  }

 private:
  std::map<BufferHandle, Entry> entries_;
};

inline BufferRegistry& buffer_registry() {
  static BufferRegistry r;
  return r;
}

inline Bytes encode_vcpu(const VcpuState& v) {
  Bytes out;
  out.reserve(144);
  for (uint64_t r : v.regs) put_u64(out, r);
  put_u64(out, v.pc);
  put_u64(out, v.irqs_acknowledged);
  return out;
}

inline VcpuState decode_vcpu(std::span<const uint8_t> in) {
  if (in.size() != 144) raise(ErrorCode::DecodeError, "vcpu payload must be 144 bytes");
  ByteReader r(in);
  VcpuState v;
  for (auto& reg : v.regs) reg = r.u64();
  v.pc = r.u64();
  v.irqs_acknowledged = r.u64();
  return v;
}

inline Bytes encode_irqchip(const IrqchipState& s) {
  Bytes out;
  put_u32(out, s.pending);
  put_u32(out, s.mask);
  return out;
}

inline IrqchipState decode_irqchip(std::span<const uint8_t> in) {
  if (in.size() != 8) raise(ErrorCode::DecodeError, "irqchip payload must be 8 bytes");
  ByteReader r(in);
  IrqchipState s;
  s.pending = r.u32();
  s.mask = r.u32();
  return s;
}

inline Bytes encode_tss(uint64_t addr) {
  Bytes out;
  put_u64(out, addr);
  return out;
}

inline uint64_t decode_tss(std::span<const uint8_t> in) {
  if (in.size() != 8) raise(ErrorCode::DecodeError, "tss payload must be 8 bytes");
  return ByteReader(in).u64();
}

inline Bytes encode_pit(const PitState& p) {
  Bytes out;
  put_u64(out, p.period);
  put_u32(out, p.irq_line);
  put_u8(out, p.enabled ? 1 : 0);
  return out;
}

inline PitState decode_pit(std::span<const uint8_t> in) {
  if (in.size() != 13) raise(ErrorCode::DecodeError, "pit payload must be 13 bytes");
  ByteReader r(in);
  PitState p;
  p.period = r.u64();
  p.irq_line = r.u32();
  uint8_t en = r.u8();
  if (en > 1) raise(ErrorCode::DecodeError, "pit enabled flag must be 0 or 1");
  p.enabled = en == 1;
  return p;
}

inline Bytes encode_slots(const std::vector<MemorySlot>& slots) {
  Bytes out;
  put_u32(out, static_cast<uint32_t>(slots.size()));
  for (const auto& s : slots) {
    put_u32(out, s.slot_id);
    put_u64(out, s.guest_base);
    put_u64(out, s.len);
    put_u64(out, s.buffer);
  }
  return out;
}

inline std::vector<MemorySlot> decode_slots(std::span<const uint8_t> in) {
  ByteReader r(in);
  uint32_t n = r.u32();
  std::vector<MemorySlot> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; i++) {
    MemorySlot s;
    s.slot_id = r.u32();
    s.guest_base = r.u64();
    s.len = r.u64();
    s.buffer = r.u64();
    out.push_back(s);
  }
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in slots payload");
  return out;
}

inline Bytes encode_regions(const std::vector<RegionInfo>& regions) {
  Bytes out;
  put_u32(out, static_cast<uint32_t>(regions.size()));
  for (const auto& g : regions) {
    put_u64(out, g.handle);
    put_u64(out, g.key);
    put_u64(out, g.len);
    put_u64(out, g.buffer);
    put_bytes(out, g.content.data(), g.content.size());
  }
  return out;
}

inline std::vector<RegionInfo> decode_regions(std::span<const uint8_t> in) {
  ByteReader r(in);
  uint32_t n = r.u32();
  std::vector<RegionInfo> out;
  out.reserve(n);
  for (uint32_t i = 0; i < n; i++) {
    RegionInfo g;
    g.handle = r.u64();
    g.key = r.u64();
    g.len = r.u64();
    g.buffer = r.u64();
    if (g.len > r.remaining())
      raise(ErrorCode::DecodeError, "region content truncated");
    g.content = r.bytes(g.len);
    out.push_back(std::move(g));
  }
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in regions payload");
  return out;
}

// kind u16, length u32, payload. Used wherever a state blob is embedded in a
// larger stream (plugin stores, call logs).
inline Bytes frame_blob(StateKind kind, std::span<const uint8_t> payload) {
  Bytes out;
  put_u16(out, static_cast<uint16_t>(kind));
  put_u32(out, static_cast<uint32_t>(payload.size()));
  put_bytes(out, payload.data(), payload.size());
  return out;
}

inline std::pair<StateKind, Bytes> parse_blob(std::span<const uint8_t> in) {
  ByteReader r(in);
  uint16_t kind = r.u16();
  uint32_t len = r.u32();
  Bytes payload = r.bytes(len);
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in state blob");
  return {static_cast<StateKind>(kind), std::move(payload)};
}

struct MessagePort;

// Driver side of the world: shells, their register/interrupt/timer state,
// memory slot tables and shared regions. Everything in here is invisible to a
// byte-copy of the launcher, which is the whole point.
class Driver {
 public:
  Driver() = default;
  Driver(const Driver&) = delete;
  Driver& operator=(const Driver&) = delete;

  ~Driver() {
    for (auto& [h, vm] : vms_) release_regions(*vm);
  }

  VmHandle create_vm_shell() {
    VmHandle h = next_vm_++;
    vms_[h] = std::make_unique<Vm>();
    return h;
  }

  void destroy_vm(VmHandle h) {
    auto it = vms_.find(h);
    if (it == vms_.end()) raise(ErrorCode::InvalidHandle, "unknown vm handle");
    release_regions(*it->second);
    vms_.erase(it);
  }

  bool has_vm(VmHandle h) const { return vms_.count(h) != 0; }

  void set_memory_slot(VmHandle h, const MemorySlot& slot) {
    Vm& vm = require_vm(h);
    if (slot.len == 0) {
      vm.slots.erase(slot.slot_id);
      return;
    }
    validate_slot(vm, slot, slot.slot_id);
    vm.slots[slot.slot_id] = slot;
  }

  RegionHandle map_shared_region(VmHandle h, uint64_t key, uint64_t len) {
    Vm& vm = require_vm(h);
    if (len == 0 || len % kPageSize != 0)
      raise(ErrorCode::BadLength, "region length must be a positive page multiple");
    for (const auto& [rh, reg] : vm.regions)
      if (reg->key == key) raise(ErrorCode::KeyInUse, "region key already mapped");
    auto region = std::make_unique<Region>();
    region->key = key;
    region->content.assign(len, 0);
    region->buffer = buffer_registry().add(region->content.data(), len);
    RegionHandle rh = ++detail::region_counter();
    region->handle = rh;
    vm.regions[rh] = std::move(region);
    return rh;
  }

  Bytes get_state(VmHandle h, StateKind kind) const {
    const Vm& vm = require_vm(h);
    switch (kind) {
      case StateKind::Vcpu:
        return encode_vcpu(vm.vcpu);
      case StateKind::Irqchip:
        return encode_irqchip(vm.irqchip);
      case StateKind::TssAddr:
        return encode_tss(vm.tss_addr);
      case StateKind::Slots:
        return encode_slots(slot_list(vm));
      case StateKind::Regions: {
        std::vector<RegionInfo> out;
        for (const auto& [rh, reg] : vm.regions)
          out.push_back(RegionInfo{reg->handle, reg->key,
                                   static_cast<uint64_t>(reg->content.size()),
                                   reg->buffer, reg->content});
        return encode_regions(out);
      }
      case StateKind::Pit:
        raise(ErrorCode::NoGetter, "pit state is set-only");
    }
    raise(ErrorCode::DecodeError, "unknown state kind");
  }

  void set_state(VmHandle h, StateKind kind, std::span<const uint8_t> payload) {
    Vm& vm = require_vm(h);
    switch (kind) {
      case StateKind::Vcpu:
        vm.vcpu = decode_vcpu(payload);
        return;
      case StateKind::Irqchip:
        vm.irqchip = decode_irqchip(payload);
        return;
      case StateKind::TssAddr:
        vm.tss_addr = decode_tss(payload);
        return;
      case StateKind::Pit: {
        PitState p = decode_pit(payload);
        if (p.enabled && p.period == 0)
          raise(ErrorCode::BadLength, "pit period must be positive when enabled");
        if (p.irq_line > 31) raise(ErrorCode::OutOfRange, "pit irq line must be 0..31");
        vm.pit = p;
        return;
      }
      case StateKind::Slots: {
        auto slots = decode_slots(payload);
        // Validate the whole table against an empty one, then swap: a partial
        // apply after a mid-table failure would leave the shell inconsistent.
        std::map<uint32_t, MemorySlot> table;
        Vm scratch;
        for (const auto& s : slots) {
          if (s.len == 0) raise(ErrorCode::BadLength, "slot length must be positive");
          if (table.count(s.slot_id))
            raise(ErrorCode::Overlap, "duplicate slot id in table");
          validate_slot(scratch, s, s.slot_id);
          scratch.slots[s.slot_id] = s;
          table[s.slot_id] = s;
        }
        vm.slots = std::move(table);
        return;
      }
      case StateKind::Regions: {
        auto regions = decode_regions(payload);
        // Handles must refer to regions of this shell; content is copied in
        // place so existing slot mappings of the region stay valid.
        for (const auto& g : regions) {
          auto it = vm.regions.find(g.handle);
          if (it == vm.regions.end()) {
            if (g.handle != 0 && g.handle <= detail::region_counter().load())
              raise(ErrorCode::StaleBuffer, "region handle from a dead shell");
            raise(ErrorCode::InvalidHandle, "unknown region handle");
          }
          if (it->second->key != g.key)
            raise(ErrorCode::DecodeError, "region key mismatch");
          if (it->second->content.size() != g.len)
            raise(ErrorCode::BadLength, "region length mismatch");
        }
        for (const auto& g : regions)
          std::copy(g.content.begin(), g.content.end(),
                    vm.regions[g.handle]->content.begin());
        return;
      }
    }
    raise(ErrorCode::DecodeError, "unknown state kind");
  }

  StepOutcome run(VmHandle h, GuestMachine& machine, uint64_t budget,
                  MessagePort* port = nullptr);

  // Diagnostic full-state mirror. Deliberately not part of the call API: the
  // checkpoint path must reconstruct state through get_state and wrappers.
  DriverState diagnostic_state(VmHandle h) const {
    const Vm& vm = require_vm(h);
    DriverState s;
    s.vcpu = vm.vcpu;
    s.irqchip = vm.irqchip;
    s.pit = vm.pit;
    s.tss_addr = vm.tss_addr;
    s.slots = slot_list(vm);
    for (const auto& [rh, reg] : vm.regions)
      s.regions.push_back(RegionInfo{reg->handle, reg->key,
                                     static_cast<uint64_t>(reg->content.size()),
                                     reg->buffer, reg->content});
    return s;
  }

 private:
  friend struct ExecAccess;

  struct Region {
    RegionHandle handle = 0;
    uint64_t key = 0;
    BufferHandle buffer = 0;
    Bytes content;
  };

  struct Vm {
    VcpuState vcpu;
    IrqchipState irqchip;
    PitState pit;
    uint64_t tss_addr = 0;
    std::map<uint32_t, MemorySlot> slots;
    std::map<RegionHandle, std::unique_ptr<Region>> regions;
  };

  Vm& require_vm(VmHandle h) {
    auto it = vms_.find(h);
    if (it == vms_.end()) raise(ErrorCode::InvalidHandle, "unknown vm handle");
    return *it->second;
  }

  const Vm& require_vm(VmHandle h) const {
    auto it = vms_.find(h);
    if (it == vms_.end()) raise(ErrorCode::InvalidHandle, "unknown vm handle");
    return *it->second;
  }

  static std::vector<MemorySlot> slot_list(const Vm& vm) {
    std::vector<MemorySlot> out;
    out.reserve(vm.slots.size());
    for (const auto& [id, s] : vm.slots) out.push_back(s);
    return out;
  }

  void validate_slot(const Vm& vm, const MemorySlot& slot, uint32_t self_id) const {
    if (slot.guest_base % kPageSize != 0 || slot.len % kPageSize != 0)
      raise(ErrorCode::BadLength, "slot base and length must be page aligned");
    const auto& buf = buffer_registry().require(slot.buffer);
    if (buf.len != slot.len)
      raise(ErrorCode::BadLength, "slot length must equal buffer length");
    uint64_t lo = slot.guest_base;
    uint64_t hi = slot.guest_base + slot.len;
    if (hi < lo) raise(ErrorCode::BadLength, "slot range wraps");
    for (const auto& [id, other] : vm.slots) {
      if (id == self_id) continue;
      if (lo < other.guest_base + other.len && other.guest_base < hi)
        raise(ErrorCode::Overlap, "slot overlaps an existing slot");
    }
  }

  void release_regions(Vm& vm) {
    for (auto& [rh, reg] : vm.regions) buffer_registry().invalidate(reg->buffer);
    vm.regions.clear();
  }

  std::map<VmHandle, std::unique_ptr<Vm>> vms_;
  VmHandle next_vm_ = 1;
};

}  // namespace gckpt

#include "gckpt/exec.hpp"
