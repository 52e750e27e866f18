#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <span>

#include "gckpt/driver.hpp"
#include "gckpt/guest.hpp"

namespace gckpt {

// Hooks a shell into a message fabric. send reports whether the peer exists;
// recv is polling and returns nothing when the peer's queue is empty.
struct MessagePort {
  std::function<bool(uint32_t dst, std::span<const uint8_t> data)> send;
  std::function<std::optional<Bytes>(uint32_t src)> recv;
};

struct ExecAccess;

namespace detail {

struct ResolvedSlot {
  uint64_t base = 0;
  uint64_t end = 0;
  uint8_t* host = nullptr;
  bool track = false;  // writes land in machine memory and must set dirty bits
};

struct ResolveHit {
  uint8_t* p = nullptr;
  const ResolvedSlot* slot = nullptr;
};

}  // namespace detail

// The interpreter. One call executes up to budget instructions and reports
// why it stopped. All virtual time is instruction count; the timer and
// interrupt delivery are evaluated after every completed instruction, derived
// purely from that count so resuming from a restored count reproduces the
// exact same firing pattern.
inline StepOutcome Driver::run(VmHandle h, GuestMachine& machine, uint64_t budget,
                               MessagePort* port) {
  Vm& vm = require_vm(h);
  if (machine.halted()) return {0, StepReason::Halted};

  std::vector<detail::ResolvedSlot> rslots;
  rslots.reserve(vm.slots.size());
  for (const auto& [id, s] : vm.slots) {
    const auto& buf = buffer_registry().require(s.buffer);
    rslots.push_back({s.guest_base, s.guest_base + s.len, buf.data,
                      buf.data == machine.memory().data()});
  }

  size_t cached = 0;
  auto resolve = [&](uint64_t addr, uint64_t len) -> detail::ResolveHit {
    if (cached < rslots.size()) {
      const auto& c = rslots[cached];
      if (addr >= c.base && addr < c.end && len <= c.end - addr)
        return {c.host + (addr - c.base), &c};
    }
    for (size_t i = 0; i < rslots.size(); i++) {
      const auto& s = rslots[i];
      if (addr >= s.base && addr < s.end && len <= s.end - addr) {
        cached = i;
        return {s.host + (addr - s.base), &s};
      }
    }
    return {};
  };

  auto mark_write = [&](const detail::ResolveHit& hit, uint64_t addr, uint64_t len) {
    if (hit.slot->track) machine.mark_dirty(addr - hit.slot->base, len);
  };

  {
    auto at_entry = resolve(vm.vcpu.pc, kInstrSize);
    if (!at_entry.p)
      raise(ErrorCode::NoSlots, "no memory slot covers the program counter");
  }

  VcpuState& cpu = vm.vcpu;
  IrqchipState& irq = vm.irqchip;
  const PitState& pit = vm.pit;

  uint64_t count = machine.instr_count();
  uint64_t executed = 0;

  auto fault = [&](FaultInfo::Cause cause, uint64_t addr) {
    machine.set_fault({cause, cpu.pc, addr});
    machine.set_halted(true);
    return StepOutcome{executed, StepReason::Faulted};
  };

  while (executed < budget) {
    if (auto hook = machine.boundary_hook()) hook(machine.boundary_hook_ctx(), count);
    if (machine.quiesce_pending()) {
      machine.consume_quiesce();
      return {executed, StepReason::QuiesceRequested};
    }

    if (cpu.pc % kInstrSize != 0) return fault(FaultInfo::Cause::Unaligned, cpu.pc);
    auto fetch = resolve(cpu.pc, kInstrSize);
    if (!fetch.p) return fault(FaultInfo::Cause::OutOfRange, cpu.pc);

    const uint8_t opcode = fetch.p[0];
    const uint8_t a = fetch.p[1];
    const uint8_t b = fetch.p[2];
    const uint8_t c = fetch.p[3];
    uint32_t imm;
    std::memcpy(&imm, fetch.p + 4, 4);

    uint64_t next_pc = cpu.pc + kInstrSize;
    bool halt_now = false;

    switch (static_cast<Op>(opcode)) {
      case Op::Loadi:
        if (a >= 16) return fault(FaultInfo::Cause::BadRegister, a);
        cpu.regs[a] = static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(imm)));
        break;

      case Op::Mov:
        if (a >= 16 || b >= 16) return fault(FaultInfo::Cause::BadRegister, a >= 16 ? a : b);
        cpu.regs[a] = cpu.regs[b];
        break;

      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        if (a >= 16 || b >= 16 || c >= 16)
          return fault(FaultInfo::Cause::BadRegister, a >= 16 ? a : (b >= 16 ? b : c));
        uint64_t x = cpu.regs[b], y = cpu.regs[c];
        cpu.regs[a] = static_cast<Op>(opcode) == Op::Add   ? x + y
                      : static_cast<Op>(opcode) == Op::Sub ? x - y
                                                           : x * y;
        break;
      }

      case Op::Load: {
        if (a >= 16 || b >= 16) return fault(FaultInfo::Cause::BadRegister, a >= 16 ? a : b);
        if (c != 1 && c != 2 && c != 4 && c != 8)
          return fault(FaultInfo::Cause::BadOpcode, c);
        uint64_t addr = cpu.regs[b] + static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(imm)));
        if (addr % c != 0) return fault(FaultInfo::Cause::Unaligned, addr);
        auto hit = resolve(addr, c);
        if (!hit.p) return fault(FaultInfo::Cause::OutOfRange, addr);
        uint64_t v = 0;
        std::memcpy(&v, hit.p, c);
        cpu.regs[a] = v;
        break;
      }

      case Op::Store: {
        if (a >= 16 || b >= 16) return fault(FaultInfo::Cause::BadRegister, a >= 16 ? a : b);
        if (c != 1 && c != 2 && c != 4 && c != 8)
          return fault(FaultInfo::Cause::BadOpcode, c);
        uint64_t addr = cpu.regs[b] + static_cast<uint64_t>(static_cast<int64_t>(static_cast<int32_t>(imm)));
        if (addr % c != 0) return fault(FaultInfo::Cause::Unaligned, addr);
        auto hit = resolve(addr, c);
        if (!hit.p) return fault(FaultInfo::Cause::OutOfRange, addr);
        std::memcpy(hit.p, &cpu.regs[a], c);
        mark_write(hit, addr, c);
        break;
      }

      case Op::Jmp:
        next_pc = imm;
        break;

      case Op::Jnz:
        if (a >= 16) return fault(FaultInfo::Cause::BadRegister, a);
        if (cpu.regs[a] != 0) next_pc = imm;
        break;

      case Op::Hypercall:
        switch (static_cast<Hc>(a)) {
          case Hc::ConsoleWrite:
            machine.console_push(static_cast<uint8_t>(cpu.regs[0]));
            break;

          case Hc::DiskRead:
          case Hc::DiskWrite: {
            uint64_t sector = cpu.regs[0];
            uint64_t addr = cpu.regs[1];
            if (!machine.disk().attached() || sector >= machine.disk().sector_count())
              return fault(FaultInfo::Cause::OutOfRange, sector);
            auto hit = resolve(addr, kSectorSize);
            if (!hit.p) return fault(FaultInfo::Cause::OutOfRange, addr);
            if (static_cast<Hc>(a) == Hc::DiskRead) {
              machine.disk().read_sector(sector, hit.p);
              mark_write(hit, addr, kSectorSize);
            } else {
              machine.disk().write_sector(sector, hit.p);
            }
            break;
          }

          case Hc::GetVtime:
            // Instructions completed before this one.
            cpu.regs[0] = count;
            break;

          case Hc::Yield:
            break;

          case Hc::Send: {
            if (!port) return fault(FaultInfo::Cause::BadHypercall, a);
            uint64_t dst = cpu.regs[0];
            uint64_t addr = cpu.regs[1];
            uint64_t len = cpu.regs[2];
            if (dst > UINT32_MAX) return fault(FaultInfo::Cause::OutOfRange, dst);
            const uint8_t* p = nullptr;
            if (len > 0) {
              auto hit = resolve(addr, len);
              if (!hit.p) return fault(FaultInfo::Cause::OutOfRange, addr);
              p = hit.p;
            }
            if (!port->send(static_cast<uint32_t>(dst), std::span<const uint8_t>(p, len)))
              return fault(FaultInfo::Cause::OutOfRange, dst);
            break;
          }

          case Hc::Recv: {
            if (!port) return fault(FaultInfo::Cause::BadHypercall, a);
            uint64_t src = cpu.regs[0];
            uint64_t addr = cpu.regs[1];
            uint64_t cap = cpu.regs[2];
            if (src > UINT32_MAX) return fault(FaultInfo::Cause::OutOfRange, src);
            auto msg = port->recv(static_cast<uint32_t>(src));
            if (!msg) {
              cpu.regs[0] = ~0ull;
              break;
            }
            uint64_t n = std::min<uint64_t>(msg->size(), cap);
            if (n > 0) {
              auto hit = resolve(addr, n);
              if (!hit.p) return fault(FaultInfo::Cause::OutOfRange, addr);
              std::memcpy(hit.p, msg->data(), n);
              mark_write(hit, addr, n);
            }
            cpu.regs[0] = msg->size();
            break;
          }

          default:
            return fault(FaultInfo::Cause::BadHypercall, a);
        }
        break;

      case Op::Halt:
        halt_now = true;
        break;

      default:
        return fault(FaultInfo::Cause::BadOpcode, opcode);
    }

    cpu.pc = next_pc;
    count++;
    executed++;
    machine.store_instr_count(count);

    if (halt_now) {
      machine.set_halted(true);
      return {executed, StepReason::Halted};
    }

    if (pit.enabled && count % pit.period == 0)
      irq.pending |= 1u << pit.irq_line;
    uint32_t deliverable = irq.pending & ~irq.mask;
    if (deliverable) {
      cpu.irqs_acknowledged += static_cast<unsigned>(std::popcount(deliverable));
      irq.pending &= ~deliverable;
    }
  }

  return {executed, StepReason::BudgetExhausted};
}

}  // namespace gckpt
