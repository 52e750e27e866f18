#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "gckpt/driver.hpp"
#include "gckpt/program.hpp"
#include "helpers.hpp"

using namespace gckpt;
using testutil::World;

TEST_CASE("shell handles are sequential per driver and never reused") {
  Driver d;
  VmHandle a = d.create_vm_shell();
  VmHandle b = d.create_vm_shell();
  REQUIRE(a == 1);
  REQUIRE(b == 2);
  d.destroy_vm(a);
  REQUIRE(d.create_vm_shell() == 3);
  REQUIRE_ERROR(d.destroy_vm(a), InvalidHandle);
  REQUIRE_ERROR(d.get_state(99, StateKind::Vcpu), InvalidHandle);
}

TEST_CASE("a fresh shell reads back all-zero state") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  Bytes vcpu = d.get_state(vm, StateKind::Vcpu);
  REQUIRE(vcpu.size() == 144);
  REQUIRE(std::count(vcpu.begin(), vcpu.end(), 0) == 144);
  REQUIRE(d.get_state(vm, StateKind::Irqchip) == Bytes(8, 0));
  REQUIRE(d.get_state(vm, StateKind::TssAddr) == Bytes(8, 0));
  REQUIRE(decode_slots(d.get_state(vm, StateKind::Slots)).empty());
  REQUIRE(decode_regions(d.get_state(vm, StateKind::Regions)).empty());
}

TEST_CASE("state payload encodings are pinned") {
  VcpuState cpu;
  cpu.regs[0] = 0x0102030405060708ull;
  cpu.pc = 0x10;
  cpu.irqs_acknowledged = 3;
  Bytes v = encode_vcpu(cpu);
  REQUIRE(v.size() == 144);
  REQUIRE(to_hex(std::span(v).subspan(0, 8)) == "0807060504030201");
  REQUIRE(to_hex(std::span(v).subspan(128, 16)) ==
          "10000000000000000300000000000000");
  REQUIRE(decode_vcpu(v) == cpu);

  REQUIRE(to_hex(encode_irqchip(IrqchipState{0x12345678, 0x0000ffff})) ==
          "78563412ffff0000");
  REQUIRE(to_hex(encode_tss(0xdeadbeefull)) == "efbeadde00000000");
  REQUIRE(to_hex(encode_pit(PitState{1000, 2, true})) ==
          "e8030000000000000200000001");

  MemorySlot slot{1, 0x10000, 0x1000, 7};
  REQUIRE(to_hex(encode_slots({slot})) ==
          "01000000"
          "01000000"
          "0000010000000000"
          "0010000000000000"
          "0700000000000000");
  REQUIRE(decode_slots(encode_slots({slot})) == std::vector<MemorySlot>{slot});
}

TEST_CASE("state blob framing is pinned") {
  Bytes payload = encode_pit(PitState{1000, 2, true});
  Bytes framed = frame_blob(StateKind::Pit, payload);
  REQUIRE(to_hex(framed) == "06000d000000e8030000000000000200000001");
  auto [kind, body] = parse_blob(framed);
  REQUIRE(kind == StateKind::Pit);
  REQUIRE(body == payload);
}

TEST_CASE("malformed payloads are rejected") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  REQUIRE_ERROR(d.set_state(vm, StateKind::Vcpu, Bytes(143, 0)), DecodeError);
  REQUIRE_ERROR(d.set_state(vm, StateKind::Irqchip, Bytes(9, 0)), DecodeError);
  REQUIRE_ERROR(d.set_state(vm, StateKind::TssAddr, Bytes(4, 0)), DecodeError);

  Bytes slots = encode_slots({});
  slots.push_back(0);
  REQUIRE_ERROR(d.set_state(vm, StateKind::Slots, slots), DecodeError);

  Bytes pit = encode_pit(PitState{5, 1, true});
  pit.back() = 2;
  REQUIRE_ERROR(d.set_state(vm, StateKind::Pit, pit), DecodeError);
}

TEST_CASE("pit is set-only and validated") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  d.set_state(vm, StateKind::Pit, encode_pit(PitState{100, 4, true}));
  REQUIRE_ERROR(d.get_state(vm, StateKind::Pit), NoGetter);
  REQUIRE(d.diagnostic_state(vm).pit == PitState{100, 4, true});

  REQUIRE_ERROR(d.set_state(vm, StateKind::Pit, encode_pit(PitState{0, 1, true})),
                BadLength);
  REQUIRE_ERROR(d.set_state(vm, StateKind::Pit, encode_pit(PitState{5, 32, true})),
                OutOfRange);
  // Disabled timers may carry any period.
  d.set_state(vm, StateKind::Pit, encode_pit(PitState{0, 0, false}));
}

TEST_CASE("memory slot validation") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  Bytes backing(2 * kPageSize);
  BufferHandle buf = buffer_registry().add(backing.data(), backing.size());

  SECTION("aligned slot of matching length is accepted") {
    d.set_memory_slot(vm, MemorySlot{0, 0, backing.size(), buf});
    auto slots = decode_slots(d.get_state(vm, StateKind::Slots));
    REQUIRE(slots.size() == 1);
    REQUIRE(slots[0] == MemorySlot{0, 0, backing.size(), buf});
  }

  SECTION("misaligned base or length") {
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{0, 100, backing.size(), buf}),
                  BadLength);
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{0, 0, kPageSize + 100, buf}),
                  BadLength);
  }

  SECTION("slot length must equal buffer length") {
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{0, 0, kPageSize, buf}), BadLength);
  }

  SECTION("overlapping ranges are rejected") {
    d.set_memory_slot(vm, MemorySlot{0, 0, backing.size(), buf});
    Bytes other(kPageSize);
    BufferHandle buf2 = buffer_registry().add(other.data(), other.size());
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{1, kPageSize, kPageSize, buf2}),
                  Overlap);
    d.set_memory_slot(vm, MemorySlot{1, 4 * kPageSize, kPageSize, buf2});
    buffer_registry().invalidate(buf2);
  }

  SECTION("replacing a slot by id does not self-overlap") {
    d.set_memory_slot(vm, MemorySlot{0, 0, backing.size(), buf});
    d.set_memory_slot(vm, MemorySlot{0, 2 * kPageSize, backing.size(), buf});
    auto slots = decode_slots(d.get_state(vm, StateKind::Slots));
    REQUIRE(slots.size() == 1);
    REQUIRE(slots[0].guest_base == 2 * kPageSize);
  }

  SECTION("zero length removes the slot") {
    d.set_memory_slot(vm, MemorySlot{0, 0, backing.size(), buf});
    d.set_memory_slot(vm, MemorySlot{0, 0, 0, 0});
    REQUIRE(decode_slots(d.get_state(vm, StateKind::Slots)).empty());
  }

  SECTION("unknown and dead buffers are distinguished") {
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{0, 0, kPageSize, 1u << 30}),
                  InvalidHandle);
    Bytes dying(kPageSize);
    BufferHandle dead = buffer_registry().add(dying.data(), dying.size());
    buffer_registry().invalidate(dead);
    REQUIRE_ERROR(d.set_memory_slot(vm, MemorySlot{0, 0, kPageSize, dead}),
                  StaleBuffer);
  }

  buffer_registry().invalidate(buf);
}

TEST_CASE("slot table replacement is all-or-nothing") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  Bytes backing(kPageSize);
  BufferHandle buf = buffer_registry().add(backing.data(), backing.size());
  d.set_memory_slot(vm, MemorySlot{0, 0, kPageSize, buf});

  std::vector<MemorySlot> bad = {
      MemorySlot{1, 4 * kPageSize, kPageSize, buf},
      MemorySlot{2, 0, kPageSize, 1u << 30},  // invalid second entry
  };
  REQUIRE_ERROR(d.set_state(vm, StateKind::Slots, encode_slots(bad)), InvalidHandle);
  auto slots = decode_slots(d.get_state(vm, StateKind::Slots));
  REQUIRE(slots.size() == 1);
  REQUIRE(slots[0].slot_id == 0);
  REQUIRE(slots[0].guest_base == 0);

  std::vector<MemorySlot> dup = {
      MemorySlot{1, 0, kPageSize, buf},
      MemorySlot{1, 4 * kPageSize, kPageSize, buf},
  };
  REQUIRE_ERROR(d.set_state(vm, StateKind::Slots, encode_slots(dup)), Overlap);
  buffer_registry().invalidate(buf);
}

TEST_CASE("shared regions") {
  Driver d;
  VmHandle vm = d.create_vm_shell();

  SECTION("mapping validates key and length") {
    RegionHandle r1 = d.map_shared_region(vm, 1, kPageSize);
    REQUIRE(r1 != 0);
    REQUIRE_ERROR(d.map_shared_region(vm, 1, kPageSize), KeyInUse);
    REQUIRE_ERROR(d.map_shared_region(vm, 2, 100), BadLength);
    REQUIRE_ERROR(d.map_shared_region(vm, 2, 0), BadLength);
    // Same key in a different shell is fine.
    VmHandle other = d.create_vm_shell();
    REQUIRE(d.map_shared_region(other, 1, kPageSize) > r1);
  }

  SECTION("region handles grow across shells and are not recycled") {
    RegionHandle r1 = d.map_shared_region(vm, 1, kPageSize);
    d.destroy_vm(vm);
    VmHandle vm2 = d.create_vm_shell();
    RegionHandle r2 = d.map_shared_region(vm2, 1, kPageSize);
    REQUIRE(r2 > r1);
  }

  SECTION("region state round trips content") {
    d.map_shared_region(vm, 7, kPageSize);
    auto regions = decode_regions(d.get_state(vm, StateKind::Regions));
    REQUIRE(regions.size() == 1);
    REQUIRE(regions[0].key == 7);
    REQUIRE(regions[0].len == kPageSize);
    REQUIRE(regions[0].content == Bytes(kPageSize, 0));

    regions[0].content[0] = 0xaa;
    regions[0].content[kPageSize - 1] = 0xbb;
    d.set_state(vm, StateKind::Regions, encode_regions(regions));
    auto back = decode_regions(d.get_state(vm, StateKind::Regions));
    REQUIRE(back[0].content[0] == 0xaa);
    REQUIRE(back[0].content[kPageSize - 1] == 0xbb);
  }

  SECTION("restore rejects foreign, stale and mismatched handles") {
    d.map_shared_region(vm, 7, kPageSize);
    auto regions = decode_regions(d.get_state(vm, StateKind::Regions));

    auto bogus = regions;
    bogus[0].handle = 1ull << 40;  // never issued
    REQUIRE_ERROR(d.set_state(vm, StateKind::Regions, encode_regions(bogus)),
                  InvalidHandle);

    auto wrong_key = regions;
    wrong_key[0].key = 8;
    REQUIRE_ERROR(d.set_state(vm, StateKind::Regions, encode_regions(wrong_key)),
                  DecodeError);

    VmHandle vm2 = d.create_vm_shell();
    d.map_shared_region(vm2, 9, kPageSize);
    auto foreign = decode_regions(d.get_state(vm2, StateKind::Regions));
    d.destroy_vm(vm2);
    // A handle that belonged to a destroyed shell is stale, not unknown.
    REQUIRE_ERROR(d.set_state(vm, StateKind::Regions, encode_regions(foreign)),
                  StaleBuffer);
  }

  SECTION("destroying a shell kills its region buffers") {
    d.map_shared_region(vm, 3, kPageSize);
    auto regions = decode_regions(d.get_state(vm, StateKind::Regions));
    BufferHandle buf = regions[0].buffer;
    REQUIRE(buffer_registry().find(buf)->alive);
    d.destroy_vm(vm);
    REQUIRE_FALSE(buffer_registry().find(buf)->alive);
  }
}

TEST_CASE("a region buffer can back a memory slot and the guest writes it") {
  ProgramBuilder b;
  b.loadi(0, 0x7e);
  b.loadi(1, 65536);
  b.store(0, 1, 0, 1);
  b.load(2, 1, 0, 8);
  b.halt();
  World w(b.build());

  RegionHandle region = w.driver.map_shared_region(w.vm, 1, kPageSize);
  auto regions = decode_regions(w.driver.get_state(w.vm, StateKind::Regions));
  REQUIRE(regions[0].handle == region);
  w.driver.set_memory_slot(w.vm, MemorySlot{1, 65536, kPageSize, regions[0].buffer});

  REQUIRE(w.run(100).reason == StepReason::Halted);
  REQUIRE(w.cpu().regs[2] == 0x7e);
  auto after = decode_regions(w.driver.get_state(w.vm, StateKind::Regions));
  REQUIRE(after[0].content[0] == 0x7e);
  // Region writes do not land in the machine dirty map; the machine memory
  // slot is the only tracked one.
  auto dirty = w.machine->dirty_pages();
  REQUIRE(std::find(dirty.begin(), dirty.end(), 16) == dirty.end());
}

TEST_CASE("restoring region content in place keeps slot mappings valid") {
  ProgramBuilder b;
  b.loadi(1, 65536).load(2, 1, 0, 8).halt();
  World w(b.build());
  w.driver.map_shared_region(w.vm, 1, kPageSize);
  auto regions = decode_regions(w.driver.get_state(w.vm, StateKind::Regions));
  w.driver.set_memory_slot(w.vm, MemorySlot{1, 65536, kPageSize, regions[0].buffer});

  regions[0].content[0] = 0x42;
  w.driver.set_state(w.vm, StateKind::Regions, encode_regions(regions));

  REQUIRE(w.run(100).reason == StepReason::Halted);
  REQUIRE(w.cpu().regs[2] == 0x42);
}

TEST_CASE("diagnostic state mirrors everything including the pit") {
  Driver d;
  VmHandle vm = d.create_vm_shell();
  d.set_state(vm, StateKind::Pit, encode_pit(PitState{250, 3, true}));
  d.set_state(vm, StateKind::TssAddr, encode_tss(0xf000));
  d.map_shared_region(vm, 11, kPageSize);

  DriverState s = d.diagnostic_state(vm);
  REQUIRE(s.pit == PitState{250, 3, true});
  REQUIRE(s.tss_addr == 0xf000);
  REQUIRE(s.regions.size() == 1);
  REQUIRE(s.regions[0].key == 11);
  REQUIRE(s.slots.empty());
}
