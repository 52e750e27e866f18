#include <catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include "gckpt/engine.hpp"
#include "workloads.hpp"

using namespace gckpt;
using testutil::busy_config;
using testutil::check_equivalent;
using testutil::snap;
using testutil::TmpDir;

TEST_CASE("launch assembles the reference world") {
  TmpDir dir;
  testutil::make_disk(dir, "disk.img", 16, 5);
  auto s = Session::launch(busy_config(256 * kPageSize, dir.file("disk.img")));

  auto d = s->driver().diagnostic_state(s->vm());
  CHECK(d.vcpu.pc == 0);
  for (auto r : d.vcpu.regs) CHECK(r == 0);
  CHECK(d.vcpu.irqs_acknowledged == 0);
  CHECK(d.tss_addr == 256 * kPageSize - kPageSize);
  CHECK(d.pit.enabled);
  CHECK(d.pit.period == 1000);
  CHECK(d.pit.irq_line == 3);

  REQUIRE(d.slots.size() == 2);
  CHECK(d.slots[0].guest_base == 0);
  CHECK(d.slots[0].len == 256 * kPageSize);
  CHECK(d.slots[1].guest_base == 256 * kPageSize);  // auto-placed past slot 0
  CHECK(d.slots[1].len == kPageSize);
  REQUIRE(d.regions.size() == 1);
  CHECK(d.regions[0].key == 1);
  CHECK(d.slots[1].buffer == d.regions[0].buffer);

  SECTION("launch log records the mutating calls, in order") {
    auto calls = decode_call_log(s->launch_log());
    std::vector<CallOp> ops;
    for (const auto& c : calls) ops.push_back(c.op);
    CHECK(ops == std::vector<CallOp>{
                     CallOp::CreateVmShell, CallOp::SetMemorySlot,
                     CallOp::SetState, CallOp::SetState, CallOp::SetState,
                     CallOp::SetState, CallOp::MapSharedRegion,
                     CallOp::SetMemorySlot});
  }
  SECTION("the guest actually runs against this wiring") {
    auto out = s->run(5000);
    CHECK(out == StepOutcome{5000, StepReason::BudgetExhausted});
    CHECK(s->machine().instr_count() == 5000);
    auto d2 = s->driver().diagnostic_state(s->vm());
    CHECK(d2.vcpu.irqs_acknowledged == 5);  // period 1000
    CHECK(!s->machine().console().empty());
    uint64_t shared_counter = 0;
    std::memcpy(&shared_counter, d2.regions[0].content.data(), 8);
    CHECK(shared_counter > 0);
  }
}

TEST_CASE("launch rejects duplicate plugin names") {
  auto cfg = busy_config();
  cfg.plugins = {"vm_driver", "recorder", "vm_driver"};
  REQUIRE_ERROR(Session::launch(cfg), DuplicateName);
}

TEST_CASE("checkpoint now, restart later, identical future") {
  TmpDir dir;
  testutil::make_disk(dir, "disk.img", 16, 5);
  auto cfg = busy_config(256 * kPageSize, dir.file("disk.img"));
  auto s = Session::launch(cfg);
  s->run(5000);

  std::string image = dir.file("ckpt.gckp");
  Digest h = s->checkpoint(image);
  CHECK(s->has_last_checkpoint());
  CHECK(s->last_checkpoint_hash() == h);
  auto at_ckpt = snap(*s);

  SECTION("manifest carries the stop point") {
    ImageFile img = ImageFile::open(image);
    CHECK(img.manifest().instr_count == 5000);
    CHECK(img.manifest().content_hash == h);
    CHECK(img.flags() == kFlagCompressed);
  }
  SECTION("restart reproduces the checkpointed state without stepping") {
    auto r = Session::restart(image);
    CHECK(r->machine().instr_count() == 5000);
    check_equivalent(snap(*r), at_ckpt);
    CHECK(r->has_last_checkpoint());
    CHECK(r->last_checkpoint_hash() == h);
  }
  SECTION("original and restarted copies agree instruction for instruction") {
    auto r = Session::restart(image);
    s->run(4321);
    r->run(4321);
    check_equivalent(snap(*r), snap(*s));

    // Their disks evolved separately but identically.
    CHECK(testutil::read_file(dir.file("disk.img")) ==
          testutil::read_file(r->disk_path()));
    CHECK(r->disk_path() == image + ".work.disk");
  }
  SECTION("a second generation restart still lines up") {
    auto r = Session::restart(image);
    r->run(2000);
    s->run(2000);
    std::string image2 = dir.file("gen2.gckp");
    r->checkpoint(image2);
    auto r2 = Session::restart(image2);
    CHECK(r2->launch_log() == s->launch_log());
    r2->run(1500);
    s->run(1500);
    check_equivalent(snap(*r2), snap(*s));
  }
  SECTION("restarted sessions keep the set-only contract") {
    auto r = Session::restart(image);
    REQUIRE_ERROR(r->driver().get_state(r->vm(), StateKind::Pit), NoGetter);
    auto d = r->driver().diagnostic_state(r->vm());
    CHECK(d.pit.enabled);
    CHECK(d.pit.period == 1000);
  }
}

TEST_CASE("timer schedule survives restart") {
  TmpDir dir;
  auto s = Session::launch(busy_config());
  s->run(2500);
  std::string image = dir.file("t.gckp");
  s->checkpoint(image);
  auto d0 = s->driver().diagnostic_state(s->vm());
  CHECK(d0.vcpu.irqs_acknowledged == 2);  // fired at 1000, 2000

  auto r = Session::restart(image);
  CHECK(r->driver().diagnostic_state(r->vm()).vcpu.irqs_acknowledged == 2);
  r->run(500);  // crosses 3000
  CHECK(r->driver().diagnostic_state(r->vm()).vcpu.irqs_acknowledged == 3);
  r->run(1000);  // crosses 4000
  CHECK(r->driver().diagnostic_state(r->vm()).vcpu.irqs_acknowledged == 4);
}

TEST_CASE("restore without the handle rewrite fails loudly") {
  TmpDir dir;
  auto cfg = busy_config();
  cfg.plugins = {"vm_driver_nopatch"};
  auto s = Session::launch(cfg);
  s->run(3000);
  std::string image = dir.file("np.gckp");
  s->checkpoint(image);
  s.reset();  // original session gone, as in a real restart
  REQUIRE_ERROR(Session::restart(image), StaleBuffer);
}

TEST_CASE("restart refuses a damaged image") {
  TmpDir dir;
  auto s = Session::launch(busy_config());
  s->run(1000);
  std::string image = dir.file("d.gckp");
  s->checkpoint(image);

  SECTION("payload corruption") {
    Bytes b = testutil::read_file(image);
    ImageFile probe = ImageFile::open(image);
    size_t mi = probe.require(SectionType::Memory, "memory");
    b[probe.table()[mi].offset + 3] ^= 0xff;
    testutil::write_file(image, b);
    REQUIRE_ERROR(Session::restart(image), CorruptImage);
  }
  SECTION("truncation") {
    Bytes b = testutil::read_file(image);
    b.resize(b.size() / 2);
    testutil::write_file(image, b);
    REQUIRE_ERROR(Session::restart(image), CorruptImage);
  }
}

TEST_CASE("mode guards") {
  TmpDir dir;
  auto s = Session::launch(busy_config());
  s->run(100);

  SECTION("incremental with no base") {
    CheckpointOptions opts;
    opts.mode = CkptMode::Incremental;
    REQUIRE_ERROR(s->checkpoint(dir.file("i.gckp"), opts), BadConfig);
  }
  SECTION("forked mode must use the forked entry point") {
    CheckpointOptions opts;
    opts.mode = CkptMode::Forked;
    REQUIRE_ERROR(s->checkpoint(dir.file("f.gckp"), opts), BadConfig);
  }
}

TEST_CASE("sessions without shared page or disk round trip too") {
  TmpDir dir;
  SessionConfig cfg;
  cfg.program = testutil::single_page_program();
  cfg.mem_size = 16 * kPageSize;
  cfg.map_shared = false;
  auto s = Session::launch(cfg);
  s->run(2000);

  std::string image = dir.file("bare.gckp");
  s->checkpoint(image);
  auto at_ckpt = snap(*s);

  auto r = Session::restart(image);
  check_equivalent(snap(*r), at_ckpt);
  CHECK(r->driver().diagnostic_state(r->vm()).regions.empty());
  r->run(777);
  s->run(777);
  check_equivalent(snap(*r), snap(*s));
}

TEST_CASE("checkpoint lands on an instruction boundary mid-slice") {
  TmpDir dir;
  auto s = Session::launch(busy_config());

  std::atomic<bool> stop{false};
  std::thread runner([&] {
    while (!stop.load()) s->run(200'000'000);
  });

  // Let the slice get going, then checkpoint from outside.
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  std::string image = dir.file("live.gckp");
  Digest h = s->checkpoint(image);
  stop.store(true);
  runner.join();

  ImageFile img = ImageFile::open(image);
  CHECK(img.manifest().content_hash == h);
  uint64_t at = img.manifest().instr_count;
  CHECK(at > 0);
  CHECK(at < 200'000'000);

  // The image is from a clean boundary: restarting and running any distance
  // matches a fresh session run to the same absolute count.
  auto r = Session::restart(image);
  CHECK(r->machine().instr_count() == at);
  r->run(1000);
  auto fresh = Session::launch(busy_config());
  fresh->run(at + 1000);
  check_equivalent(snap(*r), snap(*fresh));
}

TEST_CASE("checkpoint of a halted guest restores halted") {
  TmpDir dir;
  SessionConfig cfg;
  ProgramBuilder b;
  b.loadi(0, 'z');
  b.hypercall(Hc::ConsoleWrite);
  b.halt();
  cfg.program = b.build();
  cfg.mem_size = 16 * kPageSize;
  cfg.map_shared = false;
  auto s = Session::launch(cfg);
  CHECK(s->run(100) == StepOutcome{3, StepReason::Halted});

  std::string image = dir.file("h.gckp");
  s->checkpoint(image);
  auto r = Session::restart(image);
  CHECK(r->machine().halted());
  CHECK(r->machine().console() == Bytes{'z'});
  CHECK(r->run(100) == StepOutcome{0, StepReason::Halted});
}
