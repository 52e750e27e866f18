#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "gckpt/engine.hpp"
#include "gckpt/program.hpp"
#include "gckpt/snapshot.hpp"

namespace gckpt::bench {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// A guest that settles into a small loop and leaves memory mostly zero:
// the idle-machine stand-in for size-scaling measurements.
inline GuestProgram idle_program() {
  ProgramBuilder b;
  b.loadi(1, 1);
  b.label("loop");
  b.add(2, 2, 1);
  b.jmp("loop");
  return b.build();
}

// Integer stress: arithmetic over registers, barely touching memory.
inline GuestProgram int_stress_program() {
  ProgramBuilder b;
  b.loadi(1, 3);
  b.loadi(2, 7);
  b.label("loop");
  b.mul(3, 3, 1);
  b.add(3, 3, 2);
  b.sub(4, 3, 2);
  b.add(5, 5, 1);
  b.jmp("loop");
  return b.build();
}

// Memory stress: a store walker that keeps dirtying pages.
inline GuestProgram mem_stress_program(uint64_t span_bytes) {
  ProgramBuilder b;
  b.loadi(1, 0x8000);                       // cursor
  b.loadi(2, 8);
  b.loadi64(3, 14, 15, 0x8000 + span_bytes);  // limit
  b.loadi(4, 0x8000);
  b.label("loop");
  b.store(5, 1, 0, 8);
  b.add(5, 5, 2);
  b.add(1, 1, 2);
  b.sub(6, 1, 3);
  b.jnz(6, "go");
  b.mov(1, 4);
  b.label("go");
  b.jmp("loop");
  return b.build();
}

// Anti-idle guest for image-size comparisons: sweeps memory page by page,
// planting a distinct non-zero word on each, so almost no page stays a zero
// page. The branch tests equality, so the sweep bounds are chosen to hit
// the limit exactly.
inline GuestProgram scatter_write_program(uint64_t mem_bytes) {
  constexpr uint64_t kBase = 0x2000;
  uint64_t limit = mem_bytes - kPageSize;
  ProgramBuilder b;
  b.loadi(1, kBase);   // cursor
  b.loadi(2, 8);
  b.loadi64(3, 14, 15, limit);
  b.loadi(4, kBase);
  b.loadi(5, 1);       // per-page value, always non-zero
  b.loadi64(7, 14, 15, kPageSize);
  b.label("loop");
  b.store(5, 1, 0, 8);
  b.add(5, 5, 2);
  b.add(1, 1, 7);
  b.sub(6, 1, 3);
  b.jnz(6, "loop");
  b.mov(1, 4);
  b.jmp("loop");
  return b.build();
}

inline SessionConfig sized_config(GuestProgram prog, uint64_t mem_bytes) {
  SessionConfig cfg;
  cfg.program = std::move(prog);
  cfg.mem_size = mem_bytes;
  cfg.map_shared = false;
  return cfg;
}

struct SizeRow {
  uint64_t mem_size = 0;
  double ckpt_seconds = 0;
  double restart_seconds = 0;
  uint64_t image_bytes = 0;
};

// coverage: blocking checkpoint + full restart at each size.
// forked: guest-pause seconds (fork window only) + restart of the image.
// fast: fast-layout checkpoint, lazy restart timed to the first guest step.
enum class SizeSuite { Coverage, Forked, Fast };

inline SizeRow measure_size_point(SizeSuite suite, uint64_t mem_bytes,
                                  const std::string& dir,
                                  uint64_t warm_instrs = 200000) {
  namespace fs = std::filesystem;
  SizeRow row;
  row.mem_size = mem_bytes;
  auto s = Session::launch(sized_config(idle_program(), mem_bytes));
  s->run(warm_instrs);

  std::string img = (fs::path(dir) / ("bench-" + std::to_string(mem_bytes) +
                                      ".gckp"))
                        .string();

  auto t0 = std::chrono::steady_clock::now();
  switch (suite) {
    case SizeSuite::Coverage: {
      s->checkpoint(img);
      row.ckpt_seconds = seconds_since(t0);
      break;
    }
    case SizeSuite::Forked: {
      auto pending = s->checkpoint_forked(img);
      row.ckpt_seconds = seconds_since(t0);  // the guest-visible pause
      s->join(pending);
      break;
    }
    case SizeSuite::Fast: {
      CheckpointOptions opts;
      opts.mode = CkptMode::FastRestart;
      s->checkpoint(img, opts);
      row.ckpt_seconds = seconds_since(t0);
      break;
    }
  }
  row.image_bytes = fs::file_size(img);

  t0 = std::chrono::steady_clock::now();
  auto r = Session::restart(img);
  r->run(1);  // restart cost includes reaching the first executed instruction
  row.restart_seconds = seconds_since(t0);
  return row;
}

inline std::vector<SizeRow> run_size_suite(SizeSuite suite,
                                           const std::vector<uint64_t>& sizes,
                                           const std::string& dir) {
  std::vector<SizeRow> rows;
  for (uint64_t s : sizes) rows.push_back(measure_size_point(suite, s, dir));
  return rows;
}

struct OverheadRow {
  std::string workload;
  double with_wrappers_index = 0;     // instructions per second
  double without_wrappers_index = 0;
};

// Throughput with and without record-only wrappers interposed on the call
// path. The wrappers observe and forward; the delta is the interposition
// cost.
inline std::vector<OverheadRow> run_overhead_suite(uint64_t instrs = 30'000'000) {
  std::vector<OverheadRow> rows;
  struct Case {
    const char* name;
    GuestProgram prog;
  };
  std::vector<Case> cases;
  cases.push_back({"int_stress", int_stress_program()});
  cases.push_back({"mem_stress", mem_stress_program(1 << 20)});

  for (auto& c : cases) {
    auto measure = [&](bool wrapped) {
      SessionConfig cfg = sized_config(c.prog, 4 * (1ull << 20));
      cfg.plugins = wrapped
                        ? std::vector<std::string>{"vm_driver", "recorder"}
                        : std::vector<std::string>{"vm_driver"};
      auto s = Session::launch(cfg);
      s->run(1'000'000);  // warm-up
      auto t0 = std::chrono::steady_clock::now();
      s->run(instrs);
      return static_cast<double>(instrs) / seconds_since(t0);
    };
    OverheadRow row;
    row.workload = c.name;
    row.with_wrappers_index = measure(true);
    row.without_wrappers_index = measure(false);
    rows.push_back(row);
  }
  return rows;
}

struct CloneRow {
  bool reflink_available = false;
  double reflink_seconds = 0;
  double copy_seconds = 0;
};

// Snapshot a large sparse disk twice: once allowing the filesystem clone
// path, once forcing the byte copy. On filesystems without clone support
// only the copy half is meaningful.
inline CloneRow run_clone_suite(const std::string& dir,
                                uint64_t disk_bytes = 1ull << 30) {
  namespace fs = std::filesystem;
  CloneRow row;
  row.reflink_available = reflink_supported(dir);

  std::string disk = (fs::path(dir) / "clone-src.img").string();
  {
    // Sparse file with a little real data at both ends.
    std::ofstream out(disk, std::ios::binary | std::ios::trunc);
    Bytes head(64 * 1024, 0x5a);
    out.write(reinterpret_cast<const char*>(head.data()),
              static_cast<std::streamsize>(head.size()));
    out.seekp(static_cast<std::streamoff>(disk_bytes - head.size()));
    out.write(reinterpret_cast<const char*>(head.data()),
              static_cast<std::streamsize>(head.size()));
  }

  std::string snapdir = (fs::path(dir) / "snaps").string();
  fs::create_directories(snapdir);

  if (row.reflink_available) {
    auto t0 = std::chrono::steady_clock::now();
    SnapshotRef ref = snapshot_file(disk, snapdir);
    row.reflink_seconds = seconds_since(t0);
    fs::remove(fs::path(snapdir) / ref.path);
  }

  auto t0 = std::chrono::steady_clock::now();
  SnapshotRef ref = snapshot_file_dense(disk, snapdir);
  row.copy_seconds = seconds_since(t0);
  fs::remove(fs::path(snapdir) / ref.path);
  return row;
}

inline std::string csv_size(const std::vector<SizeRow>& rows) {
  std::string out = "mem_size,ckpt_seconds,restart_seconds,image_bytes\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%llu,%.6f,%.6f,%llu\n",
                  static_cast<unsigned long long>(r.mem_size), r.ckpt_seconds,
                  r.restart_seconds,
                  static_cast<unsigned long long>(r.image_bytes));
    out += line;
  }
  return out;
}

inline std::string csv_overhead(const std::vector<OverheadRow>& rows) {
  std::string out = "workload,with_wrappers_index,without_wrappers_index\n";
  char line[160];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof(line), "%s,%.0f,%.0f\n", r.workload.c_str(),
                  r.with_wrappers_index, r.without_wrappers_index);
    out += line;
  }
  return out;
}

inline std::string csv_clone(const CloneRow& r) {
  char line[160];
  std::snprintf(line, sizeof(line), "%.6f,%.6f\n", r.reflink_seconds,
                r.copy_seconds);
  return std::string("reflink_seconds,copy_seconds\n") + line;
}

}  // namespace gckpt::bench
