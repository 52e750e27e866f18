#pragma once

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>

#include "gckpt/driver.hpp"
#include "gckpt/guest.hpp"
#include "gckpt/program.hpp"

namespace testutil {

using namespace gckpt;

class TmpDir {
 public:
  TmpDir() {
    char tmpl[] = "/tmp/gckpt-test-XXXXXX";
    if (!mkdtemp(tmpl)) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TmpDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::string& path() const { return path_; }
  std::string file(const std::string& name) const { return path_ + "/" + name; }

 private:
  std::string path_;
};

inline void write_file(const std::string& path, const Bytes& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size()));
  if (!f) throw std::runtime_error("write_file failed: " + path);
}

inline Bytes read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_file failed: " + path);
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

inline std::string make_disk(const TmpDir& dir, const std::string& name,
                             size_t sectors, uint32_t seed = 0) {
  Bytes data(sectors * kSectorSize);
  if (seed != 0) {
    std::mt19937 rng(seed);
    for (auto& b : data) b = static_cast<uint8_t>(rng());
  }
  std::string path = dir.file(name);
  write_file(path, data);
  return path;
}

// Minimal machine + shell wiring for interpreter-level tests: one identity
// slot over guest memory, vcpu at the program entry.
struct World {
  Driver driver;
  std::unique_ptr<GuestMachine> machine;
  VmHandle vm = 0;
  BufferHandle membuf = 0;

  explicit World(const GuestProgram& program, uint64_t mem_size = 65536) {
    machine = load_program(program, mem_size);
    vm = driver.create_vm_shell();
    membuf = buffer_registry().add(machine->memory().data(), machine->memory().size());
    driver.set_memory_slot(vm, MemorySlot{0, 0, mem_size, membuf});
    VcpuState cpu;
    cpu.pc = program.entry;
    driver.set_state(vm, StateKind::Vcpu, encode_vcpu(cpu));
  }

  ~World() { buffer_registry().invalidate(membuf); }

  StepOutcome run(uint64_t budget, MessagePort* port = nullptr) {
    return driver.run(vm, *machine, budget, port);
  }

  VcpuState cpu() { return decode_vcpu(driver.get_state(vm, StateKind::Vcpu)); }
  IrqchipState irq() {
    return decode_irqchip(driver.get_state(vm, StateKind::Irqchip));
  }
  void set_cpu(const VcpuState& v) {
    driver.set_state(vm, StateKind::Vcpu, encode_vcpu(v));
  }
  void set_irq(const IrqchipState& s) {
    driver.set_state(vm, StateKind::Irqchip, encode_irqchip(s));
  }
  void set_pit(uint64_t period, uint32_t line, bool enabled = true) {
    driver.set_state(vm, StateKind::Pit,
                     encode_pit(PitState{period, line, enabled}));
  }
};

inline bool is_code(const Error& e, ErrorCode c) { return e.code() == c; }

}  // namespace testutil

#define REQUIRE_ERROR(expr, wanted)                                        \
  do {                                                                     \
    try {                                                                  \
      (void)(expr);                                                        \
      FAIL("expected error " #wanted " but none was thrown");              \
    } catch (const gckpt::Error& e) {                                      \
      INFO(e.what());                                                      \
      REQUIRE(e.code() == gckpt::ErrorCode::wanted);                       \
    }                                                                      \
  } while (0)
