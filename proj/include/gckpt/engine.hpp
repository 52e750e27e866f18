#pragma once

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "gckpt/driver.hpp"
#include "gckpt/image.hpp"
#include "gckpt/plugin.hpp"
#include "gckpt/snapshot.hpp"

namespace gckpt {

// Serializes guest execution against checkpointing. The guest runs in
// slices; a holder asks the machine to quiesce and waits for the in-flight
// slice to stop at an instruction boundary.
class ExecGate {
 public:
  class Hold {
   public:
    Hold() = default;
    explicit Hold(ExecGate* g) : gate_(g) {}
    Hold(Hold&& o) noexcept : gate_(std::exchange(o.gate_, nullptr)) {}
    Hold& operator=(Hold&& o) noexcept {
      drop();
      gate_ = std::exchange(o.gate_, nullptr);
      return *this;
    }
    Hold(const Hold&) = delete;
    Hold& operator=(const Hold&) = delete;
    ~Hold() { drop(); }

   private:
    void drop() {
      if (gate_) gate_->release();
      gate_ = nullptr;
    }
    ExecGate* gate_ = nullptr;
  };

  void bind(GuestMachine* m) { machine_ = m; }

  Hold hold(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    holds_++;
    if (running_) {
      machine_->request_quiesce();
      if (!cv_.wait_for(lk, timeout, [&] { return !running_; })) {
        holds_--;
        raise(ErrorCode::QuiesceTimeout,
              "guest did not reach an instruction boundary in time");
      }
    }
    return Hold(this);
  }

  template <typename F>
  StepOutcome run_slice(F&& body) {
    {
      std::unique_lock lk(mu_);
      cv_.wait(lk, [&] { return holds_ == 0; });
      running_ = true;
    }
    StepOutcome out;
    try {
      out = body();
    } catch (...) {
      finish_slice();
      throw;
    }
    finish_slice();
    return out;
  }

 private:
  void finish_slice() {
    std::lock_guard lk(mu_);
    running_ = false;
    cv_.notify_all();
  }

  void release() {
    std::lock_guard lk(mu_);
    holds_--;
    // A hold may have requested a quiesce the slice never consumed; do not
    // let it leak into the next slice.
    if (holds_ == 0 && machine_) machine_->clear_quiesce();
    cv_.notify_all();
  }

  std::mutex mu_;
  std::condition_variable cv_;
  GuestMachine* machine_ = nullptr;
  bool running_ = false;
  int holds_ = 0;
};

struct SessionConfig {
  GuestProgram program;
  uint64_t mem_size = 0;
  std::vector<std::string> plugins{"vm_driver"};
  std::string disk_path;  // empty: no disk

  bool pit_enabled = false;
  uint64_t pit_period = 0;
  uint32_t pit_irq_line = 0;

  // The launcher maps one shared page by key so restart has a region to
  // re-establish; slot 1 exposes it to the guest. base 0: just past slot 0.
  bool map_shared = true;
  uint64_t shared_key = 1;
  uint64_t shared_len = kPageSize;
  uint64_t shared_base = 0;

  uint32_t quiesce_timeout_ms = 5000;
};

enum class CkptMode { Default, Forked, FastRestart, Incremental };

struct CheckpointOptions {
  CkptMode mode = CkptMode::Default;
  bool compress = true;
  std::string base;  // incremental: base image path; empty = last checkpoint
};

struct RestartOptions {
  std::string disk_target;  // empty: "<image>.work.disk"
  std::string search_dir;   // incremental base lookup; empty: image directory
};

struct PendingCheckpoint {
  pid_t pid = -1;
  std::string path;
};

class Session final : public PluginHost {
 public:
  static std::unique_ptr<Session> launch(SessionConfig cfg) {
    auto s = std::unique_ptr<Session>(new Session());
    s->cfg_quiesce_ms_ = cfg.quiesce_timeout_ms;
    s->machine_ = load_program(cfg.program, cfg.mem_size);
    s->gate_.bind(s->machine_.get());

    std::set<std::string> seen;
    for (const auto& name : cfg.plugins) {
      if (!seen.insert(name).second)
        raise(ErrorCode::DuplicateName, "plugin listed twice: " + name);
      s->plugins_.push_back(make_plugin(name));
    }

    DriverCall c;
    c.op = CallOp::CreateVmShell;
    s->vm_ = s->host_call(c).vm;

    s->membuf_ = buffer_registry().add(s->machine_->memory().data(),
                                       s->machine_->memory().size());
    c = {};
    c.op = CallOp::SetMemorySlot;
    c.slot = {0, 0, s->machine_->mem_size(), s->membuf_};
    s->host_call(c);

    Bytes tss;
    put_u64(tss, s->machine_->mem_size() - kPageSize);
    c = {};
    c.op = CallOp::SetState;
    c.kind = StateKind::TssAddr;
    c.payload = tss;
    s->host_call(c);

    c = {};
    c.op = CallOp::SetState;
    c.kind = StateKind::Irqchip;
    c.payload = encode_irqchip({0, 0});
    s->host_call(c);

    VcpuState boot{};
    boot.pc = cfg.program.entry;
    c = {};
    c.op = CallOp::SetState;
    c.kind = StateKind::Vcpu;
    c.payload = encode_vcpu(boot);
    s->host_call(c);

    if (cfg.pit_enabled) {
      c = {};
      c.op = CallOp::SetState;
      c.kind = StateKind::Pit;
      c.payload = encode_pit({cfg.pit_period, cfg.pit_irq_line, true});
      s->host_call(c);
    }

    if (cfg.map_shared) {
      c = {};
      c.op = CallOp::MapSharedRegion;
      c.region_key = cfg.shared_key;
      c.region_len = cfg.shared_len;
      s->host_call(c);

      DriverCall q;
      q.op = CallOp::GetState;
      q.kind = StateKind::Regions;
      auto regions = decode_regions(s->host_call(q).payload);
      BufferHandle shared_buf = 0;
      for (const auto& r : regions)
        if (r.key == cfg.shared_key) shared_buf = r.buffer;
      uint64_t base =
          cfg.shared_base ? cfg.shared_base : s->machine_->mem_size();
      c = {};
      c.op = CallOp::SetMemorySlot;
      c.slot = {1, base, cfg.shared_len, shared_buf};
      s->host_call(c);
    }

    if (!cfg.disk_path.empty()) {
      s->machine_->attach_disk(DiskDevice::open(cfg.disk_path));
      s->disk_path_ = cfg.disk_path;
    }

    s->log_frozen_ = true;
    return s;
  }

  ~Session() override {
    if (membuf_) buffer_registry().invalidate(membuf_);
    if (vm_) {
      try {
        driver_.destroy_vm(vm_);
      } catch (...) {
      }
    }
  }

  // PluginHost
  CallResult host_call(DriverCall& call) override {
    return run_chain(plugins_, 0, *this, call,
                     [this](DriverCall& c) { return raw_call(c); });
  }
  Driver& host_driver() override { return driver_; }
  GuestMachine& host_machine() override { return *machine_; }
  VmHandle host_vm() const override { return vm_; }
  BufferHandle host_machine_buffer() const override { return membuf_; }

  StepOutcome run(uint64_t budget, MessagePort* port = nullptr) {
    return gate_.run_slice([&] {
      current_port_ = port;
      DriverCall c;
      c.op = CallOp::RunGuest;
      c.budget = budget;
      StepOutcome out = host_call(c).outcome;
      current_port_ = nullptr;
      return out;
    });
  }

  GuestMachine& machine() { return *machine_; }
  Driver& driver() { return driver_; }
  VmHandle vm() const { return vm_; }
  const std::vector<std::unique_ptr<Plugin>>& plugins() const { return plugins_; }
  const Bytes& launch_log() const { return launch_log_; }
  const std::string& disk_path() const { return disk_path_; }
  bool has_last_checkpoint() const { return has_last_; }
  const Digest& last_checkpoint_hash() const { return last_hash_; }
  const std::string& last_checkpoint_path() const { return last_path_; }

  // Stops the guest at a boundary, runs pre-checkpoint handlers, writes the
  // image, and resumes. Returns the image content hash.
  Digest checkpoint(const std::string& path, const CheckpointOptions& opts = {}) {
    if (opts.mode == CkptMode::Forked)
      raise(ErrorCode::BadConfig, "forked checkpoints go through checkpoint_forked");
    if (forked_pending_)
      raise(ErrorCode::BadConfig, "a forked checkpoint is still pending");

    auto hold = gate_.hold(std::chrono::milliseconds(cfg_quiesce_ms_));
    dispatch_wrapped(PluginEvent::PreCheckpoint);

    uint32_t flags = 0;
    if (opts.compress) flags |= kFlagCompressed;
    std::vector<Section> sections;
    if (opts.mode == CkptMode::Incremental) {
      flags |= kFlagIncremental;
      sections = build_delta_sections(path, opts);
    } else {
      if (opts.mode == CkptMode::FastRestart) flags |= kFlagFastRestart;
      sections = build_full_sections(path);
    }

    Manifest m;
    m.instr_count = machine_->instr_count();
    m.created_unix = static_cast<uint64_t>(::time(nullptr));
    write_image_file(path, flags, m, sections);

    Digest h = image_content_hash(sections);
    machine_->clear_dirty();
    last_path_ = path;
    last_hash_ = h;
    has_last_ = true;

    dispatch_wrapped(PluginEvent::Resume);
    return h;
  }

  // Freezes the guest only long enough to fork; the child serializes its
  // copy-on-write view of memory while the parent resumes running.
  PendingCheckpoint checkpoint_forked(const std::string& path,
                                      const CheckpointOptions& opts = {}) {
    if (forked_pending_)
      raise(ErrorCode::BadConfig, "a forked checkpoint is still pending");

    auto hold = gate_.hold(std::chrono::milliseconds(cfg_quiesce_ms_));
    dispatch_wrapped(PluginEvent::PreCheckpoint);

    uint32_t flags = opts.compress ? kFlagCompressed : 0;
    std::vector<Section> sections = build_full_sections(path, true);
    size_t mem_idx = 0;
    for (size_t i = 0; i < sections.size(); i++)
      if (sections[i].type == SectionType::Memory) mem_idx = i;

    Manifest m;
    m.instr_count = machine_->instr_count();
    m.created_unix = static_cast<uint64_t>(::time(nullptr));

    pid_t pid = ::fork();
    if (pid < 0) raise(ErrorCode::IoFailure, "fork failed");
    if (pid == 0) {
      int code = 0;
      try {
        sections[mem_idx].raw.assign(machine_->memory().data(),
                                     machine_->memory().data() +
                                         machine_->memory().size());
        write_image_file(path, flags, m, sections);
      } catch (const Error& e) {
        code = 10 + static_cast<int>(e.code());
      } catch (...) {
        code = 60;
      }
      ::_exit(code);
    }

    machine_->clear_dirty();
    forked_pending_ = true;
    dispatch_wrapped(PluginEvent::Resume);
    return {pid, path};
  }

  // True once the serializer child has exited; join() will then not block.
  // Probes with WNOWAIT so the child stays reapable by join().
  bool forked_done(const PendingCheckpoint& pending) {
    siginfo_t si{};
    si.si_pid = 0;
    if (::waitid(P_PID, static_cast<id_t>(pending.pid), &si,
                 WEXITED | WNOWAIT | WNOHANG) != 0)
      raise(ErrorCode::IoFailure, "waitid failed");
    return si.si_pid == pending.pid;
  }

  // Collects a forked checkpoint. On success records it as the latest image;
  // on failure the dirty map is repoisoned so a later incremental cannot
  // silently build on state the failed image never captured.
  Digest join(const PendingCheckpoint& pending) {
    int status = 0;
    if (::waitpid(pending.pid, &status, 0) != pending.pid)
      raise(ErrorCode::IoFailure, "waitpid failed");
    forked_pending_ = false;
    if (WIFEXITED(status) && WEXITSTATUS(status) == 0) {
      ImageFile img = ImageFile::open(pending.path);
      last_path_ = pending.path;
      last_hash_ = img.manifest().content_hash;
      has_last_ = true;
      return last_hash_;
    }
    machine_->mark_all_dirty();
    if (WIFEXITED(status) && WEXITSTATUS(status) >= 10 &&
        WEXITSTATUS(status) < 60) {
      auto code = static_cast<ErrorCode>(WEXITSTATUS(status) - 10);
      raise(code, "forked checkpoint failed: " +
                      std::string(error_code_name(code)));
    }
    raise(ErrorCode::IoFailure, "forked checkpoint child died");
  }

  static std::unique_ptr<Session> restart(const std::string& image_path,
                                          const RestartOptions& opts = {}) {
    namespace fs = std::filesystem;
    ImageFile leaf = ImageFile::open(image_path);
    bool fast = leaf.flags() & kFlagFastRestart;
    leaf.verify(fast);

    std::string dir = opts.search_dir.empty()
                          ? fs::path(image_path).parent_path().string()
                          : opts.search_dir;
    if (dir.empty()) dir = ".";

    // Newest-first chain, root full image last.
    std::vector<ImageFile> chain;
    chain.push_back(std::move(leaf));
    while (chain.back().flags() & kFlagIncremental) {
      if (chain.size() > 64)
        raise(ErrorCode::BrokenChain, "delta chain too deep");
      const ImageFile& cur = chain.back();
      auto delta = decode_delta_index(
          cur.read_section(cur.require(SectionType::DeltaIndex, "delta")));
      ImageFile base = find_base(dir, delta.base_hash);
      base.verify(base.flags() & kFlagFastRestart);
      chain.push_back(std::move(base));
    }

    auto s = std::unique_ptr<Session>(new Session());

    const ImageFile& top = chain.front();
    Bytes mrec = top.read_section(top.require(SectionType::Device, "machine"));
    if (mrec.size() != 17) raise(ErrorCode::CorruptImage, "machine record size");
    ByteReader mr(mrec);
    uint64_t mem_size = mr.u64();
    uint64_t entry = mr.u64();
    bool halted = mr.u8() != 0;
    if (mem_size == 0 || mem_size % kPageSize != 0)
      raise(ErrorCode::CorruptImage, "bad memory size in image");

    const ImageFile& root = chain.back();
    if (fast && chain.size() == 1) {
      size_t mi = root.require(SectionType::Memory, "memory");
      if (root.table()[mi].raw_len != mem_size)
        raise(ErrorCode::CorruptImage, "memory section size mismatch");
      s->machine_ = std::make_unique<GuestMachine>(root.map_section(mi), entry);
    } else {
      size_t mi = root.require(SectionType::Memory, "memory");
      Bytes mem = root.read_section(mi);
      if (mem.size() != mem_size)
        raise(ErrorCode::CorruptImage, "memory section size mismatch");
      for (size_t i = chain.size() - 1; i > 0; i--) {
        const ImageFile& delta_img = chain[i - 1];
        auto delta = decode_delta_index(delta_img.read_section(
            delta_img.require(SectionType::DeltaIndex, "delta")));
        Bytes pages = delta_img.read_section(
            delta_img.require(SectionType::Memory, "pages"));
        if (pages.size() != delta.pages.size() * kPageSize)
          raise(ErrorCode::CorruptImage, "delta page payload size mismatch");
        for (size_t j = 0; j < delta.pages.size(); j++) {
          uint64_t off = uint64_t(delta.pages[j]) * kPageSize;
          if (off + kPageSize > mem.size())
            raise(ErrorCode::BrokenChain, "delta page outside base memory");
          std::memcpy(mem.data() + off, pages.data() + j * kPageSize, kPageSize);
        }
      }
      GuestMemory gm = GuestMemory::anonymous(mem_size);
      std::memcpy(gm.data(), mem.data(), mem_size);
      s->machine_ = std::make_unique<GuestMachine>(std::move(gm), entry);
    }

    const ImageFile& img = chain.front();
    s->machine_->set_console(
        img.read_section(img.require(SectionType::Device, "console")));
    s->machine_->store_instr_count(img.manifest().instr_count);
    s->machine_->set_halted(halted);
    s->gate_.bind(s->machine_.get());

    size_t di = img.find(SectionType::DiskSnapshotRef, "disk");
    if (di != ImageFile::npos) {
      auto ref = decode_snapshot_ref(img.read_section(di));
      std::string target = opts.disk_target.empty()
                               ? image_path + ".work.disk"
                               : opts.disk_target;
      restore_file(ref, dir, target);
      s->machine_->attach_disk(DiskDevice::open(target));
      s->disk_path_ = target;
    }

    for (size_t i = 1; i < img.table().size(); i++) {
      if (img.table()[i].type != SectionType::PluginBlob) continue;
      auto p = make_plugin(img.table()[i].name);
      p->store() = decode_store(img.read_section(i));
      s->plugins_.push_back(std::move(p));
    }

    s->launch_log_ =
        img.read_section(img.require(SectionType::LaunchLog, "launch"));
    s->log_frozen_ = true;
    auto calls = decode_call_log(s->launch_log_);
    bool made_shell = false;
    for (auto& c : calls) {
      if (c.op == CallOp::CreateVmShell) {
        DriverCall replay = c;
        s->vm_ = s->host_call(replay).vm;
        made_shell = true;
        s->membuf_ = buffer_registry().add(s->machine_->memory().data(),
                                           s->machine_->memory().size());
      } else if (c.op == CallOp::MapSharedRegion) {
        DriverCall replay = c;
        s->host_call(replay);
      }
      // Everything else the log remembers is state the plugins restore.
    }
    if (!made_shell)
      raise(ErrorCode::CorruptImage, "launch log lacks a shell record");

    dispatch_event(s->plugins_, *s, PluginEvent::PostRestart);

    s->machine_->clear_dirty();
    s->last_path_ = image_path;
    s->last_hash_ = img.manifest().content_hash;
    s->has_last_ = true;
    return s;
  }

 private:
  Session() = default;

  CallResult raw_call(DriverCall& c) {
    if (!log_frozen_ && c.op != CallOp::GetState) {
      Bytes rec = encode_call(c);
      launch_log_.insert(launch_log_.end(), rec.begin(), rec.end());
    }
    CallResult r;
    switch (c.op) {
      case CallOp::CreateVmShell: r.vm = driver_.create_vm_shell(); break;
      case CallOp::DestroyVm: driver_.destroy_vm(vm_); break;
      case CallOp::SetMemorySlot: driver_.set_memory_slot(vm_, c.slot); break;
      case CallOp::GetState: r.payload = driver_.get_state(vm_, c.kind); break;
      case CallOp::SetState: driver_.set_state(vm_, c.kind, c.payload); break;
      case CallOp::MapSharedRegion:
        r.region = driver_.map_shared_region(vm_, c.region_key, c.region_len);
        break;
      case CallOp::RunGuest:
        r.outcome = driver_.run(vm_, *machine_, c.budget, current_port_);
        break;
    }
    return r;
  }

  void dispatch_wrapped(PluginEvent ev) {
    try {
      dispatch_event(plugins_, *this, ev);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::HandlerFailed)
        raise(ErrorCode::PluginFailed, e.what());
      throw;
    }
  }

  Bytes machine_record() const {
    Bytes rec;
    put_u64(rec, machine_->mem_size());
    put_u64(rec, machine_->entry());
    put_u8(rec, machine_->halted() ? 1 : 0);
    return rec;
  }

  void append_common_tail(std::vector<Section>& sections,
                          const std::string& image_path) {
    for (const auto& p : plugins_)
      sections.push_back(
          {SectionType::PluginBlob, p->name(), encode_store(p->store())});
    sections.push_back({SectionType::LaunchLog, "launch", launch_log_});
    if (!disk_path_.empty()) {
      std::string dir =
          std::filesystem::path(image_path).parent_path().string();
      if (dir.empty()) dir = ".";
      SnapshotRef ref = snapshot_file(disk_path_, dir);
      sections.push_back(
          {SectionType::DiskSnapshotRef, "disk", encode_snapshot_ref(ref)});
    }
  }

  std::vector<Section> build_full_sections(const std::string& image_path,
                                           bool defer_memory = false) {
    std::vector<Section> sections;
    sections.push_back({SectionType::Device, "machine", machine_record()});
    sections.push_back({SectionType::Device, "console", machine_->console()});
    Bytes mem;
    if (!defer_memory)
      mem.assign(machine_->memory().data(),
                 machine_->memory().data() + machine_->memory().size());
    sections.push_back({SectionType::Memory, "memory", std::move(mem)});
    append_common_tail(sections, image_path);
    return sections;
  }

  std::vector<Section> build_delta_sections(const std::string& image_path,
                                            const CheckpointOptions& opts) {
    if (!has_last_)
      raise(ErrorCode::BadConfig, "incremental checkpoint needs a base");
    std::string base_path = opts.base.empty() ? last_path_ : opts.base;
    ImageFile base = ImageFile::open(base_path);
    if (base.manifest().content_hash != last_hash_)
      raise(ErrorCode::BadConfig,
            "base image is not this session's latest checkpoint");

    DeltaIndex delta;
    delta.base_hash = last_hash_;
    delta.pages = machine_->dirty_pages();
    Bytes pages;
    pages.reserve(delta.pages.size() * kPageSize);
    for (uint32_t p : delta.pages) {
      const uint8_t* src = machine_->memory().data() + uint64_t(p) * kPageSize;
      pages.insert(pages.end(), src, src + kPageSize);
    }

    std::vector<Section> sections;
    sections.push_back({SectionType::Device, "machine", machine_record()});
    sections.push_back({SectionType::Device, "console", machine_->console()});
    sections.push_back({SectionType::Memory, "pages", std::move(pages)});
    append_common_tail(sections, image_path);
    sections.push_back(
        {SectionType::DeltaIndex, "delta", encode_delta_index(delta)});
    return sections;
  }

  static ImageFile find_base(const std::string& dir, const Digest& want) {
    namespace fs = std::filesystem;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (!e.is_regular_file()) continue;
      if (e.path().extension() == ".gckp") names.push_back(e.path().string());
    }
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      try {
        ImageFile img = ImageFile::open(name);
        if (img.manifest().content_hash == want) return img;
      } catch (const Error&) {
        // Unreadable neighbors do not block the search.
      }
    }
    raise(ErrorCode::MissingBase,
          "no image in " + dir + " has hash " + digest_hex(want));
  }

  Driver driver_;
  std::unique_ptr<GuestMachine> machine_;
  std::vector<std::unique_ptr<Plugin>> plugins_;
  ExecGate gate_;
  VmHandle vm_ = 0;
  BufferHandle membuf_ = 0;
  MessagePort* current_port_ = nullptr;
  Bytes launch_log_;
  bool log_frozen_ = false;
  std::string disk_path_;
  uint32_t cfg_quiesce_ms_ = 5000;
  bool forked_pending_ = false;
  bool has_last_ = false;
  std::string last_path_;
  Digest last_hash_{};
};

// Folds a one-level delta onto its full base, producing the full image the
// session would have written at the delta's instant. The delta's manifest
// (instruction count, timestamp) carries over; only the page payload and
// the delta index change shape.
inline void materialize(const std::string& base_path,
                        const std::string& delta_path,
                        const std::string& out_path) {
  ImageFile delta = ImageFile::open(delta_path);
  if (!(delta.flags() & kFlagIncremental))
    raise(ErrorCode::BadConfig, "not an incremental image: " + delta_path);
  delta.verify();
  ImageFile base = ImageFile::open(base_path);
  if (base.flags() & kFlagIncremental)
    raise(ErrorCode::BadConfig, "base is itself incremental: " + base_path);
  base.verify(base.flags() & kFlagFastRestart);

  auto didx = decode_delta_index(
      delta.read_section(delta.require(SectionType::DeltaIndex, "delta")));
  if (didx.base_hash != base.manifest().content_hash)
    raise(ErrorCode::MissingBase, "delta does not chain to this base");

  Bytes mem = base.read_section(base.require(SectionType::Memory, "memory"));
  Bytes pages = delta.read_section(delta.require(SectionType::Memory, "pages"));
  if (pages.size() != didx.pages.size() * kPageSize)
    raise(ErrorCode::CorruptImage, "delta page payload size mismatch");
  for (size_t j = 0; j < didx.pages.size(); j++) {
    uint64_t off = uint64_t(didx.pages[j]) * kPageSize;
    if (off + kPageSize > mem.size())
      raise(ErrorCode::BrokenChain, "delta page outside base memory");
    std::memcpy(mem.data() + off, pages.data() + j * kPageSize, kPageSize);
  }

  std::vector<Section> sections;
  for (size_t i = 1; i < delta.table().size(); i++) {
    const auto& e = delta.table()[i];
    if (e.type == SectionType::DeltaIndex) continue;
    if (e.type == SectionType::Memory && e.name == "pages") {
      sections.push_back({SectionType::Memory, "memory", mem});
      continue;
    }
    sections.push_back({e.type, e.name, delta.read_section(i)});
  }
  Manifest m;
  m.instr_count = delta.manifest().instr_count;
  m.created_unix = delta.manifest().created_unix;
  write_image_file(out_path, delta.flags() & kFlagCompressed, m, sections);
}

}  // namespace gckpt
