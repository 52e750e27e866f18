#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gckpt/bytes.hpp"
#include "gckpt/driver.hpp"
#include "gckpt/error.hpp"

namespace gckpt {

// Every driver-domain operation a session makes is reified as a call record so
// wrappers can observe or rewrite it, and so the launch phase can be logged
// and replayed.
enum class CallOp : uint16_t {
  CreateVmShell = 1,
  DestroyVm = 2,
  SetMemorySlot = 3,
  GetState = 4,
  SetState = 5,
  MapSharedRegion = 6,
  RunGuest = 7,
};

struct DriverCall {
  CallOp op{};
  MemorySlot slot{};        // SetMemorySlot
  StateKind kind{};         // GetState, SetState
  Bytes payload;            // SetState
  uint64_t region_key = 0;  // MapSharedRegion
  uint64_t region_len = 0;
  uint64_t budget = 0;      // RunGuest
};

struct CallResult {
  VmHandle vm = 0;           // CreateVmShell
  Bytes payload;             // GetState
  RegionHandle region = 0;   // MapSharedRegion
  StepOutcome outcome{};     // RunGuest
};

inline Bytes encode_call(const DriverCall& c) {
  Bytes body;
  switch (c.op) {
    case CallOp::CreateVmShell:
    case CallOp::DestroyVm:
      break;
    case CallOp::SetMemorySlot:
      put_u32(body, c.slot.slot_id);
      put_u64(body, c.slot.guest_base);
      put_u64(body, c.slot.len);
      put_u64(body, c.slot.buffer);
      break;
    case CallOp::GetState:
      put_u16(body, static_cast<uint16_t>(c.kind));
      break;
    case CallOp::SetState: {
      Bytes framed = frame_blob(c.kind, c.payload);
      body.insert(body.end(), framed.begin(), framed.end());
      break;
    }
    case CallOp::MapSharedRegion:
      put_u64(body, c.region_key);
      put_u64(body, c.region_len);
      break;
    case CallOp::RunGuest:
      put_u64(body, c.budget);
      break;
  }
  Bytes out;
  put_u16(out, static_cast<uint16_t>(c.op));
  put_u32(out, static_cast<uint32_t>(body.size()));
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

inline Bytes encode_call_log(const std::vector<DriverCall>& calls) {
  Bytes out;
  for (const auto& c : calls) {
    Bytes one = encode_call(c);
    out.insert(out.end(), one.begin(), one.end());
  }
  return out;
}

inline std::vector<DriverCall> decode_call_log(std::span<const uint8_t> in) {
  std::vector<DriverCall> out;
  ByteReader r(in);
  while (!r.done()) {
    uint16_t op = r.u16();
    uint32_t len = r.u32();
    Bytes body = r.bytes(len);
    ByteReader br(body);
    DriverCall c;
    c.op = static_cast<CallOp>(op);
    switch (c.op) {
      case CallOp::CreateVmShell:
      case CallOp::DestroyVm:
        break;
      case CallOp::SetMemorySlot:
        c.slot.slot_id = br.u32();
        c.slot.guest_base = br.u64();
        c.slot.len = br.u64();
        c.slot.buffer = br.u64();
        break;
      case CallOp::GetState:
        c.kind = static_cast<StateKind>(br.u16());
        break;
      case CallOp::SetState: {
        auto [kind, payload] = parse_blob(body);
        c.kind = kind;
        c.payload = std::move(payload);
        break;
      }
      case CallOp::MapSharedRegion:
        c.region_key = br.u64();
        c.region_len = br.u64();
        break;
      case CallOp::RunGuest:
        c.budget = br.u64();
        break;
      default:
        raise(ErrorCode::DecodeError, "unknown call op in log");
    }
    if (c.op != CallOp::SetState && !br.done())
      raise(ErrorCode::DecodeError, "trailing bytes in call record");
    out.push_back(std::move(c));
  }
  return out;
}

enum class PluginEvent : uint8_t {
  PreCheckpoint = 1,
  PostRestart = 2,
  Resume = 3,
};

// What a plugin may touch: the call chain (so state access stays wrappable),
// the machine, and the identity of the buffer currently backing guest memory.
class PluginHost {
 public:
  virtual ~PluginHost() = default;
  virtual CallResult host_call(DriverCall& call) = 0;
  virtual Driver& host_driver() = 0;
  virtual GuestMachine& host_machine() = 0;
  virtual VmHandle host_vm() const = 0;
  virtual BufferHandle host_machine_buffer() const = 0;
};

struct PluginContext {
  PluginHost& host;

  Bytes get_state(StateKind kind) {
    DriverCall c;
    c.op = CallOp::GetState;
    c.kind = kind;
    return host.host_call(c).payload;
  }

  void set_state(StateKind kind, Bytes payload) {
    DriverCall c;
    c.op = CallOp::SetState;
    c.kind = kind;
    c.payload = std::move(payload);
    host.host_call(c);
  }
};

using CallChain = std::function<CallResult(DriverCall&)>;

// A plugin is a named wrapper around the call API plus event handlers and a
// private key-value store. The store rides along in every checkpoint image
// and comes back verbatim at restart; it is the only place a plugin can keep
// something it will need on the far side.
class Plugin {
 public:
  explicit Plugin(std::string name) : name_(std::move(name)) {}
  virtual ~Plugin() = default;

  const std::string& name() const { return name_; }

  virtual CallResult wrap(DriverCall& call, PluginContext& ctx, const CallChain& next) {
    (void)ctx;
    return next(call);
  }

  virtual void on_event(PluginEvent event, PluginContext& ctx) {
    (void)event;
    (void)ctx;
  }

  std::map<std::string, Bytes>& store() { return store_; }
  const std::map<std::string, Bytes>& store() const { return store_; }

 private:
  std::string name_;
  std::map<std::string, Bytes> store_;
};

inline Bytes encode_store(const std::map<std::string, Bytes>& store) {
  Bytes out;
  put_u32(out, static_cast<uint32_t>(store.size()));
  for (const auto& [key, val] : store) {
    put_u16(out, static_cast<uint16_t>(key.size()));
    put_bytes(out, key.data(), key.size());
    put_u32(out, static_cast<uint32_t>(val.size()));
    put_bytes(out, val.data(), val.size());
  }
  return out;
}

inline std::map<std::string, Bytes> decode_store(std::span<const uint8_t> in) {
  ByteReader r(in);
  uint32_t n = r.u32();
  std::map<std::string, Bytes> out;
  for (uint32_t i = 0; i < n; i++) {
    std::string key = r.str(r.u16());
    uint32_t len = r.u32();
    out[key] = r.bytes(len);
  }
  if (!r.done()) raise(ErrorCode::DecodeError, "trailing bytes in plugin store");
  return out;
}

// Engine errors pass through unchanged so a restore failure keeps its precise
// code; anything else a handler throws becomes HandlerFailed.
inline void dispatch_event(std::vector<std::unique_ptr<Plugin>>& plugins,
                           PluginHost& host, PluginEvent event) {
  PluginContext ctx{host};
  auto fire = [&](Plugin& p) {
    try {
      p.on_event(event, ctx);
    } catch (const Error&) {
      throw;
    } catch (const std::exception& e) {
      raise(ErrorCode::HandlerFailed, p.name() + ": " + e.what());
    } catch (...) {
      raise(ErrorCode::HandlerFailed, p.name() + ": handler threw");
    }
  };
  if (event == PluginEvent::PostRestart) {
    for (auto it = plugins.rbegin(); it != plugins.rend(); ++it) fire(**it);
  } else {
    for (auto& p : plugins) fire(*p);
  }
}

inline CallResult run_chain(std::vector<std::unique_ptr<Plugin>>& plugins,
                            size_t index, PluginHost& host, DriverCall& call,
                            const CallChain& raw) {
  if (index == plugins.size()) return raw(call);
  PluginContext ctx{host};
  return plugins[index]->wrap(call, ctx, [&](DriverCall& inner) {
    return run_chain(plugins, index + 1, host, inner, raw);
  });
}

namespace plugins {

// Captures driver-domain state at checkpoint and rebuilds it after restart.
// The timer is the interesting part: it cannot be read back, so the wrap hook
// records the last configuration on its way in.
class VmDriverPlugin : public Plugin {
 public:
  explicit VmDriverPlugin(std::string name, bool patch_handles)
      : Plugin(std::move(name)), patch_(patch_handles) {}

  CallResult wrap(DriverCall& call, PluginContext& ctx, const CallChain& next) override {
    (void)ctx;
    CallResult res = next(call);
    if (call.op == CallOp::SetState && call.kind == StateKind::Pit)
      store()["pit"] = frame_blob(StateKind::Pit, call.payload);
    return res;
  }

  void on_event(PluginEvent event, PluginContext& ctx) override {
    if (event == PluginEvent::PreCheckpoint)
      capture(ctx);
    else if (event == PluginEvent::PostRestart)
      restore(ctx);
  }

 private:
  void capture(PluginContext& ctx) {
    store()["vcpu"] = frame_blob(StateKind::Vcpu, ctx.get_state(StateKind::Vcpu));
    store()["irqchip"] =
        frame_blob(StateKind::Irqchip, ctx.get_state(StateKind::Irqchip));
    store()["tss"] = frame_blob(StateKind::TssAddr, ctx.get_state(StateKind::TssAddr));
    store()["slots"] = frame_blob(StateKind::Slots, ctx.get_state(StateKind::Slots));
    store()["regions"] =
        frame_blob(StateKind::Regions, ctx.get_state(StateKind::Regions));
    Bytes membuf;
    put_u64(membuf, ctx.host.host_machine_buffer());
    store()["membuf"] = membuf;
  }

  Bytes saved(const char* key, StateKind kind) {
    auto it = store().find(key);
    if (it == store().end())
      throw std::runtime_error(std::string("missing saved state: ") + key);
    auto [k, payload] = parse_blob(it->second);
    if (k != kind) throw std::runtime_error("saved state kind mismatch");
    return payload;
  }

  void restore(PluginContext& ctx) {
    auto old_regions = decode_regions(saved("regions", StateKind::Regions));
    auto slots = decode_slots(saved("slots", StateKind::Slots));

    if (patch_) {
      // The shell this runs against is freshly re-launched: same region keys,
      // new handles, new backing buffers. Everything the saved state says by
      // handle has to be rewritten before it can be applied.
      auto it = store().find("membuf");
      if (it == store().end()) throw std::runtime_error("missing saved state: membuf");
      uint64_t old_membuf = ByteReader(it->second).u64();
      BufferHandle new_membuf = ctx.host.host_machine_buffer();

      auto fresh = decode_regions(ctx.get_state(StateKind::Regions));
      std::map<uint64_t, const RegionInfo*> by_key;
      for (const auto& g : fresh) by_key[g.key] = &g;

      std::map<BufferHandle, BufferHandle> buffer_map{{old_membuf, new_membuf}};
      for (auto& g : old_regions) {
        auto hit = by_key.find(g.key);
        if (hit == by_key.end()) continue;  // let set_state diagnose the stale handle
        buffer_map[g.buffer] = hit->second->buffer;
        g.handle = hit->second->handle;
        g.buffer = hit->second->buffer;
      }
      for (auto& s : slots) {
        auto hit = buffer_map.find(s.buffer);
        if (hit != buffer_map.end()) s.buffer = hit->second;
      }
    }

    ctx.set_state(StateKind::Regions, encode_regions(old_regions));
    ctx.set_state(StateKind::Slots, encode_slots(slots));
    ctx.set_state(StateKind::TssAddr, saved("tss", StateKind::TssAddr));
    ctx.set_state(StateKind::Irqchip, saved("irqchip", StateKind::Irqchip));
    ctx.set_state(StateKind::Vcpu, saved("vcpu", StateKind::Vcpu));
    auto pit = store().find("pit");
    if (pit != store().end()) {
      auto [kind, payload] = parse_blob(pit->second);
      if (kind != StateKind::Pit) throw std::runtime_error("pit record corrupt");
      ctx.set_state(StateKind::Pit, payload);
    }
  }

  bool patch_;
};

// Record-only wrapper used to measure interposition cost and to prove that
// watching the call stream does not perturb the guest.
class RecorderPlugin : public Plugin {
 public:
  explicit RecorderPlugin(std::string name) : Plugin(std::move(name)) {}

  static constexpr size_t kMaxLog = 1 << 16;

  CallResult wrap(DriverCall& call, PluginContext& ctx, const CallChain& next) override {
    (void)ctx;
    Bytes& log = store()["calls"];
    if (log.size() + 2 <= kMaxLog) put_u16(log, static_cast<uint16_t>(call.op));
    return next(call);
  }

  void on_event(PluginEvent event, PluginContext& ctx) override {
    (void)ctx;
    Bytes& log = store()["events"];
    if (log.size() < kMaxLog) put_u8(log, static_cast<uint8_t>(event));
  }
};

}  // namespace plugins

using PluginFactory = std::function<std::unique_ptr<Plugin>()>;

inline std::map<std::string, PluginFactory>& plugin_factories() {
  static std::map<std::string, PluginFactory> factories = [] {
    std::map<std::string, PluginFactory> f;
    f["vm_driver"] = [] {
      return std::make_unique<plugins::VmDriverPlugin>("vm_driver", true);
    };
    // Identical to vm_driver except it skips the handle rewrite after restart;
    // exists to demonstrate why that step is not optional.
    f["vm_driver_nopatch"] = [] {
      return std::make_unique<plugins::VmDriverPlugin>("vm_driver_nopatch", false);
    };
    f["recorder"] = [] { return std::make_unique<plugins::RecorderPlugin>("recorder"); };
    return f;
  }();
  return factories;
}

inline void register_plugin_type(const std::string& name, PluginFactory factory) {
  auto& f = plugin_factories();
  if (f.count(name)) raise(ErrorCode::DuplicateName, "plugin type exists: " + name);
  f[name] = std::move(factory);
}

inline std::unique_ptr<Plugin> make_plugin(const std::string& name) {
  auto& f = plugin_factories();
  auto it = f.find(name);
  if (it == f.end()) raise(ErrorCode::BadConfig, "unknown plugin: " + name);
  return it->second();
}

}  // namespace gckpt
