#pragma once

#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "gckpt/engine.hpp"
#include "json.hpp"

namespace gckpt {

namespace detail {

inline std::string base64_encode(std::span<const uint8_t> in) {
  static const char* tab =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= in.size(); i += 3) {
    uint32_t v = (in[i] << 16) | (in[i + 1] << 8) | in[i + 2];
    out += tab[v >> 18];
    out += tab[(v >> 12) & 63];
    out += tab[(v >> 6) & 63];
    out += tab[v & 63];
  }
  if (i + 1 == in.size()) {
    uint32_t v = in[i] << 16;
    out += tab[v >> 18];
    out += tab[(v >> 12) & 63];
    out += "==";
  } else if (i + 2 == in.size()) {
    uint32_t v = (in[i] << 16) | (in[i + 1] << 8);
    out += tab[v >> 18];
    out += tab[(v >> 12) & 63];
    out += tab[(v >> 6) & 63];
    out += '=';
  }
  return out;
}

inline Bytes base64_decode(const std::string& in) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) raise(ErrorCode::DecodeError, "base64 length");
  Bytes out;
  out.reserve(in.size() / 4 * 3);
  for (size_t i = 0; i < in.size(); i += 4) {
    int pad = 0;
    uint32_t v = 0;
    for (size_t j = 0; j < 4; j++) {
      char c = in[i + j];
      if (c == '=') {
        // Padding is only legal in the last one or two positions.
        if (i + 4 != in.size() || j < 2 || (j == 2 && in[i + 3] != '='))
          raise(ErrorCode::DecodeError, "base64 padding");
        pad++;
        v <<= 6;
        continue;
      }
      int d = val(c);
      if (d < 0) raise(ErrorCode::DecodeError, "base64 alphabet");
      v = (v << 6) | static_cast<uint32_t>(d);
    }
    out.push_back(static_cast<uint8_t>(v >> 16));
    if (pad < 2) out.push_back(static_cast<uint8_t>(v >> 8));
    if (pad < 1) out.push_back(static_cast<uint8_t>(v));
  }
  return out;
}

}  // namespace detail

// A FIFO virtual channel between two guests. During a global snapshot the
// queue additionally carries marker tokens; messages behind a marker were
// sent after the sender's cut and never belong in the image.
class ChannelQueue {
 public:
  struct Entry {
    bool marker = false;
    Bytes data;
  };

  void push(Bytes msg) { q_.push_back({false, std::move(msg)}); }
  void push_marker() { q_.push_back({true, {}}); }

  // Delivery as the receiving guest sees it; marker arrivals are reported,
  // not hidden, because receipt of the marker is a protocol event.
  std::optional<Entry> pop() {
    if (q_.empty()) return std::nullopt;
    Entry e = std::move(q_.front());
    q_.pop_front();
    return e;
  }

  // Live-run delivery. Outside a snapshot the queue never holds markers.
  std::optional<Bytes> pop_message() {
    if (q_.empty()) return std::nullopt;
    if (q_.front().marker)
      raise(ErrorCode::ChannelStuck, "marker reached a live receiver");
    Bytes b = std::move(q_.front().data);
    q_.pop_front();
    return b;
  }

  // The in-flight set for the image: everything ahead of the first marker.
  // Copies rather than drains; the live run still owes these to the receiver.
  std::vector<Bytes> capture_to_marker() const {
    std::vector<Bytes> out;
    for (const auto& e : q_) {
      if (e.marker) return out;
      out.push_back(e.data);
    }
    raise(ErrorCode::ChannelStuck, "no marker in channel");
  }

  void remove_first_marker() {
    for (auto it = q_.begin(); it != q_.end(); ++it)
      if (it->marker) {
        q_.erase(it);
        return;
      }
    raise(ErrorCode::ChannelStuck, "no marker in channel");
  }

  bool has_marker() const {
    for (const auto& e : q_)
      if (e.marker) return true;
    return false;
  }

  void refill(std::vector<Bytes> msgs) {
    q_.clear();
    for (auto& m : msgs) q_.push_back({false, std::move(m)});
  }

  size_t size() const { return q_.size(); }
  bool empty() const { return q_.empty(); }
  const std::deque<Entry>& entries() const { return q_; }

 private:
  std::deque<Entry> q_;
};

struct ClusterMember {
  uint32_t id = 0;
  SessionConfig config;
};

struct ClusterChannelSpec {
  uint32_t src = 0;
  uint32_t dst = 0;
};

struct ClusterConfig {
  std::vector<ClusterMember> members;
  std::vector<ClusterChannelSpec> channels;
  uint64_t quantum = 1000;  // scheduling grain, in instructions
};

struct ClusterImageInfo {
  std::string dir;
  Digest manifest_hash{};
  std::vector<std::pair<uint32_t, Digest>> members;  // id, image hash
};

inline constexpr const char* kClusterManifestName = "cluster.json";

// N sessions joined by FIFO message channels, driven by one deterministic
// scheduler so a restarted ensemble replays the joint execution exactly.
class Cluster {
 public:
  static Cluster launch(const ClusterConfig& cfg) {
    Cluster c(cfg.quantum);
    if (cfg.members.empty()) raise(ErrorCode::BadConfig, "empty cluster");
    if (cfg.quantum == 0) raise(ErrorCode::BadConfig, "zero quantum");
    for (const auto& m : cfg.members) {
      if (c.index_of(m.id))
        raise(ErrorCode::BadConfig, "duplicate member id");
      c.nodes_.push_back({m.id, Session::launch(m.config)});
    }
    c.add_channels(cfg.channels, ErrorCode::BadConfig);
    return c;
  }

  size_t size() const { return nodes_.size(); }
  uint64_t quantum() const { return quantum_; }

  Session& member(uint32_t id) {
    auto i = index_of(id);
    if (!i) raise(ErrorCode::InvalidHandle, "no such member");
    return *nodes_[*i].session;
  }

  std::vector<uint32_t> member_ids() const {
    std::vector<uint32_t> out;
    for (const auto& n : nodes_) out.push_back(n.id);
    return out;
  }

  ChannelQueue& channel(uint32_t src, uint32_t dst) {
    auto it = channels_.find({src, dst});
    if (it == channels_.end()) raise(ErrorCode::InvalidHandle, "no such channel");
    return it->second;
  }

  bool has_channel(uint32_t src, uint32_t dst) const {
    return channels_.count({src, dst}) != 0;
  }

  // One scheduling turn: the non-halted guest with the least completed
  // quanta runs to its next quantum boundary (ties to the lowest id). The
  // choice depends only on restored instruction counts, which is what makes
  // the post-restart schedule a continuation of the original.
  bool run_turn() {
    Node* pick = nullptr;
    uint64_t best = 0;
    for (auto& n : nodes_) {
      if (n.session->machine().halted()) continue;
      uint64_t key = n.session->machine().instr_count() / quantum_;
      if (!pick || key < best) {
        pick = &n;
        best = key;
      }
    }
    if (!pick) return false;
    uint64_t done = pick->session->machine().instr_count();
    uint64_t budget = quantum_ - done % quantum_;
    MessagePort port = port_for(pick->id);
    pick->session->run(budget, &port);
    return true;
  }

  uint64_t run_turns(uint64_t n) {
    uint64_t t = 0;
    while (t < n && run_turn()) t++;
    return t;
  }

  bool all_halted() const {
    for (const auto& n : nodes_)
      if (!n.session->machine().halted()) return false;
    return true;
  }

  // Marker-based global snapshot. Every guest is already at a boundary when
  // this runs, so cuts are taken member by member: emit markers on the
  // member's outgoing channels, then copy each channel's pre-marker prefix
  // as its captured in-flight set, then checkpoint every member.
  ClusterImageInfo global_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    for (auto& n : nodes_)
      for (auto& [key, q] : channels_)
        if (key.first == n.id) q.push_marker();

    std::map<std::pair<uint32_t, uint32_t>, std::vector<Bytes>> captured;
    for (auto& [key, q] : channels_) {
      try {
        captured[key] = q.capture_to_marker();
        q.remove_first_marker();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::ChannelStuck) throw;
        raise(ErrorCode::ChannelStuck, channel_name(key) + ": " + e.what());
      }
    }

    ClusterImageInfo info;
    info.dir = dir;
    for (auto& n : nodes_) {
      std::string img = (fs::path(dir) / member_image_name(n.id)).string();
      try {
        info.members.emplace_back(n.id, n.session->checkpoint(img));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::QuiesceTimeout) throw;
        raise(ErrorCode::QuiesceTimeout,
              "session " + std::to_string(n.id) + ": " + e.what());
      }
    }

    info.manifest_hash = manifest_hash(info.members, captured);
    write_manifest(dir, info, captured);
    return info;
  }

  static Cluster global_restart(const std::string& dir) {
    namespace fs = std::filesystem;
    nlohmann::json j;
    {
      std::ifstream in(fs::path(dir) / kClusterManifestName);
      if (!in) raise(ErrorCode::CorruptImage, "missing " +
                     std::string(kClusterManifestName));
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::CorruptImage,
              std::string("bad cluster manifest: ") + e.what());
      }
    }

    uint64_t quantum = 0;
    std::vector<std::pair<uint32_t, std::string>> members;
    std::vector<ClusterChannelSpec> topo;
    std::map<std::pair<uint32_t, uint32_t>, std::vector<Bytes>> captured;
    Digest recorded{};
    try {
      if (j.at("version").get<uint32_t>() != 1)
        raise(ErrorCode::CorruptImage, "unknown cluster manifest version");
      quantum = j.at("quantum").get<uint64_t>();
      for (const auto& m : j.at("members"))
        members.emplace_back(m.at("id").get<uint32_t>(),
                             m.at("image").get<std::string>());
      for (const auto& ch : j.at("channels")) {
        ClusterChannelSpec spec{ch.at("src").get<uint32_t>(),
                                ch.at("dst").get<uint32_t>()};
        topo.push_back(spec);
        std::vector<Bytes> msgs;
        for (const auto& s : ch.at("messages"))
          msgs.push_back(detail::base64_decode(s.get<std::string>()));
        captured[{spec.src, spec.dst}] = std::move(msgs);
      }
      std::string hex = j.at("manifest_hash").get<std::string>();
      recorded = digest_from_hex(hex);
    } catch (const nlohmann::json::exception& e) {
      raise(ErrorCode::CorruptImage,
            std::string("bad cluster manifest: ") + e.what());
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DecodeError) throw;
      raise(ErrorCode::CorruptImage,
            std::string("bad cluster manifest: ") + e.what());
    }

    if (members.empty()) raise(ErrorCode::CorruptImage, "empty member list");
    if (quantum == 0) raise(ErrorCode::CorruptImage, "zero quantum");

    Cluster c(quantum);
    for (auto& [id, image] : members) {
      if (c.index_of(id))
        raise(ErrorCode::TopologyMismatch, "duplicate member id");
      RestartOptions ro;
      ro.search_dir = dir;
      c.nodes_.push_back(
          {id, Session::restart((fs::path(dir) / image).string(), ro)});
    }
    c.add_channels(topo, ErrorCode::TopologyMismatch);

    std::vector<std::pair<uint32_t, Digest>> hashes;
    for (auto& n : c.nodes_)
      hashes.emplace_back(n.id, n.session->last_checkpoint_hash());
    if (manifest_hash(hashes, captured) != recorded)
      raise(ErrorCode::CorruptImage, "cluster manifest hash mismatch");

    for (auto& [key, msgs] : captured)
      c.channels_.at(key).refill(std::move(msgs));
    return c;
  }

  static std::string member_image_name(uint32_t id) {
    return "member-" + std::to_string(id) + ".gckp";
  }

 private:
  struct Node {
    uint32_t id;
    std::unique_ptr<Session> session;
  };

  explicit Cluster(uint64_t quantum) : quantum_(quantum) {}

  std::optional<size_t> index_of(uint32_t id) const {
    for (size_t i = 0; i < nodes_.size(); i++)
      if (nodes_[i].id == id) return i;
    return std::nullopt;
  }

  template <typename Specs>
  void add_channels(const Specs& specs, ErrorCode bad_endpoint) {
    for (const auto& ch : specs) {
      if (!index_of(ch.src) || !index_of(ch.dst))
        raise(bad_endpoint, "channel endpoint is not a member: " +
                                channel_name({ch.src, ch.dst}));
      if (!channels_.emplace(std::make_pair(ch.src, ch.dst), ChannelQueue{})
               .second)
        raise(bad_endpoint, "duplicate channel " + channel_name({ch.src, ch.dst}));
    }
  }

  MessagePort port_for(uint32_t self) {
    MessagePort port;
    port.send = [this, self](uint32_t dst, std::span<const uint8_t> data) {
      auto it = channels_.find({self, dst});
      if (it == channels_.end()) return false;
      it->second.push(Bytes(data.begin(), data.end()));
      return true;
    };
    port.recv = [this, self](uint32_t src) -> std::optional<Bytes> {
      auto it = channels_.find({src, self});
      if (it == channels_.end()) return std::nullopt;
      return it->second.pop_message();
    };
    return port;
  }

  static std::string channel_name(std::pair<uint32_t, uint32_t> key) {
    return std::to_string(key.first) + "->" + std::to_string(key.second);
  }

  // Identity of the whole ensemble: member image hashes plus captured
  // channel contents. Wall time never enters, so re-captures of the same
  // joint state agree.
  static Digest manifest_hash(
      const std::vector<std::pair<uint32_t, Digest>>& members,
      const std::map<std::pair<uint32_t, uint32_t>, std::vector<Bytes>>& chans) {
    Bytes buf;
    put_u32(buf, static_cast<uint32_t>(members.size()));
    for (const auto& [id, h] : members) {
      put_u32(buf, id);
      put_bytes(buf, h.data(), h.size());
    }
    put_u32(buf, static_cast<uint32_t>(chans.size()));
    for (const auto& [key, msgs] : chans) {
      put_u32(buf, key.first);
      put_u32(buf, key.second);
      put_u32(buf, static_cast<uint32_t>(msgs.size()));
      for (const auto& m : msgs) {
        put_u32(buf, static_cast<uint32_t>(m.size()));
        put_bytes(buf, m.data(), m.size());
      }
    }
    return sha256(buf);
  }

  void write_manifest(
      const std::string& dir, const ClusterImageInfo& info,
      const std::map<std::pair<uint32_t, uint32_t>, std::vector<Bytes>>& chans) {
    nlohmann::json j;
    j["version"] = 1;
    j["quantum"] = quantum_;
    j["members"] = nlohmann::json::array();
    for (const auto& [id, h] : info.members)
      j["members"].push_back({{"id", id},
                              {"image", member_image_name(id)},
                              {"hash", digest_hex(h)}});
    j["channels"] = nlohmann::json::array();
    for (const auto& [key, msgs] : chans) {
      nlohmann::json ch;
      ch["src"] = key.first;
      ch["dst"] = key.second;
      ch["messages"] = nlohmann::json::array();
      for (const auto& m : msgs)
        ch["messages"].push_back(detail::base64_encode(m));
      j["channels"].push_back(ch);
    }
    j["manifest_hash"] = digest_hex(info.manifest_hash);

    std::ofstream out(std::filesystem::path(dir) / kClusterManifestName,
                      std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) raise(ErrorCode::IoFailure, "cannot write cluster manifest");
  }

  std::vector<Node> nodes_;  // insertion order; ids unique
  std::map<std::pair<uint32_t, uint32_t>, ChannelQueue> channels_;
  uint64_t quantum_;
};

}  // namespace gckpt
