#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "gckpt/coordinator.hpp"
#include "gckpt/engine.hpp"
#include "gckpt/program.hpp"
#include "gckpt/runner.hpp"
#include "json.hpp"

namespace gckpt {

// Config-file layer shared by the CLI and tests. Relative paths inside a
// config resolve against the config file's own directory, so a config can
// be moved around with its program and disk.

struct LaunchConfig {
  std::string name;  // control endpoint identity
  SessionConfig session;
  RunnerConfig runner;
};

struct ClusterPlan {
  ClusterConfig cluster;
  std::string image_dir;
  uint64_t turns = 0;  // cluster ckpt: scheduler turns to run before the cut
};

inline std::string runtime_dir() {
  const char* env = std::getenv("GCKPT_RUNTIME_DIR");
  return env && *env ? env : "/tmp";
}

inline std::string session_socket_path(const std::string& name) {
  if (name.empty() || name.find('/') != std::string::npos)
    raise(ErrorCode::BadConfig, "bad session name: " + name);
  return (std::filesystem::path(runtime_dir()) / ("gckpt-" + name + ".sock"))
      .string();
}

namespace detail {

inline nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoFailure, "cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::BadConfig, path + ": " + e.what());
  }
}

inline void require_keys(const nlohmann::json& j,
                         std::initializer_list<const char*> allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) raise(ErrorCode::BadConfig, where + ": unknown key \"" + key + "\"");
  }
}

inline std::string resolve_path(const std::string& p, const std::string& base) {
  std::filesystem::path fp(p);
  if (fp.is_absolute()) return p;
  return (std::filesystem::path(base) / fp).string();
}

inline uint64_t require_u64(const nlohmann::json& j, const char* key,
                            const std::string& where) {
  if (!j.contains(key) || !j[key].is_number_unsigned())
    raise(ErrorCode::BadConfig, where + ": \"" + key + "\" must be a count");
  return j[key].get<uint64_t>();
}

// The per-guest fields, shared between a launch config and a cluster member.
inline SessionConfig session_config_from_json(const nlohmann::json& j,
                                              const std::string& base_dir,
                                              const std::string& where) {
  SessionConfig cfg;
  if (!j.contains("program") || !j["program"].is_string())
    raise(ErrorCode::BadConfig, where + ": \"program\" must be a path");
  std::string prog_path = resolve_path(j["program"], base_dir);
  if (!std::filesystem::exists(prog_path))
    raise(ErrorCode::BadConfig, where + ": program file missing: " + prog_path);
  cfg.program = load_program_file(prog_path);

  cfg.mem_size = require_u64(j, "mem_size", where);
  if (cfg.mem_size == 0 || cfg.mem_size % 4096 != 0)
    raise(ErrorCode::BadConfig, where + ": mem_size must be a positive multiple of 4096");

  if (j.contains("disk")) {
    std::string disk = j["disk"];
    if (!disk.empty()) {
      cfg.disk_path = resolve_path(disk, base_dir);
      if (!std::filesystem::exists(cfg.disk_path))
        raise(ErrorCode::BadConfig, where + ": disk file missing: " + cfg.disk_path);
    }
  }
  if (j.contains("plugins")) {
    if (!j["plugins"].is_array())
      raise(ErrorCode::BadConfig, where + ": \"plugins\" must be a list");
    cfg.plugins = j["plugins"].get<std::vector<std::string>>();
  }
  if (j.contains("pit_period")) {
    uint64_t period = require_u64(j, "pit_period", where);
    cfg.pit_enabled = period > 0;
    cfg.pit_period = period;
    cfg.pit_irq_line = 3;
  }
  return cfg;
}

}  // namespace detail

inline LaunchConfig launch_config_from_json(const nlohmann::json& j,
                                            const std::string& base_dir,
                                            const std::string& default_name) {
  detail::require_keys(j,
                       {"name", "program", "mem_size", "disk", "plugins",
                        "pit_period", "checkpoint_interval", "image_dir"},
                       "launch config");
  LaunchConfig lc;
  lc.name = j.value("name", default_name);
  lc.session = detail::session_config_from_json(j, base_dir, "launch config");
  if (j.contains("checkpoint_interval"))
    lc.runner.interval = detail::require_u64(j, "checkpoint_interval", "launch config");
  lc.runner.image_dir =
      detail::resolve_path(j.value("image_dir", "."), base_dir);
  lc.runner.image_prefix = lc.name;
  lc.runner.socket_path = session_socket_path(lc.name);
  return lc;
}

inline LaunchConfig load_launch_config(const std::string& path) {
  namespace fs = std::filesystem;
  nlohmann::json j = detail::load_json_file(path);
  std::string base = fs::path(path).parent_path().string();
  if (base.empty()) base = ".";
  return launch_config_from_json(j, base, fs::path(path).stem().string());
}

// Topology file for `cluster ckpt`: members carry the same per-guest fields
// as a launch config, channels are {src,dst} id pairs.
inline ClusterPlan load_cluster_plan(const std::string& path) {
  namespace fs = std::filesystem;
  nlohmann::json j = detail::load_json_file(path);
  std::string base = fs::path(path).parent_path().string();
  if (base.empty()) base = ".";

  detail::require_keys(
      j, {"quantum", "turns", "image_dir", "members", "channels"}, "topology");
  ClusterPlan plan;
  if (j.contains("quantum"))
    plan.cluster.quantum = detail::require_u64(j, "quantum", "topology");
  if (j.contains("turns"))
    plan.turns = detail::require_u64(j, "turns", "topology");
  plan.image_dir =
      detail::resolve_path(j.value("image_dir", "cluster-image"), base);

  if (!j.contains("members") || !j["members"].is_array())
    raise(ErrorCode::BadConfig, "topology: \"members\" must be a list");
  for (const auto& m : j["members"]) {
    detail::require_keys(
        m, {"id", "program", "mem_size", "disk", "plugins", "pit_period"},
        "topology member");
    ClusterMember member;
    member.id = static_cast<uint32_t>(detail::require_u64(m, "id", "topology member"));
    member.config = detail::session_config_from_json(
        m, base, "member " + std::to_string(member.id));
    plan.cluster.members.push_back(std::move(member));
  }
  if (j.contains("channels")) {
    if (!j["channels"].is_array())
      raise(ErrorCode::BadConfig, "topology: \"channels\" must be a list");
    for (const auto& c : j["channels"]) {
      detail::require_keys(c, {"src", "dst"}, "topology channel");
      ClusterChannelSpec spec;
      spec.src = static_cast<uint32_t>(detail::require_u64(c, "src", "channel"));
      spec.dst = static_cast<uint32_t>(detail::require_u64(c, "dst", "channel"));
      plan.cluster.channels.push_back(spec);
    }
  }
  return plan;
}

}  // namespace gckpt
