// Operator entry point. Every subcommand is a thin shell over the library:
// config parsing lives in launch_config.hpp, execution in the engine,
// coordinator, runner, and bench headers.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gckpt/bench.hpp"
#include "gckpt/coordinator.hpp"
#include "gckpt/engine.hpp"
#include "gckpt/image.hpp"
#include "gckpt/launch_config.hpp"
#include "gckpt/runner.hpp"

namespace {

namespace fs = std::filesystem;
using namespace gckpt;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::BadConfig:
    case ErrorCode::BadProgram:
      return 1;
    case ErrorCode::CorruptImage:
    case ErrorCode::HashMismatch:
    case ErrorCode::MissingBase:
    case ErrorCode::BrokenChain:
    case ErrorCode::TopologyMismatch:
      return 2;
    default:
      return 3;
  }
}

void dump_console(const Bytes& console, size_t from) {
  if (from >= console.size()) return;
  std::fwrite(console.data() + from, 1, console.size() - from, stdout);
  std::fflush(stdout);
}

int cmd_launch(const std::string& config_path) {
  LaunchConfig lc = load_launch_config(config_path);
  auto s = Session::launch(lc.session);
  SessionRunner runner(*s, lc.runner);
  uint64_t images = runner.run();
  dump_console(s->machine().console(), 0);
  std::fprintf(stderr, "gckpt: %s %s at %llu instructions, %llu image(s)\n",
               lc.name.c_str(),
               runner.stopped_by_command() ? "stopped" : "halted",
               static_cast<unsigned long long>(s->machine().instr_count()),
               static_cast<unsigned long long>(images));
  return 0;
}

int cmd_ckpt(const std::string& session, const std::string& mode,
             const std::string& base) {
  nlohmann::json req{{"op", "checkpoint"}};
  if (!mode.empty()) req["mode"] = mode;
  if (!base.empty()) req["base"] = fs::absolute(base).string();
  nlohmann::json resp = control_request(session_socket_path(session), req);
  std::printf("%s\n", resp["image"].get<std::string>().c_str());
  return 0;
}

int cmd_restart(const std::string& image, bool /*fast is decided by the
                                           image's own layout*/) {
  RestartOptions opts;
  opts.search_dir = fs::path(image).parent_path().string();
  auto s = Session::restart(image, opts);
  size_t seen = s->machine().console().size();
  while (!s->machine().halted()) s->run(10'000'000);
  dump_console(s->machine().console(), seen);
  std::fprintf(stderr, "gckpt: halted at %llu instructions\n",
               static_cast<unsigned long long>(s->machine().instr_count()));
  return 0;
}

int cmd_images(const std::string& dir) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".gckp") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    try {
      ImageFile img = ImageFile::open(p.string());
      img.verify();  // a listed image is a verified image
      std::string kind = "full";
      if (img.flags() & kFlagIncremental) kind = "delta";
      else if (img.flags() & kFlagFastRestart) kind = "fast";
      std::printf("%-40s %8s %12llu %s\n", p.filename().c_str(), kind.c_str(),
                  static_cast<unsigned long long>(img.manifest().instr_count),
                  digest_hex(img.manifest().content_hash).substr(0, 12).c_str());
    } catch (const Error& e) {
      std::printf("%-40s corrupt: %s\n", p.filename().c_str(), e.what());
    }
  }
  return 0;
}

std::vector<uint64_t> parse_mib_list(const std::string& csv) {
  std::vector<uint64_t> out;
  size_t pos = 0;
  while (pos <= csv.size()) {
    size_t comma = csv.find(',', pos);
    std::string tok = csv.substr(pos, comma == std::string::npos
                                          ? std::string::npos
                                          : comma - pos);
    if (tok.empty()) raise(ErrorCode::BadConfig, "bad --mem-sizes list");
    uint64_t mib = 0;
    for (char c : tok) {
      if (c < '0' || c > '9')
        raise(ErrorCode::BadConfig, "bad --mem-sizes entry: " + tok);
      mib = mib * 10 + static_cast<uint64_t>(c - '0');
    }
    if (mib == 0) raise(ErrorCode::BadConfig, "zero --mem-sizes entry");
    out.push_back(mib << 20);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

int cmd_bench(const std::string& suite, const std::string& mem_sizes,
              std::string dir, uint64_t disk_bytes) {
  bool scratch = dir.empty();
  if (scratch) {
    dir = (fs::temp_directory_path() /
           ("gckpt-bench-" + std::to_string(::getpid())))
              .string();
  }
  fs::create_directories(dir);
  std::string csv;
  if (suite == "coverage" || suite == "forked" || suite == "fast") {
    bench::SizeSuite s = bench::SizeSuite::Coverage;
    if (suite == "forked") s = bench::SizeSuite::Forked;
    if (suite == "fast") s = bench::SizeSuite::Fast;
    csv = bench::csv_size(bench::run_size_suite(s, parse_mib_list(mem_sizes), dir));
  } else if (suite == "overhead") {
    csv = bench::csv_overhead(bench::run_overhead_suite());
  } else if (suite == "btrfs") {
    csv = bench::csv_clone(bench::run_clone_suite(dir, disk_bytes));
  } else {
    raise(ErrorCode::BadConfig, "unknown suite: " + suite);
  }
  if (scratch) fs::remove_all(dir);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int cmd_cluster_ckpt(const std::string& topology_path) {
  ClusterPlan plan = load_cluster_plan(topology_path);
  Cluster cluster = Cluster::launch(plan.cluster);
  cluster.run_turns(plan.turns);
  ClusterImageInfo info = cluster.global_checkpoint(plan.image_dir);
  std::printf("%s\n", info.dir.c_str());
  return 0;
}

int cmd_cluster_restart(const std::string& path) {
  std::string dir = path;
  if (fs::path(path).filename() == kClusterManifestName)
    dir = fs::path(path).parent_path().string();
  Cluster cluster = Cluster::global_restart(dir);
  while (!cluster.all_halted()) cluster.run_turns(1000);
  for (uint32_t id : cluster.member_ids()) {
    const auto& m = cluster.member(id).machine();
    std::printf("member %u: instr=%llu halted=%d\n", id,
                static_cast<unsigned long long>(m.instr_count()),
                m.halted() ? 1 : 0);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"checkpoint-restart engine for sandboxed guest machines"};
  app.require_subcommand(1);

  std::string config_path;
  auto* launch = app.add_subcommand("launch", "run a session from a config file");
  launch->add_option("config", config_path, "launch config JSON")->required();

  std::string session, mode, base;
  auto* ckpt = app.add_subcommand("ckpt", "checkpoint a running session");
  ckpt->add_option("session", session, "session name")->required();
  ckpt->add_option("--mode", mode, "default|forked|fast|incremental");
  ckpt->add_option("--base", base, "base image for incremental");

  std::string image;
  bool fast = false;
  auto* restart = app.add_subcommand("restart", "resume a session from an image");
  restart->add_option("image", image, "image path")->required();
  restart->add_flag("--fast", fast, "hint only; the image layout decides");

  std::string images_dir;
  auto* images = app.add_subcommand("images", "list images in a directory");
  images->add_option("dir", images_dir, "directory")->required();

  std::string suite, mem_sizes = "4,16,64", bench_dir;
  uint64_t disk_bytes = 1ull << 30;
  auto* bench_cmd = app.add_subcommand("bench", "measurement suites, CSV on stdout");
  bench_cmd->add_option("--suite", suite, "coverage|forked|fast|overhead|btrfs")
      ->required();
  bench_cmd->add_option("--mem-sizes", mem_sizes, "guest sizes in MiB");
  bench_cmd->add_option("--dir", bench_dir, "scratch directory (kept if given)");
  bench_cmd->add_option("--disk-bytes", disk_bytes, "btrfs suite disk size");

  std::string topology;
  auto* cluster = app.add_subcommand("cluster", "multi-session ensembles");
  cluster->require_subcommand(1);
  auto* cckpt = cluster->add_subcommand("ckpt", "launch a topology and snapshot it");
  cckpt->add_option("topology", topology, "topology JSON")->required();
  std::string cluster_image;
  auto* crestart = cluster->add_subcommand("restart", "restart a cluster image");
  crestart->add_option("image", cluster_image,
                       "cluster image directory or its manifest")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*launch) return cmd_launch(config_path);
    if (*ckpt) return cmd_ckpt(session, mode, base);
    if (*restart) return cmd_restart(image, fast);
    if (*images) return cmd_images(images_dir);
    if (*bench_cmd) return cmd_bench(suite, mem_sizes, bench_dir, disk_bytes);
    if (*cckpt) return cmd_cluster_ckpt(topology);
    if (*crestart) return cmd_cluster_restart(cluster_image);
  } catch (const Error& e) {
    std::fprintf(stderr, "gckpt: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gckpt: %s\n", e.what());
    return 3;
  }
  return 1;
}
