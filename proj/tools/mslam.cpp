// mslam command-line front end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mslam/pipeline.hpp"

namespace {

using namespace mslam;

constexpr int kOk = 0;
constexpr int kPartial = 1;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> agents;
  std::string predictor;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON run configuration (default: built-in two-agent room)");
  app->add_option("--seed", o.seed, "override the configured seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--agents", o.agents, "use only the first n configured agents");
  app->add_option("--predictor", o.predictor, "oracle or bridge:<host:port>");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? default_run_config() : load_run_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (!o.predictor.empty()) cfg.predictor = o.predictor;
  if (o.agents) truncate_agents(cfg, *o.agents);
  validate(cfg);
  return cfg;
}

void print_summary(const SystemResult& r, const std::string& out) {
  for (const auto& a : r.agents) {
    if (a.ok) {
      std::printf("agent %u: %zu frames, %zu keyframes, %zu loop edges, %.2f fps\n", a.id, a.stats.frames_tracked,
                  a.stats.keyframes, a.stats.loop_edges, a.stats.fps());
    } else {
      std::printf("agent %u: FAILED (%s)\n", a.id, a.error.c_str());
    }
  }
  if (r.fusion) {
    const auto& f = *r.fusion;
    std::printf("server: %zu loop edges verified of %zu candidates, %s\n", f.loops.accepted.size(), f.loops.candidates,
                f.fused ? "map fused" : "map NOT fused");
  }
  for (const auto& [k, v] : r.metrics) std::printf("%s = %.6g\n", k.c_str(), v);
  for (const auto& m : r.messages) std::fprintf(stderr, "warning: %s\n", m.c_str());
  std::printf("outputs in %s\n", out.c_str());
}

int cmd_run(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const SystemResult r = run_system(cfg);
  print_summary(r, cfg.output_dir);
  return r.exit_code == 0 ? kOk : kPartial;
}

int cmd_agent(const CommonOptions& o, std::optional<std::uint32_t> id) {
  namespace fs = std::filesystem;
  const RunConfig cfg = resolve(o);
  const auto ids = cfg.agent_ids();
  const std::uint32_t agent = id.value_or(ids.front());
  if (std::find(ids.begin(), ids.end(), agent) == ids.end()) {
    throw ConfigError("agent " + std::to_string(agent) + " is not configured");
  }
  std::shared_ptr<const SyntheticScene> scene;
  if (cfg.scene) scene = std::make_shared<const SyntheticScene>(build_scene(cfg));
  AgentSource source;
  for (auto& s : agent_sources(cfg, scene.get())) {
    if (s.id == agent) source = std::move(s);
  }
  auto pred = predictor_factory(cfg, scene)();
  const AgentResult r = run_agent(*pred, agent, source.frames, cfg.agent);
  const fs::path out = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string());
  const std::string stem = "agent_" + std::to_string(agent);
  io::write_file((out / (stem + ".smap")).string(), serialize_submap(r.submap));
  write_text(out / (stem + "_local.tum"), format_tum(r.trajectory));
  std::printf("agent %u: %zu frames, %zu keyframes, %zu loop edges, %.2f fps\n", agent, r.stats.frames_tracked,
              r.stats.keyframes, r.stats.loop_edges, r.stats.fps());
  if (source.ground_truth) std::printf("ate.local = %.6g\n", ate_rmse(r.trajectory, *source.ground_truth));
  std::printf("submap written to %s\n", (out / (stem + ".smap")).string().c_str());
  return kOk;
}

int cmd_fuse(const CommonOptions& o, const std::vector<std::string>& files) {
  const RunConfig cfg = resolve(o);
  if (files.empty()) throw ConfigError("fuse needs at least one --submap");
  std::vector<std::vector<std::uint8_t>> submaps;
  std::vector<AgentOutcome> agents;
  for (const auto& f : files) submaps.push_back(io::read_file(f));
  const SystemResult r = run_server(cfg, submaps, agents);
  print_summary(r, cfg.output_dir);
  return r.exit_code == 0 ? kOk : kPartial;
}

int cmd_eval(const std::vector<std::string>& est, const std::vector<std::string>& gt, const std::string& cloud,
             const std::string& gt_cloud, double threshold) {
  if (est.size() != gt.size()) throw ConfigError("--traj and --gt must be given in pairs");
  if (est.empty() && cloud.empty()) throw ConfigError("nothing to evaluate");
  auto text = [](const std::string& p) {
    const auto b = io::read_file(p);
    return std::string(b.begin(), b.end());
  };
  std::vector<AgentMetrics> rows;
  std::map<std::size_t, Trajectory> est_all, gt_all;
  for (std::size_t i = 0; i < est.size(); ++i) {
    est_all[i] = parse_tum(text(est[i]));
    gt_all[i] = parse_tum(text(gt[i]));
    AgentMetrics m;
    m.name = std::filesystem::path(est[i]).stem().string();
    m.ate_rmse = ate_rmse(est_all[i], gt_all[i]);
    rows.push_back(m);
  }
  if (!cloud.empty()) {
    if (gt_cloud.empty()) throw ConfigError("--cloud needs --gt-cloud");
    PointCloud e = decode_ply(io::read_file(cloud));
    const PointCloud g = decode_ply(io::read_file(gt_cloud));
    AgentMetrics m;
    m.name = "global";
    if (!est_all.empty()) {
      const AteResult a = combined_ate(est_all, gt_all);
      m.ate_rmse = a.rmse;
      e = e.transformed(a.alignment);
    }
    IcpConfig icfg;
    icfg.rejection_radius = threshold;
    const IcpResult icp = icp_align(e, g, icfg);
    m.geometry = geometry_metrics(e.transformed(icp.transform), g, threshold);
    rows.push_back(m);
  }
  std::printf("%s\n%s", metrics_report(rows).c_str(), metrics_table(rows).c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-agent monocular dense SLAM"};
  app.require_subcommand(1);

  CommonOptions run_opts, agent_opts, fuse_opts;
  auto* run = app.add_subcommand("run", "run all agents and fuse their maps");
  add_common(run, run_opts);

  auto* agent = app.add_subcommand("agent", "run a single agent and write its submap");
  add_common(agent, agent_opts);
  std::optional<std::uint32_t> agent_id;
  agent->add_option("--id", agent_id, "agent id (default: first configured)");

  auto* fuse = app.add_subcommand("fuse", "fuse saved submaps");
  add_common(fuse, fuse_opts);
  std::vector<std::string> submap_files;
  fuse->add_option("--submap", submap_files, "submap file (repeatable)")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "metrics on saved trajectories and clouds");
  std::vector<std::string> est_traj, gt_traj;
  std::string cloud, gt_cloud;
  double threshold = 0.5;
  eval->add_option("--traj", est_traj, "estimated TUM trajectory (repeatable)")->check(CLI::ExistingFile);
  eval->add_option("--gt", gt_traj, "ground-truth TUM trajectory, one per --traj")->check(CLI::ExistingFile);
  eval->add_option("--cloud", cloud, "estimated PLY cloud")->check(CLI::ExistingFile);
  eval->add_option("--gt-cloud", gt_cloud, "ground-truth PLY cloud")->check(CLI::ExistingFile);
  eval->add_option("--threshold", threshold, "distance threshold in metres");

  auto* gen = app.add_subcommand("gen-scene", "write a synthetic scene configuration");
  std::string gen_out = "scene.json";
  std::uint64_t gen_seed = 1;
  std::size_t gen_agents = 2;
  double gen_sigma = 0.0;
  gen->add_option("--out", gen_out, "output JSON path");
  gen->add_option("--seed", gen_seed, "seed stored in the config");
  gen->add_option("--agents", gen_agents, "number of agents (1 or 2)");
  gen->add_option("--depth-sigma", gen_sigma, "relative depth noise");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(run_opts);
    if (*agent) return cmd_agent(agent_opts, agent_id);
    if (*fuse) return cmd_fuse(fuse_opts, submap_files);
    if (*eval) return cmd_eval(est_traj, gt_traj, cloud, gt_cloud, threshold);
    if (*gen) {
      RunConfig cfg = default_run_config();
      cfg.seed = gen_seed;
      cfg.noise.depth_sigma = gen_sigma;
      truncate_agents(cfg, gen_agents);
      validate(cfg);
      write_text(gen_out, to_json(cfg));
      std::printf("wrote %s\n", gen_out.c_str());
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfigError;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return kIoError;
  } catch (const IoError& e) {
    std::fprintf(stderr, "I/O error: %s\n", e.what());
    return kIoError;
  } catch (const PredictorUnavailableError& e) {
    std::fprintf(stderr, "predictor unavailable: %s\n", e.what());
    return kIoError;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kPartial;
  }
  return kOk;
}
