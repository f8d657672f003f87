#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <thread>

#include <unistd.h>

#include "mslam/pipeline.hpp"
#include "test_support.hpp"

namespace mslam {
namespace {

namespace fs = std::filesystem;
using fixtures::room_scene;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mslam_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_text(const fs::path& p) {
  const auto b = io::read_file(p.string());
  return std::string(b.begin(), b.end());
}

const char* kSmallScene = R"({
  "seed": 4,
  "scene": {
    "boxes": [{"center": [0, 0, 0], "size": [4, 2.6, 4]},
              {"center": [1.2, -0.9, 0.8], "size": [0.6, 0.8, 0.6]}],
    "agents": [{"id": 1, "frames": 40, "orbit": {"sweep_deg": 90}},
               {"id": 2, "frames": 40, "orbit": {"start_deg": 30, "sweep_deg": 90}}]
  },
  "noise": {"depth_sigma": 0.005}
})";

TEST(Config, ParsesSceneAndSharesSettingsWithServer) {
  const auto cfg = parse_run_config(
      R"({"seed": 9, "frame_rate": 15, "keyframe": {"f_min": 0.4, "e_min": 50}, "server": {"c_export": 0.7},
          "scene": {"boxes": [{"center": [0, 0, 0], "size": [4, 3, 4]}],
                    "agents": [{"id": 3, "frames": 10, "scale": 1.05, "bias": [0.01, 0, 0, 0, 0, 0, 0],
                                "orbit": {"radius": 0.3}}]}})");
  validate(cfg);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.agent_ids(), (std::vector<std::uint32_t>{3}));
  const auto& a = cfg.scene->agents[0];
  EXPECT_EQ(a.frames, 10);
  EXPECT_EQ(a.orbit.frames, 10);
  EXPECT_DOUBLE_EQ(a.orbit.radius, 0.3);
  EXPECT_DOUBLE_EQ(a.scale, 1.05);
  EXPECT_DOUBLE_EQ(a.bias(0), 0.01);
  EXPECT_DOUBLE_EQ(cfg.agent.keyframe.f_min, 0.4);
  EXPECT_EQ(cfg.server.keyframe.e_min, 50u);
  EXPECT_DOUBLE_EQ(cfg.server.c_export, 0.7);
  EXPECT_DOUBLE_EQ(cfg.server.frame_rate, 15.0);
  EXPECT_DOUBLE_EQ(cfg.agent.frame_rate, 15.0);
}

TEST(Config, UnknownKeysAndBadTypesAreRejected) {
  EXPECT_THROW(parse_run_config(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"tracking": {"huber": 0.1}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"scene": {"agents": [{"id": 1, "speed": 2}]}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"seed": "one"})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"seed": -1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"scene": {"boxes": [{"center": [0, 0]}]}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"agent": {"loop_closure": 1}})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
}

TEST(Config, CrossFieldValidation) {
  auto cfg = parse_run_config(R"({"scene": {"boxes": [{"center": [0, 0, 0], "size": [4, 3, 4]}], "agents": []}})");
  EXPECT_THROW(validate(cfg), ConfigError);  // no agents
  EXPECT_THROW(validate(parse_run_config("{}")), ConfigError);
  EXPECT_THROW(validate(parse_run_config(R"({"dataset": {"path": "x", "agents": [1]}})")), ConfigError);
  EXPECT_NO_THROW(
      validate(parse_run_config(R"({"predictor": "bridge:localhost:5555", "dataset": {"path": "x", "agents": [1]}})")));
  EXPECT_THROW(
      validate(parse_run_config(R"({"predictor": "bridge:localhost", "dataset": {"path": "x", "agents": [1]}})")),
      ConfigError);
  EXPECT_THROW(validate(parse_run_config(
                   R"({"scene": {"boxes": [{"center": [0, 0, 0], "size": [4, 3, 4]}], "agents": [{"id": 2}, {"id": 2}]}})")),
               ConfigError);
  RunConfig both = default_run_config();
  both.dataset = DatasetSpec{"x", {1}, 1000.0};
  EXPECT_THROW(validate(both), ConfigError);
}

TEST(Config, TruncateAgents) {
  RunConfig cfg = default_run_config();
  EXPECT_THROW(truncate_agents(cfg, 3), ConfigError);
  EXPECT_THROW(truncate_agents(cfg, 0), ConfigError);
  truncate_agents(cfg, 1);
  EXPECT_EQ(cfg.agent_ids(), (std::vector<std::uint32_t>{1}));
}

TEST(Config, JsonRoundTrip) {
  RunConfig cfg = parse_run_config(kSmallScene);
  cfg.scene->agents[1].scale = 1.05;
  cfg.scene->agents[1].bias(4) = 0.002;
  cfg.agent.loop_closure = false;
  const std::string text = to_json(cfg);
  const RunConfig back = parse_run_config(text);
  EXPECT_EQ(to_json(back), text);
  EXPECT_FALSE(back.agent.loop_closure);
  EXPECT_DOUBLE_EQ(back.scene->agents[1].bias(4), 0.002);
  EXPECT_EQ(to_json(parse_run_config(to_json(default_run_config()))), to_json(default_run_config()));
}

TEST(Pnm, RoundTrip8And16Bit) {
  PnmImage rgb{2, 3, 3, 255, {}};
  for (int i = 0; i < 18; ++i) rgb.samples.push_back(static_cast<std::uint16_t>(i * 13));
  const PnmImage a = decode_pnm(encode_pnm(rgb));
  EXPECT_EQ(a.height, 2);
  EXPECT_EQ(a.width, 3);
  EXPECT_EQ(a.channels, 3);
  EXPECT_EQ(a.samples, rgb.samples);

  PnmImage depth{2, 2, 1, 65535, {0, 1500, 65535, 256}};
  const auto bytes = encode_pnm(depth);
  EXPECT_EQ(bytes.size(), std::string("P5\n2 2\n65535\n").size() + 8);
  EXPECT_EQ(bytes[bytes.size() - 8 + 2], 1500 >> 8);  // big-endian samples
  const PnmImage b = decode_pnm(bytes);
  EXPECT_EQ(b.samples, depth.samples);
  const DepthImage d = depth_from_pnm(b, 1000.0);
  EXPECT_DOUBLE_EQ(d.depth[1], 1.5);
  EXPECT_DOUBLE_EQ(d.depth[0], 0.0);
}

TEST(Pnm, HeaderCommentsAndCorruptInput) {
  const std::string ok = "P5\n# comment\n2 1\n255\n\x07\x09";
  const PnmImage im = decode_pnm(std::vector<std::uint8_t>(ok.begin(), ok.end()));
  EXPECT_EQ(im.samples, (std::vector<std::uint16_t>{7, 9}));
  for (const std::string bad : {"P3\n2 1\n255\n12", "P5\n2 1\n255\n\x07", "P5\n2 x\n255\n\x07\x09",
                                "P5\n2 1\n70000\n\x07\x09"}) {
    EXPECT_THROW(decode_pnm(std::vector<std::uint8_t>(bad.begin(), bad.end())), ParseError) << bad;
  }
  EXPECT_THROW(depth_from_pnm(PnmImage{1, 1, 3, 255, {1, 2, 3}}, 1000.0), ParseError);
}

TEST(Agent, SingleFrameGivesOneKeyframe) {
  OraclePredictor pred(room_scene(), NoiseModel{}, 1);
  const auto r = run_agent(pred, 1, {0}, AgentConfig{});
  EXPECT_EQ(r.stats.keyframes, 1u);
  EXPECT_TRUE(r.graph.edges.empty());
  EXPECT_EQ(r.trajectory.size(), 1u);
  EXPECT_EQ(r.submap.keyframes.size(), 1u);
}

TEST(Agent, StationaryCameraKeepsOneKeyframe) {
  SyntheticScene scene = room_scene();
  scene.trajectories[1] = std::vector<SimilarityTransform>(20, scene.trajectories[1][0]);
  OraclePredictor pred(scene, NoiseModel{0.01, 0.05, 0.0}, 1);
  std::vector<std::uint32_t> frames(20);
  for (std::uint32_t i = 0; i < 20; ++i) frames[i] = i;
  const auto r = run_agent(pred, 1, frames, AgentConfig{});
  EXPECT_EQ(r.stats.keyframes, 1u);
  EXPECT_EQ(r.stats.frames_tracked, 20u);
  for (const auto& p : r.trajectory) EXPECT_LT(p.pose.translation().norm(), 1e-3);
}

TEST(Agent, EmptyStreamIsRejected) {
  OraclePredictor pred(room_scene(), NoiseModel{}, 1);
  EXPECT_THROW(run_agent(pred, 1, {}, AgentConfig{}), ConfigError);
}

TEST(Agent, LoopClosureCutsLoopEnergy) {
  const auto scene = room_scene(200, 400.0);
  OraclePredictor pred(scene, NoiseModel{}, 1);
  TangentVector bias;
  bias << 0.002, 0, 0, 0, 0.002, 0, 0;
  pred.set_pair_bias(1, bias, 30);
  std::vector<std::uint32_t> frames(200);
  for (std::uint32_t i = 0; i < 200; ++i) frames[i] = i;
  const auto r = run_agent(pred, 1, frames, AgentConfig{});
  ASSERT_FALSE(r.stats.loop_closures.empty());
  for (const auto& l : r.stats.loop_closures) {
    EXPECT_EQ(l.query.agent, 1u);
    EXPECT_GE(l.energy_before, 10.0 * l.energy_after) << to_string(l.query) << " -> " << to_string(l.reference);
  }
  EXPECT_EQ(r.stats.loop_edges, r.stats.loop_closures.size());
}

TEST(System, SmallSceneEndToEnd) {
  RunConfig cfg = parse_run_config(kSmallScene);
  cfg.output_dir = scratch_dir("e2e").string();
  const auto r = run_system(cfg);
  EXPECT_EQ(r.exit_code, 0);
  ASSERT_TRUE(r.fusion.has_value());
  EXPECT_TRUE(r.fusion->fused);
  for (const char* f : {"agent_1.tum", "agent_2.tum", "agent_1.ply", "agent_2.ply", "global.ply", "metrics.txt",
                        "metrics_table.txt", "report.txt", "config.json", "submaps/agent_1.smap",
                        "ground_truth_agent_2.tum"}) {
    EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / f)) << f;
  }
  EXPECT_LT(r.metrics.at("ate.combined"), 0.01);
  EXPECT_LT(r.metrics.at("geometry.chamfer"), 0.02);
  EXPECT_EQ(parse_tum(read_text(fs::path(cfg.output_dir) / "agent_2.tum")).size(), 40u);
  // The written config reproduces the run.
  EXPECT_EQ(to_json(load_run_config((fs::path(cfg.output_dir) / "config.json").string())), to_json(cfg));

  // Fusing the saved submaps reproduces the trajectories.
  RunConfig again = cfg;
  again.output_dir = scratch_dir("e2e_fuse").string();
  std::vector<std::vector<std::uint8_t>> submaps;
  for (const char* s : {"submaps/agent_1.smap", "submaps/agent_2.smap"}) {
    submaps.push_back(io::read_file((fs::path(cfg.output_dir) / s).string()));
  }
  run_server(again, submaps, {});
  EXPECT_EQ(read_text(fs::path(again.output_dir) / "agent_2.tum"), read_text(fs::path(cfg.output_dir) / "agent_2.tum"));
  fs::remove_all(cfg.output_dir);
  fs::remove_all(again.output_dir);
}

TEST(System, OutputsAreByteIdenticalAcrossRuns) {
  RunConfig cfg = parse_run_config(kSmallScene);
  cfg.output_dir = scratch_dir("det_a").string();
  run_system(cfg);
  RunConfig other = cfg;
  other.output_dir = scratch_dir("det_b").string();
  run_system(other);
  for (const char* f : {"agent_1.tum", "agent_2.tum", "agent_1.ply", "agent_2.ply", "global.ply"}) {
    const auto a = io::read_file((fs::path(cfg.output_dir) / f).string());
    const auto b = io::read_file((fs::path(other.output_dir) / f).string());
    EXPECT_FALSE(a.empty()) << f;
    EXPECT_EQ(a, b) << f;
  }
  fs::remove_all(cfg.output_dir);
  fs::remove_all(other.output_dir);
}

TEST(System, UnreachableBridgeFailsEveryAgent) {
  const fs::path root = scratch_dir("nobridge");
  fs::create_directories(root / "agent_1");
  const auto img = encode_pnm(PnmImage{2, 2, 1, 255, {1, 2, 3, 4}});
  io::write_file((root / "agent_1" / "000000.pgm").string(), img);
  RunConfig cfg = parse_run_config(R"({"predictor": "bridge:127.0.0.1:1", "bridge_timeout_ms": 300,
                                       "dataset": {"path": ")" + root.string() + R"(", "agents": [1]}})");
  cfg.output_dir = (root / "out").string();
  const auto r = run_system(cfg);
  EXPECT_EQ(r.exit_code, 1);
  ASSERT_EQ(r.agents.size(), 1u);
  EXPECT_FALSE(r.agents[0].ok);
  EXPECT_FALSE(r.fusion.has_value());
  EXPECT_NE(read_text(root / "out" / "report.txt").find("agent.1.status = failed"), std::string::npos);
  fs::remove_all(root);
}

// Loopback predictor service: frame index in the first pixel, oracle answers.
class OracleService {
 public:
  explicit OracleService(SyntheticScene scene) : model_(std::move(scene), NoiseModel{}, 1) {
    listener_ = net::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    const int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listener_.fd(), 8) != 0) {
      throw IoError("bind failed");
    }
    socklen_t len = sizeof addr;
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { serve(); });
  }
  ~OracleService() {
    ::shutdown(listener_.fd(), SHUT_RDWR);
    thread_.join();
  }
  std::uint16_t port() const { return port_; }
  int requests() const { return requests_; }

 private:
  void serve() {
    for (;;) {
      net::Socket conn(::accept(listener_.fd(), nullptr, nullptr));
      if (!conn.is_open()) return;
      try {
        while (auto body = net::read_frame(conn.fd())) {
          ++requests_;
          const auto req = wire::decode_request(*body);
          wire::Response resp;
          resp.id = req.id;
          const std::uint32_t i = req.images[0].data[0];
          const std::uint32_t j = req.op == wire::Op::predict ? req.images[1].data[0] : i;
          resp.pair = model_.predict({1, i}, {1, j});
          net::write_frame(conn.fd(), wire::encode_response(resp));
        }
      } catch (const Error&) {
      }
    }
  }

  OraclePredictor model_;
  net::Socket listener_;
  std::uint16_t port_ = 0;
  std::thread thread_;
  std::atomic<int> requests_{0};
};

TEST(System, DatasetThroughBridge) {
  constexpr std::uint32_t kN = 12;
  const SyntheticScene scene = room_scene(kN, 30.0);
  const fs::path root = scratch_dir("dataset");
  const fs::path dir = root / "agent_1";
  fs::create_directories(dir / "depth");
  Trajectory gt;
  for (std::uint32_t f = 0; f < kN; ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "%06u", f);
    PnmImage im{6, 8, 1, 255, std::vector<std::uint16_t>(48, 50)};
    im.samples[0] = static_cast<std::uint16_t>(f);
    io::write_file((dir / (std::string(name) + ".pgm")).string(), encode_pnm(im));
    const auto r = synthetic_render(scene, scene.pose({1, f}), NoiseModel{}, 0);
    PnmImage depth{r.points.height(), r.points.width(), 1, 65535, std::vector<std::uint16_t>(r.points.size(), 0)};
    for (std::size_t i = 0; i < r.points.size(); ++i) {
      if (r.points.valid(i)) depth.samples[i] = static_cast<std::uint16_t>(std::lround(r.points.point(i).z() * 1000.0));
    }
    io::write_file((dir / "depth" / (std::string(name) + ".pgm")).string(), encode_pnm(depth));
    gt.push_back(f / 30.0, scene.pose({1, f}));
  }
  write_text(dir / "groundtruth.txt", format_tum(gt));
  io::write_file((dir / "notes.txt").string(), std::vector<std::uint8_t>{'x'});

  OracleService service(scene);
  RunConfig cfg = parse_run_config(R"({"predictor": "bridge:127.0.0.1:)" + std::to_string(service.port()) +
                                   R"(", "server": {"workers": 1}, "dataset": {"path": ")" + root.string() +
                                   R"(", "agents": [1]}})");
  cfg.output_dir = (root / "out").string();
  const auto sources = agent_sources(cfg, nullptr);
  ASSERT_EQ(sources.size(), 1u);
  EXPECT_EQ(sources[0].frames.size(), kN);
  ASSERT_TRUE(sources[0].ground_truth.has_value());

  const auto r = run_system(cfg);
  EXPECT_EQ(r.exit_code, 0);
  ASSERT_TRUE(r.agents[0].ok) << r.agents[0].error;
  EXPECT_EQ(r.agents[0].stats.frames_tracked, kN);
  EXPECT_GE(service.requests(), static_cast<int>(kN));
  EXPECT_LT(r.metrics.at("ate.agent_1"), 1e-4);
  EXPECT_LT(r.metrics.at("geometry.chamfer"), 0.01);
  fs::remove_all(root);
}

}  // namespace
}  // namespace mslam
