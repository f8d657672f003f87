#pragma once

// Run configuration, scene and dataset ingestion, concurrent agent workers,
// server handoff and output writing.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mslam/agent.hpp"
#include "mslam/bridge_client.hpp"
#include "mslam/errors.hpp"
#include "mslam/evaluation.hpp"
#include "mslam/io.hpp"
#include "mslam/keyframing.hpp"
#include "mslam/predictor.hpp"
#include "mslam/server.hpp"
#include "mslam/wire.hpp"

namespace mslam {

// ---------------------------------------------------------------------------
// Netpbm images (P5 grey, P6 RGB; 8 or 16 bit, big-endian samples).

struct PnmImage {
  int height = 0;
  int width = 0;
  int channels = 0;
  int maxval = 255;
  std::vector<std::uint16_t> samples;  // row-major, interleaved
};

inline PnmImage decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    return std::string(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                       bytes.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  auto number = [&]() {
    const std::size_t at = pos;
    const std::string t = token();
    int v = 0;
    const auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || v <= 0) throw ParseError("bad PNM header field", at);
    return v;
  };
  const std::string magic = token();
  PnmImage im;
  if (magic == "P5") {
    im.channels = 1;
  } else if (magic == "P6") {
    im.channels = 3;
  } else {
    throw ParseError("not a binary PGM/PPM file", 0);
  }
  im.width = number();
  im.height = number();
  im.maxval = number();
  if (im.maxval > 65535) throw ParseError("PNM maxval out of range", pos);
  ++pos;  // single whitespace before the raster
  const std::size_t bps = im.maxval > 255 ? 2 : 1;
  const std::size_t n = static_cast<std::size_t>(im.width) * im.height * im.channels;
  if (pos > bytes.size() || bytes.size() - pos != n * bps) throw ParseError("PNM raster size mismatch", pos);
  im.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    im.samples[i] = bps == 1 ? bytes[pos + i]
                             : static_cast<std::uint16_t>((bytes[pos + 2 * i] << 8) | bytes[pos + 2 * i + 1]);
  }
  return im;
}

inline std::vector<std::uint8_t> encode_pnm(const PnmImage& im) {
  if (im.channels != 1 && im.channels != 3) throw ConfigError("PNM images have 1 or 3 channels");
  const std::string header = std::string(im.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(im.width) + " " +
                             std::to_string(im.height) + "\n" + std::to_string(im.maxval) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (const auto s : im.samples) {
    if (im.maxval > 255) out.push_back(static_cast<std::uint8_t>(s >> 8));
    out.push_back(static_cast<std::uint8_t>(s & 0xff));
  }
  return out;
}

inline wire::Image to_wire_image(const PnmImage& im) {
  wire::Image out{static_cast<std::uint32_t>(im.height), static_cast<std::uint32_t>(im.width),
                  static_cast<std::uint8_t>(im.channels), {}};
  out.data.reserve(im.samples.size());
  for (const auto s : im.samples) {
    out.data.push_back(static_cast<std::uint8_t>(im.maxval > 255 ? s >> 8 : s));
  }
  return out;
}

/// Depth image from a 16-bit PGM; `units_per_metre` converts samples
/// (1000 for millimetres). Zero samples are invalid.
inline DepthImage depth_from_pnm(const PnmImage& im, double units_per_metre) {
  if (im.channels != 1) throw ParseError("depth image must be single channel", 0);
  DepthImage d{im.height, im.width, std::vector<double>(im.samples.size(), 0.0)};
  for (std::size_t i = 0; i < im.samples.size(); ++i) d.depth[i] = im.samples[i] / units_per_metre;
  return d;
}

/// Grey image of the synthetic scene shaded from the surface features.
inline PnmImage synthetic_image(const SyntheticScene& scene, const SimilarityTransform& pose) {
  const RenderResult r = synthetic_render(scene, pose, NoiseModel{}, 0);
  PnmImage im{scene.intrinsics.height, scene.intrinsics.width, 1, 255,
              std::vector<std::uint16_t>(r.points.size(), 0)};
  for (std::size_t i = 0; i < r.points.size(); ++i) {
    if (!r.points.valid(i)) continue;
    const auto d = r.features.descriptor(i);
    im.samples[i] = static_cast<std::uint16_t>(std::clamp(128.0 + 400.0 * (d[0] + d[1]), 1.0, 255.0));
  }
  return im;
}

// ---------------------------------------------------------------------------
// Configuration.

struct BoxSpec {
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Ones();
};

struct AgentSpec {
  std::uint32_t id = 1;
  int frames = 150;
  OrbitSpec orbit;
  double scale = 1.0;  // multiplies this agent's predictions
  TangentVector bias = TangentVector::Zero();
  std::uint32_t bias_max_frame_gap = 30;
};

struct SceneSpec {
  std::vector<BoxSpec> boxes;
  std::uint64_t feature_seed = 7;
  std::vector<AgentSpec> agents;
};

struct DatasetSpec {
  std::string path;
  std::vector<std::uint32_t> agents;
  double depth_units_per_metre = 1000.0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "mslam_out";
  double frame_rate = 30.0;
  std::string predictor = "oracle";  // or "bridge:host:port"
  int bridge_timeout_ms = 30000;
  CameraIntrinsics intrinsics;
  std::optional<SceneSpec> scene;
  std::optional<DatasetSpec> dataset;
  NoiseModel noise;
  AgentConfig agent;
  ServerConfig server;
  double metric_threshold = 0.5;

  std::vector<std::uint32_t> agent_ids() const {
    std::vector<std::uint32_t> out;
    if (scene) {
      for (const auto& a : scene->agents) out.push_back(a.id);
    } else if (dataset) {
      out = dataset->agents;
    }
    return out;
  }
};

namespace detail {

using nlohmann::json;

/// Reads one JSON object; every key must be consumed.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  const json* get(const char* key) {
    used_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void number(const char* key, double& out) {
    if (const json* v = get(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + " must be a number");
      out = v->get<double>();
    }
  }
  template <typename T>
  void integer(const char* key, T& out) {
    if (const json* v = get(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v->is_number_integer() && !v->is_number_unsigned()) throw ConfigError(at(key) + " must be >= 0");
        out = static_cast<T>(v->get<std::uint64_t>());
      } else {
        out = static_cast<T>(v->get<std::int64_t>());
      }
    }
  }
  void boolean(const char* key, bool& out) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void string(const char* key, std::string& out) {
    if (const json* v = get(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void vec3(const char* key, Vec3& out) {
    if (const json* v = get(key)) out = to_vec<3>(*v, at(key));
  }

  template <int N>
  static Eigen::Matrix<double, N, 1> to_vec(const json& v, const std::string& name) {
    if (!v.is_array() || v.size() != static_cast<std::size_t>(N)) {
      throw ConfigError(name + " must be an array of " + std::to_string(N) + " numbers");
    }
    Eigen::Matrix<double, N, 1> out;
    for (int i = 0; i < N; ++i) {
      if (!v[i].is_number()) throw ConfigError(name + " must be an array of numbers");
      out(i) = v[i].get<double>();
    }
    return out;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.contains(k)) throw ConfigError("unknown key " + at(k.c_str()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "configuration" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_section(ObjectReader& parent, const char* key, const std::function<void(ObjectReader&)>& body) {
  if (const json* v = parent.get(key)) {
    ObjectReader r(*v, parent.at(key));
    body(r);
    r.finish();
  }
}

inline OrbitSpec read_orbit(ObjectReader& r) {
  OrbitSpec o;
  r.vec3("center", o.center);
  r.number("radius", o.radius);
  r.number("start_deg", o.start_deg);
  r.number("sweep_deg", o.sweep_deg);
  r.number("look_offset_deg", o.look_offset_deg);
  r.number("pitch_amplitude_deg", o.pitch_amplitude_deg);
  r.number("height_amplitude", o.height_amplitude);
  return o;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  using detail::json;
  using detail::ObjectReader;
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  ObjectReader r(root, "");
  r.integer("seed", cfg.seed);
  r.string("output_dir", cfg.output_dir);
  r.number("frame_rate", cfg.frame_rate);
  r.string("predictor", cfg.predictor);
  r.integer("bridge_timeout_ms", cfg.bridge_timeout_ms);
  r.number("metric_threshold", cfg.metric_threshold);
  detail::read_section(r, "intrinsics", [&](ObjectReader& s) {
    s.number("fx", cfg.intrinsics.fx);
    s.number("fy", cfg.intrinsics.fy);
    s.number("cx", cfg.intrinsics.cx);
    s.number("cy", cfg.intrinsics.cy);
    s.integer("width", cfg.intrinsics.width);
    s.integer("height", cfg.intrinsics.height);
  });
  detail::read_section(r, "noise", [&](ObjectReader& s) {
    s.number("depth_sigma", cfg.noise.depth_sigma);
    s.number("conf_min", cfg.noise.conf_min);
    s.number("dropout", cfg.noise.dropout);
  });
  detail::read_section(r, "matching", [&](ObjectReader& s) {
    auto& m = cfg.agent.matching;
    s.integer("max_iters", m.max_iters);
    s.number("lambda_init", m.lambda_init);
    s.number("theta_match", m.theta_match);
    s.integer("window", m.window);
  });
  detail::read_section(r, "tracking", [&](ObjectReader& s) {
    auto& t = cfg.agent.tracking;
    s.number("sigma_r_sq", t.sigma_r_sq);
    s.number("q_floor", t.q_floor);
    s.number("huber_delta", t.huber_delta);
    s.number("distance_weight", t.distance_weight);
    s.number("g_tol", t.g_tol);
    s.integer("max_iters", t.max_iters);
    s.integer("min_matches", t.min_matches);
    s.number("max_condition", t.max_condition);
    s.number("inlier_ray_error", t.inlier_ray_error);
    s.number("outlier_factor", t.outlier_factor);
    s.integer("rejection_rounds", t.rejection_rounds);
  });
  detail::read_section(r, "keyframe", [&](ObjectReader& s) {
    auto& k = cfg.agent.keyframe;
    s.number("f_min", k.f_min);
    s.integer("n_min", k.n_min);
    s.integer("retrieval_k", k.retrieval_k);
    s.number("s_min", k.s_min);
    s.integer("e_min", k.e_min);
    s.number("loop_min_inlier_fraction", k.loop_min_inlier_fraction);
  });
  detail::read_section(r, "graph", [&](ObjectReader& s) {
    auto& g = cfg.agent.graph;
    s.integer("max_iters", g.max_iters);
    s.number("g_tol", g.g_tol);
    s.integer("max_edge_matches", g.max_edge_matches);
  });
  detail::read_section(r, "agent", [&](ObjectReader& s) {
    s.boolean("graph_optimization", cfg.agent.graph_optimization);
    s.boolean("loop_closure", cfg.agent.loop_closure);
    s.integer("max_consecutive_skips", cfg.agent.max_consecutive_skips);
  });
  detail::read_section(r, "server", [&](ObjectReader& s) {
    s.number("inter_similarity_margin", cfg.server.inter_similarity_margin);
    s.number("c_export", cfg.server.c_export);
    s.integer("workers", cfg.server.workers);
  });
  detail::read_section(r, "scene", [&](ObjectReader& s) {
    SceneSpec scene;
    s.integer("feature_seed", scene.feature_seed);
    if (const json* boxes = s.get("boxes")) {
      if (!boxes->is_array()) throw ConfigError("scene.boxes must be an array");
      for (std::size_t i = 0; i < boxes->size(); ++i) {
        ObjectReader b((*boxes)[i], "scene.boxes[" + std::to_string(i) + "]");
        BoxSpec box;
        b.vec3("center", box.center);
        b.vec3("size", box.size);
        b.finish();
        scene.boxes.push_back(box);
      }
    }
    if (const json* agents = s.get("agents")) {
      if (!agents->is_array()) throw ConfigError("scene.agents must be an array");
      for (std::size_t i = 0; i < agents->size(); ++i) {
        ObjectReader a((*agents)[i], "scene.agents[" + std::to_string(i) + "]");
        AgentSpec spec;
        spec.id = static_cast<std::uint32_t>(i + 1);
        a.integer("id", spec.id);
        a.integer("frames", spec.frames);
        a.number("scale", spec.scale);
        a.integer("bias_max_frame_gap", spec.bias_max_frame_gap);
        if (const json* b = a.get("bias")) spec.bias = ObjectReader::to_vec<7>(*b, a.at("bias"));
        detail::read_section(a, "orbit", [&](ObjectReader& o) { spec.orbit = detail::read_orbit(o); });
        spec.orbit.frames = spec.frames;
        a.finish();
        scene.agents.push_back(spec);
      }
    }
    cfg.scene = std::move(scene);
  });
  detail::read_section(r, "dataset", [&](ObjectReader& s) {
    DatasetSpec d;
    s.string("path", d.path);
    s.number("depth_units_per_metre", d.depth_units_per_metre);
    if (const json* agents = s.get("agents")) {
      if (!agents->is_array()) throw ConfigError("dataset.agents must be an array");
      for (const auto& a : *agents) {
        if (!a.is_number_unsigned()) throw ConfigError("dataset.agents must hold agent ids");
        d.agents.push_back(a.get<std::uint32_t>());
      }
    }
    cfg.dataset = std::move(d);
  });
  r.finish();

  cfg.agent.frame_rate = cfg.frame_rate;
  cfg.server.frame_rate = cfg.frame_rate;
  cfg.server.keyframe = cfg.agent.keyframe;
  cfg.server.matching = cfg.agent.matching;
  cfg.server.tracking = cfg.agent.tracking;
  cfg.server.graph = cfg.agent.graph;
  return cfg;
}

/// Checks cross-field constraints; throws ConfigError.
inline void validate(const RunConfig& cfg) {
  if (cfg.scene.has_value() == cfg.dataset.has_value()) {
    throw ConfigError("exactly one of scene or dataset must be given");
  }
  if (!(cfg.frame_rate > 0.0)) throw ConfigError("frame_rate must be positive");
  cfg.intrinsics.validate();
  cfg.noise.validate();
  const auto ids = cfg.agent_ids();
  if (ids.empty()) throw ConfigError("no agents configured");
  if (std::set<std::uint32_t>(ids.begin(), ids.end()).size() != ids.size()) throw ConfigError("duplicate agent id");
  if (cfg.scene) {
    for (const auto& a : cfg.scene->agents) {
      if (a.frames <= 0) throw ConfigError("agent " + std::to_string(a.id) + ": frames must be positive");
      if (!(a.scale > 0.0)) throw ConfigError("agent " + std::to_string(a.id) + ": scale must be positive");
    }
    if (cfg.scene->boxes.empty()) throw ConfigError("scene has no geometry");
  }
  if (cfg.dataset && cfg.predictor == "oracle") {
    throw ConfigError("the oracle predictor needs a synthetic scene; use a bridge predictor for datasets");
  }
  if (cfg.predictor != "oracle") {
    if (cfg.predictor.rfind("bridge:", 0) != 0) throw ConfigError("predictor must be oracle or bridge:<host:port>");
    parse_endpoint(cfg.predictor.substr(7));
  }
  if (!(cfg.server.c_export >= 0.0)) throw ConfigError("server.c_export must be >= 0");
}

inline RunConfig load_run_config(const std::string& path) {
  const auto bytes = io::read_file(path);
  RunConfig cfg = parse_run_config(std::string(bytes.begin(), bytes.end()));
  return cfg;
}

/// Keeps the first n declared agents.
inline void truncate_agents(RunConfig& cfg, std::size_t n) {
  const std::size_t have = cfg.agent_ids().size();
  if (n == 0) throw ConfigError("--agents must be at least 1");
  if (n > have) {
    throw ConfigError("--agents " + std::to_string(n) + " exceeds the " + std::to_string(have) + " declared agents");
  }
  if (cfg.scene) cfg.scene->agents.resize(n);
  if (cfg.dataset) cfg.dataset->agents.resize(n);
}

/// Two overlapping orbits in a furnished room.
inline RunConfig default_run_config() {
  RunConfig cfg;
  SceneSpec s;
  s.boxes = {{Vec3(0, 0, 0), Vec3(4.0, 2.6, 4.0)}, {Vec3(1.2, -0.9, 0.8), Vec3(0.6, 0.8, 0.6)}};
  for (std::uint32_t id : {1u, 2u}) {
    AgentSpec a;
    a.id = id;
    a.frames = 150;
    a.orbit.start_deg = id == 1 ? 0.0 : 180.0;
    a.orbit.sweep_deg = 300.0;
    a.orbit.frames = a.frames;
    s.agents.push_back(a);
  }
  cfg.scene = std::move(s);
  return cfg;
}

inline std::string to_json(const RunConfig& cfg) {
  using detail::json;
  auto vec = [](const auto& v) {
    json a = json::array();
    for (int i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
  };
  const auto& m = cfg.agent.matching;
  const auto& t = cfg.agent.tracking;
  const auto& k = cfg.agent.keyframe;
  const auto& g = cfg.agent.graph;
  json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["frame_rate"] = cfg.frame_rate;
  j["predictor"] = cfg.predictor;
  j["bridge_timeout_ms"] = cfg.bridge_timeout_ms;
  j["metric_threshold"] = cfg.metric_threshold;
  const auto& in = cfg.intrinsics;
  j["intrinsics"] = {{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy}, {"width", in.width},
                     {"height", in.height}};
  j["noise"] = {{"depth_sigma", cfg.noise.depth_sigma}, {"conf_min", cfg.noise.conf_min},
                {"dropout", cfg.noise.dropout}};
  j["matching"] = {{"max_iters", m.max_iters}, {"lambda_init", m.lambda_init}, {"theta_match", m.theta_match},
                   {"window", m.window}};
  j["tracking"] = {{"sigma_r_sq", t.sigma_r_sq},         {"q_floor", t.q_floor},
                   {"huber_delta", t.huber_delta},       {"distance_weight", t.distance_weight},
                   {"g_tol", t.g_tol},                   {"max_iters", t.max_iters},
                   {"min_matches", t.min_matches},       {"max_condition", t.max_condition},
                   {"inlier_ray_error", t.inlier_ray_error}, {"outlier_factor", t.outlier_factor},
                   {"rejection_rounds", t.rejection_rounds}};
  j["keyframe"] = {{"f_min", k.f_min},   {"n_min", k.n_min}, {"retrieval_k", k.retrieval_k},
                   {"s_min", k.s_min},   {"e_min", k.e_min}, {"loop_min_inlier_fraction", k.loop_min_inlier_fraction}};
  j["graph"] = {{"max_iters", g.max_iters}, {"g_tol", g.g_tol}, {"max_edge_matches", g.max_edge_matches}};
  j["agent"] = {{"graph_optimization", cfg.agent.graph_optimization},
                {"loop_closure", cfg.agent.loop_closure},
                {"max_consecutive_skips", cfg.agent.max_consecutive_skips}};
  j["server"] = {{"inter_similarity_margin", cfg.server.inter_similarity_margin},
                 {"c_export", cfg.server.c_export},
                 {"workers", cfg.server.workers}};
  if (cfg.scene) {
    json s;
    s["feature_seed"] = cfg.scene->feature_seed;
    s["boxes"] = json::array();
    for (const auto& b : cfg.scene->boxes) s["boxes"].push_back({{"center", vec(b.center)}, {"size", vec(b.size)}});
    s["agents"] = json::array();
    for (const auto& a : cfg.scene->agents) {
      const auto& o = a.orbit;
      s["agents"].push_back({{"id", a.id},
                             {"frames", a.frames},
                             {"scale", a.scale},
                             {"bias", vec(a.bias)},
                             {"bias_max_frame_gap", a.bias_max_frame_gap},
                             {"orbit",
                              {{"center", vec(o.center)},
                               {"radius", o.radius},
                               {"start_deg", o.start_deg},
                               {"sweep_deg", o.sweep_deg},
                               {"look_offset_deg", o.look_offset_deg},
                               {"pitch_amplitude_deg", o.pitch_amplitude_deg},
                               {"height_amplitude", o.height_amplitude}}}});
    }
    j["scene"] = s;
  }
  if (cfg.dataset) {
    j["dataset"] = {{"path", cfg.dataset->path},
                    {"agents", cfg.dataset->agents},
                    {"depth_units_per_metre", cfg.dataset->depth_units_per_metre}};
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Sources: streams, predictors and ground truth.

inline SyntheticScene build_scene(const RunConfig& cfg) {
  if (!cfg.scene) throw ConfigError("no synthetic scene configured");
  SyntheticScene s;
  s.intrinsics = cfg.intrinsics;
  s.feature_seed = cfg.scene->feature_seed;
  for (const auto& b : cfg.scene->boxes) s.add_box(b.center, b.size);
  for (const auto& a : cfg.scene->agents) {
    OrbitSpec o = a.orbit;
    o.frames = a.frames;
    s.trajectories[a.id] = orbit_trajectory(o);
  }
  s.validate();
  return s;
}

inline std::string agent_dir(const DatasetSpec& d, std::uint32_t agent) {
  return (std::filesystem::path(d.path) / ("agent_" + std::to_string(agent))).string();
}

/// Numbered frames of one dataset agent: files "<index>.pgm" or ".ppm".
inline std::map<std::uint32_t, std::string> dataset_frames(const DatasetSpec& d, std::uint32_t agent) {
  namespace fs = std::filesystem;
  const fs::path dir = agent_dir(d, agent);
  if (!fs::is_directory(dir)) throw IoError("missing agent directory " + dir.string());
  std::map<std::uint32_t, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext != ".pgm" && ext != ".ppm") continue;
    const std::string stem = e.path().stem().string();
    std::uint32_t idx = 0;
    const auto [p, ec] = std::from_chars(stem.data(), stem.data() + stem.size(), idx);
    if (ec != std::errc() || p != stem.data() + stem.size()) continue;
    if (!out.emplace(idx, e.path().string()).second) throw ConfigError("frame index repeated in " + dir.string());
  }
  if (out.empty()) throw IoError("no frames in " + dir.string());
  return out;
}

struct AgentSource {
  std::uint32_t id = 0;
  std::vector<std::uint32_t> frames;
  std::optional<Trajectory> ground_truth;
};

inline std::vector<AgentSource> agent_sources(const RunConfig& cfg, const SyntheticScene* scene) {
  std::vector<AgentSource> out;
  if (cfg.scene) {
    for (const auto& a : cfg.scene->agents) {
      AgentSource s{a.id, {}, Trajectory{}};
      const auto& poses = scene->trajectories.at(a.id);
      for (std::uint32_t f = 0; f < static_cast<std::uint32_t>(a.frames); ++f) {
        s.frames.push_back(f);
        s.ground_truth->push_back(f / cfg.frame_rate, poses[f]);
      }
      out.push_back(std::move(s));
    }
    return out;
  }
  for (const auto id : cfg.dataset->agents) {
    AgentSource s{id, {}, std::nullopt};
    for (const auto& [idx, path] : dataset_frames(*cfg.dataset, id)) s.frames.push_back(idx);
    const auto gt = std::filesystem::path(agent_dir(*cfg.dataset, id)) / "groundtruth.txt";
    if (std::filesystem::exists(gt)) {
      const auto bytes = io::read_file(gt.string());
      s.ground_truth = parse_tum(std::string(bytes.begin(), bytes.end()));
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline ImageSource image_source(const RunConfig& cfg, std::shared_ptr<const SyntheticScene> scene) {
  if (scene) {
    return [scene](const FrameRef& f) { return to_wire_image(synthetic_image(*scene, scene->pose(f))); };
  }
  std::map<std::uint32_t, std::map<std::uint32_t, std::string>> files;
  for (const auto id : cfg.dataset->agents) files[id] = dataset_frames(*cfg.dataset, id);
  return [files = std::move(files)](const FrameRef& f) {
    const auto a = files.find(f.agent);
    if (a == files.end() || !a->second.contains(f.index)) {
      throw LookupError("no image for frame " + std::to_string(f.agent) + ":" + std::to_string(f.index));
    }
    return to_wire_image(decode_pnm(io::read_file(a->second.at(f.index))));
  };
}

/// One fresh predictor per call; workers never share predictor state.
inline PredictorFactory predictor_factory(const RunConfig& cfg, std::shared_ptr<const SyntheticScene> scene) {
  if (cfg.predictor == "oracle") {
    std::map<std::uint32_t, double> scales;
    std::vector<std::pair<std::uint32_t, std::pair<TangentVector, std::uint32_t>>> biases;
    for (const auto& a : cfg.scene->agents) {
      if (a.scale != 1.0) scales[a.id] = a.scale;
      if (!a.bias.isZero()) biases.push_back({a.id, {a.bias, a.bias_max_frame_gap}});
    }
    return [scene, noise = cfg.noise, seed = cfg.seed, scales, biases]() -> std::unique_ptr<Predictor> {
      auto p = std::make_unique<OraclePredictor>(*scene, noise, seed, scales);
      for (const auto& [id, b] : biases) p->set_pair_bias(id, b.first, b.second);
      return p;
    };
  }
  const Endpoint ep = parse_endpoint(cfg.predictor.substr(7));
  ImageSource images = image_source(cfg, scene);
  return [ep, images, timeout = cfg.bridge_timeout_ms]() -> std::unique_ptr<Predictor> {
    return std::make_unique<BridgePredictor>(ep, images, timeout);
  };
}

/// Ground-truth cloud from the depth at the given frames.
inline std::optional<PointCloud> ground_truth_cloud(const RunConfig& cfg, const SyntheticScene* scene,
                                                    const std::map<std::uint32_t, Trajectory>& gt,
                                                    const std::vector<FrameRef>& frames) {
  std::vector<DepthImage> depths;
  std::vector<SimilarityTransform> poses;
  for (const auto& f : frames) {
    if (scene) {
      const RenderResult r = synthetic_render(*scene, scene->pose(f), NoiseModel{}, 0);
      DepthImage d{r.points.height(), r.points.width(), std::vector<double>(r.points.size(), 0.0)};
      for (std::size_t i = 0; i < r.points.size(); ++i) {
        if (r.points.valid(i)) d.depth[i] = r.points.point(i).z();
      }
      depths.push_back(std::move(d));
      poses.push_back(scene->pose(f));
      continue;
    }
    const auto g = gt.find(f.agent);
    if (g == gt.end()) continue;
    const auto pose = g->second.lookup(f.index / cfg.frame_rate);
    char name[32];
    std::snprintf(name, sizeof name, "%06u.pgm", f.index);
    const auto path = std::filesystem::path(agent_dir(*cfg.dataset, f.agent)) / "depth" / name;
    if (!pose || !std::filesystem::exists(path)) continue;
    depths.push_back(depth_from_pnm(decode_pnm(io::read_file(path.string())), cfg.dataset->depth_units_per_metre));
    poses.push_back(*pose);
  }
  if (depths.empty()) return std::nullopt;
  return backproject_gt(depths, poses, cfg.intrinsics);
}

// ---------------------------------------------------------------------------
// Full system.

struct AgentOutcome {
  std::uint32_t id = 0;
  bool ok = false;
  std::string error;
  AgentStats stats;
  std::vector<std::string> log;
};

struct SystemResult {
  int exit_code = 0;  // 0 ok, 1 partial
  std::vector<AgentOutcome> agents;
  std::optional<FusionResult> fusion;
  std::vector<std::string> messages;
  std::map<std::string, double> metrics;
  std::vector<std::string> files;  // written, relative to the output directory
};

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  io::write_file(p.string(), std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

/// Collects serialized submaps (empty entries are skipped), fuses them and
/// writes trajectories, clouds, metrics and the report under
/// cfg.output_dir. `agents` carries worker outcomes for the report.
inline SystemResult run_server(const RunConfig& cfg, const std::vector<std::vector<std::uint8_t>>& submaps,
                               std::vector<AgentOutcome> agents,
                               std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now()) {
  namespace fs = std::filesystem;
  validate(cfg);
  std::shared_ptr<const SyntheticScene> scene;
  if (cfg.scene) scene = std::make_shared<const SyntheticScene>(build_scene(cfg));
  const auto sources = agent_sources(cfg, scene.get());
  const PredictorFactory factory = predictor_factory(cfg, scene);
  const fs::path out = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(out / "submaps", ec);
  if (ec) throw IoError("cannot create " + (out / "submaps").string() + ": " + ec.message());

  SystemResult res;
  res.agents = std::move(agents);
  GlobalKeyframeBuffer buf;
  std::map<std::uint32_t, Trajectory> gt;
  for (const auto& s : sources) {
    if (s.ground_truth) gt[s.id] = *s.ground_truth;
  }
  for (const auto& o : res.agents) {
    if (!o.ok) {
      res.exit_code = 1;
      res.messages.push_back("agent " + std::to_string(o.id) + " failed: " + o.error);
    }
  }
  for (const auto& bytes : submaps) {
    if (bytes.empty()) continue;
    Submap sm = deserialize_submap(bytes);
    const std::string name = "submaps/agent_" + std::to_string(sm.agent) + ".smap";
    io::write_file((out / name).string(), bytes);
    res.files.push_back(name);
    collect_submap(buf, std::move(sm), cfg.server.matching);
  }
  std::ostringstream report;
  report << std::setprecision(9);
  if (!buf.frames.empty()) {
    FusionResult fr = fuse(buf, factory, cfg.server);
    if (!fr.fused) {
      res.exit_code = 1;
      res.messages.push_back("map not fused: " + fr.warning);
    }
    for (const auto& [a, t] : fr.trajectories) {
      const std::string name = "agent_" + std::to_string(a) + ".tum";
      write_text(out / name, format_tum(t));
      res.files.push_back(name);
    }
    const GlobalMap map = export_global_map(buf, cfg.server.c_export);
    for (const auto& [a, c] : map.agent_clouds) {
      const std::string name = "agent_" + std::to_string(a) + ".ply";
      io::write_file((out / name).string(), encode_ply(c));
      res.files.push_back(name);
    }
    if (fr.fused) {
      io::write_file((out / "global.ply").string(), encode_ply(map.cloud));
      res.files.push_back("global.ply");
    } else {
      for (std::size_t k = 0; k < fr.components.size(); ++k) {
        PointCloud c;
        for (const auto a : fr.components[k]) {
          if (map.agent_clouds.contains(a)) c.append(map.agent_clouds.at(a));
        }
        const std::string name = "component_" + std::to_string(k) + ".ply";
        io::write_file((out / name).string(), encode_ply(c));
        res.files.push_back(name);
      }
    }
    report << fusion_report(buf, fr);

    // Metrics against whatever ground truth exists.
    std::vector<AgentMetrics> rows;
    for (const auto& [a, t] : fr.trajectories) {
      if (!gt.contains(a)) continue;
      AgentMetrics m;
      m.name = "agent_" + std::to_string(a);
      try {
        m.ate_rmse = ate_rmse(t, gt.at(a));
        rows.push_back(m);
      } catch (const AlignmentError& e) {
        res.messages.push_back(m.name + ": ATE unavailable: " + e.what());
      }
    }
    if (!rows.empty() && fr.fused) {
      try {
        const AteResult pre = combined_ate(fr.initial_trajectories, gt);
        const AteResult post = combined_ate(fr.trajectories, gt);
        res.metrics["ate.combined.pre_fusion"] = pre.rmse;
        res.metrics["ate.combined"] = post.rmse;
        std::vector<FrameRef> kf_frames;
        for (const auto& [id, kf] : buf.keyframes) kf_frames.push_back(frame_of(kf));
        if (auto gt_cloud = ground_truth_cloud(cfg, scene.get(), gt, kf_frames); gt_cloud && !map.cloud.empty()) {
          io::write_file((out / "ground_truth.ply").string(), encode_ply(*gt_cloud));
          res.files.push_back("ground_truth.ply");
          const PointCloud est = map.cloud.transformed(post.alignment);
          const KdTree tree(gt_cloud->points);
          IcpConfig icfg;
          icfg.rejection_radius = cfg.metric_threshold;
          const IcpResult icp = icp_align(est, tree, icfg);
          const GeometryMetrics g = geometry_metrics(est.transformed(icp.transform), *gt_cloud, cfg.metric_threshold);
          res.metrics["geometry.accuracy"] = g.accuracy;
          res.metrics["geometry.completion"] = g.completion;
          res.metrics["geometry.chamfer"] = g.chamfer;
          AgentMetrics global;
          global.name = "global";
          global.ate_rmse = post.rmse;
          global.geometry = g;
          rows.push_back(global);
        }
      } catch (const Error& e) {
        res.messages.push_back(std::string("metrics incomplete: ") + e.what());
      }
    }
    for (const auto& row : rows) res.metrics["ate." + row.name] = row.ate_rmse;
    if (!rows.empty()) {
      write_text(out / "metrics.txt", metrics_report(rows));
      write_text(out / "metrics_table.txt", metrics_table(rows));
      res.files.push_back("metrics.txt");
      res.files.push_back("metrics_table.txt");
    }
    for (const auto& [a, t] : gt) {
      const std::string name = "ground_truth_agent_" + std::to_string(a) + ".tum";
      write_text(out / name, format_tum(t));
      res.files.push_back(name);
    }
    res.fusion = std::move(fr);
  }

  std::size_t frames_in = 0, tracked = 0;
  double agent_seconds = 0.0;
  for (const auto& o : res.agents) {
    report << "agent." << o.id << ".status = " << (o.ok ? "ok" : "failed") << "\n";
    if (!o.ok) {
      report << "agent." << o.id << ".error = " << o.error << "\n";
      continue;
    }
    report << "agent." << o.id << ".frames_in = " << o.stats.frames_in << "\n";
    report << "agent." << o.id << ".frames_tracked = " << o.stats.frames_tracked << "\n";
    report << "agent." << o.id << ".frames_skipped = " << o.stats.frames_skipped << "\n";
    report << "agent." << o.id << ".keyframes = " << o.stats.keyframes << "\n";
    report << "agent." << o.id << ".loop_edges = " << o.stats.loop_edges << "\n";
    report << "agent." << o.id << ".seconds = " << o.stats.seconds << "\n";
    report << "agent." << o.id << ".fps = " << o.stats.fps() << "\n";
    frames_in += o.stats.frames_in;
    tracked += o.stats.frames_tracked;
    agent_seconds = std::max(agent_seconds, o.stats.seconds);
  }
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report << "system.frames_in = " << frames_in << "\n";
  report << "system.frames_tracked = " << tracked << "\n";
  report << "system.agent_wall_seconds = " << agent_seconds << "\n";
  report << "system.total_seconds = " << total << "\n";
  report << "system.fps = " << (total > 0.0 ? static_cast<double>(tracked) / total : 0.0) << "\n";
  for (const auto& [k, v] : res.metrics) report << "metric." << k << " = " << v << "\n";
  for (const auto& m : res.messages) report << "message = " << m << "\n";
  write_text(out / "report.txt", report.str());
  res.files.push_back("report.txt");
  write_text(out / "config.json", to_json(cfg));
  res.files.push_back("config.json");
  return res;
}

/// Runs every agent on its own thread, hands the serialized submaps to the
/// server, fuses and writes all outputs under cfg.output_dir.
inline SystemResult run_system(const RunConfig& cfg) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  std::shared_ptr<const SyntheticScene> scene;
  if (cfg.scene) scene = std::make_shared<const SyntheticScene>(build_scene(cfg));
  const auto sources = agent_sources(cfg, scene.get());
  const PredictorFactory factory = predictor_factory(cfg, scene);

  std::vector<std::vector<std::uint8_t>> submaps(sources.size());
  std::vector<AgentOutcome> agents(sources.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    workers.emplace_back([&, i] {
      AgentOutcome& o = agents[i];
      o.id = sources[i].id;
      try {
        auto pred = factory();
        AgentResult r = run_agent(*pred, o.id, sources[i].frames, cfg.agent);
        submaps[i] = serialize_submap(r.submap);
        o.stats = r.stats;
        o.log = std::move(r.log);
        o.ok = true;
      } catch (const std::exception& e) {
        o.error = e.what();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (!agents[i].ok) submaps[i].clear();
  }
  return run_server(cfg, submaps, std::move(agents), t0);
}

}  // namespace mslam
