#pragma once

// Post-hoc fusion of agent submaps: global keyframe buffer, intra- and
// inter-agent loop detection, cross-agent pre-alignment, global Sim(3)
// graph optimization and export.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/evaluation.hpp"
#include "mslam/io.hpp"
#include "mslam/keyframing.hpp"
#include "mslam/matching.hpp"
#include "mslam/predictor.hpp"
#include "mslam/tracking.hpp"

namespace mslam {

struct ServerConfig {
  KeyframeConfig keyframe;
  MatchingConfig matching;
  TrackingConfig tracking;
  GraphConfig graph;
  double inter_similarity_margin = 0.05;
  double c_export = 0.5;
  std::size_t workers = 0;  // 0: hardware concurrency
  double frame_rate = 30.0;
};

using PredictorFactory = std::function<std::unique_ptr<Predictor>()>;

struct GlobalKeyframeBuffer {
  std::map<KeyframeId, Keyframe> keyframes;  // Keyframe::pose stays submap-local
  std::map<std::uint32_t, std::vector<FrameRecord>> frames;
  RetrievalDatabase db;
  FactorGraph graph;  // node poses are the global poses

  std::vector<std::uint32_t> agents() const {
    std::vector<std::uint32_t> out;
    for (const auto& [a, f] : frames) out.push_back(a);
    return out;
  }
  std::size_t keyframe_count(std::uint32_t agent) const {
    std::size_t n = 0;
    for (const auto& [id, kf] : keyframes) n += id.agent == agent;
    return n;
  }
};

/// Matches of `query`'s canonical pixels into `reference`'s grid using the
/// submap poses only.
inline MatchSet canonical_matches(const Keyframe& query, const Keyframe& reference, const MatchingConfig& cfg) {
  const SimilarityTransform ref_from_query = reference.pose.inverse() * query.pose;
  const Pointmap moved = query.canon.points.transformed(ref_from_query);
  return refine_with_features(match_rays(reference.canon.points, moved, cfg), reference.features, query.features,
                              cfg.window);
}

/// Registers a submap: keyframes, descriptors and the rebuilt temporal chain.
inline void collect_submap(GlobalKeyframeBuffer& buf, Submap submap, const MatchingConfig& mcfg = {}) {
  if (buf.frames.contains(submap.agent)) {
    throw ConfigError("agent " + std::to_string(submap.agent) + " already collected");
  }
  if (submap.keyframes.empty()) throw ConfigError("submap of agent " + std::to_string(submap.agent) + " is empty");
  std::vector<KeyframeId> chain;
  for (auto& kf : submap.keyframes) {
    if (kf.id.agent != submap.agent) throw ConfigError("keyframe " + to_string(kf.id) + " in a foreign submap");
    if (buf.keyframes.contains(kf.id)) throw ConfigError("duplicate keyframe " + to_string(kf.id));
    chain.push_back(kf.id);
    buf.db.add(kf.id, kf.descriptor);
    buf.graph.add_node(kf.id, kf.pose);
    buf.keyframes.emplace(kf.id, std::move(kf));
  }
  for (std::size_t i = 1; i < chain.size(); ++i) {
    const Keyframe& q = buf.keyframes.at(chain[i - 1]);
    const Keyframe& r = buf.keyframes.at(chain[i]);
    buf.graph.add_edge({q.id, r.id, canonical_matches(q, r, mcfg), EdgeKind::temporal}, 0);
  }
  buf.frames[submap.agent] = std::move(submap.frames);
}

inline void collect_submap(GlobalKeyframeBuffer& buf, std::span<const std::uint8_t> bytes,
                           const MatchingConfig& mcfg = {}) {
  collect_submap(buf, deserialize_submap(bytes), mcfg);
}

struct LoopCandidate {
  Edge edge;
  SimilarityTransform relative;  // query from reference
  double inlier_fraction = 0.0;
  double similarity = 0.0;
};

struct LoopDetection {
  std::vector<LoopCandidate> accepted;
  std::size_t candidates = 0;
  std::size_t rejected = 0;
};

/// Retrieval over the whole buffer followed by parallel geometric
/// verification, one predictor per worker. Each unordered pair is verified
/// once, with the later keyframe as query.
inline LoopDetection detect_loops(const GlobalKeyframeBuffer& buf, const PredictorFactory& factory,
                                  const ServerConfig& cfg) {
  struct Pair {
    KeyframeId query, reference;
    double similarity;
  };
  std::map<std::pair<KeyframeId, KeyframeId>, double> unique;
  const auto& kc = cfg.keyframe;
  for (const auto& [id, kf] : buf.keyframes) {
    auto intra = [&, id = id](const KeyframeId& o) {
      return o.agent == id.agent && (o.seq > id.seq ? o.seq - id.seq : id.seq - o.seq) > 1;
    };
    auto inter = [&, id = id](const KeyframeId& o) { return o.agent != id.agent; };
    auto hits = buf.db.query(id, kf.descriptor, kc.retrieval_k, kc.s_min, intra);
    const auto more = buf.db.query(id, kf.descriptor, kc.retrieval_k, kc.s_min + cfg.inter_similarity_margin, inter);
    hits.insert(hits.end(), more.begin(), more.end());
    for (const auto& h : hits) {
      const auto key = std::max(id, h.id) == id ? std::pair{id, h.id} : std::pair{h.id, id};
      auto [it, fresh] = unique.emplace(key, h.similarity);
      if (!fresh) it->second = std::max(it->second, h.similarity);
    }
  }
  std::vector<Pair> pairs;
  for (const auto& [k, s] : unique) pairs.push_back({k.first, k.second, s});

  LoopDetection out;
  out.candidates = pairs.size();
  std::vector<std::optional<LoopVerification>> slots(pairs.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(pairs.size());
  std::exception_ptr factory_error;
  std::mutex factory_mutex;
  auto work = [&] {
    std::unique_ptr<Predictor> pred;
    try {
      pred = factory();
    } catch (...) {
      std::lock_guard lock(factory_mutex);
      if (!factory_error) factory_error = std::current_exception();
      return;
    }
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      const auto& p = pairs[i];
      const Keyframe& q = buf.keyframes.at(p.query);
      const Keyframe& r = buf.keyframes.at(p.reference);
      const EdgeKind kind = q.id.agent == r.id.agent ? EdgeKind::intra_loop : EdgeKind::inter_loop;
      try {
        slots[i] = verify_loop(*pred, q, r, kind, cfg.keyframe, cfg.matching, cfg.tracking);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::size_t n_workers = cfg.workers ? cfg.workers : std::max(1u, std::thread::hardware_concurrency());
  n_workers = std::min(n_workers, std::max<std::size_t>(pairs.size(), 1));
  if (n_workers <= 1) {
    work();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_workers; ++t) threads.emplace_back(work);
    for (auto& t : threads) t.join();
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    if (!slots[i]) std::rethrow_exception(factory_error);
    auto& v = *slots[i];
    if (!v.accepted) {
      ++out.rejected;
      continue;
    }
    out.accepted.push_back({std::move(v.edge), v.relative, v.inlier_fraction, pairs[i].similarity});
  }
  return out;
}

/// World-from-agent transforms seeding the global solve: the anchor agent
/// keeps its submap frame, every other agent reachable through inter-loop
/// edges is placed by its single best edge to an already placed agent.
inline std::map<std::uint32_t, SimilarityTransform> prealign_agents(const GlobalKeyframeBuffer& buf,
                                                                    const std::vector<LoopCandidate>& loops,
                                                                    std::uint32_t anchor_agent) {
  std::map<std::uint32_t, SimilarityTransform> placed{{anchor_agent, SimilarityTransform{}}};
  std::queue<std::uint32_t> q;
  q.push(anchor_agent);
  auto better = [](const LoopCandidate& a, const LoopCandidate& b) {
    if (a.inlier_fraction != b.inlier_fraction) return a.inlier_fraction > b.inlier_fraction;
    return a.edge.matches.size() > b.edge.matches.size();
  };
  while (!q.empty()) {
    const std::uint32_t a = q.front();
    q.pop();
    std::map<std::uint32_t, const LoopCandidate*> best;
    for (const auto& c : loops) {
      if (c.edge.kind != EdgeKind::inter_loop) continue;
      const std::uint32_t qa = c.edge.query.agent, ra = c.edge.reference.agent;
      if (qa != a && ra != a) continue;
      const std::uint32_t other = qa == a ? ra : qa;
      if (placed.contains(other)) continue;
      if (!best.contains(other) || better(c, *best[other])) best[other] = &c;
    }
    for (const auto& [b, c] : best) {
      const Keyframe& kq = buf.keyframes.at(c->edge.query);
      const Keyframe& kr = buf.keyframes.at(c->edge.reference);
      SimilarityTransform world_from_b;
      if (kq.id.agent == a) {
        const SimilarityTransform gq = placed.at(a) * kq.pose;
        world_from_b = gq * c->relative * kr.pose.inverse();
      } else {
        const SimilarityTransform gr = placed.at(a) * kr.pose;
        world_from_b = gr * c->relative.inverse() * kq.pose.inverse();
      }
      placed[b] = world_from_b;
      q.push(b);
    }
  }
  return placed;
}

inline std::map<KeyframeId, const Pointmap*> canonical_points(const GlobalKeyframeBuffer& buf) {
  std::map<KeyframeId, const Pointmap*> out;
  for (const auto& [id, kf] : buf.keyframes) out[id] = &kf.canon.points;
  return out;
}

/// Global solve with the anchor agent's first keyframe fixed. Throws
/// UnfusedAgentsError naming the agents not linked to the anchor.
inline GraphResult optimize_global(GlobalKeyframeBuffer& buf, std::uint32_t anchor_agent, const GraphConfig& cfg) {
  const KeyframeId anchor{anchor_agent, 0};
  if (!buf.graph.nodes.contains(anchor)) throw LookupError("anchor keyframe " + to_string(anchor) + " missing");
  buf.graph.anchor = anchor;
  const auto comps = buf.graph.components();
  if (comps.size() > 1) {
    std::set<std::uint32_t> linked, unlinked;
    for (const auto& c : comps) {
      const bool has_anchor = std::binary_search(c.begin(), c.end(), anchor);
      for (const auto& id : c) (has_anchor ? linked : unlinked).insert(id.agent);
    }
    std::string msg = "agents without an inter-agent loop to agent " + std::to_string(anchor_agent) + ":";
    for (auto a : unlinked) {
      if (!linked.contains(a)) msg += " " + std::to_string(a);
    }
    throw UnfusedAgentsError(msg);
  }
  return optimize_graph(buf.graph, canonical_points(buf), cfg);
}

/// Fallback for a disconnected graph: each component is optimized on its
/// own, anchored at its lowest keyframe id.
inline std::vector<GraphResult> optimize_components(GlobalKeyframeBuffer& buf, const GraphConfig& cfg) {
  std::vector<GraphResult> out;
  const auto pts = canonical_points(buf);
  for (const auto& comp : buf.graph.components()) {
    FactorGraph sub;
    std::set<KeyframeId> members(comp.begin(), comp.end());
    for (const auto& id : comp) sub.add_node(id, buf.graph.nodes.at(id));
    for (const auto& e : buf.graph.edges) {
      if (members.contains(e.query)) sub.edges.push_back(e);
    }
    out.push_back(optimize_graph(sub, pts, cfg));
    for (const auto& [id, pose] : sub.nodes) buf.graph.nodes[id] = pose;
  }
  return out;
}

/// Per-frame trajectory of one agent from the current global keyframe poses.
inline Trajectory agent_trajectory(const GlobalKeyframeBuffer& buf, std::uint32_t agent, double frame_rate) {
  Trajectory t;
  for (const auto& f : buf.frames.at(agent)) {
    t.push_back(f.frame / frame_rate, buf.graph.nodes.at({agent, f.keyframe_seq}) * f.relative);
  }
  return t;
}

struct FusionResult {
  std::uint32_t anchor_agent = 0;
  LoopDetection loops;
  std::map<EdgeKind, std::size_t> edge_counts;
  bool fused = false;  // single connected graph
  std::vector<std::vector<std::uint32_t>> components;
  std::string warning;
  GraphResult global;  // meaningful when fused
  std::vector<GraphResult> component_results;
  std::map<std::uint32_t, Trajectory> initial_trajectories;  // pre-aligned, before the global solve
  std::map<std::uint32_t, Trajectory> trajectories;
  double seconds = 0.0;
};

/// Loop detection, pre-alignment and the global solve on a collected buffer.
inline FusionResult fuse(GlobalKeyframeBuffer& buf, const PredictorFactory& factory, const ServerConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  if (buf.frames.empty()) throw ConfigError("no submaps collected");
  FusionResult r;
  const auto agents = buf.agents();
  r.anchor_agent = std::find(agents.begin(), agents.end(), 1u) != agents.end() ? 1u : agents.front();
  r.loops = detect_loops(buf, factory, cfg);
  for (const auto& c : r.loops.accepted) buf.graph.add_edge(c.edge, cfg.keyframe.e_min);
  for (const auto& e : buf.graph.edges) ++r.edge_counts[e.kind];

  const auto placed = prealign_agents(buf, r.loops.accepted, r.anchor_agent);
  for (auto& [id, pose] : buf.graph.nodes) {
    const auto p = placed.find(id.agent);
    pose = (p == placed.end() ? SimilarityTransform{} : p->second) * buf.keyframes.at(id).pose;
  }
  for (auto a : agents) r.initial_trajectories[a] = agent_trajectory(buf, a, cfg.frame_rate);

  for (const auto& comp : buf.graph.components()) {
    std::set<std::uint32_t> s;
    for (const auto& id : comp) s.insert(id.agent);
    r.components.emplace_back(s.begin(), s.end());
  }
  try {
    r.global = optimize_global(buf, r.anchor_agent, cfg.graph);
    r.fused = true;
  } catch (const UnfusedAgentsError& e) {
    r.warning = e.what();
    r.component_results = optimize_components(buf, cfg.graph);
  }
  for (auto a : agents) r.trajectories[a] = agent_trajectory(buf, a, cfg.frame_rate);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

struct GlobalMap {
  PointCloud cloud;
  std::map<std::uint32_t, PointCloud> agent_clouds;
};

/// Canonical points at or above c_export, moved to their keyframe's global pose.
inline GlobalMap export_global_map(const GlobalKeyframeBuffer& buf, double c_export) {
  GlobalMap out;
  for (const auto& [id, kf] : buf.keyframes) {
    const SimilarityTransform& pose = buf.graph.nodes.at(id);
    PointCloud& agent = out.agent_clouds[id.agent];
    const auto& pts = kf.canon.points;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double c = kf.canon.confidence[i];
      if (!pts.valid(i) || !(c >= c_export)) continue;
      agent.points.push_back(pose.act(pts.point(i)));
      agent.confidence.push_back(c);
    }
  }
  for (const auto& [a, c] : out.agent_clouds) out.cloud.append(c);
  if (out.cloud.confidence.size() != out.cloud.points.size()) out.cloud.confidence.resize(out.cloud.points.size(), 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Output formats.

/// TUM lines "timestamp tx ty tz qx qy qz qw"; the similarity scale is dropped.
inline std::string format_tum(const Trajectory& t) {
  std::string out;
  char line[256];
  for (const auto& p : t) {
    Eigen::Quaterniond q = p.pose.rotation().quaternion();
    if (q.w() < 0.0) q.coeffs() *= -1.0;
    const Vec3& x = p.pose.translation();
    std::snprintf(line, sizeof line, "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", p.timestamp, x.x(), x.y(), x.z(),
                  q.x(), q.y(), q.z(), q.w());
    out += line;
  }
  return out;
}

inline Trajectory parse_tum(const std::string& text) {
  Trajectory t;
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t at = offset;
    offset += line.size() + 1;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double v[8];
    for (double& x : v) {
      if (!(ls >> x)) throw ParseError("TUM line needs 8 numbers", at);
    }
    std::string rest;
    if (ls >> rest) throw ParseError("trailing fields on TUM line", at);
    const Eigen::Quaterniond q(v[7], v[4], v[5], v[6]);
    if (!(std::abs(q.norm() - 1.0) < 1e-3)) throw ParseError("TUM quaternion is not unit length", at);
    try {
      t.push_back(v[0], {1.0, Rotation(q), Vec3(v[1], v[2], v[3])});
    } catch (const ConfigError&) {
      throw ParseError("TUM timestamps must be strictly increasing", at);
    }
  }
  return t;
}

/// Binary little-endian PLY, float32 x y z confidence per vertex.
inline std::vector<std::uint8_t> encode_ply(const PointCloud& cloud) {
  io::ByteWriter w;
  const std::string header = "ply\nformat binary_little_endian 1.0\nelement vertex " +
                             std::to_string(cloud.size()) +
                             "\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\n"
                             "end_header\n";
  w.magic(header);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    w.f32(static_cast<float>(p.x()));
    w.f32(static_cast<float>(p.y()));
    w.f32(static_cast<float>(p.z()));
    w.f32(static_cast<float>(cloud.confidence.empty() ? 1.0 : cloud.confidence[i]));
  }
  return w.take();
}

/// Reads the layout written by encode_ply.
inline PointCloud decode_ply(std::span<const std::uint8_t> bytes) {
  const std::string text(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(bytes.size(), 4096)));
  const std::string end = "end_header\n";
  const auto stop = text.find(end);
  if (text.rfind("ply\n", 0) != 0 || stop == std::string::npos) throw ParseError("not a PLY file", 0);
  std::istringstream hs(text.substr(0, stop));
  std::string line;
  std::size_t count = 0;
  std::vector<std::string> props;
  bool binary = false;
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      binary = fmt == "binary_little_endian";
    } else if (key == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex") throw ParseError("unsupported PLY element " + name, 0);
    } else if (key == "property") {
      std::string type, name;
      ls >> type >> name;
      if (type != "float") throw ParseError("unsupported PLY property type " + type, 0);
      props.push_back(name);
    }
  }
  const std::vector<std::string> expected{"x", "y", "z", "confidence"};
  if (!binary || props != expected) throw ParseError("unsupported PLY layout", 0);
  io::ByteReader r(bytes);
  std::vector<std::uint8_t> skip(stop + end.size());
  r.bytes(skip.data(), skip.size());
  if (r.remaining() != count * 16) throw ParseError("PLY vertex data size mismatch", r.offset());
  PointCloud cloud;
  cloud.points.reserve(count);
  cloud.confidence.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double x = r.f32(), y = r.f32(), z = r.f32();
    cloud.points.emplace_back(x, y, z);
    cloud.confidence.push_back(r.f32());
  }
  return cloud;
}

inline std::string fusion_report(const GlobalKeyframeBuffer& buf, const FusionResult& r) {
  std::ostringstream o;
  o << std::setprecision(9);
  o << "server.anchor_agent = " << r.anchor_agent << "\n";
  for (auto a : buf.agents()) o << "server.agent." << a << ".keyframes = " << buf.keyframe_count(a) << "\n";
  for (auto k : {EdgeKind::temporal, EdgeKind::intra_loop, EdgeKind::inter_loop}) {
    const auto it = r.edge_counts.find(k);
    o << "server.edges." << to_string(k) << " = " << (it == r.edge_counts.end() ? 0 : it->second) << "\n";
  }
  o << "server.loop_candidates = " << r.loops.candidates << "\n";
  o << "server.loop_rejected = " << r.loops.rejected << "\n";
  o << "server.fused = " << (r.fused ? "true" : "false") << "\n";
  o << "server.components = " << r.components.size() << "\n";
  if (r.fused) {
    o << "server.energy.initial = " << r.global.initial_energy << "\n";
    o << "server.energy.final = " << r.global.final_energy << "\n";
    o << "server.iterations = " << r.global.iterations << "\n";
    o << "server.converged = " << (r.global.converged ? "true" : "false") << "\n";
  } else {
    o << "server.warning = " << r.warning << "\n";
  }
  o << "server.seconds = " << r.seconds << "\n";
  return o.str();
}

}  // namespace mslam
