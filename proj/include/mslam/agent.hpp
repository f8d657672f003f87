#pragma once

// One agent's tracking and mapping loop over its frame stream.

#include <chrono>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/evaluation.hpp"
#include "mslam/keyframing.hpp"
#include "mslam/matching.hpp"
#include "mslam/pointmap.hpp"
#include "mslam/predictor.hpp"
#include "mslam/tracking.hpp"

namespace mslam {

struct AgentConfig {
  MatchingConfig matching;
  TrackingConfig tracking;
  KeyframeConfig keyframe;
  GraphConfig graph;
  bool graph_optimization = true;
  bool loop_closure = true;
  int max_consecutive_skips = 10;
  double frame_rate = 30.0;
};

struct LoopClosureRecord {
  KeyframeId query, reference;
  double energy_before = 0.0;  // local graph energy with the new edge, before optimization
  double energy_after = 0.0;
};

struct AgentStats {
  std::size_t frames_in = 0;
  std::size_t frames_tracked = 0;
  std::size_t frames_skipped = 0;
  std::size_t keyframes = 0;
  std::size_t loop_edges = 0;
  std::size_t rejected_loops = 0;
  std::size_t graph_optimizations = 0;
  bool tracking_energy_monotone = true;
  double seconds = 0.0;
  std::vector<LoopClosureRecord> loop_closures;

  double fps() const { return seconds > 0.0 ? static_cast<double>(frames_tracked) / seconds : 0.0; }
};

struct AgentResult {
  std::uint32_t agent = 0;
  Submap submap;
  FactorGraph graph;
  Trajectory trajectory;  // agent world frame: first keyframe's camera
  AgentStats stats;
  std::vector<std::string> log;
};

namespace detail {

inline bool non_increasing(const std::vector<double>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i) {
    if (trace[i] > trace[i - 1]) return false;
  }
  return true;
}

inline std::map<KeyframeId, const Pointmap*> keyframe_points(const std::vector<Keyframe>& kfs) {
  std::map<KeyframeId, const Pointmap*> out;
  for (const auto& kf : kfs) out[kf.id] = &kf.canon.points;
  return out;
}

inline Trajectory frame_trajectory(const std::vector<Keyframe>& kfs, const std::vector<FrameRecord>& frames,
                                   double frame_rate) {
  Trajectory t;
  for (const auto& f : frames) {
    t.push_back(f.frame / frame_rate, kfs.at(f.keyframe_seq).pose * f.relative);
  }
  return t;
}

}  // namespace detail

/// Runs tracking, canonical fusion, keyframe insertion, loop closure and
/// local graph optimization over `frames` (indices into the agent's
/// stream, increasing).
inline AgentResult run_agent(Predictor& predictor, std::uint32_t agent, const std::vector<std::uint32_t>& frames,
                             const AgentConfig& cfg) {
  if (frames.empty()) throw ConfigError("agent " + std::to_string(agent) + " has an empty stream");
  if (!(cfg.frame_rate > 0.0)) throw ConfigError("frame rate must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  AgentResult out;
  out.agent = agent;
  out.stats.frames_in = frames.size();
  std::vector<Keyframe> kfs;
  std::vector<FrameRecord> records;
  RetrievalDatabase db;

  auto add_keyframe = [&](std::uint32_t frame, CanonicalPointmap canon, FeatureMap features,
                          const SimilarityTransform& pose) -> Keyframe& {
    Keyframe kf;
    kf.id = {agent, static_cast<std::uint32_t>(kfs.size())};
    kf.frame = frame;
    kf.canon = std::move(canon);
    kf.features = std::move(features);
    kf.pose = pose;
    kf.descriptor = compute_retrieval_descriptor(kf.features);
    out.graph.add_node(kf.id, kf.pose);
    kfs.push_back(std::move(kf));
    records.push_back({frame, kfs.back().id.seq, SimilarityTransform{}});
    return kfs.back();
  };

  {
    auto m = predictor.monocular_init({agent, frames.front()});
    add_keyframe(frames.front(), {std::move(m.points), std::move(m.confidence)}, std::move(m.features), {});
    db.add(kfs.back().id, kfs.back().descriptor);
    ++out.stats.frames_tracked;
  }

  const std::size_t pixels = kfs.front().canon.points.size();
  const std::size_t n_min = cfg.keyframe.n_min > 0 ? cfg.keyframe.n_min : pixels / 20;
  SimilarityTransform t_kf;
  int skips = 0;

  for (std::size_t fi = 1; fi < frames.size(); ++fi) {
    const std::uint32_t frame = frames[fi];
    Keyframe& kf = kfs.back();
    PredictionPair p = predictor.predict({agent, frame}, frame_of(kf));
    MatchSet matches = keyframe_matches(p, cfg.matching);
    TrackingResult tr;
    try {
      tr = estimate_relative_pose(kf.canon.points, p.x_ii, matches, t_kf, cfg.tracking);
    } catch (const UnderconstrainedError& e) {
      out.log.push_back("frame " + std::to_string(frame) + " skipped: " + e.what());
    } catch (const DegenerateGeometryError& e) {
      out.log.push_back("frame " + std::to_string(frame) + " skipped: " + e.what());
    }
    if (tr.energy_trace.empty()) {
      ++out.stats.frames_skipped;
      if (++skips > cfg.max_consecutive_skips) {
        throw AgentFailureError("agent " + std::to_string(agent) + ": more than " +
                                std::to_string(cfg.max_consecutive_skips) + " consecutive tracking failures");
      }
      continue;
    }
    skips = 0;
    ++out.stats.frames_tracked;
    if (!detail::non_increasing(tr.energy_trace)) out.stats.tracking_energy_monotone = false;
    t_kf = tr.pose;
    kf.canon = fuse_canonical(kf.canon, p.x_ij, p.c_ij, t_kf);

    if (!should_insert_keyframe(tr.stats, cfg.keyframe.f_min, n_min)) {
      records.push_back({frame, kf.id.seq, t_kf});
      continue;
    }

    const KeyframeId prev = kf.id;
    const SimilarityTransform pose = kf.pose * t_kf;
    Keyframe& nk = add_keyframe(frame, {std::move(p.x_ii), std::move(p.c_ii)}, std::move(p.f_ii), pose);
    t_kf = SimilarityTransform{};
    out.graph.add_edge({prev, nk.id, std::move(matches), EdgeKind::temporal}, cfg.keyframe.e_min);

    bool new_loop = false;
    if (cfg.loop_closure) {
      for (const auto& hit : db.query(nk.id, nk.descriptor, cfg.keyframe.retrieval_k, cfg.keyframe.s_min)) {
        const Keyframe& cand = kfs.at(hit.id.seq);
        auto v = verify_loop(predictor, nk, cand, EdgeKind::intra_loop, cfg.keyframe, cfg.matching, cfg.tracking);
        if (v.accepted && out.graph.add_edge(std::move(v.edge), cfg.keyframe.e_min)) {
          ++out.stats.loop_edges;
          new_loop = true;
          out.log.push_back("loop " + to_string(nk.id) + " -> " + to_string(hit.id));
        } else {
          ++out.stats.rejected_loops;
        }
      }
    }
    db.add(nk.id, nk.descriptor);

    if (cfg.graph_optimization && kfs.size() > 1) {
      const auto pts = detail::keyframe_points(kfs);
      try {
        const auto res = optimize_graph(out.graph, pts, cfg.graph);
        ++out.stats.graph_optimizations;
        if (new_loop) {
          out.stats.loop_closures.push_back(
              {kfs.back().id, out.graph.edges.back().reference, res.initial_energy, res.final_energy});
        }
        for (auto& k : kfs) k.pose = out.graph.nodes.at(k.id);
      } catch (const DegenerateGeometryError& e) {
        out.log.push_back("local optimization at " + to_string(kfs.back().id) + " failed: " + e.what());
      }
    }
  }

  out.stats.keyframes = kfs.size();
  out.trajectory = detail::frame_trajectory(kfs, records, cfg.frame_rate);
  out.submap.agent = agent;
  out.submap.frames = std::move(records);
  out.submap.keyframes = std::move(kfs);
  out.stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace mslam
