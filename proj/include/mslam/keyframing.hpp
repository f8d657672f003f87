#pragma once

// Keyframes, the retrieval database, the keyframe factor graph with its
// Gauss-Newton solver, and the submap container handed to the server.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "mslam/errors.hpp"
#include "mslam/geometry.hpp"
#include "mslam/io.hpp"
#include "mslam/matching.hpp"
#include "mslam/pointmap.hpp"
#include "mslam/predictor.hpp"
#include "mslam/tracking.hpp"

namespace mslam {

struct KeyframeId {
  std::uint32_t agent = 0;
  std::uint32_t seq = 0;
  auto operator<=>(const KeyframeId&) const = default;
};

inline std::string to_string(const KeyframeId& id) {
  return std::to_string(id.agent) + ":" + std::to_string(id.seq);
}

struct Keyframe {
  KeyframeId id;
  std::uint32_t frame = 0;
  CanonicalPointmap canon;
  FeatureMap features;
  SimilarityTransform pose;  // world from keyframe
  std::vector<double> descriptor;
};

struct KeyframeConfig {
  double f_min = 0.33;
  std::size_t n_min = 0;  // 0: H*W/20
  std::size_t retrieval_k = 3;
  double s_min = 0.85;
  std::size_t e_min = 100;
  double loop_min_inlier_fraction = 0.5;
};

inline bool should_insert_keyframe(const MatchStats& stats, double f_min, std::size_t n_min) {
  return stats.valid_fraction < f_min || stats.matched_count < n_min;
}

/// Unit-norm confidence-weighted mean descriptor.
inline std::vector<double> compute_retrieval_descriptor(const FeatureMap& f) {
  std::vector<double> d(static_cast<std::size_t>(f.dim()), 0.0);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const double q = f.confidence(i);
    if (!(q > 0.0)) continue;
    const auto v = f.descriptor(i);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += q * v[k];
  }
  double n = 0.0;
  for (double v : d) n += v * v;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (double& v : d) v /= n;
  }
  return d;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ConfigError("descriptor length mismatch");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

struct RetrievalHit {
  KeyframeId id;
  double similarity;
};

class RetrievalDatabase {
 public:
  void add(const KeyframeId& id, std::vector<double> descriptor) {
    entries_[id] = std::move(descriptor);
  }
  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  /// Up to k entries with similarity >= s_min, best first (ties by id),
  /// never the query itself or its immediate predecessor in the same agent.
  /// `accept` optionally restricts the candidate set.
  std::vector<RetrievalHit> query(const KeyframeId& self, const std::vector<double>& descriptor,
                                  std::size_t k, double s_min,
                                  const std::function<bool(const KeyframeId&)>& accept = {}) const {
    std::vector<RetrievalHit> hits;
    for (const auto& [id, d] : entries_) {
      if (id == self) continue;
      if (id.agent == self.agent && id.seq + 1 == self.seq) continue;
      if (accept && !accept(id)) continue;
      const double s = cosine_similarity(descriptor, d);
      if (s >= s_min) hits.push_back({id, s});
    }
    std::stable_sort(hits.begin(), hits.end(),
                     [](const RetrievalHit& a, const RetrievalHit& b) { return a.similarity > b.similarity; });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

 private:
  std::map<KeyframeId, std::vector<double>> entries_;
};

enum class EdgeKind : std::uint8_t { temporal = 0, intra_loop = 1, inter_loop = 2 };

inline const char* to_string(EdgeKind k) {
  switch (k) {
    case EdgeKind::temporal: return "temporal";
    case EdgeKind::intra_loop: return "intra-loop";
    case EdgeKind::inter_loop: return "inter-loop";
  }
  return "?";
}

/// Matches between two keyframes: query pixels of `query`, continuous
/// reference locations in `reference`.
struct Edge {
  KeyframeId query;
  KeyframeId reference;
  MatchSet matches;
  EdgeKind kind = EdgeKind::temporal;
};

class FactorGraph {
 public:
  std::map<KeyframeId, SimilarityTransform> nodes;
  std::vector<Edge> edges;
  KeyframeId anchor;

  void add_node(const KeyframeId& id, const SimilarityTransform& pose) {
    if (nodes.empty()) anchor = id;
    nodes[id] = pose;
  }

  /// Adds or replaces the edge between the two keyframes. Non-temporal edges
  /// with fewer than e_min matches are rejected (returns false).
  bool add_edge(Edge e, std::size_t e_min) {
    if (e.query == e.reference) throw ConfigError("edge endpoints must differ");
    if (!nodes.contains(e.query) || !nodes.contains(e.reference)) {
      throw LookupError("edge references an unknown keyframe");
    }
    if (e.kind != EdgeKind::temporal && e.matches.size() < e_min) return false;
    for (auto& old : edges) {
      const bool same = (old.query == e.query && old.reference == e.reference) ||
                        (old.query == e.reference && old.reference == e.query);
      if (same) {
        old = std::move(e);
        return true;
      }
    }
    edges.push_back(std::move(e));
    return true;
  }

  /// Connected components over the edge set, each sorted.
  std::vector<std::vector<KeyframeId>> components() const {
    std::map<KeyframeId, std::vector<KeyframeId>> adj;
    for (const auto& [id, pose] : nodes) adj[id];
    for (const auto& e : edges) {
      adj[e.query].push_back(e.reference);
      adj[e.reference].push_back(e.query);
    }
    std::set<KeyframeId> seen;
    std::vector<std::vector<KeyframeId>> out;
    for (const auto& [id, nbrs] : adj) {
      if (seen.contains(id)) continue;
      std::vector<KeyframeId> comp;
      std::queue<KeyframeId> q;
      q.push(id);
      seen.insert(id);
      while (!q.empty()) {
        const KeyframeId cur = q.front();
        q.pop();
        comp.push_back(cur);
        for (const auto& n : adj[cur]) {
          if (seen.insert(n).second) q.push(n);
        }
      }
      std::sort(comp.begin(), comp.end());
      out.push_back(std::move(comp));
    }
    return out;
  }
};

struct GraphConfig {
  TrackingConfig residual;  // residual form, robust loss, rejection settings
  int max_iters = 50;
  double g_tol = 1e-8;
  std::size_t max_edge_matches = 1500;  // deterministic stride subsampling
};

struct GraphResult {
  double initial_energy = 0.0;
  double final_energy = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> energy_trace;
};

namespace detail {

struct EdgeTerms {
  KeyframeId query, reference;
  std::vector<Correspondence> cs;
};

inline std::vector<EdgeTerms> edge_terms(const FactorGraph& g,
                                         const std::map<KeyframeId, const Pointmap*>& points,
                                         const GraphConfig& cfg) {
  std::vector<EdgeTerms> out;
  for (const auto& e : g.edges) {
    const auto qa = points.find(e.query);
    const auto ra = points.find(e.reference);
    if (qa == points.end() || ra == points.end()) throw LookupError("missing keyframe pointmap");
    const Pointmap& qp = *qa->second;
    const Pointmap& rp = *ra->second;
    const ProjectiveGrid grid(rp);
    EdgeTerms t{e.query, e.reference, {}};
    const std::size_t n = e.matches.size();
    const std::size_t stride = cfg.max_edge_matches > 0 && n > cfg.max_edge_matches
                                   ? (n + cfg.max_edge_matches - 1) / cfg.max_edge_matches
                                   : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const Match& m = e.matches.matches[i];
      if (!qp.valid(m.query)) continue;
      const Vec3& a = qp.point(m.query);
      if (!(a.norm() > kRayEpsilon)) continue;
      const auto b = reference_point(rp, grid, m);
      if (!b || !(b->norm() > kRayEpsilon)) continue;
      t.cs.push_back({a, *b, irls_weight(m.weight, cfg.residual.sigma_r_sq, cfg.residual.q_floor)});
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline SimilarityTransform edge_relative(const std::map<KeyframeId, SimilarityTransform>& poses,
                                         const EdgeTerms& t) {
  return poses.at(t.query).inverse() * poses.at(t.reference);
}

inline double graph_energy(const std::vector<EdgeTerms>& terms,
                           const std::map<KeyframeId, SimilarityTransform>& poses, const TrackingConfig& cfg) {
  double e = 0.0;
  for (const auto& t : terms) e += robust_energy(t.cs, edge_relative(poses, t), cfg);
  return e;
}

}  // namespace detail

/// Sum over edges of the robust ray energy; depends only on relative poses.
inline double graph_energy(const FactorGraph& g, const std::map<KeyframeId, const Pointmap*>& points,
                           const GraphConfig& cfg = {}) {
  return detail::graph_energy(detail::edge_terms(g, points, cfg), g.nodes, cfg.residual);
}

/// Damped Gauss-Newton over all non-anchor poses (left perturbations),
/// dense LDLT on the 7(N-1) normal equations. Throws PartitionError when
/// the graph is not connected.
inline GraphResult optimize_graph(FactorGraph& g, const std::map<KeyframeId, const Pointmap*>& points,
                                  const GraphConfig& cfg = {}) {
  GraphResult res;
  if (g.nodes.size() <= 1) return res;
  const auto comps = g.components();
  if (comps.size() > 1) {
    std::string msg = "factor graph is disconnected:";
    for (const auto& c : comps) {
      msg += " {";
      for (std::size_t i = 0; i < c.size(); ++i) msg += (i ? " " : "") + to_string(c[i]);
      msg += "}";
    }
    throw PartitionError(msg);
  }
  if (!g.nodes.contains(g.anchor)) throw LookupError("anchor is not a graph node");

  std::map<KeyframeId, int> slot;
  int n = 0;
  for (const auto& [id, pose] : g.nodes) {
    if (id != g.anchor) slot[id] = n++;
  }
  const int dim = 7 * n;
  auto terms = detail::edge_terms(g, points, cfg);
  const TrackingConfig& rc = cfg.residual;

  struct Lin {
    double energy = 0.0;
    Eigen::MatrixXd h;
    Eigen::VectorXd b;
  };
  auto linearize = [&](const std::map<KeyframeId, SimilarityTransform>& poses) {
    Lin lin{0.0, Eigen::MatrixXd::Zero(dim, dim), Eigen::VectorXd::Zero(dim)};
    for (const auto& t : terms) {
      const SimilarityTransform& tq = poses.at(t.query);
      const SimilarityTransform& tr = poses.at(t.reference);
      const SimilarityTransform rel = tq.inverse() * tr;
      const Mat3 a = (1.0 / tq.scale()) * tq.rotation().matrix().transpose();
      const int iq = t.query == g.anchor ? -1 : slot.at(t.query);
      const int ir = t.reference == g.anchor ? -1 : slot.at(t.reference);
      Mat7 hrr = Mat7::Zero();
      Vec7 br = Vec7::Zero();
      for (const auto& c : t.cs) {
        const Vec3 yw = tr.act(c.reference);
        const Vec3 y = rel.act(c.reference);
        if (!(y.norm() > kRayEpsilon)) continue;
        const Residual r = ray_residual(c.observed, y, rc.distance_weight);
        const auto hv = huber(r.norm() / c.std, rc.huber_delta);
        lin.energy += hv.loss;
        const double w = hv.irls_weight / (c.std * c.std);
        const ResidualJacobian jr = residual_point_jacobian(y, rc.distance_weight) * a * action_jacobian(yw);
        hrr.noalias() += w * jr.transpose() * jr;
        br.noalias() += w * jr.transpose() * r;
      }
      // J_query = -J_reference.
      if (ir >= 0) {
        lin.h.block<7, 7>(7 * ir, 7 * ir) += hrr;
        lin.b.segment<7>(7 * ir) += br;
      }
      if (iq >= 0) {
        lin.h.block<7, 7>(7 * iq, 7 * iq) += hrr;
        lin.b.segment<7>(7 * iq) -= br;
      }
      if (ir >= 0 && iq >= 0) {
        lin.h.block<7, 7>(7 * ir, 7 * iq) -= hrr;
        lin.h.block<7, 7>(7 * iq, 7 * ir) -= hrr;
      }
    }
    return lin;
  };

  auto poses = g.nodes;
  Lin lin = linearize(poses);
  res.initial_energy = lin.energy;
  res.energy_trace.push_back(lin.energy);
  for (int round = 0;; ++round) {
    double lambda = 0.0;
    res.converged = false;
    for (int it = 0; it < cfg.max_iters; ++it) {
      ++res.iterations;
      if (lin.b.norm() < cfg.g_tol) {
        res.converged = true;
        break;
      }
      Eigen::MatrixXd a = lin.h;
      a.diagonal().array() += lambda + 1e-12 * lin.h.diagonal().maxCoeff();
      const Eigen::VectorXd step = -a.ldlt().solve(lin.b);
      if (!step.allFinite()) throw DegenerateGeometryError("graph normal equations are singular");
      auto candidate = poses;
      for (const auto& [id, k] : slot) candidate[id] = retract(step.segment<7>(7 * k), poses.at(id));
      const double e = detail::graph_energy(terms, candidate, rc);
      if (e <= lin.energy) {
        poses = std::move(candidate);
        lin = linearize(poses);
        res.energy_trace.push_back(lin.energy);
        lambda = lambda / 10.0 < 1e-8 ? 0.0 : lambda / 10.0;
        if (step.norm() < 1e-12) {
          res.converged = true;
          break;
        }
      } else {
        lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
        if (lambda > 1e10) {
          res.converged = true;
          break;
        }
      }
    }
    if (round >= rc.rejection_rounds || rc.outlier_factor <= 0.0) break;
    bool changed = false;
    for (auto& t : terms) {
      changed |= detail::reject_outliers(t.cs, detail::edge_relative(poses, t), rc);
    }
    if (!changed) break;
    lin = linearize(poses);
    res.energy_trace.push_back(lin.energy);
  }
  res.final_energy = lin.energy;
  for (auto& [id, pose] : g.nodes) {
    if (id != g.anchor) pose = poses.at(id);
  }
  return res;
}

inline FrameRef frame_of(const Keyframe& kf) { return {kf.id.agent, kf.frame}; }

/// Matches of `query`'s pixels into `reference` from one two-view prediction.
inline MatchSet keyframe_matches(const PredictionPair& p, const MatchingConfig& cfg) {
  return refine_with_features(match_rays(p.x_ii, p.x_ij, cfg), p.f_ii, p.f_ij, cfg.window);
}

struct LoopVerification {
  bool accepted = false;
  Edge edge;
  SimilarityTransform relative;  // query from reference
  double inlier_fraction = 0.0;
  std::string reason;
};

/// Geometric check of a retrieval candidate: enough matches and a converged
/// relative pose solve with a sufficient inlier fraction.
inline LoopVerification verify_loop(Predictor& predictor, const Keyframe& query, const Keyframe& reference,
                                    EdgeKind kind, const KeyframeConfig& kcfg, const MatchingConfig& mcfg,
                                    const TrackingConfig& tcfg) {
  LoopVerification v;
  const PredictionPair p = predictor.predict(frame_of(reference), frame_of(query));
  v.edge = {query.id, reference.id, keyframe_matches(p, mcfg), kind};
  if (v.edge.matches.size() < kcfg.e_min) {
    v.reason = "too few matches (" + std::to_string(v.edge.matches.size()) + ")";
    return v;
  }
  try {
    const auto res = estimate_relative_pose(query.canon.points, p.x_ii, v.edge.matches, SimilarityTransform{}, tcfg);
    v.relative = res.pose;
    v.inlier_fraction = res.inlier_fraction;
    if (!res.converged) {
      v.reason = "pose solve did not converge";
    } else if (res.inlier_fraction < kcfg.loop_min_inlier_fraction) {
      v.reason = "inlier fraction " + std::to_string(res.inlier_fraction);
    } else {
      v.accepted = true;
    }
  } catch (const Error& e) {
    v.reason = e.what();
  }
  return v;
}

// ---------------------------------------------------------------------------
// Submap container: "SMAP", u32 version, u32 agent, u32 keyframe count, then
// per keyframe: u32 agent, u32 seq, u32 frame, 8 x f64 pose (s, qw, qx, qy,
// qz, tx, ty, tz), PMAP dump, u32 descriptor length + f64 values. Version 1
// appends u32 frame count and per frame: u32 frame, u32 keyframe seq,
// 8 x f64 pose of the frame relative to its keyframe.

inline constexpr std::uint32_t kSubmapVersion = 1;

struct FrameRecord {
  std::uint32_t frame = 0;
  std::uint32_t keyframe_seq = 0;
  SimilarityTransform relative;  // keyframe from frame
};

struct Submap {
  std::uint32_t agent = 0;
  std::vector<Keyframe> keyframes;
  std::vector<FrameRecord> frames;
};

inline void write_pose(io::ByteWriter& w, const SimilarityTransform& t) {
  const auto& q = t.rotation().quaternion();
  w.f64(t.scale());
  w.f64(q.w());
  w.f64(q.x());
  w.f64(q.y());
  w.f64(q.z());
  w.f64(t.translation().x());
  w.f64(t.translation().y());
  w.f64(t.translation().z());
}

inline SimilarityTransform read_pose(io::ByteReader& r) {
  const std::size_t at = r.offset();
  double v[8];
  for (double& x : v) x = r.f64();
  const Eigen::Quaterniond q(v[1], v[2], v[3], v[4]);
  if (!(v[0] > 0.0) || !std::isfinite(v[0]) || !(q.norm() > 0.5 && q.norm() < 1.5)) {
    throw ParseError("invalid pose record", at);
  }
  return {v[0], Rotation(q), Vec3(v[5], v[6], v[7])};
}

inline std::vector<std::uint8_t> serialize_submap(const Submap& s) {
  io::ByteWriter w;
  w.magic("SMAP");
  w.u32(kSubmapVersion);
  w.u32(s.agent);
  w.u32(static_cast<std::uint32_t>(s.keyframes.size()));
  for (const auto& kf : s.keyframes) {
    w.u32(kf.id.agent);
    w.u32(kf.id.seq);
    w.u32(kf.frame);
    write_pose(w, kf.pose);
    write_pointmap_dump(w, kf.canon.points, kf.canon.confidence, kf.features);
    w.u32(static_cast<std::uint32_t>(kf.descriptor.size()));
    for (double d : kf.descriptor) w.f64(d);
  }
  w.u32(static_cast<std::uint32_t>(s.frames.size()));
  for (const auto& f : s.frames) {
    w.u32(f.frame);
    w.u32(f.keyframe_seq);
    write_pose(w, f.relative);
  }
  return w.take();
}

inline Submap deserialize_submap(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("SMAP");
  const std::size_t vat = r.offset();
  if (r.u32() != kSubmapVersion) throw ParseError("unsupported submap version", vat);
  Submap s;
  s.agent = r.u32();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Keyframe kf;
    const std::size_t at = r.offset();
    kf.id.agent = r.u32();
    kf.id.seq = r.u32();
    if (kf.id.agent != s.agent) throw ParseError("keyframe agent differs from submap agent", at);
    kf.frame = r.u32();
    kf.pose = read_pose(r);
    auto dump = read_pointmap_dump(r);
    kf.canon = {std::move(dump.points), std::move(dump.confidence)};
    kf.features = std::move(dump.features);
    const std::size_t dat = r.offset();
    const std::uint32_t len = r.u32();
    if (len > r.remaining() / 8) throw ParseError("descriptor length exceeds data", dat);
    kf.descriptor.resize(len);
    for (double& d : kf.descriptor) d = r.f64();
    s.keyframes.push_back(std::move(kf));
  }
  const std::size_t fat = r.offset();
  const std::uint32_t frames = r.u32();
  if (frames > r.remaining() / 72) throw ParseError("frame count exceeds data", fat);
  for (std::uint32_t i = 0; i < frames; ++i) {
    FrameRecord f;
    f.frame = r.u32();
    f.keyframe_seq = r.u32();
    f.relative = read_pose(r);
    s.frames.push_back(f);
  }
  if (!r.done()) throw ParseError("trailing bytes after submap", r.offset());
  return s;
}

}  // namespace mslam
