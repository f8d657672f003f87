#pragma once

// Trajectory and dense-geometry metrics: ATE RMSE after similarity
// alignment, accuracy / completion / chamfer with ICP alignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/geometry.hpp"
#include "mslam/predictor.hpp"

namespace mslam {

struct TimedPose {
  double timestamp = 0.0;
  SimilarityTransform pose;
};

class Trajectory {
 public:
  Trajectory() = default;

  void push_back(double timestamp, const SimilarityTransform& pose) {
    if (!poses_.empty() && !(timestamp > poses_.back().timestamp)) {
      throw ConfigError("trajectory timestamps must be strictly increasing");
    }
    poses_.push_back({timestamp, pose});
  }

  std::size_t size() const { return poses_.size(); }
  bool empty() const { return poses_.empty(); }
  const TimedPose& operator[](std::size_t i) const { return poses_[i]; }
  auto begin() const { return poses_.begin(); }
  auto end() const { return poses_.end(); }

  /// Pose at exactly this timestamp, else the nearest one within tol.
  std::optional<SimilarityTransform> lookup(double t, double tol = 0.05) const {
    auto it = std::lower_bound(poses_.begin(), poses_.end(), t,
                               [](const TimedPose& p, double v) { return p.timestamp < v; });
    if (it != poses_.end() && it->timestamp == t) return it->pose;
    const TimedPose* best = nullptr;
    double gap = tol;
    if (it != poses_.end() && it->timestamp - t <= gap) best = &*it, gap = it->timestamp - t;
    if (it != poses_.begin() && t - std::prev(it)->timestamp <= gap) best = &*std::prev(it);
    if (!best) return std::nullopt;
    return best->pose;
  }

 private:
  std::vector<TimedPose> poses_;
};

struct AssociatedPositions {
  std::vector<Vec3> est;
  std::vector<Vec3> gt;
};

inline AssociatedPositions associate(const Trajectory& est, const Trajectory& gt, double tol = 0.05) {
  AssociatedPositions out;
  for (const auto& p : est) {
    if (const auto g = gt.lookup(p.timestamp, tol)) {
      out.est.push_back(p.pose.translation());
      out.gt.push_back(g->translation());
    }
  }
  return out;
}

inline SimilarityTransform align_umeyama(const Trajectory& est, const Trajectory& gt) {
  const auto a = associate(est, gt);
  return align_points(a.est, a.gt);
}

struct AteResult {
  double rmse = 0.0;
  SimilarityTransform alignment;
  std::size_t associated = 0;
};

inline AteResult ate(const Trajectory& est, const Trajectory& gt, bool align = true) {
  const auto a = associate(est, gt);
  if (a.est.empty()) throw AlignmentError("no associated timestamps");
  AteResult r;
  r.associated = a.est.size();
  if (align) r.alignment = align_points(a.est, a.gt);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.est.size(); ++i) sum += (r.alignment.act(a.est[i]) - a.gt[i]).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(a.est.size()));
  return r;
}

inline double ate_rmse(const Trajectory& est, const Trajectory& gt, bool align = true) {
  return ate(est, gt, align).rmse;
}

/// ATE over several agents' trajectories under a single shared alignment.
/// Keys of `est` missing from `gt` are ignored.
template <typename Key>
AteResult combined_ate(const std::map<Key, Trajectory>& est, const std::map<Key, Trajectory>& gt, bool align = true) {
  AssociatedPositions all;
  for (const auto& [k, t] : est) {
    const auto g = gt.find(k);
    if (g == gt.end()) continue;
    auto a = associate(t, g->second);
    all.est.insert(all.est.end(), a.est.begin(), a.est.end());
    all.gt.insert(all.gt.end(), a.gt.begin(), a.gt.end());
  }
  if (all.est.empty()) throw AlignmentError("no associated timestamps");
  AteResult r;
  r.associated = all.est.size();
  if (align) r.alignment = align_points(all.est, all.gt);
  double sum = 0.0;
  for (std::size_t i = 0; i < all.est.size(); ++i) sum += (r.alignment.act(all.est[i]) - all.gt[i]).squaredNorm();
  r.rmse = std::sqrt(sum / static_cast<double>(all.est.size()));
  return r;
}

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> confidence;  // empty or one per point

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void append(const PointCloud& o) {
    if (!confidence.empty() || (points.empty() && !o.confidence.empty())) {
      confidence.resize(points.size(), 1.0);
      if (o.confidence.empty()) {
        confidence.insert(confidence.end(), o.points.size(), 1.0);
      } else {
        confidence.insert(confidence.end(), o.confidence.begin(), o.confidence.end());
      }
    }
    points.insert(points.end(), o.points.begin(), o.points.end());
  }
  PointCloud transformed(const SimilarityTransform& t) const {
    PointCloud out{{}, confidence};
    out.points.reserve(points.size());
    for (const auto& p : points) out.points.push_back(t.act(p));
    return out;
  }
};

/// Row-major z-depth image; non-positive or non-finite depths are invalid.
struct DepthImage {
  int height = 0;
  int width = 0;
  std::vector<double> depth;
};

inline PointCloud backproject_gt(const std::vector<DepthImage>& depths, const std::vector<SimilarityTransform>& poses,
                                 const CameraIntrinsics& k) {
  if (depths.size() != poses.size()) throw ConfigError("one pose per depth image required");
  k.validate();
  PointCloud out;
  for (std::size_t f = 0; f < depths.size(); ++f) {
    const auto& d = depths[f];
    if (d.height != k.height || d.width != k.width ||
        d.depth.size() != static_cast<std::size_t>(d.height) * d.width) {
      throw ConfigError("depth image does not match the intrinsics");
    }
    for (int r = 0; r < d.height; ++r) {
      for (int c = 0; c < d.width; ++c) {
        const double z = d.depth[static_cast<std::size_t>(r) * d.width + c];
        if (!(z > 0.0) || !std::isfinite(z)) continue;
        out.points.push_back(poses[f].act(z * k.pixel_direction(c, r)));
      }
    }
  }
  return out;
}

/// Exact nearest-neighbour index (median-split k-d tree).
class KdTree {
 public:
  KdTree() = default;
  explicit KdTree(std::vector<Vec3> points) : pts_(std::move(points)) {
    idx_.resize(pts_.size());
    std::iota(idx_.begin(), idx_.end(), 0u);
    if (!pts_.empty()) build(0, idx_.size(), 0);
  }

  std::size_t size() const { return pts_.size(); }
  bool empty() const { return pts_.empty(); }
  const Vec3& point(std::size_t i) const { return pts_[i]; }

  struct Hit {
    std::uint32_t index = 0;
    double sq_dist = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Vec3& q) const {
    Hit best;
    if (!pts_.empty()) search(q, 0, idx_.size(), 0, best);
    return best;
  }

 private:
  void build(std::size_t lo, std::size_t hi, int depth) {
    if (hi - lo <= kLeaf) return;
    const int axis = depth % 3;
    const std::size_t mid = (lo + hi) / 2;
    std::nth_element(idx_.begin() + static_cast<std::ptrdiff_t>(lo), idx_.begin() + static_cast<std::ptrdiff_t>(mid),
                     idx_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [&](std::uint32_t a, std::uint32_t b) { return pts_[a](axis) < pts_[b](axis); });
    build(lo, mid, depth + 1);
    build(mid + 1, hi, depth + 1);
  }

  void search(const Vec3& q, std::size_t lo, std::size_t hi, int depth, Hit& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) consider(q, idx_[i], best);
      return;
    }
    const int axis = depth % 3;
    const std::size_t mid = (lo + hi) / 2;
    consider(q, idx_[mid], best);
    const double diff = q(axis) - pts_[idx_[mid]](axis);
    if (diff < 0.0) {
      search(q, lo, mid, depth + 1, best);
      if (diff * diff <= best.sq_dist) search(q, mid + 1, hi, depth + 1, best);
    } else {
      search(q, mid + 1, hi, depth + 1, best);
      if (diff * diff <= best.sq_dist) search(q, lo, mid, depth + 1, best);
    }
  }

  void consider(const Vec3& q, std::uint32_t i, Hit& best) const {
    const double d = (pts_[i] - q).squaredNorm();
    if (d < best.sq_dist || (d == best.sq_dist && i < best.index)) best = {i, d};
  }

  static constexpr std::size_t kLeaf = 8;
  std::vector<Vec3> pts_;
  std::vector<std::uint32_t> idx_;
};

struct IcpConfig {
  double rejection_radius = 0.5;
  int max_iters = 50;
  double tolerance = 1e-8;  // change of mean residual
};

struct IcpResult {
  SimilarityTransform transform;  // target from source
  int iterations = 0;
  double mean_residual = 0.0;
  std::size_t correspondences = 0;
};

/// Point-to-point ICP refining `init` so that transform.act(source) lies on
/// target.
inline IcpResult icp_align(const PointCloud& source, const KdTree& target, const IcpConfig& cfg = {},
                           const SimilarityTransform& init = {}) {
  if (source.empty() || target.empty()) throw AlignmentError("ICP needs two non-empty clouds");
  IcpResult res;
  res.transform = init;
  const double r2 = cfg.rejection_radius * cfg.rejection_radius;
  std::vector<std::pair<std::size_t, std::uint32_t>> prev;
  double prev_mean = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.max_iters; ++it) {
    std::vector<std::pair<std::size_t, std::uint32_t>> pairs;
    double sum = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto hit = target.nearest(res.transform.act(source.points[i]));
      if (hit.sq_dist <= r2) {
        pairs.emplace_back(i, hit.index);
        sum += std::sqrt(hit.sq_dist);
      }
    }
    if (pairs.size() < 3) throw AlignmentError("no ICP correspondences within the rejection radius");
    const double mean = sum / static_cast<double>(pairs.size());
    res.mean_residual = mean;
    res.correspondences = pairs.size();
    if (pairs == prev || std::abs(prev_mean - mean) < cfg.tolerance) break;
    ++res.iterations;
    std::vector<Vec3> a, b;
    a.reserve(pairs.size());
    b.reserve(pairs.size());
    for (const auto& [i, j] : pairs) {
      a.push_back(source.points[i]);
      b.push_back(target.point(j));
    }
    res.transform = align_points(a, b);
    prev = std::move(pairs);
    prev_mean = mean;
  }
  return res;
}

inline IcpResult icp_align(const PointCloud& source, const PointCloud& target, const IcpConfig& cfg = {},
                           const SimilarityTransform& init = {}) {
  return icp_align(source, KdTree(target.points), cfg, init);
}

struct GeometryMetrics {
  double accuracy = 0.0;
  double completion = 0.0;
  double chamfer = 0.0;
};

namespace detail {

inline double thresholded_rmse(const std::vector<Vec3>& from, const KdTree& to, double threshold) {
  const double t2 = threshold * threshold;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : from) {
    const double d = to.nearest(p).sq_dist;
    if (d <= t2) {
      sum += d;
      ++n;
    }
  }
  if (n == 0) throw MetricError("no nearest neighbours within the metric threshold");
  return std::sqrt(sum / static_cast<double>(n));
}

}  // namespace detail

/// Accuracy (est -> gt) and completion (gt -> est) as thresholded RMSE of
/// nearest-neighbour distances; chamfer is their mean.
inline GeometryMetrics geometry_metrics(const PointCloud& est, const PointCloud& gt, double threshold = 0.5) {
  if (est.empty() || gt.empty()) throw MetricError("geometry metrics need two non-empty clouds");
  GeometryMetrics m;
  m.accuracy = detail::thresholded_rmse(est.points, KdTree(gt.points), threshold);
  m.completion = detail::thresholded_rmse(gt.points, KdTree(est.points), threshold);
  m.chamfer = (m.accuracy + m.completion) / 2.0;
  return m;
}

struct AgentMetrics {
  std::string name;
  double ate_rmse = 0.0;
  std::optional<GeometryMetrics> geometry;
};

/// "key = value" lines, one block per agent plus the average.
inline std::string metrics_report(const std::vector<AgentMetrics>& rows) {
  std::ostringstream os;
  os << std::setprecision(9);
  double ate_sum = 0.0;
  for (const auto& r : rows) {
    os << r.name << ".ate_rmse_m = " << r.ate_rmse << "\n";
    if (r.geometry) {
      os << r.name << ".accuracy_m = " << r.geometry->accuracy << "\n";
      os << r.name << ".completion_m = " << r.geometry->completion << "\n";
      os << r.name << ".chamfer_m = " << r.geometry->chamfer << "\n";
    }
    ate_sum += r.ate_rmse;
  }
  if (!rows.empty()) os << "average.ate_rmse_m = " << ate_sum / static_cast<double>(rows.size()) << "\n";
  return os.str();
}

/// Delimited table in centimetres: one row per agent and an average row.
inline std::string metrics_table(const std::vector<AgentMetrics>& rows, char sep = '|') {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "agent" << sep << "ate_cm" << sep << "acc_cm" << sep << "comp_cm" << sep << "chamfer_cm\n";
  AgentMetrics avg{"average", 0.0, GeometryMetrics{}};
  std::size_t geo = 0;
  auto cell = [&](const std::optional<GeometryMetrics>& g, double GeometryMetrics::*f) {
    if (g) {
      os << sep << 100.0 * ((*g).*f);
    } else {
      os << sep << "-";
    }
  };
  for (const auto& r : rows) {
    os << r.name << sep << 100.0 * r.ate_rmse;
    cell(r.geometry, &GeometryMetrics::accuracy);
    cell(r.geometry, &GeometryMetrics::completion);
    cell(r.geometry, &GeometryMetrics::chamfer);
    os << "\n";
    avg.ate_rmse += r.ate_rmse;
    if (r.geometry) {
      ++geo;
      avg.geometry->accuracy += r.geometry->accuracy;
      avg.geometry->completion += r.geometry->completion;
      avg.geometry->chamfer += r.geometry->chamfer;
    }
  }
  if (rows.empty()) return os.str();
  avg.ate_rmse /= static_cast<double>(rows.size());
  if (geo > 0) {
    avg.geometry->accuracy /= static_cast<double>(geo);
    avg.geometry->completion /= static_cast<double>(geo);
    avg.geometry->chamfer /= static_cast<double>(geo);
  } else {
    avg.geometry.reset();
  }
  os << avg.name << sep << 100.0 * avg.ate_rmse;
  cell(avg.geometry, &GeometryMetrics::accuracy);
  cell(avg.geometry, &GeometryMetrics::completion);
  cell(avg.geometry, &GeometryMetrics::chamfer);
  os << "\n";
  return os.str();
}

}  // namespace mslam
