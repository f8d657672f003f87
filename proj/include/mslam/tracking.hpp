#pragma once

// Relative Sim(3) pose estimation between a frame and a keyframe by robust
// iteratively reweighted Gauss-Newton on ray residuals.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mslam/errors.hpp"
#include "mslam/geometry.hpp"
#include "mslam/matching.hpp"
#include "mslam/pointmap.hpp"

namespace mslam {

struct TrackingConfig {
  double sigma_r_sq = 1.0;
  double q_floor = 1e-6;
  double huber_delta = 0.02;
  // Weight of the radial-distance residual relative to the ray residual.
  // Without it the scale of a Sim(3) pose is unobservable from rays alone.
  double distance_weight = 0.03;
  double g_tol = 1e-8;
  int max_iters = 20;
  std::size_t min_matches = 7;
  double max_condition = 1e12;
  double inlier_ray_error = 2.5e-3;  // squared ray error
  // After convergence, matches whose whitened residual exceeds this multiple
  // of the robust residual scale are dropped and the solve resumes. 0 disables.
  double outlier_factor = 5.0;
  int rejection_rounds = 3;
};

using Residual = Eigen::Matrix<double, 4, 1>;
using ResidualJacobian = Eigen::Matrix<double, 4, 7>;

/// Per-match residual standard deviation sqrt(sigma_r^2 / max(q, q_floor)).
inline double irls_weight(double q, double sigma_r_sq, double q_floor = 1e-6) {
  return std::sqrt(sigma_r_sq / std::max(q, q_floor));
}

/// Residual between the observed point a and the predicted point y, both in
/// the same camera frame: ray difference stacked with the weighted difference
/// of distances.
inline Residual ray_residual(const Vec3& a, const Vec3& y, double distance_weight) {
  const double na = a.norm();
  const double ny = y.norm();
  Residual r;
  r.head<3>() = a / na - y / ny;
  r(3) = distance_weight * (na - ny);
  return r;
}

/// d(ray_residual)/dy.
inline Eigen::Matrix<double, 4, 3> residual_point_jacobian(const Vec3& y, double distance_weight) {
  const double n = y.norm();
  const Vec3 psi = y / n;
  Eigen::Matrix<double, 4, 3> d;
  d.topRows<3>() = -(Mat3::Identity() - psi * psi.transpose()) / n;
  d.row(3) = -distance_weight * psi.transpose();
  return d;
}

/// Jacobian of ray_residual(a, exp(tau) T b) at tau = 0, with y = T b.
inline ResidualJacobian residual_jacobian(const Vec3& y, double distance_weight) {
  return residual_point_jacobian(y, distance_weight) * action_jacobian(y);
}

struct TrackingResult {
  SimilarityTransform pose;
  double energy = 0.0;
  int iterations = 0;
  std::vector<double> energy_trace;  // energy after every accepted step
  MatchStats stats;
  std::size_t used_matches = 0;
  double inlier_fraction = 0.0;
  bool converged = false;
};

namespace detail {

struct Correspondence {
  Vec3 observed;   // query-side point, already in the target frame
  Vec3 reference;  // reference-side point, before the pose is applied
  double std;
};

struct Linearization {
  double energy = 0.0;
  Mat7 h = Mat7::Zero();
  Vec7 g = Vec7::Zero();
};

inline double robust_energy(const std::vector<Correspondence>& cs, const SimilarityTransform& t,
                            const TrackingConfig& cfg) {
  double e = 0.0;
  for (const auto& c : cs) {
    const Vec3 y = t.act(c.reference);
    if (!(y.norm() > kRayEpsilon)) continue;
    e += huber(ray_residual(c.observed, y, cfg.distance_weight).norm() / c.std, cfg.huber_delta).loss;
  }
  return e;
}

inline Linearization linearize(const std::vector<Correspondence>& cs, const SimilarityTransform& t,
                               const TrackingConfig& cfg) {
  Linearization lin;
  for (const auto& c : cs) {
    const Vec3 y = t.act(c.reference);
    if (!(y.norm() > kRayEpsilon)) continue;
    const Residual r = ray_residual(c.observed, y, cfg.distance_weight);
    const auto hv = huber(r.norm() / c.std, cfg.huber_delta);
    lin.energy += hv.loss;
    const double w = hv.irls_weight / (c.std * c.std);
    const ResidualJacobian j = residual_jacobian(y, cfg.distance_weight);
    lin.h.noalias() += w * j.transpose() * j;
    lin.g.noalias() += w * j.transpose() * r;
  }
  return lin;
}

inline void check_conditioning(const Mat7& h, double max_condition) {
  const Eigen::SelfAdjointEigenSolver<Mat7> eig(h, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > max_condition) {
    throw DegenerateGeometryError("normal matrix is ill-conditioned");
  }
}

inline std::vector<double> whitened_norms(const std::vector<Correspondence>& cs, const SimilarityTransform& t,
                                          const TrackingConfig& cfg) {
  std::vector<double> out;
  out.reserve(cs.size());
  for (const auto& c : cs) {
    out.push_back(ray_residual(c.observed, t.act(c.reference), cfg.distance_weight).norm() / c.std);
  }
  return out;
}

/// Drops correspondences far outside the median-based residual scale.
/// Returns whether anything was removed.
inline bool reject_outliers(std::vector<Correspondence>& cs, const SimilarityTransform& t,
                            const TrackingConfig& cfg) {
  const std::vector<double> norms = whitened_norms(cs, t, cfg);
  std::vector<double> sorted = norms;
  const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
  std::nth_element(sorted.begin(), mid, sorted.end());
  const double limit = cfg.outlier_factor * 1.4826 * *mid;
  std::vector<Correspondence> kept;
  kept.reserve(cs.size());
  for (std::size_t i = 0; i < cs.size(); ++i) {
    if (norms[i] <= limit) kept.push_back(cs[i]);
  }
  if (kept.size() == cs.size() || kept.size() < cfg.min_matches) return false;
  cs = std::move(kept);
  return true;
}

/// Damped Gauss-Newton iterations from res.pose; lin holds the linearization
/// at res.pose on entry and exit.
inline void solve(const std::vector<Correspondence>& cs, const TrackingConfig& cfg, TrackingResult& res,
                  Linearization& lin) {
  double lambda = 0.0;
  res.converged = false;
  for (int it = 0; it < cfg.max_iters; ++it) {
    ++res.iterations;
    check_conditioning(lin.h, cfg.max_condition);
    if (lin.g.norm() < cfg.g_tol) {
      res.converged = true;
      return;
    }
    Mat7 a = lin.h;
    a.diagonal().array() += lambda;
    const Vec7 step = -a.ldlt().solve(lin.g);
    const SimilarityTransform candidate = retract(step, res.pose);
    const double e = robust_energy(cs, candidate, cfg);
    if (e <= lin.energy) {
      res.pose = candidate;
      lin = linearize(cs, res.pose, cfg);
      res.energy_trace.push_back(lin.energy);
      lambda = lambda / 10.0 < 1e-8 ? 0.0 : lambda / 10.0;
      if (step.norm() < 1e-12) {
        res.converged = true;
        return;
      }
    } else {
      lambda = lambda == 0.0 ? 1e-4 : lambda * 10.0;
      if (lambda > 1e10) {
        res.converged = true;  // no descent direction left at this precision
        return;
      }
    }
  }
  res.converged = lin.g.norm() < cfg.g_tol;
}

}  // namespace detail

/// Estimates T_kf, the pose mapping frame f's coordinates into keyframe k's,
/// from matches between the keyframe canonical pointmap (query side) and the
/// frame pointmap (reference side). Energy is non-increasing over accepted
/// steps; rejected steps raise a Levenberg damping term.
inline TrackingResult estimate_relative_pose(const Pointmap& keyframe_points, const Pointmap& frame_points,
                                             const MatchSet& matches, const SimilarityTransform& init,
                                             const TrackingConfig& cfg = {}) {
  const ProjectiveGrid grid(frame_points);
  std::vector<detail::Correspondence> cs;
  cs.reserve(matches.size());
  for (const Match& m : matches.matches) {
    if (!keyframe_points.valid(m.query)) continue;
    const Vec3& a = keyframe_points.point(m.query);
    if (!(a.norm() > kRayEpsilon)) continue;
    const auto b = reference_point(frame_points, grid, m);
    if (!b || !(b->norm() > kRayEpsilon)) continue;
    cs.push_back({a, *b, irls_weight(m.weight, cfg.sigma_r_sq, cfg.q_floor)});
  }
  if (cs.size() < cfg.min_matches) {
    throw UnderconstrainedError("pose estimation needs at least " + std::to_string(cfg.min_matches) +
                                " matches, got " + std::to_string(cs.size()));
  }
  const std::vector<detail::Correspondence> all = cs;

  TrackingResult res;
  res.pose = init;
  res.stats = match_stats(matches, keyframe_points.size());
  auto lin = detail::linearize(cs, res.pose, cfg);
  res.energy_trace.push_back(lin.energy);
  for (int round = 0;; ++round) {
    detail::solve(cs, cfg, res, lin);
    if (round >= cfg.rejection_rounds || cfg.outlier_factor <= 0.0) break;
    if (!detail::reject_outliers(cs, res.pose, cfg)) break;
    lin = detail::linearize(cs, res.pose, cfg);
    res.energy_trace.push_back(lin.energy);
  }
  res.used_matches = cs.size();
  res.energy = lin.energy;
  std::size_t inliers = 0;
  for (const auto& c : all) {
    const Vec3 y = res.pose.act(c.reference);
    if (y.norm() > kRayEpsilon && (c.observed.normalized() - y.normalized()).squaredNorm() < cfg.inlier_ray_error) {
      ++inliers;
    }
  }
  res.inlier_fraction = static_cast<double>(inliers) / static_cast<double>(all.size());
  return res;
}

}  // namespace mslam
