#pragma once

// Dense correspondence search: per-pixel Levenberg-Marquardt alignment of
// rays followed by a windowed feature refinement.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mslam/geometry.hpp"
#include "mslam/pointmap.hpp"

namespace mslam {

/// One correspondence: query pixel n, reference pixel m (rounded) and the
/// continuous reference location it was rounded from.
struct Match {
  std::uint32_t query = 0;
  std::uint32_t reference = 0;
  Vec2 uv = Vec2::Zero();  // (column, row) in the reference grid
  double weight = 1.0;
};

/// Correspondences between a reference and a query grid. Every query pixel
/// appears at most once.
struct MatchSet {
  std::vector<Match> matches;

  std::size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }
};

struct MatchingConfig {
  int max_iters = 10;
  double lambda_init = 1e-3;
  double theta_match = 1e-4;  // squared ray error accepted at convergence
  int window = 5;
};

struct RayMatchResult {
  bool converged = false;
  Vec2 uv = Vec2::Zero();
  double error = 0.0;
  std::vector<double> trace;  // squared ray error after every accepted step
};

namespace detail {

struct RayEval {
  double error;
  Eigen::Matrix<double, 3, 2> jac;
  Vec3 residual;
};

inline std::optional<RayEval> eval_ray(const ProjectiveGrid& grid, const Vec2& uv, const Vec3& target) {
  const auto s = grid.sample(uv.x(), uv.y());
  if (!s) return std::nullopt;
  const Vec3 z(s->h.x(), s->h.y(), 1.0);
  const double n = z.norm();
  const Vec3 psi = z / n;
  Eigen::Matrix<double, 3, 2> dz = Eigen::Matrix<double, 3, 2>::Zero();
  dz.topRows<2>() = s->dh;
  RayEval e;
  e.residual = psi - target;
  e.error = e.residual.squaredNorm();
  e.jac = (Mat3::Identity() - psi * psi.transpose()) / n * dz;
  return e;
}

}  // namespace detail

/// Minimizes |psi(ref(u, v)) - target|^2 over continuous pixel coordinates.
inline RayMatchResult match_single_ray(const ProjectiveGrid& grid, const Vec3& target, Vec2 start,
                                       const MatchingConfig& cfg = {}) {
  RayMatchResult out;
  auto cur = detail::eval_ray(grid, start, target);
  if (!cur) return out;
  Vec2 uv = start;
  double lambda = cfg.lambda_init;
  out.trace.push_back(cur->error);
  for (int it = 0; it < cfg.max_iters; ++it) {
    const Eigen::Matrix2d a = cur->jac.transpose() * cur->jac;
    const Vec2 g = cur->jac.transpose() * cur->residual;
    if (g.norm() < 1e-15 || cur->error < 1e-20) break;
    Eigen::Matrix2d damped = a;
    damped.diagonal() += lambda * (a.diagonal().array() + 1e-12).matrix();
    const Vec2 step = -damped.ldlt().solve(g);
    const Vec2 next_uv = uv + step;
    const auto next = detail::eval_ray(grid, next_uv, target);
    if (next && next->error <= cur->error) {
      uv = next_uv;
      cur = next;
      lambda /= 10.0;
      out.trace.push_back(cur->error);
      if (step.norm() < 1e-6) break;
    } else {
      lambda *= 10.0;
    }
  }
  out.uv = uv;
  out.error = cur->error;
  out.converged = cur->error < cfg.theta_match;
  return out;
}

/// For every valid query point, finds the reference pixel whose ray best
/// matches it, starting the search at the query pixel's own coordinates.
/// Both pointmaps must be in the same camera frame; reference points need
/// positive depth.
inline MatchSet match_rays(const Pointmap& reference, const Pointmap& query,
                           const MatchingConfig& cfg = {}) {
  if (!reference.same_shape(query.height(), query.width())) throw ConfigError("match_rays: grid shapes differ");
  const ProjectiveGrid grid(reference);
  MatchSet out;
  const int w = query.width();
  for (std::size_t n = 0; n < query.size(); ++n) {
    if (!query.valid(n)) continue;
    const Vec3& x = query.point(n);
    const double norm = x.norm();
    if (!(norm > kRayEpsilon)) continue;
    const Vec2 start(static_cast<double>(n % w), static_cast<double>(n / w));
    auto r = match_single_ray(grid, x / norm, start, cfg);
    if (r.trace.empty() && reference.valid(n)) {
      // The interpolation stencil touches a masked pixel; fall back to the
      // pixel itself.
      const Vec3& p = reference.point(n);
      if (p.norm() > kRayEpsilon) {
        r.uv = start;
        r.error = (p.normalized() - x / norm).squaredNorm();
        r.converged = r.error < cfg.theta_match;
      }
    }
    if (!r.converged) continue;
    const int c = std::clamp(static_cast<int>(std::lround(r.uv.x())), 0, w - 1);
    const int row = std::clamp(static_cast<int>(std::lround(r.uv.y())), 0, reference.height() - 1);
    out.matches.push_back({static_cast<std::uint32_t>(n),
                           static_cast<std::uint32_t>(reference.index(row, c)), r.uv, 1.0});
  }
  return out;
}

/// Moves each match to the best feature-similarity reference pixel inside a
/// window x window neighbourhood of its rounded location. A continuous
/// location within one pixel of the winner is kept. Weights become
/// min(Q_reference, Q_query); zero-weight matches are dropped.
inline MatchSet refine_with_features(const MatchSet& initial, const FeatureMap& ref_feat,
                                     const FeatureMap& qry_feat, int window) {
  if (window < 0) throw ConfigError("refine_with_features: negative window");
  const int w = ref_feat.width();
  const int h = ref_feat.height();
  const int half = window / 2;
  MatchSet out;
  out.matches.reserve(initial.size());
  for (const Match& m : initial.matches) {
    Match r = m;
    if (window > 0) {
      const int c0 = static_cast<int>(m.reference % w);
      const int r0 = static_cast<int>(m.reference / w);
      double best = ref_feat.similarity(m.reference, qry_feat, m.query);
      int bc = c0, br = r0;
      for (int dr = -half; dr <= half; ++dr) {
        for (int dc = -half; dc <= half; ++dc) {
          const int cc = c0 + dc, rr = r0 + dr;
          if (cc < 0 || rr < 0 || cc >= w || rr >= h) continue;
          const std::size_t idx = static_cast<std::size_t>(rr) * w + cc;
          const double s = ref_feat.similarity(idx, qry_feat, m.query);
          if (s > best) {
            best = s;
            bc = cc;
            br = rr;
          }
        }
      }
      if (bc != c0 || br != r0) {
        r.reference = static_cast<std::uint32_t>(br * w + bc);
        const Vec2 grid_uv(bc, br);
        if ((m.uv - grid_uv).cwiseAbs().maxCoeff() > 1.0) r.uv = grid_uv;
      }
    }
    r.weight = std::min(ref_feat.confidence(r.reference), qry_feat.confidence(m.query));
    if (r.weight > 0.0) out.matches.push_back(r);
  }
  return out;
}

/// Reference point at a match's continuous location, falling back to the
/// rounded pixel when it sits exactly on the grid next to a masked pixel.
inline std::optional<Vec3> reference_point(const Pointmap& reference, const ProjectiveGrid& grid,
                                           const Match& m) {
  if (auto p = grid.point(m.uv.x(), m.uv.y())) return p;
  const int w = reference.width();
  const Vec2 pix(static_cast<double>(m.reference % w), static_cast<double>(m.reference / w));
  if (m.uv == pix && reference.valid(m.reference)) return reference.point(m.reference);
  return std::nullopt;
}

struct MatchStats {
  double valid_fraction = 0.0;
  std::size_t matched_count = 0;
};

inline MatchStats match_stats(const MatchSet& m, std::size_t total_query_pixels) {
  if (total_query_pixels == 0) return {0.0, m.size()};
  return {static_cast<double>(m.size()) / static_cast<double>(total_query_pixels), m.size()};
}

}  // namespace mslam
