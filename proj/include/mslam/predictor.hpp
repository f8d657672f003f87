#pragma once

// Two-view pointmap predictor interface and the synthetic ray-casting oracle
// that stands in for the neural network.

#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/geometry.hpp"
#include "mslam/pointmap.hpp"

namespace mslam {

struct CameraIntrinsics {
  double fx = 80.0;
  double fy = 80.0;
  double cx = 47.5;
  double cy = 35.5;
  int width = 96;
  int height = 72;

  void validate() const {
    if (!(fx > 0.0 && fy > 0.0)) throw ConfigError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("intrinsics: resolution must be positive");
    if (!(cx >= 0.0 && cx < width && cy >= 0.0 && cy < height)) {
      throw ConfigError("intrinsics: principal point outside the image");
    }
  }

  /// Camera-frame direction (z = 1) through pixel (column u, row v).
  Vec3 pixel_direction(double u, double v) const {
    return {(u - cx) / fx, (v - cy) / fy, 1.0};
  }

  std::optional<Vec2> project(const Vec3& p) const {
    if (!(p.z() > 0.0)) return std::nullopt;
    return Vec2(fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy);
  }

  bool inside(const Vec2& uv) const {
    return uv.x() >= -0.5 && uv.x() < width - 0.5 && uv.y() >= -0.5 && uv.y() < height - 0.5;
  }
};

/// Identifies one image of one agent's stream.
struct FrameRef {
  std::uint32_t agent = 0;
  std::uint32_t index = 0;
  auto operator<=>(const FrameRef&) const = default;
};

/// Output of a two-view prediction for frames (i, j); both pointmaps are in
/// the coordinate frame of camera i.
struct PredictionPair {
  Pointmap x_ii, x_ij;
  ConfidenceMap c_ii, c_ij;
  FeatureMap f_ii, f_ij;  // descriptors D and feature confidences Q
};

struct MonocularPrediction {
  Pointmap points;
  ConfidenceMap confidence;
  FeatureMap features;
};

class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual PredictionPair predict(const FrameRef& i, const FrameRef& j) = 0;
  virtual MonocularPrediction monocular_init(const FrameRef& frame) = 0;
};

/// Rectangle spanned by two orthonormal in-plane axes around a center.
struct Patch {
  Vec3 center = Vec3::Zero();
  Vec3 u_axis = Vec3::UnitX();
  Vec3 v_axis = Vec3::UnitY();
  double half_u = 1.0;
  double half_v = 1.0;

  /// Ray parameter of the intersection with origin o and unit direction d.
  std::optional<double> intersect(const Vec3& o, const Vec3& d) const {
    const Vec3 n = u_axis.cross(v_axis);
    const double denom = n.dot(d);
    if (std::abs(denom) < 1e-12) return std::nullopt;
    const double lambda = n.dot(center - o) / denom;
    if (!(lambda > 1e-9)) return std::nullopt;
    const Vec3 local = o + lambda * d - center;
    if (std::abs(local.dot(u_axis)) > half_u || std::abs(local.dot(v_axis)) > half_v) {
      return std::nullopt;
    }
    return lambda;
  }
};

/// Smooth, position-keyed surface "appearance": pairs of cos/sin of
/// coordinate-seeded plane waves evaluated on a 1 mm lattice. Identical world
/// points give identical descriptors and the descriptor dot product peaks at
/// zero displacement, so nearby surface points are distinguishable.
class FeatureField {
 public:
  static constexpr int kWaves = kDefaultFeatureDim / 2;

  explicit FeatureField(std::uint64_t seed = 7, double fine_frequency = 20.0,
                        double coarse_frequency = 2.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> gauss(0.0, 1.0);
    // Both wave sets point along the six face diagonals of a cube (the coarse
    // set randomly rotated). Their second moment is isotropic, so similarity
    // falls off with distance the same way in every direction.
    const std::array<Vec3, 6> diag{Vec3(1, 1, 0), Vec3(1, -1, 0), Vec3(1, 0, 1),
                                   Vec3(1, 0, -1), Vec3(0, 1, 1),  Vec3(0, 1, -1)};
    const Mat3 spin =
        Eigen::Quaterniond(gauss(rng), gauss(rng), gauss(rng), gauss(rng)).normalized().toRotationMatrix();
    for (int k = 0; k < 6; ++k) {
      freq_[k] = diag[k].normalized() * fine_frequency;
      freq_[k + 6] = spin * diag[k].normalized() * coarse_frequency;
    }
    for (int k = 0; k < kWaves; ++k) phase_[k] = phase(rng);
  }

  void describe(const Vec3& world, std::span<double> out) const {
    const Vec3 q = (world * 1000.0).array().round().matrix() / 1000.0;
    const double norm = 1.0 / std::sqrt(static_cast<double>(kWaves));
    for (int k = 0; k < kWaves; ++k) {
      const double a = freq_[k].dot(q) + phase_[k];
      out[2 * k] = norm * std::cos(a);
      out[2 * k + 1] = norm * std::sin(a);
    }
  }

 private:
  std::array<Vec3, kWaves> freq_;
  std::array<double, kWaves> phase_;
};

struct NoiseModel {
  double depth_sigma = 0.0;  // relative: std = depth_sigma * depth
  double conf_min = 0.05;
  double dropout = 0.0;

  void validate() const {
    if (!(depth_sigma >= 0.0)) throw ConfigError("noise: depth_sigma must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("noise: dropout must be in [0,1)");
    if (!(conf_min > 0.0)) throw ConfigError("noise: conf_min must be > 0");
  }
};

class SyntheticScene {
 public:
  CameraIntrinsics intrinsics;
  std::vector<Patch> patches;
  /// World-from-camera poses per agent id (scale 1).
  std::map<std::uint32_t, std::vector<SimilarityTransform>> trajectories;
  std::uint64_t feature_seed = 7;

  void add_box(const Vec3& center, const Vec3& size) {
    const Vec3 h = 0.5 * size;
    const Vec3 ex = Vec3::UnitX(), ey = Vec3::UnitY(), ez = Vec3::UnitZ();
    patches.push_back({center + Vec3(h.x(), 0, 0), ey, ez, h.y(), h.z()});
    patches.push_back({center - Vec3(h.x(), 0, 0), ey, ez, h.y(), h.z()});
    patches.push_back({center + Vec3(0, h.y(), 0), ex, ez, h.x(), h.z()});
    patches.push_back({center - Vec3(0, h.y(), 0), ex, ez, h.x(), h.z()});
    patches.push_back({center + Vec3(0, 0, h.z()), ex, ey, h.x(), h.y()});
    patches.push_back({center - Vec3(0, 0, h.z()), ex, ey, h.x(), h.y()});
  }

  const SimilarityTransform& pose(const FrameRef& f) const {
    const auto it = trajectories.find(f.agent);
    if (it == trajectories.end() || f.index >= it->second.size()) {
      throw LookupError("unknown frame (agent " + std::to_string(f.agent) + ", index " +
                        std::to_string(f.index) + ")");
    }
    return it->second[f.index];
  }

  std::size_t frame_count(std::uint32_t agent) const {
    const auto it = trajectories.find(agent);
    return it == trajectories.end() ? 0 : it->second.size();
  }

  /// Nearest intersection distance along a unit direction.
  std::optional<double> raycast(const Vec3& origin, const Vec3& dir) const {
    std::optional<double> best;
    for (const auto& p : patches) {
      const auto hit = p.intersect(origin, dir);
      if (hit && (!best || *hit < *best)) best = hit;
    }
    return best;
  }

  bool visible_from(const SimilarityTransform& world_from_cam, const Vec3& world) const {
    const Vec3 local = world_from_cam.inverse().act(world);
    const auto uv = intrinsics.project(local);
    if (!uv || !intrinsics.inside(*uv)) return false;
    const Vec3 origin = world_from_cam.translation();
    const Vec3 delta = world - origin;
    const double dist = delta.norm();
    if (!(dist > kRayEpsilon)) return false;
    const auto hit = raycast(origin, delta / dist);
    return hit && *hit >= dist - 1e-6 * std::max(1.0, dist);
  }

  /// Throws ConfigError unless at least 80% of trajectory poses see geometry
  /// over at least half of a coarse ray grid.
  void validate() const {
    intrinsics.validate();
    for (const auto& [agent, traj] : trajectories) {
      if (traj.empty()) continue;
      std::size_t seeing = 0;
      for (const auto& pose : traj) {
        if (std::abs(pose.scale() - 1.0) > 1e-12) {
          throw ConfigError("scene: ground-truth poses must have unit scale");
        }
        int hits = 0;
        for (int r = 0; r < 6; ++r) {
          for (int c = 0; c < 8; ++c) {
            const double u = (c + 0.5) * intrinsics.width / 8.0 - 0.5;
            const double v = (r + 0.5) * intrinsics.height / 6.0 - 0.5;
            const Vec3 d = (pose.rotation() * intrinsics.pixel_direction(u, v)).normalized();
            if (raycast(pose.translation(), d)) ++hits;
          }
        }
        if (hits >= 24) ++seeing;
      }
      if (seeing * 5 < traj.size() * 4) {
        throw ConfigError("scene: geometry visible from fewer than 80% of agent " +
                          std::to_string(agent) + "'s poses");
      }
    }
  }
};

/// World-from-camera pose at position `pos` looking along horizontal heading
/// `yaw` (radians, 0 = +z) with the given pitch; world +y is up, camera axes
/// are x right, y down, z forward.
inline SimilarityTransform look_pose(const Vec3& pos, double yaw, double pitch = 0.0) {
  const Vec3 forward(std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch));
  const Vec3 world_up = Vec3::UnitY();
  const Vec3 right = world_up.cross(forward).normalized() * -1.0;
  const Vec3 down = forward.cross(right).normalized();
  Mat3 r;
  r.col(0) = right;
  r.col(1) = down;
  r.col(2) = forward;
  return {1.0, Rotation::from_matrix(r), pos};
}

struct OrbitSpec {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
  double start_deg = 0.0;
  double sweep_deg = 400.0;
  int frames = 200;
  double look_offset_deg = 0.0;  // heading relative to the outward direction
  double pitch_amplitude_deg = 4.0;
  double height_amplitude = 0.05;
};

inline std::vector<SimilarityTransform> orbit_trajectory(const OrbitSpec& o) {
  if (o.frames <= 0) throw ConfigError("orbit: frame count must be positive");
  std::vector<SimilarityTransform> poses;
  poses.reserve(o.frames);
  const double deg = std::numbers::pi / 180.0;
  for (int k = 0; k < o.frames; ++k) {
    const double a = o.frames > 1 ? static_cast<double>(k) / (o.frames - 1) : 0.0;
    const double theta = (o.start_deg + o.sweep_deg * a) * deg;
    const double wobble = std::sin(2.0 * std::numbers::pi * 3.0 * a);
    const Vec3 pos = o.center + Vec3(o.radius * std::sin(theta), o.height_amplitude * wobble,
                                     o.radius * std::cos(theta));
    poses.push_back(look_pose(pos, theta + o.look_offset_deg * deg,
                              o.pitch_amplitude_deg * deg * wobble));
  }
  return poses;
}

struct RenderResult {
  Pointmap points;
  ConfidenceMap confidence;
  FeatureMap features;
  std::vector<Vec3> world_hits;  // noiseless hit points, zero where masked
};

/// Ray-casts the scene from `pose`, perturbs depth by relative Gaussian noise
/// and applies dropout. Confidence 1/(1 + sigma_d depth), clipped at conf_min;
/// the feature confidence equals that confidence.
inline RenderResult synthetic_render(const SyntheticScene& scene, const SimilarityTransform& pose,
                                     const NoiseModel& noise, std::uint64_t seed) {
  const auto& k = scene.intrinsics;
  const FeatureField field(scene.feature_seed);
  RenderResult out{Pointmap(k.height, k.width), ConfidenceMap(k.height, k.width),
                   FeatureMap(k.height, k.width, kDefaultFeatureDim),
                   std::vector<Vec3>(static_cast<std::size_t>(k.height) * k.width, Vec3::Zero())};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const Mat3 rot = pose.rotation().matrix();
  for (int r = 0; r < k.height; ++r) {
    for (int c = 0; c < k.width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * k.width + c;
      const double z = gauss(rng);
      const double drop = uni(rng);
      const Vec3 dir_cam = k.pixel_direction(c, r);
      const Vec3 dir_world = (rot * dir_cam).normalized();
      const auto hit = scene.raycast(pose.translation(), dir_world);
      if (!hit || drop < noise.dropout) continue;
      const Vec3 world = pose.translation() + *hit * dir_world;
      const double depth = *hit / dir_cam.norm();
      const double factor = 1.0 + noise.depth_sigma * z;
      if (!(factor > 0.0)) continue;
      out.points.set(i, dir_cam * depth * factor);
      const double conf = std::max(noise.conf_min, 1.0 / (1.0 + noise.depth_sigma * depth));
      out.confidence[i] = conf;
      out.features.set_confidence(i, conf);
      field.describe(world, out.features.descriptor(i));
      out.world_hits[i] = world;
    }
  }
  return out;
}

/// Deterministic predictor backed by a synthetic scene. Pair confidences
/// fall to conf_min on pixels whose surface point is not visible in the other
/// view. Per-agent scale factors multiply every pointmap predicted with that
/// agent's frame as the first view.
class OraclePredictor : public Predictor {
 public:
  OraclePredictor(SyntheticScene scene, NoiseModel noise, std::uint64_t seed,
                  std::map<std::uint32_t, double> agent_scale = {})
      : scene_(std::move(scene)), noise_(noise), seed_(seed), agent_scale_(std::move(agent_scale)) {
    noise_.validate();
    scene_.intrinsics.validate();
  }

  const SyntheticScene& scene() const { return scene_; }
  const NoiseModel& noise() const { return noise_; }

  /// Systematic error exp(bias) on the relative placement of the second view
  /// in two-view predictions between distinct frames of this agent at most
  /// `max_frame_gap` apart. Models short-baseline odometry bias: it
  /// accumulates along the keyframe chain but leaves revisits and
  /// cross-agent pairs untouched.
  void set_pair_bias(std::uint32_t agent, const TangentVector& bias,
                     std::uint32_t max_frame_gap = std::numeric_limits<std::uint32_t>::max()) {
    agent_bias_[agent] = {bias, max_frame_gap};
  }

  PredictionPair predict(const FrameRef& i, const FrameRef& j) override {
    const SimilarityTransform& pose_i = scene_.pose(i);
    const SimilarityTransform& pose_j = scene_.pose(j);
    RenderResult ri = synthetic_render(scene_, pose_i, noise_, render_seed(i, j, 0));
    RenderResult rj = synthetic_render(scene_, pose_j, noise_, render_seed(i, j, 1));
    const double s = scale_of(i.agent);
    SimilarityTransform i_from_j = SimilarityTransform(s, Rotation(), Vec3::Zero()) * pose_i.inverse() * pose_j;
    if (const auto b = agent_bias_.find(i.agent); b != agent_bias_.end() && i.agent == j.agent && i != j) {
      const std::uint32_t gap = i.index > j.index ? i.index - j.index : j.index - i.index;
      if (gap <= b->second.max_frame_gap) i_from_j = SimilarityTransform::exp(b->second.bias) * i_from_j;
    }
    PredictionPair out;
    out.x_ii = ri.points.transformed(SimilarityTransform(s, Rotation(), Vec3::Zero()));
    out.x_ij = rj.points.transformed(i_from_j);
    out.c_ii = covisible_confidence(ri, pose_j);
    out.c_ij = covisible_confidence(rj, pose_i);
    out.f_ii = std::move(ri.features);
    out.f_ij = std::move(rj.features);
    return out;
  }

  MonocularPrediction monocular_init(const FrameRef& frame) override {
    PredictionPair p = predict(frame, frame);
    return {std::move(p.x_ii), std::move(p.c_ii), std::move(p.f_ii)};
  }

 private:
  double scale_of(std::uint32_t agent) const {
    const auto it = agent_scale_.find(agent);
    return it == agent_scale_.end() ? 1.0 : it->second;
  }

  std::uint64_t render_seed(const FrameRef& i, const FrameRef& j, std::uint32_t role) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      i.agent, i.index, j.agent, j.index, role};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
  }

  ConfidenceMap covisible_confidence(const RenderResult& r, const SimilarityTransform& other) const {
    ConfidenceMap c = r.confidence;
    for (std::size_t p = 0; p < c.size(); ++p) {
      if (!r.points.valid(p)) continue;
      if (!scene_.visible_from(other, r.world_hits[p])) c[p] = noise_.conf_min;
    }
    return c;
  }

  SyntheticScene scene_;
  NoiseModel noise_;
  std::uint64_t seed_;
  std::map<std::uint32_t, double> agent_scale_;
  struct PairBias {
    TangentVector bias;
    std::uint32_t max_frame_gap;
  };
  std::map<std::uint32_t, PairBias> agent_bias_;
};

}  // namespace mslam
