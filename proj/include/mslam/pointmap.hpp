#pragma once

// Dense per-pixel grids (points, confidences, features) and canonical
// keyframe fusion.
//
// All grids are row-major over pixels; pixel index = row * width + col.
// Masked pixels hold point (0,0,0) and confidence 0; consumers test the mask.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mslam/errors.hpp"
#include "mslam/geometry.hpp"
#include "mslam/io.hpp"

namespace mslam {

inline constexpr int kDefaultFeatureDim = 24;

class Pointmap {
 public:
  Pointmap() = default;
  Pointmap(int height, int width)
      : height_(height),
        width_(width),
        points_(static_cast<std::size_t>(height) * width, Vec3::Zero()),
        valid_(static_cast<std::size_t>(height) * width, 0) {
    if (height < 0 || width < 0) throw ConfigError("negative pointmap dimensions");
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return points_.size(); }
  int index(int row, int col) const { return row * width_ + col; }

  bool valid(std::size_t i) const { return valid_[i] != 0; }
  const Vec3& point(std::size_t i) const { return points_[i]; }

  /// Stores a point; non-finite points are masked instead.
  void set(std::size_t i, const Vec3& p) {
    if (p.allFinite()) {
      points_[i] = p;
      valid_[i] = 1;
    } else {
      mask(i);
    }
  }
  void mask(std::size_t i) {
    points_[i].setZero();
    valid_[i] = 0;
  }

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), 1));
  }
  std::span<const std::uint8_t> mask_bytes() const { return valid_; }

  /// Applies T to every valid point.
  Pointmap transformed(const SimilarityTransform& t) const {
    Pointmap out = *this;
    for (std::size_t i = 0; i < size(); ++i) {
      if (valid(i)) out.points_[i] = t.act(points_[i]);
    }
    return out;
  }

  bool same_shape(int h, int w) const { return h == height_ && w == width_; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<Vec3> points_;
  std::vector<std::uint8_t> valid_;
};

class ConfidenceMap {
 public:
  ConfidenceMap() = default;
  ConfidenceMap(int height, int width, double fill = 0.0)
      : height_(height), width_(width), values_(static_cast<std::size_t>(height) * width, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator[](std::size_t i) { return values_[i]; }
  std::span<const double> values() const { return values_; }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> values_;
};

/// Per-pixel d-dimensional descriptors plus a per-pixel feature confidence Q.
/// Descriptors are stored pixel-interleaved for fast dot products.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int height, int width, int dim)
      : height_(height),
        width_(width),
        dim_(dim),
        desc_(static_cast<std::size_t>(height) * width * dim, 0.0),
        conf_(static_cast<std::size_t>(height) * width, 0.0) {}

  int height() const { return height_; }
  int width() const { return width_; }
  int dim() const { return dim_; }
  std::size_t size() const { return conf_.size(); }

  std::span<const double> descriptor(std::size_t i) const {
    return {desc_.data() + i * dim_, static_cast<std::size_t>(dim_)};
  }
  std::span<double> descriptor(std::size_t i) {
    return {desc_.data() + i * dim_, static_cast<std::size_t>(dim_)};
  }
  double confidence(std::size_t i) const { return conf_[i]; }
  void set_confidence(std::size_t i, double q) { conf_[i] = q; }

  double similarity(std::size_t i, const FeatureMap& other, std::size_t j) const {
    const double* a = desc_.data() + i * dim_;
    const double* b = other.desc_.data() + j * other.dim_;
    double s = 0.0;
    for (int k = 0; k < dim_; ++k) s += a[k] * b[k];
    return s;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int dim_ = 0;
  std::vector<double> desc_;
  std::vector<double> conf_;
};

/// A keyframe's fused pointmap and accumulated confidence.
struct CanonicalPointmap {
  Pointmap points;
  ConfidenceMap confidence;
};

struct RayGrid {
  int height = 0;
  int width = 0;
  std::vector<Vec3> rays;
  std::vector<std::uint8_t> valid;
};

inline RayGrid to_rays(const Pointmap& pm) {
  RayGrid out{pm.height(), pm.width(), std::vector<Vec3>(pm.size(), Vec3::Zero()),
              std::vector<std::uint8_t>(pm.size(), 0)};
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (!pm.valid(i) || !(pm.point(i).norm() > kRayEpsilon)) continue;
    out.rays[i] = normalize_ray(pm.point(i)).vec();
    out.valid[i] = 1;
  }
  return out;
}

/// Confidence-weighted running average of an observation (expressed in frame
/// f, mapped into the keyframe by t_kf) into the canonical pointmap.
inline CanonicalPointmap fuse_canonical(const CanonicalPointmap& canon, const Pointmap& obs,
                                        const ConfidenceMap& obs_conf,
                                        const SimilarityTransform& t_kf) {
  const int h = canon.points.height();
  const int w = canon.points.width();
  if (!obs.same_shape(h, w) || obs_conf.height() != h || obs_conf.width() != w ||
      canon.confidence.height() != h || canon.confidence.width() != w) {
    throw ConfigError("fuse_canonical: dimension mismatch");
  }
  CanonicalPointmap out = canon;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double c = obs.valid(i) ? obs_conf[i] : 0.0;
    if (!(c > 0.0)) continue;
    const Vec3 x = t_kf.act(obs.point(i));
    const double acc = canon.points.valid(i) ? canon.confidence[i] : 0.0;
    if (acc > 0.0) {
      out.points.set(i, (acc * canon.points.point(i) + c * x) / (acc + c));
    } else {
      out.points.set(i, x);
    }
    out.confidence[i] = acc + c;
  }
  return out;
}

inline double valid_fraction(const Pointmap& pm, const ConfidenceMap& conf, double threshold) {
  if (conf.height() != pm.height() || conf.width() != pm.width()) {
    throw ConfigError("valid_fraction: dimension mismatch");
  }
  if (pm.size() == 0) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (pm.valid(i) && conf[i] > threshold) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(pm.size());
}

/// Pointmap resampled in projective form: per pixel (x/z, y/z, 1/z). For a
/// pinhole camera the first two channels are affine in pixel coordinates and
/// the third is affine over any planar surface, so bilinear interpolation of
/// this form is exact on planes.
class ProjectiveGrid {
 public:
  struct Sample {
    Vec2 h;        // (x/z, y/z)
    Eigen::Matrix2d dh;  // columns: d/du, d/dv
    double inv_depth;
  };

  explicit ProjectiveGrid(const Pointmap& pm)
      : height_(pm.height()), width_(pm.width()), data_(pm.size()), valid_(pm.size(), 0) {
    for (std::size_t i = 0; i < pm.size(); ++i) {
      const Vec3& p = pm.point(i);
      if (!pm.valid(i) || !(p.z() > kRayEpsilon)) continue;
      data_[i] = Vec3(p.x() / p.z(), p.y() / p.z(), 1.0 / p.z());
      valid_[i] = 1;
    }
  }

  int height() const { return height_; }
  int width() const { return width_; }

  /// Bilinear sample at column u, row v. Empty when outside the grid or when
  /// any of the four neighbours is invalid.
  std::optional<Sample> sample(double u, double v) const {
    if (!(u >= 0.0 && v >= 0.0 && u <= width_ - 1 && v <= height_ - 1)) return std::nullopt;
    const int c0 = width_ > 1 ? std::min(static_cast<int>(u), width_ - 2) : 0;
    const int r0 = height_ > 1 ? std::min(static_cast<int>(v), height_ - 2) : 0;
    const int c1 = width_ > 1 ? c0 + 1 : c0;
    const int r1 = height_ > 1 ? r0 + 1 : r0;
    const double fu = u - c0;
    const double fv = v - r0;
    const std::size_t i00 = static_cast<std::size_t>(r0) * width_ + c0;
    const std::size_t i01 = static_cast<std::size_t>(r0) * width_ + c1;
    const std::size_t i10 = static_cast<std::size_t>(r1) * width_ + c0;
    const std::size_t i11 = static_cast<std::size_t>(r1) * width_ + c1;
    if (!(valid_[i00] && valid_[i01] && valid_[i10] && valid_[i11])) return std::nullopt;
    const Vec3& a = data_[i00];
    const Vec3& b = data_[i01];
    const Vec3& c = data_[i10];
    const Vec3& d = data_[i11];
    const Vec3 top = (1.0 - fu) * a + fu * b;
    const Vec3 bottom = (1.0 - fu) * c + fu * d;
    const Vec3 val = (1.0 - fv) * top + fv * bottom;
    const Vec3 du = (1.0 - fv) * (b - a) + fv * (d - c);
    const Vec3 dv = bottom - top;
    Sample s;
    s.h = val.head<2>();
    s.dh.col(0) = du.head<2>();
    s.dh.col(1) = dv.head<2>();
    s.inv_depth = val.z();
    return s;
  }

  std::optional<Vec3> point(double u, double v) const {
    const auto s = sample(u, v);
    if (!s || !(s->inv_depth > 0.0)) return std::nullopt;
    return Vec3(s->h.x(), s->h.y(), 1.0) / s->inv_depth;
  }

 private:
  int height_;
  int width_;
  std::vector<Vec3> data_;
  std::vector<std::uint8_t> valid_;
};

// Debug dump: "PMAP", u32 version, u32 H, u32 W, u32 d, then float32
// channel-planar X (3 planes), C, D (d planes), Q, then H*W mask bytes.

inline constexpr std::uint32_t kPointmapDumpVersion = 1;

struct PointmapDump {
  Pointmap points;
  ConfidenceMap confidence;
  FeatureMap features;
};

inline void write_pointmap_dump(io::ByteWriter& w, const Pointmap& pm, const ConfidenceMap& conf,
                                const FeatureMap& feat) {
  const int h = pm.height();
  const int wd = pm.width();
  if (conf.height() != h || conf.width() != wd || feat.height() != h || feat.width() != wd) {
    throw ConfigError("pointmap dump: grid dimension mismatch");
  }
  const std::size_t n = pm.size();
  w.magic("PMAP");
  w.u32(kPointmapDumpVersion);
  w.u32(static_cast<std::uint32_t>(h));
  w.u32(static_cast<std::uint32_t>(wd));
  w.u32(static_cast<std::uint32_t>(feat.dim()));
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) w.f32(static_cast<float>(pm.point(i)(c)));
  }
  for (std::size_t i = 0; i < n; ++i) w.f32(static_cast<float>(conf[i]));
  for (int c = 0; c < feat.dim(); ++c) {
    for (std::size_t i = 0; i < n; ++i) w.f32(static_cast<float>(feat.descriptor(i)[c]));
  }
  for (std::size_t i = 0; i < n; ++i) w.f32(static_cast<float>(feat.confidence(i)));
  for (std::size_t i = 0; i < n; ++i) w.u8(pm.valid(i) ? 1 : 0);
}

inline PointmapDump read_pointmap_dump(io::ByteReader& r) {
  r.expect_magic("PMAP");
  const std::size_t version_at = r.offset();
  if (r.u32() != kPointmapDumpVersion) throw ParseError("unsupported PMAP version", version_at);
  const std::size_t dims_at = r.offset();
  const std::uint32_t h = r.u32();
  const std::uint32_t w = r.u32();
  const std::uint32_t d = r.u32();
  const std::uint64_t n = static_cast<std::uint64_t>(h) * w;
  const std::uint64_t need = n * 4 * (3 + 1 + d + 1) + n;
  if (h > 1u << 15 || w > 1u << 15 || d > 4096 || need > r.remaining()) {
    throw ParseError("PMAP dimensions exceed the available data", dims_at);
  }
  PointmapDump out{Pointmap(static_cast<int>(h), static_cast<int>(w)),
                   ConfidenceMap(static_cast<int>(h), static_cast<int>(w)),
                   FeatureMap(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d))};
  std::vector<Vec3> pts(n, Vec3::Zero());
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) pts[i](c) = r.f32();
  }
  for (std::size_t i = 0; i < n; ++i) out.confidence[i] = r.f32();
  for (std::uint32_t c = 0; c < d; ++c) {
    for (std::size_t i = 0; i < n; ++i) out.features.descriptor(i)[c] = r.f32();
  }
  for (std::size_t i = 0; i < n; ++i) out.features.set_confidence(i, r.f32());
  for (std::size_t i = 0; i < n; ++i) {
    if (r.u8() != 0) out.points.set(i, pts[i]);
  }
  return out;
}

}  // namespace mslam
