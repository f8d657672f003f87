#pragma once

// Sim(3)/SO(3) arithmetic, unit rays and robust-loss primitives.
//
// Tangent vectors are ordered (rho[3], omega[3], sigma): translational,
// rotational, log-scale. Perturbations are left-multiplicative:
// retract(tau, T) = exp(tau) * T.

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <cmath>
#include <span>
#include <utility>

#include "mslam/errors.hpp"

namespace mslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Vec7 = Eigen::Matrix<double, 7, 1>;
using Mat7 = Eigen::Matrix<double, 7, 7>;
using TangentVector = Vec7;

/// Minimum point norm for which a viewing direction is defined.
inline constexpr double kRayEpsilon = 1e-8;

inline Mat3 hat(const Vec3& v) {
  Mat3 m;
  // clang-format off
  m <<     0, -v.z(),  v.y(),
       v.z(),      0, -v.x(),
      -v.y(),  v.x(),      0;
  // clang-format on
  return m;
}

/// Unit quaternion rotation, renormalized after every product.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}
  explicit Rotation(const Eigen::Quaterniond& q) : q_(q.normalized()) {}

  static Rotation from_matrix(const Mat3& r) {
    return Rotation(Eigen::Quaterniond(r));
  }

  static Rotation exp(const Vec3& omega) {
    const double theta = omega.norm();
    const double half = 0.5 * theta;
    double k;  // sin(theta/2) / theta
    if (theta < 1e-4) {
      const double t2 = theta * theta;
      k = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0;
    } else {
      k = std::sin(half) / theta;
    }
    Eigen::Quaterniond q(std::cos(half), k * omega.x(), k * omega.y(), k * omega.z());
    return Rotation(q);
  }

  /// Rotation vector with angle in [0, pi]. Uses atan2 on the quaternion, so
  /// there is no division by sin(theta) near theta = pi.
  Vec3 log() const {
    Eigen::Quaterniond q = q_;
    if (q.w() < 0) q.coeffs() = -q.coeffs();
    const Vec3 v = q.vec();
    const double n = v.norm();
    const double w = q.w();
    if (n < 1e-8) {
      // 2 atan(n/w) / n expanded around n = 0.
      const double r2 = (n * n) / (w * w);
      return (2.0 / w) * (1.0 - r2 / 3.0) * v;
    }
    const double theta = 2.0 * std::atan2(n, w);
    return (theta / n) * v;
  }

  double angle() const { return log().norm(); }

  Mat3 matrix() const { return q_.toRotationMatrix(); }
  const Eigen::Quaterniond& quaternion() const { return q_; }

  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Rotation operator*(const Rotation& other) const { return Rotation(q_ * other.q_); }
  Vec3 operator*(const Vec3& v) const { return q_ * v; }

 private:
  Eigen::Quaterniond q_;
};

namespace detail {

// \int_0^1 u^n e^{sigma u} du as a power series in sigma (|sigma| small).
inline double moment_series(int n, double sigma) {
  double term = 1.0;  // sigma^m / m!
  double sum = 0.0;
  for (int m = 0; m < 40; ++m) {
    const double add = term / static_cast<double>(n + m + 1);
    sum += add;
    if (std::abs(add) < 1e-18 * std::abs(sum)) break;
    term *= sigma / static_cast<double>(m + 1);
  }
  return sum;
}

/// Coefficients (a, b, c) of W = a*Omega + b*Omega^2 + c*I, the matrix that
/// maps the translational tangent part to the group translation.
struct WCoefficients {
  double a, b, c;
};

inline WCoefficients w_coefficients(double sigma, double theta) {
  WCoefficients w{};
  w.c = std::abs(sigma) < 1e-12 ? 1.0 + 0.5 * sigma : std::expm1(sigma) / sigma;
  if (std::max(std::abs(sigma), theta) < 0.5) {
    // a = sum_k (-1)^k theta^2k / (2k+1)! * I_{2k+1}(sigma)
    // b = sum_k (-1)^k theta^2k / (2k+2)! * I_{2k+2}(sigma)
    const double t2 = theta * theta;
    double pow_t = 1.0;
    double fact_odd = 1.0;   // (2k+1)!
    double fact_even = 2.0;  // (2k+2)!
    double sign = 1.0;
    w.a = 0.0;
    w.b = 0.0;
    for (int k = 0; k < 10; ++k) {
      w.a += sign * pow_t / fact_odd * moment_series(2 * k + 1, sigma);
      w.b += sign * pow_t / fact_even * moment_series(2 * k + 2, sigma);
      pow_t *= t2;
      fact_odd *= static_cast<double>((2 * k + 2) * (2 * k + 3));
      fact_even *= static_cast<double>((2 * k + 3) * (2 * k + 4));
      sign = -sign;
    }
    return w;
  }
  const double s = std::exp(sigma);
  const double denom = sigma * sigma + theta * theta;
  if (theta < 1e-6) {
    // theta -> 0 limit; |sigma| >= 0.5 here so there is no cancellation.
    const double s2 = sigma * sigma;
    w.a = ((sigma - 1.0) * s + 1.0) / s2;
    w.b = (s * 0.5 * s2 + s - 1.0 - sigma * s) / (s2 * sigma);
    return w;
  }
  const double sin_t = std::sin(theta);
  const double cos_t = std::cos(theta);
  w.a = (s * sigma * sin_t + theta * (1.0 - s * cos_t)) / (theta * denom);
  w.b = (w.c - ((s * cos_t - 1.0) * sigma + s * sin_t * theta) / denom) / (theta * theta);
  return w;
}

inline Mat3 w_matrix(double sigma, const Vec3& omega) {
  const WCoefficients k = w_coefficients(sigma, omega.norm());
  const Mat3 om = hat(omega);
  return k.a * om + k.b * om * om + k.c * Mat3::Identity();
}

}  // namespace detail

/// Element of Sim(3): x -> s R x + t.
class SimilarityTransform {
 public:
  SimilarityTransform() = default;
  SimilarityTransform(double scale, const Rotation& rotation, const Vec3& translation)
      : scale_(scale), rotation_(rotation), translation_(translation) {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw Error("similarity scale must be positive and finite");
    }
  }

  static SimilarityTransform identity() { return {}; }

  static SimilarityTransform from_matrix(const Mat4& m) {
    const Mat3 sr = m.topLeftCorner<3, 3>();
    const double s = std::cbrt(sr.determinant());
    return {s, Rotation::from_matrix(sr / s), m.topRightCorner<3, 1>()};
  }

  double scale() const { return scale_; }
  const Rotation& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = scale_ * rotation_.matrix();
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

  Vec3 act(const Vec3& x) const { return scale_ * (rotation_ * x) + translation_; }

  SimilarityTransform inverse() const {
    const Rotation r_inv = rotation_.inverse();
    const double s_inv = 1.0 / scale_;
    return {s_inv, r_inv, -s_inv * (r_inv * translation_)};
  }

  SimilarityTransform operator*(const SimilarityTransform& b) const {
    return {scale_ * b.scale_, rotation_ * b.rotation_,
            scale_ * (rotation_ * b.translation_) + translation_};
  }

  static SimilarityTransform exp(const TangentVector& tau) {
    const Vec3 rho = tau.head<3>();
    const Vec3 omega = tau.segment<3>(3);
    const double sigma = tau(6);
    return {std::exp(sigma), Rotation::exp(omega), detail::w_matrix(sigma, omega) * rho};
  }

  TangentVector log() const {
    const Vec3 omega = rotation_.log();
    const double sigma = std::log(scale_);
    TangentVector tau;
    tau.head<3>() = detail::w_matrix(sigma, omega).partialPivLu().solve(translation_);
    tau.segment<3>(3) = omega;
    tau(6) = sigma;
    return tau;
  }

 private:
  double scale_ = 1.0;
  Rotation rotation_;
  Vec3 translation_ = Vec3::Zero();
};

inline SimilarityTransform exp(const TangentVector& tau) { return SimilarityTransform::exp(tau); }
inline TangentVector log(const SimilarityTransform& t) { return t.log(); }
inline SimilarityTransform compose(const SimilarityTransform& a, const SimilarityTransform& b) {
  return a * b;
}
inline Vec3 act(const SimilarityTransform& t, const Vec3& x) { return t.act(x); }
inline SimilarityTransform retract(const TangentVector& tau, const SimilarityTransform& t) {
  return SimilarityTransform::exp(tau) * t;
}

/// Unit-norm viewing direction.
class UnitRay {
 public:
  const Vec3& vec() const { return v_; }
  double dot(const UnitRay& o) const { return v_.dot(o.v_); }

 private:
  explicit UnitRay(const Vec3& v) : v_(v) {}
  friend UnitRay normalize_ray(const Vec3& x);
  Vec3 v_;
};

/// Throws InvalidPointError when the point is too close to the camera
/// center to define a direction.
inline UnitRay normalize_ray(const Vec3& x) {
  const double n = x.norm();
  if (!(n > kRayEpsilon)) throw InvalidPointError("point too close to the camera center");
  return UnitRay(x / n);
}

/// Squared chord distance between two rays, equal to 2 (1 - cos angle).
inline double ray_sq_error(const UnitRay& a, const UnitRay& b) {
  return (a.vec() - b.vec()).squaredNorm();
}

struct HuberValue {
  double loss;
  double irls_weight;
};

inline HuberValue huber(double r, double delta) {
  const double a = std::abs(r);
  if (a <= delta) return {0.5 * r * r, 1.0};
  return {delta * (a - 0.5 * delta), delta / a};
}

/// Derivative of the group action with respect to a left perturbation,
/// evaluated at the transformed point y: d(exp(tau) y)/dtau = [I, -[y]x, y].
inline Eigen::Matrix<double, 3, 7> action_jacobian(const Vec3& y) {
  Eigen::Matrix<double, 3, 7> g;
  g.leftCols<3>().setIdentity();
  g.block<3, 3>(0, 3) = -hat(y);
  g.col(6) = y;
  return g;
}

/// Weighted closed-form similarity alignment: returns T minimizing
/// sum_i w_i |dst_i - T src_i|^2. Throws AlignmentError for fewer than three
/// points or (near-)collinear configurations.
inline SimilarityTransform align_points(std::span<const Vec3> src, std::span<const Vec3> dst,
                                        std::span<const double> weights = {}) {
  if (src.size() != dst.size() || (!weights.empty() && weights.size() != src.size())) {
    throw AlignmentError("point alignment: mismatched input sizes");
  }
  if (src.size() < 3) throw AlignmentError("point alignment needs at least 3 points");
  double wsum = 0.0;
  Vec3 mu_s = Vec3::Zero();
  Vec3 mu_d = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    wsum += w;
    mu_s += w * src[i];
    mu_d += w * dst[i];
  }
  if (!(wsum > 0.0)) throw AlignmentError("point alignment: zero total weight");
  mu_s /= wsum;
  mu_d /= wsum;
  Mat3 cov = Mat3::Zero();
  double var_s = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    const Vec3 ds = src[i] - mu_s;
    cov += w * (dst[i] - mu_d) * ds.transpose();
    var_s += w * ds.squaredNorm();
  }
  cov /= wsum;
  var_s /= wsum;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 d = svd.singularValues();
  if (!(var_s > 0.0) || d(1) <= 1e-12 * d(0) || d(0) <= 0.0) {
    throw AlignmentError("point alignment: degenerate (collinear) configuration");
  }
  Mat3 sign = Mat3::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0) sign(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * sign * svd.matrixV().transpose();
  const double s = (d.asDiagonal() * sign).trace() / var_s;
  return {s, Rotation::from_matrix(r), mu_d - s * r * mu_s};
}

}  // namespace mslam
