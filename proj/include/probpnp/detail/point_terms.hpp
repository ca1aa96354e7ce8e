#pragma once

// Per-correspondence residual and pose Jacobian, templated on the scalar so
// the same code runs on doubles and on forward-mode dual numbers.

#include <cmath>

#include "probpnp/geometry.hpp"

namespace probpnp::detail {

struct PoseFrame {
  Mat3 R;
  Vec3 t;
  PoseSpace space;
};

inline PoseFrame make_frame(const Pose& pose) {
  return PoseFrame{rotation(pose), translation(pose), space_of(pose)};
}

template <typename S>
using V2 = Eigen::Matrix<S, 2, 1>;
template <typename S>
using V3 = Eigen::Matrix<S, 3, 1>;
template <typename S>
using J2 = Eigen::Matrix<S, 2, Eigen::Dynamic, 0, 2, 6>;

template <typename S>
struct PointTerms {
  V2<S> r;
  V2<S> f;
  J2<S> J;
};

/// Fills r, f and optionally J = df/dy. Returns false when the point lands
/// at or behind the depth floor.
template <typename S>
bool point_terms(const PoseFrame& frame, const Camera& cam, const V3<S>& x3d, const V2<S>& x2d,
                 const V2<S>& w, bool want_jacobian, PointTerms<S>& out) {
  using std::abs;
  V3<S> rx;
  for (int i = 0; i < 3; ++i) {
    rx(i) = S(frame.R(i, 0)) * x3d(0) + S(frame.R(i, 1)) * x3d(1) + S(frame.R(i, 2)) * x3d(2);
  }
  const S px = rx(0) + S(frame.t(0));
  const S py = rx(1) + S(frame.t(1));
  const S pz = rx(2) + S(frame.t(2));
  if (!(pz > S(kMinDepth))) return false;

  const S inv_z = S(1.0) / pz;
  out.r(0) = S(cam.fx) * px * inv_z + S(cam.cx) - x2d(0);
  out.r(1) = S(cam.fy) * py * inv_z + S(cam.cy) - x2d(1);
  out.f(0) = w(0) * out.r(0);
  out.f(1) = w(1) * out.r(1);
  if (!want_jacobian) return true;

  // Weighted projection Jacobian d(w o pi)/dp.
  Eigen::Matrix<S, 2, 3> dp;
  dp(0, 0) = w(0) * S(cam.fx) * inv_z;
  dp(0, 1) = S(0.0);
  dp(0, 2) = -w(0) * S(cam.fx) * px * inv_z * inv_z;
  dp(1, 0) = S(0.0);
  dp(1, 1) = w(1) * S(cam.fy) * inv_z;
  dp(1, 2) = -w(1) * S(cam.fy) * py * inv_z * inv_z;

  switch (frame.space) {
    case PoseSpace::kYawOnly:
    case PoseSpace::kYaw4DoF: {
      // d(R_y(theta) x)/dtheta = e_y x (R x)
      V3<S> col;
      col << rx(2), S(0.0), -rx(0);
      if (frame.space == PoseSpace::kYawOnly) {
        out.J.resize(2, 1);
        out.J.col(0) = dp * col;
      } else {
        out.J.resize(2, 4);
        out.J.template leftCols<3>() = dp;
        out.J.col(3) = dp * col;
      }
      break;
    }
    case PoseSpace::kQuat6DoF: {
      // d(Exp(w) R x)/dw = -[R x]_x
      Eigen::Matrix<S, 3, 3> neg_skew;
      neg_skew << S(0.0), rx(2), -rx(1),  //
          -rx(2), S(0.0), rx(0),          //
          rx(1), -rx(0), S(0.0);
      out.J.resize(2, 6);
      out.J.template leftCols<3>() = dp;
      out.J.template rightCols<3>() = dp * neg_skew;
      break;
    }
  }
  return true;
}

/// Huber kernel rho(s) on a squared norm.
template <typename S>
S huber_rho(const S& s, double delta) {
  using std::sqrt;
  if (s <= S(delta * delta)) return s;
  return S(delta) * (S(2.0) * sqrt(s) - S(delta));
}

/// rho'(s) = d rho / d s, written in terms of |f| = sqrt(s).
template <typename S>
S huber_weight(const S& s, double delta) {
  using std::sqrt;
  if (s <= S(delta * delta)) return S(1.0);
  return S(delta) / sqrt(s);
}

}  // namespace probpnp::detail
