#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <string>

#include <Eigen/SVD>

#include "upmu/grid_model.hpp"
#include "upmu/types.hpp"

namespace upmu::metrics {

/// Singular values of R in descending order.
inline VecXd singular_values(const MatXc& r) {
  if (r.size() == 0) return VecXd();
  Eigen::JacobiSVD<MatXc> svd(r);
  return svd.singularValues();
}

/**
 * Distance of R R^H from its best rank-1 approximation in Frobenius norm,
 * min_{|u|=1} |(I - u u^H) R R^H|_F = sqrt(sum_{i>=2} sigma_i(R)^4).
 */
inline double subspace_residual(const MatXc& r) {
  if (r.rows() < r.cols() || r.cols() < 1) throw InputError("subspace_residual needs a p x q matrix with p >= q >= 1");
  if (!r.allFinite()) throw NumericError("subspace_residual: non-finite entries");
  const VecXd s = singular_values(r);
  double acc = 0.0;
  for (Eigen::Index i = 1; i < s.size(); ++i) acc += std::pow(s(i), 4);
  return std::sqrt(acc);
}

/**
 * Sliding window of paired samples (x[k], y[k]) producing the scaled cross-correlation
 * (1 / (M - 1)) sum_{m<M} x[k-m] y[k-m]^H. Recomputed from the buffer on each call.
 */
template <int XDim, int YDim>
class CorrelationWindow {
 public:
  using XVec = Eigen::Matrix<cplx, XDim, 1>;
  using YVec = Eigen::Matrix<cplx, YDim, 1>;
  using Corr = Eigen::Matrix<cplx, XDim, YDim>;

  explicit CorrelationWindow(int m) : m_(m) {
    if (m < 2) throw InputError("correlation window needs M >= 2");
  }

  int length() const { return m_; }
  bool full() const { return static_cast<int>(buf_.size()) == m_; }
  void clear() { buf_.clear(); }

  void push(const XVec& x, const YVec& y) {
    buf_.emplace_back(x, y);
    if (static_cast<int>(buf_.size()) > m_) buf_.pop_front();
  }

  Corr correlation() const {
    Corr acc = Corr::Zero();
    for (const auto& [x, y] : buf_) acc.noalias() += x * y.adjoint();
    return acc / static_cast<double>(m_ - 1);
  }

 private:
  int m_;
  std::deque<std::pair<XVec, YVec>> buf_;
};

/**
 * Line metric from meters at both ends: stacks I = [i_ij; i_ji], V = [v_i; v_j] and tracks the
 * subspace residual of [R_IV; R_VV] (12 x 6).
 */
class DoublePmuMetric {
 public:
  explicit DoublePmuMetric(int m = 32) : win_(m) {
    if (m < 6) throw InputError("double-meter metric needs M >= 6");
  }

  int window() const { return win_.length(); }

  std::optional<double> push(const Vec3c& i_ij, const Vec3c& i_ji, const Vec3c& v_i, const Vec3c& v_j) {
    Eigen::Matrix<cplx, 12, 1> x;
    Eigen::Matrix<cplx, 6, 1> v;
    v << v_i, v_j;
    x << i_ij, i_ji, v;
    win_.push(x, v);
    if (!win_.full()) return std::nullopt;
    return subspace_residual(correlation());
  }

  /// R_k = [R_IV; R_VV] over the current window.
  MatXc correlation() const { return win_.correlation(); }
  void reset() { win_.clear(); }

 private:
  CorrelationWindow<12, 6> win_;
};

/// Per-line metric from a single meter: [R_iv; R_vv] (6 x 3) for one incident line.
class SinglePmuMetric {
 public:
  explicit SinglePmuMetric(int m = 6) : win_(m) {}

  int window() const { return win_.length(); }

  std::optional<double> push(const Vec3c& i_ij, const Vec3c& v_i) {
    Eigen::Matrix<cplx, 6, 1> x;
    x << i_ij, v_i;
    win_.push(x, v_i);
    if (!win_.full()) return std::nullopt;
    return subspace_residual(correlation());
  }

  MatXc correlation() const { return win_.correlation(); }
  void reset() { win_.clear(); }

 private:
  CorrelationWindow<6, 3> win_;
};

enum class MultiMode { automatic, projector, min_singular };

inline std::string to_string(MultiMode m) {
  switch (m) {
    case MultiMode::projector: return "projector";
    case MultiMode::min_singular: return "min-singular";
    default: return "auto";
  }
}

inline MultiMode multi_mode_from_string(const std::string& s) {
  if (s == "projector") return MultiMode::projector;
  if (s == "min-singular" || s == "min_singular") return MultiMode::min_singular;
  if (s == "auto" || s.empty()) return MultiMode::automatic;
  throw InputError("unknown multi-meter mode '" + s + "'");
}

/**
 * Grid-wide metric over the measured injections and voltages d_a.
 *
 * projector:    |(I - H_u H_u^+) H_a d_a|^2 / |d_a|^2
 * min-singular: |U_r^H H_a d_a|^2 / |d_a|^2, U_r the r left singular vectors of H_u with smallest
 *               singular values (r = 1 by default).
 * automatic picks min-singular when |I - H_u H_u^+|_F < trivial_tol, i.e. when H_u has full row rank.
 */
class MultiPmuMetric {
 public:
  explicit MultiPmuMetric(const grid::SystemMatrices& sys, MultiMode mode = MultiMode::automatic, int r = 1,
                          double trivial_tol = 1e-8) {
    const MatXc p = grid::left_null_projector(sys.h_u);
    projector_norm_ = p.norm();
    if (mode == MultiMode::automatic)
      mode = projector_norm_ < trivial_tol ? MultiMode::min_singular : MultiMode::projector;
    mode_ = mode;
    if (mode_ == MultiMode::projector) {
      op_ = p * sys.h_a;
    } else {
      if (sys.h_u.cols() == 0) throw InputError("min-singular mode needs unmeasured columns");
      const auto dirs = grid::smallest_left_singular_directions(sys.h_u, r);
      op_ = dirs.u.adjoint() * sys.h_a;
    }
    dim_ = sys.h_a.cols();
  }

  MultiMode mode() const { return mode_; }
  double projector_norm() const { return projector_norm_; }
  Eigen::Index input_size() const { return dim_; }

  double evaluate(const VecXc& d_a) const {
    if (d_a.size() != dim_) throw InputError("measured vector has the wrong size");
    const double den = d_a.squaredNorm();
    if (!(den > 0.0)) throw InputError("measured vector is zero");
    if (!d_a.allFinite()) throw NumericError("measured vector has non-finite entries");
    return (op_ * d_a).squaredNorm() / den;
  }

 private:
  MultiMode mode_ = MultiMode::automatic;
  MatXc op_;
  Eigen::Index dim_ = 0;
  double projector_norm_ = 0.0;
};

}  // namespace upmu::metrics
