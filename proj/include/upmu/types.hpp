#pragma once

#include <array>
#include <complex>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace upmu {

using cplx = std::complex<double>;

using Vec3c = Eigen::Matrix<cplx, 3, 1>;
using Mat3c = Eigen::Matrix<cplx, 3, 3>;
using VecXc = Eigen::Matrix<cplx, Eigen::Dynamic, 1>;
using MatXc = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic>;
using VecXd = Eigen::VectorXd;
using MatXd = Eigen::MatrixXd;

/// Reporting index at the 120 Hz phasor rate.
using Tick = long long;

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;
inline constexpr double kNominalHz = 60.0;
inline constexpr double kReportingHz = 120.0;

enum class Phase : int { a = 0, b = 1, c = 2 };

inline constexpr std::array<char, 3> kPhaseNames{'a', 'b', 'c'};

inline Phase phase_from_char(char c) {
  switch (c) {
    case 'a': case 'A': return Phase::a;
    case 'b': case 'B': return Phase::b;
    case 'c': case 'C': return Phase::c;
    default: throw std::invalid_argument(std::string("unknown phase '") + c + "'");
  }
}

/// Set of present phases, bit i set for phase i.
struct PhaseSet {
  unsigned bits = 0b111;

  static PhaseSet all() { return {0b111}; }
  static PhaseSet none() { return {0}; }
  static PhaseSet parse(const std::string& s) {
    PhaseSet p{0};
    for (char c : s) p.bits |= 1u << static_cast<int>(phase_from_char(c));
    return p;
  }

  bool has(int p) const { return (bits >> p) & 1u; }
  bool has(Phase p) const { return has(static_cast<int>(p)); }
  int count() const { return has(0) + has(1) + has(2); }
  PhaseSet operator|(PhaseSet o) const { return {bits | o.bits}; }
  bool operator==(const PhaseSet&) const = default;

  std::string str() const {
    std::string s;
    for (int p = 0; p < 3; ++p)
      if (has(p)) s.push_back(kPhaseNames[p]);
    return s;
  }
};

/// Thrown for malformed inputs: bad topology data, inconsistent configs, bad CSV rows.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when a numerical precondition fails (singular block, islanded bus, ...).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One reporting instant at a metered bus: phase voltages and the current leaving into each incident line.
struct PhasorSample {
  Tick k = 0;
  int bus = 0;
  Vec3c v = Vec3c::Zero();
  std::map<std::string, Vec3c> i_lines;

  /// Bus injection: sum of the currents leaving into incident lines.
  Vec3c injection() const {
    Vec3c acc = Vec3c::Zero();
    for (const auto& [id, i] : i_lines) acc += i;
    return acc;
  }
};

}  // namespace upmu
