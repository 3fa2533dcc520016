#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <vector>

#include <Eigen/SVD>
#include <json.hpp>
#include <limits>

#include "upmu/types.hpp"

namespace upmu::grid {

/// Ohmic phase-frame line data. n = 3 (phases) or n > 3 (phases followed by neutral conductors).
struct PhaseImpedanceSpec {
  std::string line_id;
  MatXc z_per_length;  // ohm / length
  MatXd b_per_length;  // siemens / length, may be empty
  double length = 0.0;
  PhaseSet phasing = PhaseSet::all();
};

/// Per-unit conversion of one branch: kV line-to-line that its ohmic data is referred to, and S base.
struct Bases {
  double kv_ll = 1.0;
  double s_base_mva = 1.0;
  double z_base() const { return kv_ll * kv_ll / s_base_mva; }
};

struct LineModel {
  std::string line_id;
  int from_bus = 0;
  int to_bus = 0;
  PhaseSet phasing = PhaseSet::all();
  Mat3c y_series = Mat3c::Zero();  // per unit
  Mat3c y_shunt = Mat3c::Zero();   // per unit, at each end

  Mat3c y_bar() const { return y_shunt + y_series; }

  /// Current leaving `from_bus` into the line.
  Vec3c current_from(const Vec3c& v_from, const Vec3c& v_to) const { return y_bar() * v_from - y_series * v_to; }
  /// Current leaving `to_bus` into the line.
  Vec3c current_to(const Vec3c& v_from, const Vec3c& v_to) const { return y_bar() * v_to - y_series * v_from; }
};

struct Bus {
  int id = 0;
  std::string name;
  double kv_ll = 1.0;
};

struct GridTopology {
  std::vector<Bus> buses;  // ascending id
  std::vector<LineModel> lines;
  std::vector<int> metered_buses;  // ascending id
  double s_base_mva = 1.0;

  int bus_count() const { return static_cast<int>(buses.size()); }

  /// Position of a bus id in `buses`.
  int index_of(int bus_id) const {
    auto it = std::lower_bound(buses.begin(), buses.end(), bus_id,
                               [](const Bus& b, int id) { return b.id < id; });
    if (it == buses.end() || it->id != bus_id) throw InputError("unknown bus " + std::to_string(bus_id));
    return static_cast<int>(it - buses.begin());
  }

  bool has_bus(int bus_id) const {
    auto it = std::lower_bound(buses.begin(), buses.end(), bus_id,
                               [](const Bus& b, int id) { return b.id < id; });
    return it != buses.end() && it->id == bus_id;
  }

  const LineModel& line(const std::string& id) const {
    for (const auto& l : lines)
      if (l.line_id == id) return l;
    throw InputError("unknown line " + id);
  }

  std::optional<std::size_t> line_index(const std::string& id) const {
    for (std::size_t i = 0; i < lines.size(); ++i)
      if (lines[i].line_id == id) return i;
    return std::nullopt;
  }

  /// Lines incident to a bus, in line order.
  std::vector<const LineModel*> incident_lines(int bus_id) const {
    std::vector<const LineModel*> out;
    for (const auto& l : lines)
      if (l.from_bus == bus_id || l.to_bus == bus_id) out.push_back(&l);
    return out;
  }

  bool is_metered(int bus_id) const {
    return std::binary_search(metered_buses.begin(), metered_buses.end(), bus_id);
  }

  /// Phases present at a bus: union over incident lines.
  PhaseSet bus_phases(int bus_id) const {
    PhaseSet p = PhaseSet::none();
    for (const auto& l : lines)
      if (l.from_bus == bus_id || l.to_bus == bus_id) p = p | l.phasing;
    return p;
  }

  /// Checks ids, endpoints, the metered subset and optionally connectivity. Throws InputError.
  void validate(bool require_connected = true) const {
    if (buses.empty()) throw InputError("topology has no buses");
    for (std::size_t i = 1; i < buses.size(); ++i)
      if (buses[i - 1].id >= buses[i].id) throw InputError("bus ids must be unique and ascending");
    std::set<std::string> ids;
    for (const auto& l : lines) {
      if (!ids.insert(l.line_id).second) throw InputError("duplicate line id " + l.line_id);
      if (!has_bus(l.from_bus) || !has_bus(l.to_bus))
        throw InputError("line " + l.line_id + " references an unknown bus");
      if (l.from_bus == l.to_bus) throw InputError("line " + l.line_id + " is a self loop");
    }
    for (int m : metered_buses)
      if (!has_bus(m)) throw InputError("metered bus " + std::to_string(m) + " is not in the topology");
    for (std::size_t i = 1; i < metered_buses.size(); ++i)
      if (metered_buses[i - 1] >= metered_buses[i]) throw InputError("metered buses must be unique");
    if (require_connected && components().size() > 1) throw InputError("topology graph is not connected");
  }

  /// Connected components as lists of bus ids.
  std::vector<std::vector<int>> components() const {
    const int n = bus_count();
    std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
    for (const auto& l : lines) {
      const int a = index_of(l.from_bus), b = index_of(l.to_bus);
      adj[static_cast<std::size_t>(a)].push_back(b);
      adj[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<int> comp(static_cast<std::size_t>(n), -1);
    std::vector<std::vector<int>> out;
    for (int s = 0; s < n; ++s) {
      if (comp[static_cast<std::size_t>(s)] >= 0) continue;
      out.emplace_back();
      std::queue<int> q;
      q.push(s);
      comp[static_cast<std::size_t>(s)] = static_cast<int>(out.size()) - 1;
      while (!q.empty()) {
        const int u = q.front();
        q.pop();
        out.back().push_back(buses[static_cast<std::size_t>(u)].id);
        for (int v : adj[static_cast<std::size_t>(u)]) {
          if (comp[static_cast<std::size_t>(v)] < 0) {
            comp[static_cast<std::size_t>(v)] = comp[static_cast<std::size_t>(s)];
            q.push(v);
          }
        }
      }
      std::sort(out.back().begin(), out.back().end());
    }
    return out;
  }

  /// Same topology without the named line (an outage as seen by the network model).
  GridTopology without_line(const std::string& id) const {
    GridTopology t = *this;
    auto it = std::find_if(t.lines.begin(), t.lines.end(), [&](const LineModel& l) { return l.line_id == id; });
    if (it == t.lines.end()) throw InputError("unknown line " + id);
    t.lines.erase(it);
    return t;
  }
};

/// A claimed change of line status, as carried by the connectivity data handed to the detector.
struct DeclaredChange {
  Tick tick = 0;
  std::string line;
  bool in_service = false;
};

/// Apply declared changes with tick <= k, in order, to a base topology.
inline GridTopology declared_topology_at(const GridTopology& base, const std::vector<DeclaredChange>& changes,
                                         Tick k, const GridTopology* full = nullptr) {
  GridTopology t = base;
  for (const auto& c : changes) {
    if (c.tick > k) break;
    const bool present = t.line_index(c.line).has_value();
    if (!c.in_service && present) {
      t = t.without_line(c.line);
    } else if (c.in_service && !present) {
      const GridTopology& src = full ? *full : base;
      t.lines.push_back(src.line(c.line));
    }
  }
  return t;
}

/**
 * Eliminate grounded conductors from an n x n impedance matrix, n > 3, keeping the leading 3 x 3
 * phase block: z_abc - z_an z_nn^-1 z_na.
 */
inline Mat3c kron_reduce(const MatXc& z) {
  if (z.rows() != z.cols() || z.rows() < 3) throw InputError("kron_reduce needs a square matrix of size >= 3");
  if (z.rows() == 3) return z;
  const Eigen::Index nn = z.rows() - 3;
  const MatXc z_nn = z.bottomRightCorner(nn, nn);
  Eigen::FullPivLU<MatXc> lu(z_nn);
  if (!lu.isInvertible()) throw NumericError("neutral impedance block is singular");
  const MatXc red = z.topLeftCorner(3, 3) - z.topRightCorner(3, nn) * lu.solve(z.bottomLeftCorner(nn, 3));
  return red;
}

/// Invert the present-phase sub-block of a 3 x 3 matrix, leaving absent phases as zero rows/columns.
inline Mat3c invert_present(const Mat3c& z, PhaseSet phasing, const std::string& what) {
  std::vector<int> idx;
  for (int p = 0; p < 3; ++p)
    if (phasing.has(p)) idx.push_back(p);
  const auto n = static_cast<Eigen::Index>(idx.size());
  MatXc sub(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) sub(r, c) = z(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]);
  Eigen::FullPivLU<MatXc> lu(sub);
  if (n == 0 || !lu.isInvertible()) throw NumericError(what + ": present-phase impedance is singular");
  const MatXc inv = lu.inverse();
  Mat3c out = Mat3c::Zero();
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) out(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]) = inv(r, c);
  return out;
}

/// Per-unit pi model of a line from its ohmic description.
inline LineModel build_line_model(const PhaseImpedanceSpec& spec, int from_bus, int to_bus, const Bases& bases) {
  if (!(spec.length > 0.0) || !std::isfinite(spec.length))
    throw InputError("line " + spec.line_id + ": length must be positive");
  if (spec.phasing.count() == 0) throw InputError("line " + spec.line_id + ": no phases present");
  const Mat3c z3 = kron_reduce(spec.z_per_length) * spec.length;
  Mat3c mask = Mat3c::Zero();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      if (spec.phasing.has(r) && spec.phasing.has(c)) mask(r, c) = 1.0;

  LineModel lm;
  lm.line_id = spec.line_id;
  lm.from_bus = from_bus;
  lm.to_bus = to_bus;
  lm.phasing = spec.phasing;
  const double zb = bases.z_base();
  lm.y_series = invert_present(z3.cwiseProduct(mask), spec.phasing, "line " + spec.line_id) * zb;
  if (spec.b_per_length.size() > 0) {
    if (spec.b_per_length.rows() < 3 || spec.b_per_length.cols() < 3)
      throw InputError("line " + spec.line_id + ": shunt matrix must be at least 3 x 3");
    // A grounded conductor sits at zero potential, so the phase block of the shunt admittance is kept as is.
    const Eigen::Matrix3d b3 = spec.b_per_length.topLeftCorner(3, 3) * spec.length;
    lm.y_shunt = (cplx(0.0, 0.5) * b3.cast<cplx>()).cwiseProduct(mask) * zb;
  }
  return lm;
}

/**
 * Network matrices for the grid-wide metric.
 *
 * d = [I; V] stacks bus injections then bus voltages, buses ascending, phases a, b, c within a bus.
 * d_a = T_a d holds the metered buses' injections followed by their voltages; d_u = T_u d the rest.
 */
struct SystemMatrices {
  MatXc ybus;
  MatXc h;
  MatXd t_a;
  MatXd t_u;
  MatXc h_a;
  MatXc h_u;
  std::vector<int> metered_index;    // bus positions, ascending
  std::vector<int> unmetered_index;  // bus positions, ascending
  std::vector<Eigen::Index> a_cols;  // columns of d selected by T_a
  std::vector<Eigen::Index> u_cols;

  int bus_count() const { return static_cast<int>(ybus.rows() / 3); }

  VecXc select_a(const VecXc& d) const {
    VecXc out(static_cast<Eigen::Index>(a_cols.size()));
    for (std::size_t i = 0; i < a_cols.size(); ++i) out(static_cast<Eigen::Index>(i)) = d(a_cols[i]);
    return out;
  }
  VecXc select_u(const VecXc& d) const {
    VecXc out(static_cast<Eigen::Index>(u_cols.size()));
    for (std::size_t i = 0; i < u_cols.size(); ++i) out(static_cast<Eigen::Index>(i)) = d(u_cols[i]);
    return out;
  }
  /// T^T [d_u; d_a].
  VecXc reassemble(const VecXc& d_u, const VecXc& d_a) const {
    VecXc d = VecXc::Zero(h.cols());
    for (std::size_t i = 0; i < u_cols.size(); ++i) d(u_cols[i]) = d_u(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < a_cols.size(); ++i) d(a_cols[i]) = d_a(static_cast<Eigen::Index>(i));
    return d;
  }
};

/// Block Y-bus: diagonal blocks sum incident Y_bar, off-diagonal blocks are -Y_series.
inline MatXc assemble_ybus(const GridTopology& topo) {
  const Eigen::Index n = 3 * topo.bus_count();
  MatXc y = MatXc::Zero(n, n);
  for (const auto& l : topo.lines) {
    const Eigen::Index i = 3 * topo.index_of(l.from_bus), j = 3 * topo.index_of(l.to_bus);
    const Mat3c yb = l.y_bar();
    y.block<3, 3>(i, i) += yb;
    y.block<3, 3>(j, j) += yb;
    y.block<3, 3>(i, j) -= l.y_series;
    y.block<3, 3>(j, i) -= l.y_series;
  }
  return y;
}

/// A declared topology may leave buses disconnected (a claimed outage), so connectivity is not required.
inline SystemMatrices assemble_system(const GridTopology& topo) {
  topo.validate(false);
  SystemMatrices s;
  const int b = topo.bus_count();
  const Eigen::Index n3 = 3 * b;
  s.ybus = assemble_ybus(topo);
  s.h.resize(n3, 2 * n3);
  s.h.leftCols(n3) = MatXc::Identity(n3, n3);
  s.h.rightCols(n3) = -s.ybus;

  for (int i = 0; i < b; ++i) {
    if (topo.is_metered(topo.buses[static_cast<std::size_t>(i)].id)) s.metered_index.push_back(i);
    else s.unmetered_index.push_back(i);
  }
  auto cols_for = [&](const std::vector<int>& idx) {
    std::vector<Eigen::Index> cols;
    for (int i : idx)
      for (int p = 0; p < 3; ++p) cols.push_back(3 * i + p);
    for (int i : idx)
      for (int p = 0; p < 3; ++p) cols.push_back(n3 + 3 * i + p);
    return cols;
  };
  s.a_cols = cols_for(s.metered_index);
  s.u_cols = cols_for(s.unmetered_index);

  auto selection = [&](const std::vector<Eigen::Index>& cols) {
    MatXd t = MatXd::Zero(static_cast<Eigen::Index>(cols.size()), 2 * n3);
    for (std::size_t r = 0; r < cols.size(); ++r) t(static_cast<Eigen::Index>(r), cols[r]) = 1.0;
    return t;
  };
  s.t_a = selection(s.a_cols);
  s.t_u = selection(s.u_cols);

  s.h_a.resize(n3, static_cast<Eigen::Index>(s.a_cols.size()));
  for (std::size_t c = 0; c < s.a_cols.size(); ++c) s.h_a.col(static_cast<Eigen::Index>(c)) = s.h.col(s.a_cols[c]);
  s.h_u.resize(n3, static_cast<Eigen::Index>(s.u_cols.size()));
  for (std::size_t c = 0; c < s.u_cols.size(); ++c) s.h_u.col(static_cast<Eigen::Index>(c)) = s.h.col(s.u_cols[c]);
  return s;
}

/// Rotate a vector so its largest-magnitude entry (first on ties) is real and positive.
inline void fix_phase(Eigen::Ref<VecXc> u) {
  Eigen::Index best = 0;
  double mag = -1.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double m = std::abs(u(i));
    if (m > mag * (1.0 + 1e-12)) {
      mag = m;
      best = i;
    }
  }
  if (mag > 0.0) u *= std::conj(u(best)) / mag;
}

struct SingularDirections {
  MatXc u;             // rows(H) x r, smallest singular value last
  VecXd sigma;         // matching singular values, zero-padded when rows(H) > cols(H)
};

/**
 * Left singular directions of the r smallest singular values of h, each phase-fixed.
 * For a tall h the missing singular values count as zero, so left null directions come first.
 */
inline SingularDirections smallest_left_singular_directions(const MatXc& h, int r = 1) {
  if (h.rows() == 0) throw InputError("singular direction of an empty matrix");
  if (r < 1 || r > h.rows()) throw InputError("invalid number of singular directions");
  const Eigen::Index m = h.rows();
  VecXd sv = VecXd::Zero(m);
  MatXc u;
  if (h.cols() == 0) {
    u = MatXc::Identity(m, m);
  } else {
    Eigen::BDCSVD<MatXc> svd(h, Eigen::ComputeFullU);
    u = svd.matrixU();
    const VecXd s = svd.singularValues();
    sv.head(s.size()) = s;
  }
  SingularDirections out;
  out.u = u.rightCols(r);
  out.sigma = sv.tail(r);
  for (Eigen::Index c = 0; c < r; ++c) {
    VecXc col = out.u.col(c);
    fix_phase(col);
    out.u.col(c) = col;
  }
  return out;
}

/// u_{u,2}: the left singular vector of the smallest singular value.
inline VecXc smallest_left_singular_direction(const MatXc& h) {
  return smallest_left_singular_directions(h, 1).u.col(0);
}

/// Orthogonal projector onto the left null space of h, I - h h^+.
inline MatXc left_null_projector(const MatXc& h) {
  const Eigen::Index m = h.rows();
  if (h.cols() == 0) return MatXc::Identity(m, m);
  Eigen::BDCSVD<MatXc> svd(h, Eigen::ComputeFullU);
  const VecXd s = svd.singularValues();
  const double tol = static_cast<double>(std::max(h.rows(), h.cols())) * std::numeric_limits<double>::epsilon() *
                     (s.size() > 0 ? s(0) : 0.0);
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;
  const MatXc ur = svd.matrixU().leftCols(rank);
  return MatXc::Identity(m, m) - ur * ur.adjoint();
}

/// Least-squares estimate of the unmeasured entries, -H_u^+ H_a d_a.
inline VecXc estimate_unmeasured(const SystemMatrices& s, const VecXc& d_a) {
  const VecXc rhs = -(s.h_a * d_a);
  return s.h_u.completeOrthogonalDecomposition().solve(rhs);
}

// ---------------------------------------------------------------------------------------------------
// JSON topology files

inline cplx complex_from_json(const nlohmann::json& j) {
  if (j.is_number()) return {j.get<double>(), 0.0};
  if (!j.is_array() || j.size() != 2) throw InputError("complex value must be [re, im]");
  return {j[0].get<double>(), j[1].get<double>()};
}

namespace detail {

inline MatXc complex_matrix(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw InputError("matrix must be a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  MatXc m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) throw InputError("matrix must be square");
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = complex_from_json(row[static_cast<std::size_t>(c)]);
  }
  return m;
}

inline MatXd real_matrix(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw InputError("matrix must be a non-empty array of rows");
  const auto n = static_cast<Eigen::Index>(j.size());
  MatXd m(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) throw InputError("matrix must be square");
    for (Eigen::Index c = 0; c < n; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

/// Compact matrices list only the present phases; spread them into the 3 x 3 frame.
template <typename M>
M expand_compact(const M& m, PhaseSet phasing) {
  if (m.rows() >= 3 || m.rows() != phasing.count()) return m;
  std::vector<int> idx;
  for (int p = 0; p < 3; ++p)
    if (phasing.has(p)) idx.push_back(p);
  M out = M::Zero(3, 3);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(idx[static_cast<std::size_t>(r)], idx[static_cast<std::size_t>(c)]) = m(r, c);
  return out;
}

}  // namespace detail

/// Ohmic impedance spec for a line entry, resolving a shared configuration when referenced.
inline PhaseImpedanceSpec impedance_spec_from_json(const nlohmann::json& line, const nlohmann::json& configs) {
  const nlohmann::json* src = &line;
  if (line.contains("config")) {
    const std::string key = line["config"].is_string() ? line["config"].get<std::string>()
                                                       : std::to_string(line["config"].get<int>());
    if (!configs.contains(key)) throw InputError("unknown line configuration " + key);
    src = &configs[key];
  }
  PhaseImpedanceSpec spec;
  spec.line_id = line.at("id").get<std::string>();
  spec.phasing = PhaseSet::parse(line.value("phasing", src->value("phasing", std::string("abc"))));
  if (!src->contains("z")) throw InputError("line " + spec.line_id + ": missing impedance matrix");
  spec.z_per_length = detail::expand_compact(detail::complex_matrix((*src)["z"]), spec.phasing);
  if (src->contains("b")) {
    spec.b_per_length = detail::expand_compact(detail::real_matrix((*src)["b"]), spec.phasing);
  } else if (src->contains("b_us")) {
    spec.b_per_length = detail::expand_compact(detail::real_matrix((*src)["b_us"]), spec.phasing) * 1e-6;
  }
  spec.length = line.at("length").get<double>();
  return spec;
}

/**
 * Parse a topology document:
 *   { "s_base_mva": 1, "buses": [{"id", "kv", "name"?}], "configurations": {...},
 *     "lines": [{"id", "from", "to", "length", "config" | "z" [, "b" | "b_us"], "phasing"?, "z_base_kv"?}],
 *     "metered": [ids] }
 * Complex matrix entries are [re, im] pairs, rows in order.
 */
inline GridTopology topology_from_json(const nlohmann::json& j) {
  GridTopology t;
  t.s_base_mva = j.value("s_base_mva", 1.0);
  if (!(t.s_base_mva > 0.0)) throw InputError("s_base_mva must be positive");
  if (!j.contains("buses")) throw InputError("topology has no buses");
  for (const auto& b : j["buses"]) {
    Bus bus;
    bus.id = b.at("id").get<int>();
    bus.kv_ll = b.at("kv").get<double>();
    bus.name = b.value("name", std::to_string(bus.id));
    if (!(bus.kv_ll > 0.0)) throw InputError("bus " + std::to_string(bus.id) + ": kv must be positive");
    t.buses.push_back(bus);
  }
  std::sort(t.buses.begin(), t.buses.end(), [](const Bus& a, const Bus& b) { return a.id < b.id; });
  const nlohmann::json configs = j.value("configurations", nlohmann::json::object());
  for (const auto& l : j.value("lines", nlohmann::json::array())) {
    const PhaseImpedanceSpec spec = impedance_spec_from_json(l, configs);
    const int from = l.at("from").get<int>(), to = l.at("to").get<int>();
    if (!t.has_bus(from) || !t.has_bus(to)) throw InputError("line " + spec.line_id + " references an unknown bus");
    Bases bases{l.value("z_base_kv", t.buses[static_cast<std::size_t>(t.index_of(from))].kv_ll), t.s_base_mva};
    t.lines.push_back(build_line_model(spec, from, to, bases));
  }
  for (const auto& m : j.value("metered", nlohmann::json::array())) t.metered_buses.push_back(m.get<int>());
  std::sort(t.metered_buses.begin(), t.metered_buses.end());
  t.validate();
  return t;
}

}  // namespace upmu::grid
