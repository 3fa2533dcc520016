#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "upmu/grid_model.hpp"
#include "upmu/phasor_dsp.hpp"
#include "upmu/types.hpp"

namespace upmu::sim {

enum class LoadModel { impedance, current };

/// Per-phase load, complex power drawn at 1 pu voltage, in per unit of S_base / 3.
struct Load {
  int bus = 0;
  LoadModel model = LoadModel::impedance;
  std::array<cplx, 3> s_pu{};
};

struct LoadProfile {
  std::vector<Load> loads;
  double walk_std = 0.0;  // relative std of the multiplicative random walk, per tick

  void validate() const {
    for (const auto& l : loads)
      for (const auto& s : l.s_pu)
        if (l.model == LoadModel::impedance && s.real() < 0.0)
          throw InputError("load at bus " + std::to_string(l.bus) + " is not passive");
    if (walk_std < 0.0) throw InputError("load walk std must be non-negative");
  }
};

struct Feeder {
  grid::GridTopology topology;
  LoadProfile loads;
  int slack_bus = 0;
  Vec3c slack_v = Vec3c::Zero();
};

inline Vec3c balanced_phasors(double mag, double angle_rad = 0.0) {
  const double s = 2.0 * kPi / 3.0;
  return Vec3c(std::polar(mag, angle_rad), std::polar(mag, angle_rad - s), std::polar(mag, angle_rad + s));
}

/// Slow common frequency drift, beta(t) = offset + amplitude sin(2 pi freq t), radians per tick.
struct DriftProfile {
  double offset = 0.0;
  double amplitude = 0.02;
  double freq_hz = 0.1;

  double beta(double t) const { return offset + amplitude * std::sin(kTwoPi * freq_hz * t); }

  /// Accumulated phase, integral of beta over [0, t] at kReportingHz ticks per second.
  double theta(double t) const {
    double th = offset * t;
    if (freq_hz > 0.0) th += amplitude * (1.0 - std::cos(kTwoPi * freq_hz * t)) / (kTwoPi * freq_hz);
    else th += amplitude * 0.0;
    return kReportingHz * th;
  }

  double max_abs_beta() const { return std::abs(offset) + std::abs(amplitude); }
};

enum class EventKind { slg_fault, three_phase_fault, line_outage, freeze_sensor, topology_lie };

inline EventKind event_kind_from_string(const std::string& s) {
  if (s == "slg_fault") return EventKind::slg_fault;
  if (s == "three_phase_fault") return EventKind::three_phase_fault;
  if (s == "line_outage") return EventKind::line_outage;
  if (s == "freeze_sensor") return EventKind::freeze_sensor;
  if (s == "topology_lie") return EventKind::topology_lie;
  throw InputError("unknown event kind '" + s + "'");
}

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::slg_fault: return "slg_fault";
    case EventKind::three_phase_fault: return "three_phase_fault";
    case EventKind::line_outage: return "line_outage";
    case EventKind::freeze_sensor: return "freeze_sensor";
    case EventKind::topology_lie: return "topology_lie";
  }
  return "?";
}

/// One scripted event. Times are in reporting ticks and may be fractional.
struct ScriptEvent {
  EventKind kind = EventKind::slg_fault;
  double at_tick = 0.0;
  std::optional<double> clear_tick;
  std::string line;
  double position = 0.5;
  PhaseSet phases = PhaseSet::parse("a");
  cplx fault_admittance{100.0, 0.0};
  int bus = 0;
  Tick from_tick = 0;
  Tick to_tick = 0;
  bool declare_in_service = false;

  bool is_physical() const {
    return kind == EventKind::slg_fault || kind == EventKind::three_phase_fault || kind == EventKind::line_outage;
  }
};

struct EventScript {
  std::vector<ScriptEvent> events;

  void validate() const {
    for (std::size_t i = 1; i < events.size(); ++i)
      if (events[i].at_tick < events[i - 1].at_tick) throw InputError("script events must be ordered by tick");
    for (const auto& e : events) {
      if (e.position < 0.0 || e.position > 1.0) throw InputError("fault position must lie in [0, 1]");
      if (e.clear_tick && *e.clear_tick < e.at_tick) throw InputError("fault clears before it starts");
      if (e.kind == EventKind::freeze_sensor && e.to_tick < e.from_tick) throw InputError("empty freeze window");
    }
  }
};

struct SimulationConfig {
  Tick duration_ticks = 180;
  DriftProfile drift;
  bool waveforms = true;       // phasors go through waveform synthesis and the P-class estimator
  double fs = 7680.0;
  double f0 = kNominalHz;
  double noise_std = 1e-4;     // complex phasor noise, E|n|^2 = noise_std^2
  std::uint64_t seed = 1;

  void validate() const {
    if (duration_ticks < 1) throw InputError("duration must be at least one tick");
    if (drift.max_abs_beta() > 0.05) throw InputError("drift exceeds the quasi-steady bound of 0.05 rad/tick");
    if (noise_std < 0.0) throw InputError("noise std must be non-negative");
    dsp::samples_per_cycle(f0, fs);
  }
};

// ---------------------------------------------------------------------------------------------------
// Network conditions and the quasi-steady solve

struct FaultSpec {
  std::string line;
  double position = 0.5;
  Mat3c y_fault = Mat3c::Zero();  // shunt to ground at the fault point, per unit
};

/// Physical modifications in force at some instant.
struct NetworkCondition {
  std::set<std::string> outaged;
  std::vector<FaultSpec> faults;

  bool operator==(const NetworkCondition& o) const {
    if (outaged != o.outaged || faults.size() != o.faults.size()) return false;
    for (std::size_t i = 0; i < faults.size(); ++i)
      if (faults[i].line != o.faults[i].line || faults[i].position != o.faults[i].position ||
          faults[i].y_fault != o.faults[i].y_fault)
        return false;
    return true;
  }
};

/// Apply one physical event to a condition. Non-physical events leave the network alone.
inline NetworkCondition apply_event(const grid::GridTopology& topo, NetworkCondition cond, const ScriptEvent& ev) {
  switch (ev.kind) {
    case EventKind::slg_fault:
    case EventKind::three_phase_fault: {
      const auto& line = topo.line(ev.line);
      if (ev.fault_admittance == cplx{}) return cond;
      const PhaseSet ph = ev.kind == EventKind::slg_fault ? ev.phases : PhaseSet::all();
      FaultSpec f;
      f.line = ev.line;
      f.position = ev.position;
      for (int p = 0; p < 3; ++p) {
        if (!ph.has(p)) continue;
        if (!line.phasing.has(p))
          throw InputError("fault on phase " + std::string(1, kPhaseNames[p]) + " absent from line " + ev.line);
        f.y_fault(p, p) = ev.fault_admittance;
      }
      for (const auto& g : cond.faults)
        if (g.line == ev.line) throw InputError("line " + ev.line + " already carries a fault");
      cond.faults.push_back(f);
      return cond;
    }
    case EventKind::line_outage:
      topo.line(ev.line);
      cond.outaged.insert(ev.line);
      std::erase_if(cond.faults, [&](const FaultSpec& f) { return f.line == ev.line; });
      return cond;
    case EventKind::freeze_sensor:
      if (!topo.has_bus(ev.bus)) throw InputError("unknown bus " + std::to_string(ev.bus));
      return cond;
    case EventKind::topology_lie:
      topo.line(ev.line);
      return cond;
  }
  return cond;
}

struct Snapshot {
  std::vector<Vec3c> v;          // per bus position
  std::vector<Vec3c> injection;  // per bus: sum of currents leaving into in-service lines
  std::vector<Vec3c> i_from;     // per topology line, at from_bus
  std::vector<Vec3c> i_to;       // per topology line, at to_bus
  std::vector<bool> in_service;  // per topology line
  std::vector<int> deenergized;  // bus ids without any energized phase
  std::vector<Vec3c> fault_v;    // voltage at each fault point
  cplx slack_power{};            // sum over phases of v conj(i) at the slack
  cplx load_power{};             // loads and fault shunts
  cplx loss_power{};             // series and shunt line elements
  double residual = 0.0;         // max |Y v - j| over free rows

  Snapshot rotated(cplx r) const {
    Snapshot s = *this;
    for (auto& x : s.v) x *= r;
    for (auto& x : s.injection) x *= r;
    for (auto& x : s.i_from) x *= r;
    for (auto& x : s.i_to) x *= r;
    for (auto& x : s.fault_v) x *= r;
    return s;
  }

  /// d = [I; V] over all buses.
  VecXc stacked() const {
    const auto b = static_cast<Eigen::Index>(v.size());
    VecXc d(6 * b);
    for (Eigen::Index i = 0; i < b; ++i) {
      d.segment<3>(3 * i) = injection[static_cast<std::size_t>(i)];
      d.segment<3>(3 * b + 3 * i) = v[static_cast<std::size_t>(i)];
    }
    return d;
  }
};

namespace detail {

struct Branch {
  int from = 0, to = 0;  // node indices
  Mat3c y_series = Mat3c::Zero();
  Mat3c y_shunt = Mat3c::Zero();
  PhaseSet phasing;
  std::size_t line = 0;  // topology line index
  bool first_segment = true;
  bool last_segment = true;
};

/// Split a pi section at `pos` into two pi sections: series impedance and shunt scale with length.
inline std::pair<grid::LineModel, grid::LineModel> split_line(const grid::LineModel& l, double pos) {
  const Mat3c z = grid::invert_present(l.y_series, l.phasing, "line " + l.line_id);
  grid::LineModel a = l, b = l;
  a.y_series = grid::invert_present(z * pos, l.phasing, "line " + l.line_id);
  b.y_series = grid::invert_present(z * (1.0 - pos), l.phasing, "line " + l.line_id);
  a.y_shunt = l.y_shunt * pos;
  b.y_shunt = l.y_shunt * (1.0 - pos);
  return {a, b};
}

}  // namespace detail

/**
 * Quasi-steady phasor solve of the feeder under a condition, at zero common phase.
 *
 * Loads scale by `load_scale` (one factor per load, empty means 1). Phases with no conducting path to the
 * slack are de-energized when `deenergize_islands` is set; otherwise an island is an error naming its buses.
 */
inline Snapshot solve_quasi_steady(const Feeder& feeder, const NetworkCondition& cond,
                                   const std::vector<double>& load_scale = {}, bool deenergize_islands = true) {
  const auto& topo = feeder.topology;
  const int nb = topo.bus_count();
  std::map<std::string, const FaultSpec*> fault_on;
  for (const auto& f : cond.faults) fault_on[f.line] = &f;

  // Nodes: buses then fault points.
  std::vector<detail::Branch> branches;
  std::vector<Mat3c> shunt(static_cast<std::size_t>(nb), Mat3c::Zero());
  std::vector<Vec3c> source(static_cast<std::size_t>(nb), Vec3c::Zero());
  std::vector<std::size_t> fault_line;
  int nodes = nb;
  for (std::size_t li = 0; li < topo.lines.size(); ++li) {
    const auto& l = topo.lines[li];
    if (cond.outaged.count(l.line_id)) continue;
    const int a = topo.index_of(l.from_bus), b = topo.index_of(l.to_bus);
    auto it = fault_on.find(l.line_id);
    if (it == fault_on.end()) {
      branches.push_back({a, b, l.y_series, l.y_shunt, l.phasing, li, true, true});
      continue;
    }
    const FaultSpec& f = *it->second;
    if (f.position <= 0.0) {
      shunt[static_cast<std::size_t>(a)] += f.y_fault;
      branches.push_back({a, b, l.y_series, l.y_shunt, l.phasing, li, true, true});
    } else if (f.position >= 1.0) {
      shunt[static_cast<std::size_t>(b)] += f.y_fault;
      branches.push_back({a, b, l.y_series, l.y_shunt, l.phasing, li, true, true});
    } else {
      const auto [s1, s2] = detail::split_line(l, f.position);
      const int fn = nodes++;
      shunt.push_back(f.y_fault);
      source.push_back(Vec3c::Zero());
      fault_line.push_back(li);
      branches.push_back({a, fn, s1.y_series, s1.y_shunt, l.phasing, li, true, false});
      branches.push_back({fn, b, s2.y_series, s2.y_shunt, l.phasing, li, false, true});
    }
  }

  const int slack = topo.index_of(feeder.slack_bus);
  std::vector<cplx> load_y_total(static_cast<std::size_t>(nb) * 3, cplx{});
  for (std::size_t i = 0; i < feeder.loads.loads.size(); ++i) {
    const auto& ld = feeder.loads.loads[i];
    const double sc = load_scale.empty() ? 1.0 : load_scale[i];
    const int bi = topo.index_of(ld.bus);
    for (int p = 0; p < 3; ++p) {
      const cplx s = ld.s_pu[static_cast<std::size_t>(p)] * sc;
      if (ld.model == LoadModel::impedance) {
        shunt[static_cast<std::size_t>(bi)](p, p) += std::conj(s);
      } else {
        // Constant current drawn in phase with the nominal voltage of that phase.
        const cplx vn = balanced_phasors(1.0)(p);
        source[static_cast<std::size_t>(bi)](p) -= std::conj(s / vn);
      }
    }
  }

  // Per-phase energization: BFS from the slack over conductors carrying that phase.
  const auto n3 = static_cast<Eigen::Index>(3 * nodes);
  std::vector<char> energized(static_cast<std::size_t>(n3), 0);
  std::vector<char> present(static_cast<std::size_t>(n3), 0);
  for (const auto& br : branches)
    for (int p = 0; p < 3; ++p)
      if (br.phasing.has(p)) present[static_cast<std::size_t>(3 * br.from + p)] = present[static_cast<std::size_t>(3 * br.to + p)] = 1;
  for (int p = 0; p < 3; ++p) {
    present[static_cast<std::size_t>(3 * slack + p)] = 1;
    std::vector<int> stack{slack};
    energized[static_cast<std::size_t>(3 * slack + p)] = 1;
    while (!stack.empty()) {
      const int u = stack.back();
      stack.pop_back();
      for (const auto& br : branches) {
        if (!br.phasing.has(p)) continue;
        int w = -1;
        if (br.from == u) w = br.to;
        else if (br.to == u) w = br.from;
        if (w < 0 || energized[static_cast<std::size_t>(3 * w + p)]) continue;
        energized[static_cast<std::size_t>(3 * w + p)] = 1;
        stack.push_back(w);
      }
    }
  }
  std::set<int> island_buses;
  for (int n = 0; n < nb; ++n)
    for (int p = 0; p < 3; ++p)
      if (present[static_cast<std::size_t>(3 * n + p)] && !energized[static_cast<std::size_t>(3 * n + p)])
        island_buses.insert(topo.buses[static_cast<std::size_t>(n)].id);
  if (!island_buses.empty() && !deenergize_islands) {
    std::string names;
    for (int b : island_buses) names += (names.empty() ? "" : ", ") + std::to_string(b);
    throw NumericError("singular network: buses {" + names + "} are islanded from the slack");
  }

  MatXc y = MatXc::Zero(n3, n3);
  VecXc j = VecXc::Zero(n3);
  for (const auto& br : branches) {
    const Mat3c yb = br.y_series + br.y_shunt;
    y.block<3, 3>(3 * br.from, 3 * br.from) += yb;
    y.block<3, 3>(3 * br.to, 3 * br.to) += yb;
    y.block<3, 3>(3 * br.from, 3 * br.to) -= br.y_series;
    y.block<3, 3>(3 * br.to, 3 * br.from) -= br.y_series;
  }
  for (int n = 0; n < nodes; ++n) {
    y.block<3, 3>(3 * n, 3 * n) += shunt[static_cast<std::size_t>(n)];
    j.segment<3>(3 * n) = source[static_cast<std::size_t>(n)];
  }

  // Unknowns: energized entries other than the slack.
  std::vector<Eigen::Index> free_idx;
  for (Eigen::Index r = 0; r < n3; ++r)
    if (energized[static_cast<std::size_t>(r)] && r / 3 != slack) free_idx.push_back(r);
  VecXc v = VecXc::Zero(n3);
  v.segment<3>(3 * slack) = feeder.slack_v;
  const auto nf = static_cast<Eigen::Index>(free_idx.size());
  if (nf > 0) {
    MatXc a(nf, nf);
    VecXc rhs(nf);
    for (Eigen::Index r = 0; r < nf; ++r) {
      rhs(r) = j(free_idx[static_cast<std::size_t>(r)]);
      for (int p = 0; p < 3; ++p)
        rhs(r) -= y(free_idx[static_cast<std::size_t>(r)], 3 * slack + p) * feeder.slack_v(p);
      for (Eigen::Index c = 0; c < nf; ++c) a(r, c) = y(free_idx[static_cast<std::size_t>(r)], free_idx[static_cast<std::size_t>(c)]);
    }
    Eigen::PartialPivLU<MatXc> lu(a);
    VecXc x = lu.solve(rhs);
    x += lu.solve(rhs - a * x);  // one step of iterative refinement
    if (!x.allFinite()) throw NumericError("singular network matrix");
    for (Eigen::Index r = 0; r < nf; ++r) v(free_idx[static_cast<std::size_t>(r)]) = x(r);
  }

  Snapshot s;
  const VecXc resid = y * v - j;
  for (Eigen::Index r : free_idx) s.residual = std::max(s.residual, std::abs(resid(r)));

  s.v.resize(static_cast<std::size_t>(nb));
  for (int n = 0; n < nb; ++n) s.v[static_cast<std::size_t>(n)] = v.segment<3>(3 * n);
  for (int f = nb; f < nodes; ++f) s.fault_v.push_back(v.segment<3>(3 * f));
  s.i_from.assign(topo.lines.size(), Vec3c::Zero());
  s.i_to.assign(topo.lines.size(), Vec3c::Zero());
  s.in_service.assign(topo.lines.size(), false);
  s.injection.assign(static_cast<std::size_t>(nb), Vec3c::Zero());
  for (const auto& br : branches) {
    const Vec3c va = v.segment<3>(3 * br.from), vb = v.segment<3>(3 * br.to);
    const Mat3c yb = br.y_series + br.y_shunt;
    const Vec3c ia = yb * va - br.y_series * vb;
    const Vec3c ib = yb * vb - br.y_series * va;
    if (br.first_segment) s.i_from[br.line] = ia;
    if (br.last_segment) s.i_to[br.line] = ib;
    s.in_service[br.line] = true;
    s.loss_power += (va.array() * ia.array().conjugate()).sum() + (vb.array() * ib.array().conjugate()).sum();
  }
  for (std::size_t li = 0; li < topo.lines.size(); ++li) {
    if (!s.in_service[li]) continue;
    const auto& l = topo.lines[li];
    s.injection[static_cast<std::size_t>(topo.index_of(l.from_bus))] += s.i_from[li];
    s.injection[static_cast<std::size_t>(topo.index_of(l.to_bus))] += s.i_to[li];
  }
  const Vec3c is = s.injection[static_cast<std::size_t>(slack)];
  s.slack_power = (feeder.slack_v.array() * is.array().conjugate()).sum();
  for (int n = 0; n < nodes; ++n) {
    const Vec3c vn = v.segment<3>(3 * n);
    const Vec3c in = shunt[static_cast<std::size_t>(n)] * vn - source[static_cast<std::size_t>(n)];
    s.load_power += (vn.array() * in.array().conjugate()).sum();
  }
  for (int n = 0; n < nb; ++n)
    if (s.v[static_cast<std::size_t>(n)].norm() == 0.0) s.deenergized.push_back(topo.buses[static_cast<std::size_t>(n)].id);
  return s;
}

// ---------------------------------------------------------------------------------------------------
// Waveform synthesis

/**
 * Piecewise-linear complex envelopes for a set of channels. Rows of `values` follow `t` (seconds,
 * non-decreasing); two rows at the same instant describe a jump, the later row holding from then on.
 */
struct EnvelopeTrack {
  std::vector<double> t;
  std::vector<std::string> channels;
  MatXc values;  // t.size() x channels.size()
};

/**
 * Sampled waveforms s(t) = sqrt(2) Re[p(t) exp(j (2 pi f0 t + theta(t)))] for global sample indices
 * [first, last] at rate fs, p(t) interpolated linearly in `track`.
 */
inline std::vector<dsp::WaveformSegment> synthesize_waveforms(const EnvelopeTrack& track, const DriftProfile& drift,
                                                              double fs, long long first, long long last,
                                                              double f0 = kNominalHz) {
  if (track.t.empty()) throw InputError("empty envelope track");
  const int spc = dsp::samples_per_cycle(f0, fs);
  const auto nch = track.channels.size();
  std::vector<dsp::WaveformSegment> out(nch);
  for (std::size_t c = 0; c < nch; ++c) {
    out[c].channel_id = track.channels[c];
    out[c].fs = fs;
    out[c].t0 = static_cast<double>(first) / fs;
    out[c].samples.reserve(static_cast<std::size_t>(last - first + 1));
  }
  std::size_t seg = 0;
  const std::size_t nt = track.t.size();
  for (long long m = first; m <= last; ++m) {
    const double t = static_cast<double>(m) / fs;
    while (seg + 1 < nt && track.t[seg + 1] <= t) ++seg;
    const long long ph = ((m % spc) + spc) % spc;
    const double arg = kTwoPi * static_cast<double>(ph) / spc + drift.theta(t);
    const cplx rot(std::cos(arg), std::sin(arg));
    double w = 0.0;
    std::size_t lo = seg, hi = seg;
    if (t <= track.t.front()) {
      lo = hi = 0;
    } else if (seg + 1 < nt) {
      hi = seg + 1;
      const double span = track.t[hi] - track.t[lo];
      w = span > 0.0 ? (t - track.t[lo]) / span : 0.0;
    }
    for (std::size_t c = 0; c < nch; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      const cplx p = (1.0 - w) * track.values(static_cast<Eigen::Index>(lo), ci) + w * track.values(static_cast<Eigen::Index>(hi), ci);
      out[c].samples.push_back(std::sqrt(2.0) * (p * rot).real());
    }
  }
  return out;
}

/// Single-channel convenience: one phasor per tick starting at `first_tick`, sampled over the same span.
inline dsp::WaveformSegment synthesize_waveform(std::span<const cplx> tick_phasors, Tick first_tick,
                                                const DriftProfile& drift, double fs, double f0 = kNominalHz) {
  if (tick_phasors.empty()) throw InputError("empty phasor series");
  EnvelopeTrack tr;
  tr.channels = {"x"};
  tr.values.resize(static_cast<Eigen::Index>(tick_phasors.size()), 1);
  for (std::size_t i = 0; i < tick_phasors.size(); ++i) {
    tr.t.push_back(static_cast<double>(first_tick + static_cast<Tick>(i)) / kReportingHz);
    tr.values(static_cast<Eigen::Index>(i), 0) = tick_phasors[i];
  }
  const auto per_tick = static_cast<long long>(std::llround(fs / kReportingHz));
  const long long first = first_tick * per_tick;
  const long long last = (first_tick + static_cast<Tick>(tick_phasors.size()) - 1) * per_tick;
  return synthesize_waveforms(tr, drift, fs, first, last, f0).front();
}

// ---------------------------------------------------------------------------------------------------
// Scenario runs

/// Ground-truth label for scoring.
struct TruthLabel {
  std::string kind;
  std::string target;
  Tick first = 0;
  Tick last = 0;
};

struct Dataset {
  std::vector<int> metered;
  std::vector<Tick> ticks;
  std::map<int, std::vector<PhasorSample>> streams;  // per metered bus, aligned with ticks
  std::vector<TruthLabel> physical;
  std::vector<TruthLabel> tampering;
  std::vector<grid::DeclaredChange> declared;
  std::vector<dsp::WaveformSegment> waveforms;
  std::vector<Snapshot> states;  // noiseless physics at each tick, drift applied
  std::vector<NetworkCondition> conditions;
};

/// Channel naming: "<bus>.V.<phase>" and "<bus>.I.<line>.<phase>".
inline std::string voltage_channel(int bus, int phase) {
  return std::to_string(bus) + ".V." + kPhaseNames[static_cast<std::size_t>(phase)];
}
inline std::string current_channel(int bus, const std::string& line, int phase) {
  return std::to_string(bus) + ".I." + line + "." + kPhaseNames[static_cast<std::size_t>(phase)];
}

namespace detail {

struct ChannelRef {
  std::string name;
  int bus;
  int bus_pos;
  std::optional<std::size_t> line;  // none for voltage
  bool at_from = true;
  int phase;
};

inline std::vector<ChannelRef> metered_channels(const grid::GridTopology& topo) {
  std::vector<ChannelRef> out;
  for (int b : topo.metered_buses) {
    const int pos = topo.index_of(b);
    const PhaseSet bp = topo.bus_phases(b);
    for (int p = 0; p < 3; ++p)
      if (bp.has(p) || topo.lines.empty()) out.push_back({voltage_channel(b, p), b, pos, std::nullopt, true, p});
    for (std::size_t li = 0; li < topo.lines.size(); ++li) {
      const auto& l = topo.lines[li];
      if (l.from_bus != b && l.to_bus != b) continue;
      for (int p = 0; p < 3; ++p)
        if (l.phasing.has(p)) out.push_back({current_channel(b, l.line_id, p), b, pos, li, l.from_bus == b, p});
    }
  }
  return out;
}

inline cplx channel_value(const ChannelRef& c, const Snapshot& s) {
  if (!c.line) return s.v[static_cast<std::size_t>(c.bus_pos)](c.phase);
  return (c.at_from ? s.i_from[*c.line] : s.i_to[*c.line])(c.phase);
}

}  // namespace detail

/// Physical condition in force at time t (ticks); a fault is active on [at, clear).
inline NetworkCondition condition_at(const Feeder& feeder, const EventScript& script, double t) {
  NetworkCondition cond;
  for (const auto& e : script.events) {
    if (!e.is_physical() || e.at_tick > t) continue;
    if (e.clear_tick && *e.clear_tick <= t) continue;
    cond = apply_event(feeder.topology, cond, e);
  }
  return cond;
}

/**
 * Simulate a scripted scenario and emit what the metered buses would report.
 *
 * Physics first (quasi-steady solves, common drift rotation), then either waveform synthesis followed by
 * phasor estimation or direct sampling of the envelopes, then additive noise, then tampering.
 */
inline Dataset run_scenario(const Feeder& feeder, const SimulationConfig& cfg, const EventScript& script) {
  cfg.validate();
  script.validate();
  feeder.loads.validate();
  const auto& topo = feeder.topology;
  for (const auto& e : script.events) apply_event(topo, {}, e);  // reject unknown lines / buses up front

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  const Tick n = cfg.duration_ticks;
  const Tick pad = cfg.waveforms ? 3 : 0;
  // Multiplicative load walk, one factor per load per tick (index shifted by pad).
  std::vector<std::vector<double>> scale(static_cast<std::size_t>(n + 2 * pad));
  {
    std::vector<double> cur(feeder.loads.loads.size(), 1.0);
    for (auto& row : scale) {
      if (feeder.loads.walk_std > 0.0)
        for (double& c : cur) c *= 1.0 + feeder.loads.walk_std * normal(rng);
      row = cur;
    }
  }
  auto scale_at = [&](double t) -> const std::vector<double>& {
    const auto idx = std::clamp<long long>(static_cast<long long>(std::floor(t)) + pad, 0, static_cast<long long>(scale.size()) - 1);
    return scale[static_cast<std::size_t>(idx)];
  };

  struct CacheEntry {
    NetworkCondition cond;
    std::vector<double> scale;
    Snapshot snap;
  };
  std::vector<CacheEntry> cache;
  auto solve_at = [&](double t) -> const Snapshot& {
    NetworkCondition c = condition_at(feeder, script, t);
    const auto& sc = scale_at(t);
    for (const auto& e : cache)
      if (e.cond == c && e.scale == sc) return e.snap;
    cache.push_back({c, sc, solve_quasi_steady(feeder, c, sc, true)});
    if (cache.size() > 64) cache.erase(cache.begin());
    return cache.back().snap;
  };

  Dataset ds;
  ds.metered = topo.metered_buses;
  for (Tick k = 0; k < n; ++k) {
    ds.ticks.push_back(k);
    const double t = static_cast<double>(k) / kReportingHz;
    ds.states.push_back(solve_at(static_cast<double>(k)).rotated(std::polar(1.0, cfg.drift.theta(t))));
    ds.conditions.push_back(condition_at(feeder, script, static_cast<double>(k)));
  }

  const auto channels = detail::metered_channels(topo);
  // emitted[ch][k]
  std::vector<std::vector<cplx>> emitted(channels.size(), std::vector<cplx>(static_cast<std::size_t>(n)));
  if (cfg.waveforms) {
    EnvelopeTrack tr;
    for (const auto& c : channels) tr.channels.push_back(c.name);
    std::vector<double> times;
    for (Tick k = -pad; k < n + pad; ++k) times.push_back(static_cast<double>(k));
    std::vector<double> switches;
    for (const auto& e : script.events) {
      if (!e.is_physical()) continue;
      switches.push_back(e.at_tick);
      if (e.clear_tick) switches.push_back(*e.clear_tick);
    }
    std::vector<std::pair<double, const Snapshot*>> rows;
    for (double tk : times) {
      for (double sw : switches) {
        if (sw > tk - 1.0 && sw < tk && (rows.empty() || rows.back().first < sw)) {
          // Left and right limits at a switching instant between ticks.
          rows.emplace_back(sw, nullptr);
          rows.emplace_back(sw, nullptr);
        }
      }
      rows.emplace_back(tk, nullptr);
    }
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    tr.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(channels.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double tq = rows[r].first;
      // First of a duplicated pair takes the left limit.
      if (r + 1 < rows.size() && rows[r + 1].first == tq) tq = std::nextafter(tq, -1e300);
      const Snapshot& s = solve_at(tq);
      tr.t.push_back(rows[r].first / kReportingHz);
      for (std::size_t c = 0; c < channels.size(); ++c)
        tr.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = detail::channel_value(channels[c], s);
    }
    const auto per_tick = static_cast<long long>(std::llround(cfg.fs / kReportingHz));
    const long long first = -pad * per_tick;
    const long long last = (n - 1 + pad) * per_tick;
    ds.waveforms = synthesize_waveforms(tr, cfg.drift, cfg.fs, first, last, cfg.f0);
    const auto filt = dsp::design_pclass_filter(cfg.f0, cfg.fs);
    for (std::size_t c = 0; c < channels.size(); ++c) {
      for (const auto& p : dsp::extract_phasor_stream(ds.waveforms[c], filt, cfg.f0)) {
        if (p.k >= 0 && p.k < n) emitted[c][static_cast<std::size_t>(p.k)] = p.value;
      }
    }
  } else {
    for (Tick k = 0; k < n; ++k)
      for (std::size_t c = 0; c < channels.size(); ++c)
        emitted[c][static_cast<std::size_t>(k)] = detail::channel_value(channels[c], ds.states[static_cast<std::size_t>(k)]);
  }

  if (cfg.noise_std > 0.0) {
    const double sd = cfg.noise_std / std::sqrt(2.0);
    for (Tick k = 0; k < n; ++k)
      for (auto& ch : emitted) {
        const double re = normal(rng), im = normal(rng);
        ch[static_cast<std::size_t>(k)] += sd * cplx(re, im);
      }
  }

  for (int b : topo.metered_buses) {
    auto& stream = ds.streams[b];
    for (Tick k = 0; k < n; ++k) {
      PhasorSample ps;
      ps.k = k;
      ps.bus = b;
      for (const auto& l : topo.incident_lines(b)) ps.i_lines[l->line_id] = Vec3c::Zero();
      stream.push_back(ps);
    }
  }
  for (std::size_t c = 0; c < channels.size(); ++c) {
    const auto& ch = channels[c];
    auto& stream = ds.streams[ch.bus];
    for (Tick k = 0; k < n; ++k) {
      auto& ps = stream[static_cast<std::size_t>(k)];
      const cplx val = emitted[c][static_cast<std::size_t>(k)];
      if (!ch.line) ps.v(ch.phase) = val;
      else ps.i_lines[topo.lines[*ch.line].line_id](ch.phase) = val;
    }
  }

  // Tampering acts on emitted streams only: replay the last sample before the window.
  for (const auto& e : script.events) {
    if (e.kind == EventKind::freeze_sensor) {
      auto it = ds.streams.find(e.bus);
      if (it == ds.streams.end()) throw InputError("freeze_sensor on unmetered bus " + std::to_string(e.bus));
      auto& stream = it->second;
      const Tick src = std::max<Tick>(e.from_tick - 1, 0);
      if (src < n) {
        const PhasorSample held = stream[static_cast<std::size_t>(src)];
        for (Tick k = std::max<Tick>(e.from_tick, 0); k <= std::min<Tick>(e.to_tick, n - 1); ++k) {
          PhasorSample ps = held;
          ps.k = k;
          stream[static_cast<std::size_t>(k)] = ps;
        }
      }
      ds.tampering.push_back({"freeze_sensor", std::to_string(e.bus), e.from_tick, e.to_tick});
    } else if (e.kind == EventKind::topology_lie) {
      const auto tick = static_cast<Tick>(std::ceil(e.at_tick));
      ds.declared.push_back({tick, e.line, e.declare_in_service});
      ds.tampering.push_back({"topology_lie", e.line, tick, tick});
    } else {
      const auto lo = static_cast<Tick>(std::floor(e.at_tick));
      const auto hi = e.kind == EventKind::line_outage ? lo : static_cast<Tick>(std::ceil(e.clear_tick.value_or(static_cast<double>(n - 1))));
      ds.physical.push_back({to_string(e.kind), e.line, lo, hi});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------------------------------
// JSON

/// Feeder = topology document plus "slack" {"bus", "v_pu", "angle_deg"?} and "loads" entries
/// {"bus", "model": "Z" | "I", "kw": [a, b, c], "kvar": [a, b, c]}; "capacitors" {"bus", "kvar": [..]}.
inline Feeder feeder_from_json(const nlohmann::json& j) {
  Feeder f;
  f.topology = grid::topology_from_json(j);
  const double per_phase_base_kva = 1000.0 * f.topology.s_base_mva / 3.0;
  const auto& sl = j.value("slack", nlohmann::json::object());
  f.slack_bus = sl.value("bus", f.topology.buses.front().id);
  if (!f.topology.has_bus(f.slack_bus)) throw InputError("slack bus is not in the topology");
  f.slack_v = balanced_phasors(sl.value("v_pu", 1.0), sl.value("angle_deg", 0.0) * kPi / 180.0);
  auto triple = [](const nlohmann::json& a) {
    std::array<double, 3> v{};
    if (a.is_number()) v.fill(a.get<double>());
    else if (a.is_array() && a.size() == 3) for (std::size_t i = 0; i < 3; ++i) v[i] = a[i].get<double>();
    else throw InputError("per-phase value must be a number or a 3-array");
    return v;
  };
  for (const auto& l : j.value("loads", nlohmann::json::array())) {
    Load ld;
    ld.bus = l.at("bus").get<int>();
    if (!f.topology.has_bus(ld.bus)) throw InputError("load at unknown bus " + std::to_string(ld.bus));
    const std::string model = l.value("model", std::string("Z"));
    if (model == "Z") ld.model = LoadModel::impedance;
    else if (model == "I") ld.model = LoadModel::current;
    else throw InputError("unknown load model " + model);
    const auto kw = triple(l.value("kw", nlohmann::json(0.0)));
    const auto kvar = triple(l.value("kvar", nlohmann::json(0.0)));
    for (std::size_t p = 0; p < 3; ++p) ld.s_pu[p] = cplx(kw[p], kvar[p]) / per_phase_base_kva;
    f.loads.loads.push_back(ld);
  }
  for (const auto& c : j.value("capacitors", nlohmann::json::array())) {
    Load ld;
    ld.bus = c.at("bus").get<int>();
    if (!f.topology.has_bus(ld.bus)) throw InputError("capacitor at unknown bus " + std::to_string(ld.bus));
    const auto kvar = triple(c.at("kvar"));
    for (std::size_t p = 0; p < 3; ++p) ld.s_pu[p] = cplx(0.0, -kvar[p]) / per_phase_base_kva;
    f.loads.loads.push_back(ld);
  }
  f.loads.walk_std = j.value("load_walk_std", 0.0);
  f.loads.validate();
  return f;
}

/// Script document: {"events": [{"kind", "at_tick", ...}]}.
inline EventScript script_from_json(const nlohmann::json& j) {
  EventScript s;
  for (const auto& e : j.value("events", nlohmann::json::array())) {
    ScriptEvent ev;
    ev.kind = event_kind_from_string(e.at("kind").get<std::string>());
    ev.line = e.value("line", std::string());
    ev.bus = e.value("bus", 0);
    switch (ev.kind) {
      case EventKind::slg_fault:
      case EventKind::three_phase_fault:
        ev.at_tick = e.at("at_tick").get<double>();
        if (e.contains("clear_tick") && !e["clear_tick"].is_null()) ev.clear_tick = e["clear_tick"].get<double>();
        ev.position = e.value("position", 0.5);
        ev.phases = PhaseSet::parse(e.value("phase", std::string("a")));
        if (e.contains("fault_admittance")) ev.fault_admittance = grid::complex_from_json(e["fault_admittance"]);
        break;
      case EventKind::line_outage:
        ev.at_tick = e.at("at_tick").get<double>();
        break;
      case EventKind::freeze_sensor:
        ev.from_tick = e.at("from_tick").get<Tick>();
        ev.to_tick = e.at("to_tick").get<Tick>();
        ev.at_tick = static_cast<double>(ev.from_tick);
        break;
      case EventKind::topology_lie: {
        ev.at_tick = e.at("at_tick").get<double>();
        const std::string claim = e.at("claim").get<std::string>();
        if (claim == "declare_line_out") ev.declare_in_service = false;
        else if (claim == "declare_line_in") ev.declare_in_service = true;
        else throw InputError("unknown topology claim " + claim);
        break;
      }
    }
    if (ev.line.empty() && ev.kind != EventKind::freeze_sensor) throw InputError("event needs a line");
    s.events.push_back(ev);
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const ScriptEvent& a, const ScriptEvent& b) { return a.at_tick < b.at_tick; });
  s.validate();
  return s;
}

}  // namespace upmu::sim
