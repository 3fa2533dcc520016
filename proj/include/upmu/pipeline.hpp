#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "upmu/detector.hpp"
#include "upmu/grid_model.hpp"
#include "upmu/metrics.hpp"
#include "upmu/types.hpp"

namespace upmu::pipeline {

using Streams = std::map<int, std::vector<PhasorSample>>;

struct MetricSelection {
  bool single = true;
  bool dbl = true;
  bool multi = true;
  int m_single = 6;
  int m_double = 32;
  metrics::MultiMode mode = metrics::MultiMode::automatic;

  void validate() const {
    if (m_double < 6) throw InputError("double-meter window must satisfy M >= 6");
    if (m_single < 2) throw InputError("single-meter window must satisfy M >= 2");
  }

  /// Longest window among the selected metrics; the multi metric has no window.
  int max_window() const {
    int m = 0;
    if (single) m = std::max(m, m_single);
    if (dbl) m = std::max(m, m_double);
    return m;
  }

  static MetricSelection parse(const std::string& csv) {
    MetricSelection s;
    s.single = s.dbl = s.multi = false;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
      const auto next = std::min(csv.find(',', pos), csv.size());
      const std::string tok = csv.substr(pos, next - pos);
      if (tok == "single") s.single = true;
      else if (tok == "double") s.dbl = true;
      else if (tok == "multi") s.multi = true;
      else if (!tok.empty()) throw InputError("unknown metric '" + tok + "'");
      pos = next + 1;
    }
    return s;
  }
};

struct MetricRecord {
  Tick k = 0;
  std::string metric_id;
  double x = 0.0;
};

struct MetricRun {
  std::vector<MetricRecord> records;  // tick order, then metric id order within a tick
  std::vector<std::string> warnings;
  std::vector<grid::DeclaredChange> declared;  // the schedule the multi metric followed
};

inline std::string single_id(int bus, const std::string& line) { return "single:" + std::to_string(bus) + ":" + line; }
inline std::string double_id(const std::string& line) { return "double:" + line; }
inline const std::string kMultiId = "multi";

namespace detail {

inline const Vec3c* line_current(const PhasorSample& s, const std::string& line) {
  auto it = s.i_lines.find(line);
  return it == s.i_lines.end() ? nullptr : &it->second;
}

inline std::string schedule_key(const grid::GridTopology& t) {
  std::string key;
  for (const auto& l : t.lines) key += l.line_id + ";";
  return key;
}

}  // namespace detail

/**
 * Evaluate the selected metrics over aligned per-bus streams.
 *
 * A tick is used only when every metered bus reports it; other ticks produce a skip warning. The multi
 * metric follows the declared topology schedule, rebuilding its operator whenever the declared line set
 * changes.
 */
inline MetricRun compute_metrics(const grid::GridTopology& topo, const Streams& streams,
                                 const std::vector<grid::DeclaredChange>& declared, const MetricSelection& sel) {
  sel.validate();
  MetricRun run;
  run.declared = declared;
  std::stable_sort(run.declared.begin(), run.declared.end(),
                   [](const grid::DeclaredChange& a, const grid::DeclaredChange& b) { return a.tick < b.tick; });
  for (int b : topo.metered_buses)
    if (!streams.count(b)) throw InputError("no stream for metered bus " + std::to_string(b));

  std::map<int, std::map<Tick, const PhasorSample*>> by_tick;
  std::set<Tick> all_ticks;
  for (int b : topo.metered_buses) {
    Tick prev = std::numeric_limits<Tick>::min();
    for (const auto& s : streams.at(b)) {
      if (s.k <= prev) throw InputError("stream for bus " + std::to_string(b) + " is not strictly ordered by k");
      prev = s.k;
      by_tick[b][s.k] = &s;
      all_ticks.insert(s.k);
    }
  }

  struct SingleSlot {
    std::string id;
    int bus;
    std::string line;
    metrics::SinglePmuMetric m;
  };
  struct DoubleSlot {
    std::string id;
    const grid::LineModel* line;
    metrics::DoublePmuMetric m;
  };
  std::vector<SingleSlot> singles;
  std::vector<DoubleSlot> doubles;
  if (sel.single)
    for (int b : topo.metered_buses)
      for (const auto* l : topo.incident_lines(b))
        singles.push_back({single_id(b, l->line_id), b, l->line_id, metrics::SinglePmuMetric(sel.m_single)});
  if (sel.dbl)
    for (const auto& l : topo.lines)
      if (topo.is_metered(l.from_bus) && topo.is_metered(l.to_bus))
        doubles.push_back({double_id(l.line_id), &l, metrics::DoublePmuMetric(sel.m_double)});

  std::string multi_key;
  std::optional<metrics::MultiPmuMetric> multi;
  std::optional<grid::SystemMatrices> sys;

  for (Tick k : all_ticks) {
    bool complete = true;
    for (int b : topo.metered_buses)
      if (!by_tick[b].count(k)) complete = false;
    if (!complete) {
      run.warnings.push_back("tick " + std::to_string(k) + ": missing samples, skipped");
      continue;
    }
    auto at = [&](int b) -> const PhasorSample& { return *by_tick[b][k]; };
    std::vector<MetricRecord> row;
    for (auto& s : singles) {
      const Vec3c* i = detail::line_current(at(s.bus), s.line);
      if (!i) {
        run.warnings.push_back("tick " + std::to_string(k) + ": " + s.id + " has no current, skipped");
        continue;
      }
      if (auto x = s.m.push(*i, at(s.bus).v)) row.push_back({k, s.id, *x});
    }
    for (auto& d : doubles) {
      const Vec3c* ia = detail::line_current(at(d.line->from_bus), d.line->line_id);
      const Vec3c* ib = detail::line_current(at(d.line->to_bus), d.line->line_id);
      if (!ia || !ib) {
        run.warnings.push_back("tick " + std::to_string(k) + ": " + d.id + " has no current, skipped");
        continue;
      }
      if (auto x = d.m.push(*ia, *ib, at(d.line->from_bus).v, at(d.line->to_bus).v)) row.push_back({k, d.id, *x});
    }
    if (sel.multi) {
      const grid::GridTopology declared_topo = grid::declared_topology_at(topo, run.declared, k);
      const std::string key = detail::schedule_key(declared_topo);
      if (!multi || key != multi_key) {
        sys = grid::assemble_system(declared_topo);
        multi.emplace(*sys, sel.mode);
        multi_key = key;
      }
      VecXc d_a(6 * static_cast<Eigen::Index>(sys->metered_index.size()));
      const auto na = static_cast<Eigen::Index>(sys->metered_index.size());
      for (Eigen::Index i = 0; i < na; ++i) {
        const int bus = declared_topo.buses[static_cast<std::size_t>(sys->metered_index[static_cast<std::size_t>(i)])].id;
        d_a.segment<3>(3 * i) = at(bus).injection();
        d_a.segment<3>(3 * na + 3 * i) = at(bus).v;
      }
      if (d_a.squaredNorm() > 0.0) row.push_back({k, kMultiId, multi->evaluate(d_a)});
      else run.warnings.push_back("tick " + std::to_string(k) + ": measured vector is zero, multi skipped");
    }
    std::stable_sort(row.begin(), row.end(), [](const MetricRecord& a, const MetricRecord& b) { return a.metric_id < b.metric_id; });
    run.records.insert(run.records.end(), row.begin(), row.end());
  }
  return run;
}

// ---------------------------------------------------------------------------------------------------
// Calibration and detection

struct MetricCalibration {
  double mean = 0.0;
  double variance = 0.0;
  std::size_t samples = 0;
};

using CalibrationTable = std::map<std::string, MetricCalibration>;

/// Sample mean and variance per metric over records with k in [from, to].
inline CalibrationTable calibrate(const std::vector<MetricRecord>& records, Tick from = std::numeric_limits<Tick>::min(),
                                  Tick to = std::numeric_limits<Tick>::max()) {
  std::map<std::string, std::vector<double>> by_id;
  for (const auto& r : records)
    if (r.k >= from && r.k <= to) by_id[r.metric_id].push_back(r.x);
  CalibrationTable out;
  for (const auto& [id, xs] : by_id) {
    MetricCalibration c;
    c.samples = xs.size();
    for (double x : xs) c.mean += x;
    c.mean /= static_cast<double>(xs.size());
    for (double x : xs) c.variance += (x - c.mean) * (x - c.mean);
    c.variance = xs.size() > 1 ? c.variance / static_cast<double>(xs.size() - 1) : 0.0;
    out[id] = c;
  }
  return out;
}

struct DetectorSettings {
  detect::CusumConfig base;
  double delta_in_std = 10.0;  // delta_hat = delta_in_std * calibrated std
  int double_window = 32;      // warm-up of the double-meter detectors is at least their window
};

/// CUSUM parameters for one metric: base config with delta and the initial variance from calibration.
inline detect::CusumConfig tuned_config(const DetectorSettings& s, const CalibrationTable& cal, const std::string& id) {
  detect::CusumConfig c = s.base;
  if (id.rfind("double:", 0) == 0) c.warmup = std::max<Tick>(c.warmup, s.double_window);
  auto it = cal.find(id);
  if (it == cal.end()) return c;
  const double sd = std::sqrt(it->second.variance);
  const double floor = std::max(1e-300, 1e-9 * std::abs(it->second.mean));
  c.delta_hat = std::max(s.delta_in_std * sd, floor);
  c.sigma2_floor = std::min(c.sigma2_floor, std::max(it->second.variance, 1e-300));
  c.sigma2_init = std::max(it->second.variance, c.sigma2_floor);
  return c;
}

/// A declared topology change that no detected transient accompanies.
struct TopologyInconsistency {
  Tick tick = 0;
  std::string line;
  bool in_service = false;
  Tick tolerance = 0;
};

struct DetectionResult {
  std::vector<detect::ChangeEvent> events;  // detection order
  std::vector<detect::Episode> episodes;
  std::vector<TopologyInconsistency> inconsistencies;
};

/**
 * Run one CUSUM per metric over the records. The multi-metric detector restarts (fresh seed and warm-up)
 * at each declared topology change, since its operator changes there. Each declared change with no episode
 * from any metric within `tolerance` ticks is reported as an inconsistency.
 */
inline DetectionResult run_detection(const std::vector<MetricRecord>& records, const DetectorSettings& settings,
                                     const CalibrationTable& cal, const std::vector<grid::DeclaredChange>& declared,
                                     Tick tolerance) {
  settings.base.validate();
  DetectionResult res;
  std::map<std::string, detect::CusumDetector> detectors;
  std::map<std::string, std::size_t> next_change;
  for (const auto& r : records) {
    auto it = detectors.find(r.metric_id);
    if (it == detectors.end())
      it = detectors.emplace(r.metric_id, detect::CusumDetector(r.metric_id, tuned_config(settings, cal, r.metric_id))).first;
    if (r.metric_id == kMultiId) {
      auto& nc = next_change[r.metric_id];
      bool restart = false;
      while (nc < declared.size() && declared[nc].tick <= r.k) {
        restart = true;
        ++nc;
      }
      if (restart) it->second.restart();
    }
    if (auto ev = it->second.update(r.k, r.x)) res.events.push_back(*ev);
  }
  res.episodes = detect::episode_manager(res.events, settings.base.completion_window);
  for (const auto& c : declared) {
    const bool accompanied = std::any_of(res.episodes.begin(), res.episodes.end(), [&](const detect::Episode& e) {
      return e.overlaps(c.tick - tolerance, c.tick + tolerance);
    });
    if (!accompanied) res.inconsistencies.push_back({c.tick, c.line, c.in_service, tolerance});
  }
  return res;
}

}  // namespace upmu::pipeline
