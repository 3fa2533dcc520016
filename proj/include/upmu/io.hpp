#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upmu/detector.hpp"
#include "upmu/feeder_sim.hpp"
#include "upmu/phasor_dsp.hpp"
#include "upmu/pipeline.hpp"
#include "upmu/types.hpp"

namespace upmu::io {

namespace fs = std::filesystem;

inline constexpr const char* kPhasorSchema = "# schema: upmu.phasors/1";
inline constexpr const char* kMetricSchema = "# schema: upmu.metrics/1";
inline constexpr const char* kWaveformSchema = "# schema: upmu.waveforms/1";
inline constexpr const char* kEventSchema = "upmu.events/1";
inline constexpr const char* kEpisodeSchema = "upmu.episodes/1";
inline constexpr const char* kTruthSchema = "upmu.truth/1";
inline constexpr const char* kTopologySchema = "upmu.detector_topology/1";

/// Shortest text that reads back to the same double.
inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

namespace detail {

inline double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("line " + std::to_string(line_no) + ": not a number '" + s + "'");
  }
}

inline long long parse_int(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw InputError("line " + std::to_string(line_no) + ": not an integer '" + s + "'");
  }
}

inline void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

/// Reads lines, skipping '#' comments and blank lines; returns the header (empty for an empty file).
class CsvReader {
 public:
  explicit CsvReader(std::istream& in) : in_(in) {}

  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++line_no_;
      strip_cr(line);
      if (line.empty() || line[0] == '#') continue;
      return true;
    }
    return false;
  }
  std::size_t line_no() const { return line_no_; }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------------------------------
// Phasor CSV: k,bus,kind,line,phase,re,im

inline void write_phasors(std::ostream& out, const pipeline::Streams& streams) {
  out << kPhasorSchema << "\n" << "k,bus,kind,line,phase,re,im\n";
  std::map<Tick, std::vector<const PhasorSample*>> by_tick;
  for (const auto& [bus, stream] : streams)
    for (const auto& s : stream) by_tick[s.k].push_back(&s);
  for (const auto& [k, samples] : by_tick) {
    for (const auto* s : samples) {
      for (int p = 0; p < 3; ++p)
        out << k << "," << s->bus << ",V,," << kPhaseNames[static_cast<std::size_t>(p)] << "," << num(s->v(p).real())
            << "," << num(s->v(p).imag()) << "\n";
      for (const auto& [line, i] : s->i_lines)
        for (int p = 0; p < 3; ++p)
          out << k << "," << s->bus << ",I," << line << "," << kPhaseNames[static_cast<std::size_t>(p)] << ","
              << num(i(p).real()) << "," << num(i(p).imag()) << "\n";
    }
  }
}

inline pipeline::Streams read_phasors(std::istream& in) {
  detail::CsvReader r(in);
  std::string line;
  pipeline::Streams out;
  if (!r.next(line)) return out;
  if (line != "k,bus,kind,line,phase,re,im") throw InputError("line " + std::to_string(r.line_no()) + ": unexpected phasor header");
  std::map<int, std::map<Tick, PhasorSample>> acc;
  std::map<int, Tick> last_k;
  while (r.next(line)) {
    const auto f = split(line, ',');
    const auto n = r.line_no();
    if (f.size() != 7) throw InputError("line " + std::to_string(n) + ": expected 7 fields, got " + std::to_string(f.size()));
    const Tick k = detail::parse_int(f[0], n);
    const int bus = static_cast<int>(detail::parse_int(f[1], n));
    if (f[4].size() != 1) throw InputError("line " + std::to_string(n) + ": bad phase '" + f[4] + "'");
    int phase = 0;
    try {
      phase = static_cast<int>(phase_from_char(f[4][0]));
    } catch (const std::exception&) {
      throw InputError("line " + std::to_string(n) + ": bad phase '" + f[4] + "'");
    }
    const cplx val(detail::parse_double(f[5], n), detail::parse_double(f[6], n));
    auto lk = last_k.find(bus);
    if (lk != last_k.end() && k < lk->second)
      throw InputError("line " + std::to_string(n) + ": records for bus " + f[1] + " are not ordered by k");
    last_k[bus] = k;
    auto& s = acc[bus][k];
    s.k = k;
    s.bus = bus;
    if (f[2] == "V") {
      s.v(phase) = val;
    } else if (f[2] == "I") {
      if (f[3].empty()) throw InputError("line " + std::to_string(n) + ": current record without a line id");
      auto it = s.i_lines.try_emplace(f[3], Vec3c::Zero()).first;
      it->second(phase) = val;
    } else {
      throw InputError("line " + std::to_string(n) + ": kind must be V or I");
    }
  }
  for (auto& [bus, m] : acc)
    for (auto& [k, s] : m) out[bus].push_back(std::move(s));
  return out;
}

// ---------------------------------------------------------------------------------------------------
// Waveform CSV: t_sec,<channel>,...

inline void write_waveforms(std::ostream& out, const std::vector<dsp::WaveformSegment>& segs) {
  out << kWaveformSchema << "\n" << "t_sec";
  for (const auto& s : segs) out << "," << s.channel_id;
  out << "\n";
  if (segs.empty()) return;
  const auto n = segs.front().samples.size();
  const long long first = dsp::first_sample_index(segs.front());
  for (const auto& s : segs)
    if (s.samples.size() != n || dsp::first_sample_index(s) != first || s.fs != segs.front().fs)
      throw InputError("waveform channels are not aligned");
  for (std::size_t m = 0; m < n; ++m) {
    out << num(static_cast<double>(first + static_cast<long long>(m)) / segs.front().fs);
    for (const auto& s : segs) out << "," << num(s.samples[m]);
    out << "\n";
  }
}

/// Reads aligned channels; the sample rate comes from the time column and must be uniform.
inline std::vector<dsp::WaveformSegment> read_waveforms(std::istream& in) {
  detail::CsvReader r(in);
  std::string line;
  std::vector<dsp::WaveformSegment> segs;
  if (!r.next(line)) return segs;
  const auto head = split(line, ',');
  if (head.empty() || head[0] != "t_sec") throw InputError("line " + std::to_string(r.line_no()) + ": header must start with t_sec");
  for (std::size_t c = 1; c < head.size(); ++c) segs.push_back({head[c], 0.0, 0.0, {}});
  std::vector<double> t;
  while (r.next(line)) {
    const auto f = split(line, ',');
    if (f.size() != head.size())
      throw InputError("line " + std::to_string(r.line_no()) + ": expected " + std::to_string(head.size()) + " fields, got " +
                       std::to_string(f.size()));
    t.push_back(detail::parse_double(f[0], r.line_no()));
    for (std::size_t c = 1; c < f.size(); ++c) segs[c - 1].samples.push_back(detail::parse_double(f[c], r.line_no()));
  }
  if (t.empty()) return segs;
  double fs = 7680.0;
  if (t.size() > 1) {
    const double dt = (t.back() - t.front()) / static_cast<double>(t.size() - 1);
    if (!(dt > 0.0)) throw InputError("waveform time column must increase");
    fs = std::round(1.0 / dt);
    for (std::size_t i = 1; i < t.size(); ++i)
      if (std::abs((t[i] - t[i - 1]) * fs - 1.0) > 1e-6) throw InputError("waveform sampling is not uniform");
  }
  for (auto& s : segs) {
    s.t0 = t.front();
    s.fs = fs;
  }
  return segs;
}

/// Parsed channel name "<bus>.V.<phase>" or "<bus>.I.<line>.<phase>".
struct ChannelName {
  int bus = 0;
  bool current = false;
  std::string line;
  int phase = 0;
};

inline ChannelName parse_channel(const std::string& name) {
  const auto f = split(name, '.');
  ChannelName c;
  try {
    if (f.size() == 3 && f[1] == "V") {
      c.bus = std::stoi(f[0]);
      c.phase = static_cast<int>(phase_from_char(f[2].at(0)));
      if (f[2].size() == 1) return c;
    } else if (f.size() == 4 && f[1] == "I" && !f[2].empty()) {
      c.bus = std::stoi(f[0]);
      c.current = true;
      c.line = f[2];
      c.phase = static_cast<int>(phase_from_char(f[3].at(0)));
      if (f[3].size() == 1) return c;
    }
  } catch (const std::exception&) {
  }
  throw InputError("bad channel name '" + name + "'");
}

/// Extract every channel and regroup by bus into phasor samples.
inline pipeline::Streams extract_streams(const std::vector<dsp::WaveformSegment>& segs, double f0 = kNominalHz) {
  pipeline::Streams out;
  if (segs.empty()) return out;
  const auto filt = dsp::design_pclass_filter(f0, segs.front().fs);
  std::map<int, std::map<Tick, PhasorSample>> acc;
  for (const auto& seg : segs) {
    const ChannelName ch = parse_channel(seg.channel_id);
    for (const auto& p : dsp::extract_phasor_stream(seg, filt, f0)) {
      auto& s = acc[ch.bus][p.k];
      s.k = p.k;
      s.bus = ch.bus;
      if (ch.current) s.i_lines.try_emplace(ch.line, Vec3c::Zero()).first->second(ch.phase) = p.value;
      else s.v(ch.phase) = p.value;
    }
  }
  for (auto& [bus, m] : acc)
    for (auto& [k, s] : m) out[bus].push_back(std::move(s));
  return out;
}

// ---------------------------------------------------------------------------------------------------
// Metrics CSV: k,metric_id,x

inline void write_metrics(std::ostream& out, const std::vector<pipeline::MetricRecord>& recs) {
  out << kMetricSchema << "\n" << "k,metric_id,x\n";
  for (const auto& r : recs) out << r.k << "," << r.metric_id << "," << num(r.x) << "\n";
}

inline std::vector<pipeline::MetricRecord> read_metrics(std::istream& in) {
  detail::CsvReader r(in);
  std::string line;
  std::vector<pipeline::MetricRecord> out;
  if (!r.next(line)) return out;
  if (line != "k,metric_id,x") throw InputError("line " + std::to_string(r.line_no()) + ": unexpected metric header");
  std::map<std::string, Tick> last;
  while (r.next(line)) {
    const auto f = split(line, ',');
    if (f.size() != 3) throw InputError("line " + std::to_string(r.line_no()) + ": expected 3 fields, got " + std::to_string(f.size()));
    pipeline::MetricRecord rec{detail::parse_int(f[0], r.line_no()), f[1], detail::parse_double(f[2], r.line_no())};
    auto it = last.find(rec.metric_id);
    if (it != last.end() && rec.k <= it->second)
      throw InputError("line " + std::to_string(r.line_no()) + ": records for " + rec.metric_id + " are not strictly ordered by k");
    last[rec.metric_id] = rec.k;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------------
// JSON documents

using nlohmann::ordered_json;

inline ordered_json to_json(const detect::ChangeEvent& e) {
  return ordered_json{{"metric_id", e.metric_id},
                      {"direction", detect::to_string(e.direction)},
                      {"detected_at", e.detected_at},
                      {"estimated_start", e.estimated_start},
                      {"value", e.value}};
}

inline void write_events(std::ostream& out, const std::vector<detect::ChangeEvent>& events) {
  out << "# schema: " << kEventSchema << "\n";
  for (const auto& e : events) out << to_json(e).dump() << "\n";
}

inline ordered_json episodes_json(const pipeline::DetectionResult& res) {
  ordered_json eps = ordered_json::array();
  for (const auto& e : res.episodes)
    eps.push_back({{"metric_id", e.metric_id}, {"start", e.start}, {"end", e.end}, {"up_events", e.up_events},
                   {"down_events", e.down_events}});
  ordered_json inc = ordered_json::array();
  for (const auto& c : res.inconsistencies)
    inc.push_back({{"tick", c.tick},
                   {"line", c.line},
                   {"declared", c.in_service ? "in_service" : "out_of_service"},
                   {"tolerance", c.tolerance},
                   {"finding", "declared topology change without a detected transient"}});
  return ordered_json{{"schema", kEpisodeSchema}, {"episodes", eps}, {"topology_inconsistencies", inc}};
}

inline ordered_json truth_json(const sim::Dataset& ds) {
  auto labels = [](const std::vector<sim::TruthLabel>& v) {
    ordered_json a = ordered_json::array();
    for (const auto& l : v) a.push_back({{"kind", l.kind}, {"target", l.target}, {"first_tick", l.first}, {"last_tick", l.last}});
    return a;
  };
  return ordered_json{{"schema", kTruthSchema}, {"physical_events", labels(ds.physical)}, {"tampering", labels(ds.tampering)}};
}

inline ordered_json declared_json(const std::vector<grid::DeclaredChange>& changes) {
  ordered_json a = ordered_json::array();
  for (const auto& c : changes) a.push_back({{"tick", c.tick}, {"line", c.line}, {"in_service", c.in_service}});
  return ordered_json{{"schema", kTopologySchema}, {"declared_changes", a}};
}

inline std::vector<grid::DeclaredChange> declared_from_json(const nlohmann::json& j) {
  std::vector<grid::DeclaredChange> out;
  for (const auto& c : j.value("declared_changes", nlohmann::json::array()))
    out.push_back({c.at("tick").get<Tick>(), c.at("line").get<std::string>(), c.at("in_service").get<bool>()});
  return out;
}

// ---------------------------------------------------------------------------------------------------
// Files

inline nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(p.string() + ": " + e.what());
  }
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot open " + p.string());
  return in;
}

/// Run configuration. Relative paths resolve against the config file's directory.
struct RunConfig {
  fs::path topology;
  pipeline::MetricSelection metrics;
  pipeline::DetectorSettings detector;
  sim::SimulationConfig simulation;
  Tick calibration_ticks = 0;  // leading segment used when no calibration dataset is given
  Tick inconsistency_tolerance = 36;

  static RunConfig from_json(const nlohmann::json& j, const fs::path& base_dir) {
    RunConfig c;
    if (!j.contains("topology")) throw InputError("config has no topology path");
    c.topology = base_dir / j["topology"].get<std::string>();
    if (!fs::exists(c.topology)) throw InputError("topology file not found: " + c.topology.string());
    if (j.contains("metrics")) {
      const auto& m = j["metrics"];
      if (m.contains("select")) {
        std::string sel;
        for (const auto& s : m["select"]) sel += s.get<std::string>() + ",";
        const auto parsed = pipeline::MetricSelection::parse(sel);
        c.metrics.single = parsed.single;
        c.metrics.dbl = parsed.dbl;
        c.metrics.multi = parsed.multi;
      }
      c.metrics.m_single = m.value("m_single", c.metrics.m_single);
      c.metrics.m_double = m.value("m_double", c.metrics.m_double);
      c.metrics.mode = metrics::multi_mode_from_string(m.value("mode", std::string("auto")));
    }
    c.metrics.validate();
    c.detector.double_window = c.metrics.m_double;
    if (j.contains("cusum")) {
      const auto& d = j["cusum"];
      auto& b = c.detector.base;
      b.alpha = d.value("alpha", b.alpha);
      b.rho = d.value("rho", b.rho);
      b.completion_window = d.value("completion_window", b.completion_window);
      b.warmup = d.value("warmup", b.warmup);
      b.delta_hat = d.value("delta_hat", b.delta_hat);
      c.detector.delta_in_std = d.value("delta_in_std", c.detector.delta_in_std);
      c.calibration_ticks = d.value("calibration_ticks", c.calibration_ticks);
      c.inconsistency_tolerance = d.value("inconsistency_tolerance", c.inconsistency_tolerance);
    }
    c.detector.base.validate();
    if (j.contains("simulation")) {
      const auto& s = j["simulation"];
      auto& sc = c.simulation;
      sc.duration_ticks = s.value("duration_ticks", sc.duration_ticks);
      sc.waveforms = s.value("waveforms", sc.waveforms);
      sc.fs = s.value("fs", sc.fs);
      sc.noise_std = s.value("noise_std", sc.noise_std);
      if (s.contains("drift")) {
        sc.drift.offset = s["drift"].value("offset", sc.drift.offset);
        sc.drift.amplitude = s["drift"].value("amplitude", sc.drift.amplitude);
        sc.drift.freq_hz = s["drift"].value("freq_hz", sc.drift.freq_hz);
      }
    }
    c.simulation.seed = j.value("seed", c.simulation.seed);
    c.simulation.validate();
    return c;
  }

  static RunConfig load(const fs::path& p) {
    if (!fs::exists(p)) throw InputError("config file not found: " + p.string());
    return from_json(read_json_file(p), p.parent_path());
  }
};

}  // namespace upmu::io
