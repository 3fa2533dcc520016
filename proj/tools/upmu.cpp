// Command-line front end: simulate, extract-phasors, detect, replay.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "upmu/io.hpp"

namespace fs = std::filesystem;
using namespace upmu;

namespace {

pipeline::MetricSelection selection_with_overrides(pipeline::MetricSelection sel, const std::string& metrics,
                                                   const std::string& mode) {
  if (!metrics.empty()) {
    const auto parsed = pipeline::MetricSelection::parse(metrics);
    sel.single = parsed.single;
    sel.dbl = parsed.dbl;
    sel.multi = parsed.multi;
  }
  if (!mode.empty()) sel.mode = metrics::multi_mode_from_string(mode);
  return sel;
}

std::vector<grid::DeclaredChange> load_declared(const fs::path& dataset) {
  const fs::path p = dataset / "detector_topology.json";
  if (!fs::exists(p)) return {};
  return io::declared_from_json(io::read_json_file(p));
}

/// Metric records of a calibration dataset: its metrics.csv when present, else computed from its phasors.
std::vector<pipeline::MetricRecord> calibration_records(const fs::path& dir, const grid::GridTopology& topo,
                                                        const pipeline::MetricSelection& sel) {
  if (fs::exists(dir / "metrics.csv")) {
    auto in = io::open_in(dir / "metrics.csv");
    return io::read_metrics(in);
  }
  auto in = io::open_in(dir / "phasors.csv");
  return pipeline::compute_metrics(topo, io::read_phasors(in), load_declared(dir), sel).records;
}

pipeline::CalibrationTable calibration_for(const io::RunConfig& cfg, const std::optional<fs::path>& cal_dir,
                                           const grid::GridTopology& topo, const pipeline::MetricSelection& sel,
                                           const std::vector<pipeline::MetricRecord>& own) {
  if (cal_dir) return pipeline::calibrate(calibration_records(*cal_dir, topo, sel));
  if (cfg.calibration_ticks > 0) return pipeline::calibrate(own, std::numeric_limits<Tick>::min(), cfg.calibration_ticks - 1);
  return {};
}

void write_detection(const fs::path& out_dir, const std::vector<pipeline::MetricRecord>& records,
                     const pipeline::DetectionResult& res, bool write_metrics) {
  fs::create_directories(out_dir);
  if (write_metrics) {
    auto m = io::open_out(out_dir / "metrics.csv");
    io::write_metrics(m, records);
  }
  auto ev = io::open_out(out_dir / "events.jsonl");
  io::write_events(ev, res.events);
  auto ep = io::open_out(out_dir / "episodes.json");
  ep << io::episodes_json(res).dump(2) << "\n";
  std::cout << res.events.size() << " events, " << res.episodes.size() << " episodes, " << res.inconsistencies.size()
            << " topology inconsistencies\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming anomaly detection on distribution synchrophasor data"};
  app.require_subcommand(1);

  std::string config, script, out_dir, metrics_sel, mode, dataset, calibration, input, metrics_file;
  std::optional<std::uint64_t> seed;

  auto* sim_cmd = app.add_subcommand("simulate", "Run a scripted feeder scenario and write a dataset");
  sim_cmd->add_option("--config", config, "Run configuration (JSON)")->required();
  sim_cmd->add_option("--script", script, "Event script (JSON); omitted means event-free");
  sim_cmd->add_option("--out-dir", out_dir, "Output directory")->required();
  sim_cmd->add_option("--seed", seed, "Override the configured seed");

  auto* ext_cmd = app.add_subcommand("extract-phasors", "Estimate phasors from a waveform CSV");
  ext_cmd->add_option("--input", input, "Waveform CSV (t_sec,<channel>,...)")->required();
  ext_cmd->add_option("--out-dir", out_dir, "Output directory for phasors.csv")->required();

  auto* det_cmd = app.add_subcommand("detect", "Compute metrics and run change detection on a dataset");
  det_cmd->add_option("--config", config, "Run configuration (JSON)")->required();
  det_cmd->add_option("--dataset", dataset, "Dataset directory holding phasors.csv")->required();
  det_cmd->add_option("--out-dir", out_dir, "Output directory")->required();
  det_cmd->add_option("--metrics", metrics_sel, "Comma list of single,double,multi");
  det_cmd->add_option("--mode", mode, "Multi-meter metric mode: projector|min-singular|auto");
  det_cmd->add_option("--calibration", calibration, "Event-free dataset used to calibrate the detectors");

  auto* rep_cmd = app.add_subcommand("replay", "Re-run change detection on stored metrics");
  rep_cmd->add_option("--config", config, "Run configuration (JSON)")->required();
  rep_cmd->add_option("--metrics-file", metrics_file, "metrics.csv from an earlier run")->required();
  rep_cmd->add_option("--dataset", dataset, "Dataset directory for the declared topology schedule");
  rep_cmd->add_option("--out-dir", out_dir, "Output directory")->required();
  rep_cmd->add_option("--metrics", metrics_sel, "Comma list of single,double,multi");
  rep_cmd->add_option("--calibration", calibration, "Event-free dataset used to calibrate the detectors");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim_cmd) {
      auto cfg = io::RunConfig::load(config);
      if (seed) cfg.simulation.seed = *seed;
      const auto feeder = sim::feeder_from_json(io::read_json_file(cfg.topology));
      const sim::EventScript sc = script.empty() ? sim::EventScript{} : sim::script_from_json(io::read_json_file(script));
      const auto ds = sim::run_scenario(feeder, cfg.simulation, sc);
      fs::create_directories(out_dir);
      auto ph = io::open_out(fs::path(out_dir) / "phasors.csv");
      io::write_phasors(ph, ds.streams);
      auto tr = io::open_out(fs::path(out_dir) / "truth.json");
      tr << io::truth_json(ds).dump(2) << "\n";
      auto dt = io::open_out(fs::path(out_dir) / "detector_topology.json");
      dt << io::declared_json(ds.declared).dump(2) << "\n";
      if (cfg.simulation.waveforms) {
        auto wf = io::open_out(fs::path(out_dir) / "waveforms.csv");
        io::write_waveforms(wf, ds.waveforms);
      }
      std::cout << "simulated " << ds.ticks.size() << " ticks at " << ds.metered.size() << " metered buses\n";
    } else if (*ext_cmd) {
      auto in = io::open_in(input);
      const auto streams = io::extract_streams(io::read_waveforms(in));
      fs::create_directories(out_dir);
      auto out = io::open_out(fs::path(out_dir) / "phasors.csv");
      io::write_phasors(out, streams);
    } else if (*det_cmd) {
      const auto cfg = io::RunConfig::load(config);
      const auto sel = selection_with_overrides(cfg.metrics, metrics_sel, mode);
      const auto topo = grid::topology_from_json(io::read_json_file(cfg.topology));
      auto in = io::open_in(fs::path(dataset) / "phasors.csv");
      const auto run = pipeline::compute_metrics(topo, io::read_phasors(in), load_declared(dataset), sel);
      for (const auto& w : run.warnings) std::cerr << "warning: " << w << "\n";
      const auto cal = calibration_for(cfg, calibration.empty() ? std::nullopt : std::optional<fs::path>(calibration), topo,
                                       sel, run.records);
      const auto res = pipeline::run_detection(run.records, cfg.detector, cal, run.declared, cfg.inconsistency_tolerance);
      write_detection(out_dir, run.records, res, true);
    } else if (*rep_cmd) {
      const auto cfg = io::RunConfig::load(config);
      const auto sel = selection_with_overrides(cfg.metrics, metrics_sel, "");
      const auto topo = grid::topology_from_json(io::read_json_file(cfg.topology));
      auto in = io::open_in(metrics_file);
      auto records = io::read_metrics(in);
      if (!metrics_sel.empty()) {
        std::erase_if(records, [&](const pipeline::MetricRecord& r) {
          if (r.metric_id == pipeline::kMultiId) return !sel.multi;
          if (r.metric_id.rfind("single:", 0) == 0) return !sel.single;
          return !sel.dbl;
        });
      }
      auto declared = dataset.empty() ? std::vector<grid::DeclaredChange>{} : load_declared(dataset);
      const auto cal = calibration_for(cfg, calibration.empty() ? std::nullopt : std::optional<fs::path>(calibration), topo,
                                       sel, records);
      const auto res = pipeline::run_detection(records, cfg.detector, cal, declared, cfg.inconsistency_tolerance);
      write_detection(out_dir, records, res, false);
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
