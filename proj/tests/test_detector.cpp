#include <gtest/gtest.h>

#include <random>

#include "upmu/detector.hpp"
#include "upmu/feeder_sim.hpp"
#include "upmu/io.hpp"
#include "upmu/pipeline.hpp"

using namespace upmu;
using namespace upmu::detect;

namespace {

const std::string kData = UPMU_DATA_DIR;

CusumConfig fixed_config(double delta, double sigma2, double alpha) {
  CusumConfig c;
  c.delta_hat = delta;
  c.alpha = alpha;
  c.rho = 1.0;
  c.sigma2_init = sigma2;
  c.sigma2_floor = std::min(1e-12, sigma2);
  c.warmup = 0;
  return c;
}

// Straight transcription of the upward recursion with fixed mean and variance; returns the first alarm tick.
long oracle_alarm(const std::vector<double>& x, double mu, double sigma2, double delta, double alpha) {
  double g = 0.0;
  for (std::size_t k = 1; k < x.size(); ++k) {
    g = std::max(0.0, g + delta / sigma2 * (x[k] - mu - delta / 2));
    if (g > alpha) return static_cast<long>(k);
  }
  return -1;
}

std::vector<ChangeEvent> run(CusumDetector d, const std::vector<double>& xs) {
  std::vector<ChangeEvent> out;
  for (std::size_t k = 0; k < xs.size(); ++k)
    if (auto e = d.update(static_cast<Tick>(k), xs[k])) out.push_back(*e);
  return out;
}

ChangeEvent ev(Tick at, Tick start, const std::string& id = "m") { return {id, Direction::up, at, start, 0.0}; }

}  // namespace

TEST(Cusum, ConstantInputNeverFires) {
  CusumDetector d("m", fixed_config(1.0, 1.0, 2.0));
  for (Tick k = 0; k < 1000; ++k) {
    EXPECT_FALSE(d.update(k, 3.0).has_value());
    EXPECT_EQ(d.state().g_up, 0.0);
    EXPECT_EQ(d.state().g_down, 0.0);
  }
}

TEST(Cusum, StepDetectedTwoTicksLater) {
  const double delta = 0.5, sigma2 = 0.04;
  for (Tick kf : {5, 20, 77}) {
    CusumDetector d("m", fixed_config(delta, sigma2, delta * delta / sigma2));
    std::optional<ChangeEvent> hit;
    for (Tick k = 0; k < kf + 10 && !hit; ++k) hit = d.update(k, k >= kf ? 1.0 + delta : 1.0);
    ASSERT_TRUE(hit.has_value());
    EXPECT_EQ(hit->direction, Direction::up);
    EXPECT_EQ(hit->detected_at, kf + 2);
    EXPECT_EQ(hit->estimated_start, kf);
    EXPECT_LE(hit->estimated_start, hit->detected_at);
  }
}

TEST(Cusum, DownwardStep) {
  CusumDetector d("m", fixed_config(1.0, 1.0, 1.0));
  const auto evs = run(d, {0, 0, 0, 0, -1, -1, -1, -1});
  ASSERT_FALSE(evs.empty());
  EXPECT_EQ(evs[0].direction, Direction::down);
  EXPECT_EQ(evs[0].detected_at, 6);
  EXPECT_EQ(evs[0].estimated_start, 4);
}

TEST(Cusum, ResetsAfterDetection) {
  CusumDetector d("m", fixed_config(1.0, 1.0, 1.0));
  for (Tick k = 0; k < 4; ++k) d.update(k, 0.0);
  std::optional<ChangeEvent> e;
  for (Tick k = 4; !e; ++k) e = d.update(k, 1.0);
  EXPECT_EQ(d.state().g_up, 0.0);
  EXPECT_EQ(d.state().m_up, 0.0);
  EXPECT_EQ(d.state().k0, e->detected_at);
}

TEST(Cusum, DecisionFunctionsNonNegative) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  CusumConfig c;
  c.delta_hat = 2.0;
  c.alpha = 8.0;
  c.sigma2_init = 1.0;
  CusumDetector d("m", c);
  for (Tick k = 0; k < 20000; ++k) {
    d.update(k, n(rng) + (k % 3000 > 2500 ? 3.0 : 0.0));
    ASSERT_GE(d.state().g_up, 0.0);
    ASSERT_GE(d.state().g_down, 0.0);
    ASSERT_GE(d.state().sigma2, c.sigma2_floor);
  }
}

TEST(Cusum, RhoOneFreezesMean) {
  CusumConfig c = fixed_config(10.0, 1.0, 100.0);
  CusumDetector d("m", c);
  const std::vector<double> xs = {2.0, 2.5, 1.5, 2.2, 1.9};
  for (std::size_t k = 0; k < xs.size(); ++k) d.update(static_cast<Tick>(k), xs[k]);
  EXPECT_EQ(d.state().mu0, 2.0);
  EXPECT_EQ(d.state().sigma2, 1.0);
}

TEST(Cusum, RhoZeroTracksPreviousSample) {
  CusumConfig c = fixed_config(10.0, 1.0, 100.0);
  c.rho = 0.0;
  CusumDetector d("m", c);
  const std::vector<double> xs = {2.0, 2.5, 1.5, 2.2, 1.9};
  for (std::size_t k = 0; k < xs.size(); ++k) {
    d.update(static_cast<Tick>(k), xs[k]);
    EXPECT_EQ(d.state().mu0, xs[k]);
  }
}

TEST(Cusum, MirroredInputSwapsDirections) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  std::vector<double> xs(5000), neg(5000);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    xs[k] = n(rng) + ((k / 400) % 2 ? 4.0 : 0.0);
    neg[k] = -xs[k];
  }
  CusumConfig c;
  c.delta_hat = 3.0;
  c.alpha = 6.0;
  c.sigma2_init = 1.0;
  const auto a = run(CusumDetector("m", c), xs), b = run(CusumDetector("m", c), neg);
  ASSERT_EQ(a.size(), b.size());
  ASSERT_FALSE(a.empty());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a[i].direction, b[i].direction);
    EXPECT_EQ(a[i].detected_at, b[i].detected_at);
    EXPECT_EQ(a[i].estimated_start, b[i].estimated_start);
  }
}

TEST(Cusum, Deterministic) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> xs(3000);
  for (std::size_t k = 0; k < xs.size(); ++k) xs[k] = n(rng) + (k > 1500 ? 2.0 : 0.0);
  CusumConfig c;
  c.delta_hat = 2.0;
  c.sigma2_init = 1.0;
  const auto a = run(CusumDetector("m", c), xs), b = run(CusumDetector("m", c), xs);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].detected_at, b[i].detected_at);
    EXPECT_EQ(a[i].value, b[i].value);
  }
}

TEST(Cusum, WarmupInhibitsDecisions) {
  CusumConfig c = fixed_config(1.0, 1.0, 0.1);
  c.warmup = 16;
  CusumDetector d("m", c);
  for (Tick k = 0; k < 16; ++k) EXPECT_FALSE(d.update(k, 100.0 * k).has_value());
  EXPECT_TRUE(d.update(16, 1600.0).has_value());
}

TEST(Cusum, RestartReseeds) {
  CusumDetector d("m", fixed_config(1.0, 1.0, 1.0));
  d.update(0, 5.0);
  d.update(1, 5.0);
  d.restart();
  EXPECT_FALSE(d.update(2, 50.0).has_value());
  EXPECT_EQ(d.state().mu0, 50.0);
}

TEST(Cusum, RejectsBadInputAndConfig) {
  CusumDetector d("m");
  EXPECT_THROW(d.update(0, std::numeric_limits<double>::quiet_NaN()), InputError);
  CusumConfig c;
  c.alpha = 0.0;
  EXPECT_THROW(CusumDetector("m", c), InputError);
  c = {};
  c.delta_hat = -1.0;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.rho = 1.5;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(Cusum, MeanDelayMatchesOracle) {
  const double sigma = 1.0, delta = 5.0, alpha = 12.0;
  const int trials = 2000, kf = 50;
  auto mean_delay = [&](std::uint64_t seed, bool use_oracle) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sigma);
    double sum = 0.0;
    int count = 0;
    for (int t = 0; t < trials; ++t) {
      std::vector<double> xs(kf + 40);
      xs[0] = 0.0;
      for (std::size_t k = 1; k < xs.size(); ++k) xs[k] = n(rng) + (static_cast<int>(k) >= kf ? delta : 0.0);
      long at = -1;
      if (use_oracle) {
        at = oracle_alarm(xs, 0.0, sigma * sigma, delta, alpha);
      } else {
        const auto evs = run(CusumDetector("m", fixed_config(delta, sigma * sigma, alpha)), xs);
        if (!evs.empty()) at = static_cast<long>(evs.front().detected_at);
      }
      if (at >= kf) {
        sum += static_cast<double>(at - kf);
        ++count;
      }
    }
    return sum / count;
  };
  const double got = mean_delay(11, false), ref = mean_delay(12, true);
  EXPECT_NEAR(got, ref, 0.1 * ref);
}

TEST(Cusum, NoFalseAlarmsOnStationaryNoise) {
  std::mt19937_64 rng(6);
  const double sigma = 0.3;
  std::normal_distribution<double> n(1.0, sigma);
  CusumConfig c;
  c.delta_hat = 8.0 * sigma;
  c.alpha = 20.0;
  c.sigma2_init = sigma * sigma;
  CusumDetector d("m", c);
  int events = 0;
  for (Tick k = 0; k < 100000; ++k)
    if (d.update(k, n(rng))) ++events;
  EXPECT_EQ(events, 0);
}

TEST(Episodes, GapRule) {
  const auto eps = group_episodes({ev(100, 98), ev(110, 105), ev(500, 497)}, 100);
  ASSERT_EQ(eps.size(), 2u);
  EXPECT_EQ(eps[0].start, 98);
  EXPECT_EQ(eps[0].end, 110);
  EXPECT_EQ(eps[0].up_events, 2);
  EXPECT_EQ(eps[1].start, 497);
  EXPECT_EQ(eps[1].end, 500);
}

TEST(Episodes, SingleEvent) {
  const auto eps = group_episodes({ev(7, 5)}, 60);
  ASSERT_EQ(eps.size(), 1u);
  EXPECT_TRUE(eps[0].overlaps(0, 5));
  EXPECT_FALSE(eps[0].overlaps(8, 9));
}

TEST(Episodes, PerMetricAndOrdered) {
  const auto eps = episode_manager({ev(50, 40, "b"), ev(52, 45, "a"), ev(60, 58, "b")}, 60);
  ASSERT_EQ(eps.size(), 2u);
  EXPECT_EQ(eps[0].metric_id, "b");
  EXPECT_EQ(eps[0].end, 60);
  EXPECT_EQ(eps[1].metric_id, "a");
  EXPECT_THROW(group_episodes({ev(10, 9), ev(5, 4)}, 60), InputError);
}

TEST(Pipeline, SlgGivesOneEpisodePerMetric) {
  const auto f = sim::feeder_from_json(io::read_json_file(kData + "/ieee34.json"));
  sim::SimulationConfig cfg;
  cfg.waveforms = false;
  cfg.seed = 101;
  cfg.duration_ticks = 400;
  const pipeline::MetricSelection sel;
  const auto quiet = sim::run_scenario(f, cfg, {});
  const auto cal = pipeline::calibrate(pipeline::compute_metrics(f.topology, quiet.streams, quiet.declared, sel).records);
  cfg.seed = 102;
  cfg.duration_ticks = 180;
  const auto ds = sim::run_scenario(f, cfg, sim::script_from_json(io::read_json_file(kData + "/scripts/slg_16_17.json")));
  const auto run = pipeline::compute_metrics(f.topology, ds.streams, ds.declared, sel);
  const auto det = pipeline::run_detection(run.records, {}, cal, run.declared, 36);
  std::map<std::string, int> per_metric;
  for (const auto& e : det.episodes) {
    ++per_metric[e.metric_id];
    EXPECT_TRUE(e.overlaps(60, 63 + 32 + 4)) << e.metric_id << " " << e.start << ".." << e.end;
  }
  ASSERT_TRUE(per_metric.count(pipeline::kMultiId));
  for (const auto& [id, n] : per_metric) EXPECT_EQ(n, 1) << id;
  EXPECT_TRUE(det.inconsistencies.empty());
}

TEST(Pipeline, TunedConfigFromCalibration) {
  pipeline::CalibrationTable cal;
  cal["multi"] = {1e-3, 4e-8, 100};
  const auto c = pipeline::tuned_config({}, cal, "multi");
  EXPECT_NEAR(c.delta_hat, 10.0 * 2e-4, 1e-15);
  EXPECT_NEAR(*c.sigma2_init, 4e-8, 1e-22);
  EXPECT_EQ(pipeline::tuned_config({}, cal, "double:x").warmup, 32);
  EXPECT_EQ(pipeline::tuned_config({}, cal, "single:1:x").warmup, 16);
}
