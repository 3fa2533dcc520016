#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "upmu/types.hpp"

namespace upmu::detect {

struct CusumConfig {
  double delta_hat = 1.0;       // a-priori change magnitude |delta|
  double alpha = 10.0;          // decision threshold
  double rho = 0.99;            // exponential window for mean / variance
  double sigma2_floor = 1e-12;  // lower bound on the variance estimate
  Tick completion_window = 60;  // quiet ticks that close an episode
  Tick warmup = 16;             // samples (seed included) before decisions are allowed
  std::optional<double> sigma2_init;

  void validate() const {
    if (!(alpha > 0.0)) throw InputError("CUSUM alpha must be positive");
    if (!(delta_hat > 0.0)) throw InputError("CUSUM delta_hat must be positive");
    if (!(rho >= 0.0 && rho <= 1.0)) throw InputError("CUSUM rho must lie in [0, 1]");
    if (!(sigma2_floor > 0.0)) throw InputError("CUSUM sigma2_floor must be positive");
    if (completion_window < 1) throw InputError("completion window must be at least one tick");
    if (warmup < 0) throw InputError("warm-up must be non-negative");
  }
};

enum class Direction { up, down };

inline const char* to_string(Direction d) { return d == Direction::up ? "up" : "down"; }

struct ChangeEvent {
  std::string metric_id;
  Direction direction = Direction::up;
  Tick detected_at = 0;
  Tick estimated_start = 0;
  double value = 0.0;
};

struct CusumState {
  double mu0 = 0.0;
  double sigma2 = 0.0;
  double m_up = 0.0, m_down = 0.0;
  double g_up = 0.0, g_down = 0.0;
  Tick k0 = 0;
  bool seeded = false;
  Tick samples = 0;
  std::optional<Tick> last_detection;
  bool reseeded_after_episode = true;
  /// (tick, cumulative sums before that tick's increment) since k0.
  struct Entry {
    Tick k;
    double m_up;
    double m_down;
  };
  std::vector<Entry> history;
};

/**
 * Two-sided CUSUM over one metric series.
 *
 * Each tick adds the up/down log-likelihood increments to the cumulative sums and the clipped decision
 * functions. Crossing alpha emits a ChangeEvent whose start estimate is the tick after the minimum of the
 * relevant cumulative sum since the last change, then both sums and decision functions restart from zero.
 * The mean and variance adapt only while both decision functions sit at zero.
 */
class CusumDetector {
 public:
  explicit CusumDetector(std::string metric_id, CusumConfig cfg = {})
      : id_(std::move(metric_id)), cfg_(cfg) {
    cfg_.validate();
  }

  const CusumState& state() const { return st_; }
  const CusumConfig& config() const { return cfg_; }
  const std::string& metric_id() const { return id_; }

  /// Forget everything; the next sample seeds the mean and restarts the warm-up.
  void restart() { st_ = CusumState{}; }

  std::optional<ChangeEvent> update(Tick k, double x) {
    if (!std::isfinite(x)) throw InputError("CUSUM input must be finite");
    auto& s = st_;
    if (!s.seeded) {
      seed(k, x);
      return std::nullopt;
    }
    ++s.samples;
    if (s.samples <= cfg_.warmup) {
      adapt(x);
      s.k0 = k;
      return std::nullopt;
    }
    if (s.last_detection && !s.reseeded_after_episode && k - *s.last_detection >= cfg_.completion_window) {
      s.mu0 = x;
      s.reseeded_after_episode = true;
      s.k0 = k;
      s.history.clear();
      return std::nullopt;
    }

    s.history.push_back({k, s.m_up, s.m_down});
    const double d = std::abs(cfg_.delta_hat);
    const double sig2 = std::max(s.sigma2, cfg_.sigma2_floor);
    const double lam_up = (d / sig2) * (x - s.mu0 - d / 2.0);
    const double lam_down = -(d / sig2) * (x - s.mu0 + d / 2.0);
    s.m_up += lam_up;
    s.m_down += lam_down;
    s.g_up = std::max(s.g_up + lam_up, 0.0);
    s.g_down = std::max(s.g_down + lam_down, 0.0);

    if (s.g_up > cfg_.alpha || s.g_down > cfg_.alpha) {
      const Direction dir = (s.g_up - cfg_.alpha >= s.g_down - cfg_.alpha) ? Direction::up : Direction::down;
      ChangeEvent ev{id_, dir, k, start_estimate(dir), x};
      s.m_up = s.m_down = s.g_up = s.g_down = 0.0;
      s.k0 = k;
      s.history.clear();
      s.last_detection = k;
      s.reseeded_after_episode = false;
      return ev;
    }
    if (s.g_up == 0.0 && s.g_down == 0.0) adapt(x);
    return std::nullopt;
  }

 private:
  void seed(Tick k, double x) {
    st_ = CusumState{};
    st_.seeded = true;
    st_.samples = 1;
    st_.mu0 = x;
    st_.sigma2 = cfg_.sigma2_init.value_or(cfg_.sigma2_floor);
    st_.k0 = k;
  }

  void adapt(double x) {
    auto& s = st_;
    const double dev = x - s.mu0;
    s.sigma2 = std::max(cfg_.rho * s.sigma2 + (1.0 - cfg_.rho) * dev * dev, cfg_.sigma2_floor);
    s.mu0 = cfg_.rho * s.mu0 + (1.0 - cfg_.rho) * x;
  }

  Tick start_estimate(Direction dir) const {
    const auto& h = st_.history;
    auto it = std::min_element(h.begin(), h.end(), [dir](const CusumState::Entry& a, const CusumState::Entry& b) {
      return dir == Direction::up ? a.m_up < b.m_up : a.m_down < b.m_down;
    });
    return it == h.end() ? st_.k0 : it->k;
  }

  std::string id_;
  CusumConfig cfg_;
  CusumState st_;
};

struct Episode {
  std::string metric_id;
  Tick start = 0;  // earliest estimated start
  Tick end = 0;    // last detection
  int up_events = 0;
  int down_events = 0;

  bool overlaps(Tick lo, Tick hi) const { return start <= hi && end >= lo; }
};

/// Group one metric's events (tick order) into episodes: a gap of completion_window or more starts a new one.
inline std::vector<Episode> group_episodes(const std::vector<ChangeEvent>& events, Tick completion_window) {
  std::vector<Episode> out;
  const ChangeEvent* prev = nullptr;
  for (const auto& e : events) {
    if (prev && e.detected_at < prev->detected_at) throw InputError("events must be in tick order");
    if (!prev || e.detected_at - prev->detected_at >= completion_window) {
      out.push_back({e.metric_id, e.estimated_start, e.detected_at, 0, 0});
    }
    auto& ep = out.back();
    ep.start = std::min(ep.start, e.estimated_start);
    ep.end = std::max(ep.end, e.detected_at);
    (e.direction == Direction::up ? ep.up_events : ep.down_events) += 1;
    prev = &e;
  }
  return out;
}

/// Episodes for a mixed stream: events are split by metric id, grouped, then ordered by start.
inline std::vector<Episode> episode_manager(const std::vector<ChangeEvent>& events, Tick completion_window) {
  std::vector<std::string> ids;
  for (const auto& e : events)
    if (std::find(ids.begin(), ids.end(), e.metric_id) == ids.end()) ids.push_back(e.metric_id);
  std::vector<Episode> out;
  for (const auto& id : ids) {
    std::vector<ChangeEvent> mine;
    for (const auto& e : events)
      if (e.metric_id == id) mine.push_back(e);
    auto eps = group_episodes(mine, completion_window);
    out.insert(out.end(), eps.begin(), eps.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const Episode& a, const Episode& b) { return a.start < b.start; });
  return out;
}

}  // namespace upmu::detect
