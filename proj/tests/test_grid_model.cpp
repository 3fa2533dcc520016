#include <gtest/gtest.h>

#include <random>

#include <Eigen/Eigenvalues>

#include "upmu/feeder_sim.hpp"
#include "upmu/grid_model.hpp"
#include "upmu/io.hpp"

using namespace upmu;
using namespace upmu::grid;

namespace {

const std::string kData = UPMU_DATA_DIR;

cplx crandn(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  const double re = n(rng);
  return {re, n(rng)};
}

MatXc random_complex(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  MatXc m(r, c);
  for (auto& v : m.reshaped()) v = crandn(rng);
  return m;
}

// Passive n x n impedance: Hermitian part positive definite, complex symmetric.
MatXc random_passive_symmetric(std::mt19937_64& rng, int n) {
  MatXd a(n, n), b(n, n);
  std::normal_distribution<double> g;
  for (auto& v : a.reshaped()) v = g(rng);
  for (auto& v : b.reshaped()) v = g(rng);
  const MatXd r = a * a.transpose() + 0.1 * MatXd::Identity(n, n);
  const MatXd x = b * b.transpose() + 0.1 * MatXd::Identity(n, n);
  return r.cast<cplx>() + cplx(0, 1) * x.cast<cplx>();
}

GridTopology two_bus(const Mat3c& y, const Mat3c& ysh, std::vector<int> metered = {1}) {
  GridTopology t;
  t.buses = {{1, "1", 1.0}, {2, "2", 1.0}};
  LineModel l;
  l.line_id = "1-2";
  l.from_bus = 1;
  l.to_bus = 2;
  l.y_series = y;
  l.y_shunt = ysh;
  t.lines = {l};
  t.metered_buses = std::move(metered);
  return t;
}

GridTopology ieee34() { return topology_from_json(io::read_json_file(kData + "/ieee34.json")); }

}  // namespace

TEST(Kron, NoCouplingPassesThrough) {
  std::mt19937_64 rng(1);
  MatXc z = random_complex(rng, 4, 4);
  z.block(0, 3, 3, 1).setZero();
  z.block(3, 0, 1, 3).setZero();
  EXPECT_LT((kron_reduce(z) - z.topLeftCorner(3, 3)).norm(), 1e-15);
}

TEST(Kron, Identity) {
  EXPECT_LT((kron_reduce(MatXc::Identity(4, 4)) - Mat3c::Identity()).norm(), 1e-15);
}

TEST(Kron, MatchesGroundedNeutralSolve) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    const MatXc z = random_passive_symmetric(rng, 4);
    // Oracle: with the neutral at zero potential, the phase block of the 4-wire admittance maps V_abc to I_abc.
    const MatXc y4 = z.inverse();
    const Mat3c oracle = y4.topLeftCorner(3, 3).inverse();
    EXPECT_LT((kron_reduce(z) - oracle).norm() / oracle.norm(), 1e-12);
  }
}

TEST(Kron, SingularNeutral) {
  MatXc z = MatXc::Identity(4, 4);
  z(3, 3) = 0.0;
  EXPECT_THROW(kron_reduce(z), NumericError);
}

TEST(Kron, PreservesPassivity) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Mat3c red = kron_reduce(random_passive_symmetric(rng, 4));
    const Eigen::Matrix3d herm = ((red + red.adjoint()) / 2.0).real();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(herm);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
  }
}

TEST(LineModel, SinglePhaseScalarInverse) {
  PhaseImpedanceSpec s;
  s.line_id = "x";
  s.phasing = PhaseSet::parse("a");
  s.z_per_length = MatXc::Zero(3, 3);
  s.z_per_length(0, 0) = cplx(0.3, 0.6);
  s.length = 1.0;
  const Bases b{2.0, 4.0};  // z_base = 1
  const auto lm = build_line_model(s, 1, 2, b);
  EXPECT_LT(std::abs(lm.y_series(0, 0) - 1.0 / cplx(0.3, 0.6)), 1e-15);
  Mat3c rest = lm.y_series;
  rest(0, 0) = 0.0;
  EXPECT_EQ(rest.norm(), 0.0);

  const auto lm2 = build_line_model(s, 1, 2, Bases{24.9, 1.0});
  EXPECT_LT(std::abs(lm2.y_series(0, 0) - 24.9 * 24.9 / cplx(0.3, 0.6)), 1e-12);
}

TEST(LineModel, ZeroLengthRejected) {
  PhaseImpedanceSpec s;
  s.line_id = "x";
  s.z_per_length = MatXc::Identity(3, 3);
  s.length = 0.0;
  EXPECT_THROW(build_line_model(s, 1, 2, Bases{}), InputError);
}

TEST(LineModel, ShuntSplitsPerEnd) {
  PhaseImpedanceSpec s;
  s.line_id = "x";
  s.z_per_length = MatXc::Identity(3, 3);
  s.b_per_length = MatXd::Identity(3, 3) * 2e-6;
  s.length = 3.0;
  const auto lm = build_line_model(s, 1, 2, Bases{1.0, 1.0});
  EXPECT_LT(std::abs(lm.y_shunt(1, 1) - cplx(0.0, 3e-6)), 1e-20);
}

TEST(LineModel, SingularPresentBlock) {
  PhaseImpedanceSpec s;
  s.line_id = "x";
  s.z_per_length = MatXc::Zero(3, 3);
  s.z_per_length(0, 0) = 1.0;
  s.length = 1.0;
  EXPECT_THROW(build_line_model(s, 1, 2, Bases{}), NumericError);
}

TEST(Assemble, TwoBusBlocks) {
  std::mt19937_64 rng(4);
  const Mat3c y = random_passive_symmetric(rng, 3).inverse(), ysh = cplx(0, 0.01) * Mat3c::Identity();
  const auto s = assemble_system(two_bus(y, ysh));
  EXPECT_LT((s.ybus.block(0, 0, 3, 3) - (y + ysh)).norm(), 1e-15);
  EXPECT_LT((s.ybus.block(3, 3, 3, 3) - (y + ysh)).norm(), 1e-15);
  EXPECT_LT((s.ybus.block(0, 3, 3, 3) + y).norm(), 1e-15);
  EXPECT_LT((s.ybus.block(3, 0, 3, 3) + y).norm(), 1e-15);
  EXPECT_EQ(s.h.rows(), 6);
  EXPECT_EQ(s.h.cols(), 12);
  EXPECT_LT((s.h.leftCols(6) - MatXc::Identity(6, 6)).norm(), 0.0 + 1e-300);
  EXPECT_LT((s.h.rightCols(6) + s.ybus).norm(), 1e-300);
}

TEST(Assemble, AllMetered) {
  std::mt19937_64 rng(5);
  const Mat3c y = random_passive_symmetric(rng, 3).inverse();
  const auto s = assemble_system(two_bus(y, Mat3c::Zero(), {1, 2}));
  EXPECT_EQ(s.h_u.cols(), 0);
  EXPECT_EQ(s.h_a.cols(), 12);
  // Injections then voltages of buses 1, 2: with every bus metered that is the identity permutation.
  EXPECT_LT((s.h_a - s.h).norm(), 1e-300);
}

TEST(Assemble, Ieee34Dimensions) {
  const auto t = ieee34();
  EXPECT_EQ(t.bus_count(), 34);
  EXPECT_EQ(t.lines.size(), 33u);
  EXPECT_EQ(t.metered_buses, (std::vector<int>{9, 19, 31}));
  const auto s = assemble_system(t);
  EXPECT_EQ(s.ybus.rows(), 102);
  EXPECT_EQ(s.h_a.rows(), 102);
  EXPECT_EQ(s.h_a.cols(), 18);
  EXPECT_EQ(s.h_u.cols(), 6 * 31);
  // Every H column lands in exactly one of H_a, H_u.
  std::vector<int> seen(static_cast<std::size_t>(s.h.cols()), 0);
  for (auto c : s.a_cols) ++seen[static_cast<std::size_t>(c)];
  for (auto c : s.u_cols) ++seen[static_cast<std::size_t>(c)];
  for (int v : seen) EXPECT_EQ(v, 1);
  EXPECT_LT((s.h_a - s.h * s.t_a.transpose().cast<cplx>()).norm(), 1e-300);
  EXPECT_LT((s.h_u - s.h * s.t_u.transpose().cast<cplx>()).norm(), 1e-300);
}

TEST(Assemble, FullRowRankUnmeasuredBlock) {
  for (const char* f : {"/ieee34.json", "/feeder12.json"}) {
    const auto s = assemble_system(topology_from_json(io::read_json_file(kData + f)));
    EXPECT_LT(left_null_projector(s.h_u).norm(), 1e-8) << f;
  }
}

TEST(Assemble, YbusRowSumsAreShunts) {
  const auto t = ieee34();
  const auto s = assemble_system(t);
  for (int i = 0; i < t.bus_count(); ++i) {
    Mat3c row = Mat3c::Zero();
    for (int j = 0; j < t.bus_count(); ++j) row += s.ybus.block(3 * i, 3 * j, 3, 3);
    Mat3c shunts = Mat3c::Zero();
    for (const auto* l : t.incident_lines(t.buses[static_cast<std::size_t>(i)].id)) shunts += l->y_shunt;
    EXPECT_LT((row - shunts).norm(), 1e-9 * std::max(1.0, s.ybus.block(3 * i, 3 * i, 3, 3).norm()));
  }
}

TEST(Assemble, PartitionRoundTrip) {
  std::mt19937_64 rng(6);
  const auto s = assemble_system(ieee34());
  const VecXc d = random_complex(rng, s.h.cols(), 1);
  EXPECT_EQ((s.reassemble(s.select_u(d), s.select_a(d)) - d).norm(), 0.0);
  // T^T T = I over the stacked selection.
  MatXd t(s.t_a.rows() + s.t_u.rows(), s.t_a.cols());
  t << s.t_u, s.t_a;
  EXPECT_EQ((t.transpose() * t - MatXd::Identity(t.cols(), t.cols())).norm(), 0.0);
}

TEST(Assemble, HomogeneousOnOwnSolve) {
  for (const char* f : {"/ieee34.json", "/feeder12.json"}) {
    const auto feeder = sim::feeder_from_json(io::read_json_file(kData + f));
    const auto sys = assemble_system(feeder.topology);
    const auto snap = sim::solve_quasi_steady(feeder, {});
    const VecXc d = snap.stacked();
    EXPECT_LT((sys.h * d).norm() / d.norm(), 1e-10) << f;
  }
}

TEST(SingularDirection, ExactNullRow) {
  MatXc h(3, 2);
  h << 1, 0, 0, 2, 0, 0;
  const VecXc u = smallest_left_singular_direction(h);
  EXPECT_NEAR(std::abs(u(2) - 1.0), 0.0, 1e-15);
  EXPECT_NEAR(std::abs(u(0)) + std::abs(u(1)), 0.0, 1e-15);
}

TEST(SingularDirection, MatchesEigenOracle) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const MatXc h = random_complex(rng, 6, 12);
    const auto dir = smallest_left_singular_directions(h, 1);
    const VecXc u = dir.u.col(0);
    EXPECT_NEAR(u.norm(), 1.0, 1e-12);
    EXPECT_NEAR((h.adjoint() * u).norm(), dir.sigma(0), 1e-10);
    Eigen::SelfAdjointEigenSolver<MatXc> es(h * h.adjoint());
    VecXc oracle = es.eigenvectors().col(0);
    fix_phase(oracle);
    EXPECT_LT((u - oracle).norm(), 1e-10);
    EXPECT_NEAR(dir.sigma(0), std::sqrt(es.eigenvalues()(0)), 1e-10);
  }
}

TEST(SingularDirection, TallMatrixGivesNullDirection) {
  std::mt19937_64 rng(8);
  const MatXc h = random_complex(rng, 12, 6);
  const auto dir = smallest_left_singular_directions(h, 1);
  EXPECT_EQ(dir.sigma(0), 0.0);
  EXPECT_LT((h.adjoint() * dir.u.col(0)).norm(), 1e-12);
}

TEST(SingularDirection, PhaseFixing) {
  VecXc u(3);
  u << cplx(0.1, 0.2), cplx(0.0, -0.9), cplx(0.3, 0.0);
  fix_phase(u);
  EXPECT_GT(u(1).real(), 0.0);
  EXPECT_EQ(u(1).imag(), 0.0);
}

TEST(SingularDirection, EmptyRejected) { EXPECT_THROW(smallest_left_singular_direction(MatXc(0, 3)), InputError); }

TEST(Topology, Feeder12HasKronReducedLateral) {
  const auto t = topology_from_json(io::read_json_file(kData + "/feeder12.json"));
  const auto& lat = t.line("7-8");
  EXPECT_EQ(lat.phasing, PhaseSet::all());
  EXPECT_GT(lat.y_series.norm(), 0.0);
  const auto& single = t.line("10-11");
  EXPECT_EQ(single.phasing, PhaseSet::parse("a"));
  EXPECT_EQ(t.bus_phases(11), PhaseSet::parse("a"));
  EXPECT_EQ(single.y_series(1, 1), cplx{});
}

TEST(Topology, TransformerUsesItsOwnBase) {
  const auto t = ieee34();
  const auto& x = t.line("20-21");
  const double zb = 4.16 * 4.16;
  EXPECT_LT(std::abs(x.y_series(0, 0) - zb / cplx(0.6576, 1.4121)), 1e-9);
}

TEST(Topology, Errors) {
  auto j = io::read_json_file(kData + "/feeder12.json");
  auto bad = j;
  bad["lines"][0]["config"] = "nope";
  EXPECT_THROW(topology_from_json(bad), InputError);
  bad = j;
  bad["lines"][0]["to"] = 99;
  EXPECT_THROW(topology_from_json(bad), InputError);
  bad = j;
  bad["metered"].push_back(77);
  EXPECT_THROW(topology_from_json(bad), InputError);
  bad = j;
  bad["lines"].erase(bad["lines"].begin());
  EXPECT_THROW(topology_from_json(bad), InputError);  // bus 1 disconnected
  bad = j;
  bad["lines"][0]["length"] = 0.0;
  EXPECT_THROW(topology_from_json(bad), InputError);
}

TEST(Topology, DeclaredSchedule) {
  const auto t = ieee34();
  const std::vector<DeclaredChange> ch{{10, "25-26", false}, {20, "25-26", true}};
  EXPECT_TRUE(declared_topology_at(t, ch, 9).line_index("25-26").has_value());
  const auto out = declared_topology_at(t, ch, 10);
  EXPECT_FALSE(out.line_index("25-26").has_value());
  EXPECT_EQ(out.lines.size(), 32u);
  EXPECT_NO_THROW(assemble_system(out));  // disconnected lateral is allowed for declared data
  EXPECT_TRUE(declared_topology_at(t, ch, 25).line_index("25-26").has_value());
}

TEST(Topology, UnmeasuredEstimateRecoversState) {
  const auto feeder = sim::feeder_from_json(io::read_json_file(kData + "/feeder12.json"));
  const auto sys = assemble_system(feeder.topology);
  const VecXc d = sim::solve_quasi_steady(feeder, {}).stacked();
  const VecXc d_u = estimate_unmeasured(sys, sys.select_a(d));
  // Underdetermined, so only consistency is guaranteed: H (T^T [d_u; d_a]) = 0.
  const VecXc full = sys.reassemble(d_u, sys.select_a(d));
  EXPECT_LT((sys.h * full).norm() / d.norm(), 1e-9);
}
