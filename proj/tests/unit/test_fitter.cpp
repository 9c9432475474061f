#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "fluxfit/fitter.hpp"

using namespace fluxfit;

namespace {

const QubitParams truth{1.5, 0.7, 6.5};

const SpectrumPointSet& reference() {
  static const auto r = pure_spectrum(truth);
  return r;
}

double rel(double a, double b) { return std::abs(a - b) / std::abs(b); }

}  // namespace

TEST(Residuals, VanishAtTruthAndShiftWithData) {
  const auto r = residuals(reference(), truth);
  ASSERT_EQ(r.size(), reference().size());
  for (double v : r) EXPECT_NEAR(v, 0.0, 1e-9);
  auto shifted = reference();
  for (auto& p : shifted.points) p.frequency += 0.01;
  for (double v : residuals(shifted, truth)) EXPECT_NEAR(v, -0.01, 1e-9);
}

TEST(Residuals, RejectUnlabeledAndEmpty) {
  auto s = reference();
  s.points[3].label.reset();
  EXPECT_THROW(residuals(s, truth), ConfigError);
  EXPECT_THROW(residuals(SpectrumPointSet{}, truth), ConfigError);
  EXPECT_THROW(residuals(reference(), {0.0, 0.7, 6.5}), InvalidParameterError);
}

TEST(Jacobian, AnalyticMatchesFiniteDifferences) {
  const QubitParams p{1.3, 0.8, 6.0};
  const auto a = residual_jacobian(reference(), p, JacobianMode::analytic);
  const auto n = residual_jacobian(reference(), p, JacobianMode::numeric, 1e-6);
  const auto n2 = residual_jacobian(reference(), p, JacobianMode::numeric, 5e-7);
  ASSERT_EQ(a.rows(), static_cast<Eigen::Index>(reference().size()));
  ASSERT_EQ(a.cols(), 3);
  EXPECT_LT((a - n).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, a.cwiseAbs().maxCoeff()));
  EXPECT_LT((n - n2).cwiseAbs().maxCoeff(), 1e-5 * std::max(1.0, a.cwiseAbs().maxCoeff()));
}

TEST(Fit, TruthIsAFixedPoint) {
  const auto f = fit(reference(), truth);
  EXPECT_TRUE(f.converged);
  EXPECT_LT(f.rss, 1e-16);
  EXPECT_NEAR(f.params.e_c, truth.e_c, 1e-8);
  EXPECT_NEAR(f.params.e_l, truth.e_l, 1e-8);
  EXPECT_NEAR(f.params.e_j, truth.e_j, 1e-8);
  EXPECT_FALSE(f.clamped);
  EXPECT_FALSE(f.underdetermined);
}

TEST(Fit, ConvergesFromNearbyGuess) {
  const QubitParams guess{1.28, 0.67, 7.05};
  const auto f = fit(reference(), guess);
  EXPECT_TRUE(f.converged);
  EXPECT_LT(rel(f.params.e_c, truth.e_c), 1e-6);
  EXPECT_LT(rel(f.params.e_l, truth.e_l), 1e-6);
  EXPECT_LT(rel(f.params.e_j, truth.e_j), 1e-6);
  EXPECT_LE(f.n_iterations, 50);
  EXPECT_EQ(f.initial, guess);
  EXPECT_EQ(f.n_points, reference().size());
  std::size_t counted = 0;
  for (const auto& [t, s] : f.per_transition) {
    counted += s.count;
    EXPECT_LT(s.max_abs, 1e-6);
  }
  EXPECT_EQ(counted, reference().size());
}

TEST(Fit, NumericJacobianAgrees) {
  FitConfig cfg;
  cfg.jacobian = JacobianMode::numeric;
  const auto f = fit(reference(), {1.28, 0.67, 7.05}, cfg);
  EXPECT_LT(rel(f.params.e_j, truth.e_j), 1e-5);
}

TEST(Fit, IterationBudgetIsRespected) {
  FitConfig cfg;
  cfg.max_iterations = 2;
  const auto f = fit(reference(), {1.0, 1.0, 5.0}, cfg);
  EXPECT_LE(f.n_iterations, 2);
  EXPECT_FALSE(f.converged);
  EXPECT_LE(f.rss, fit(reference(), {1.0, 1.0, 5.0}, [] {
                     FitConfig c;
                     c.max_iterations = 1;
                     return c;
                   }()).rss);
}

TEST(Fit, UnderdeterminedIsFlagged) {
  SpectrumPointSet two;
  two.points = {reference().points[0], reference().points[1]};
  const auto f = fit(two, {1.4, 0.75, 6.3});
  EXPECT_TRUE(f.underdetermined);
  EXPECT_EQ(f.n_points, 2u);
}

TEST(Fit, BoundsClampAndReject) {
  const auto f = fit(reference(), {4.0, 0.7, 6.5});
  EXPECT_TRUE(f.clamped);
  EXPECT_LE(f.params.e_c, 3.75);
  EXPECT_THROW(fit(reference(), {8.0, 0.7, 6.5}), InvalidParameterError);
  FitConfig bad;
  bad.max_iterations = 0;
  EXPECT_THROW(fit(reference(), truth, bad), ConfigError);
}

TEST(Metrics, ErrorAndCost) {
  EXPECT_DOUBLE_EQ(error_metric(truth, truth), 0.0);
  EXPECT_NEAR(error_metric({1.75, 0.89, 7.3}, truth), 0.1, 1e-12);
  EXPECT_NEAR(cost_metric(truth, reference()), 0.0, 1e-18);
  const QubitParams off{1.45, 0.72, 6.6};
  const auto r = residuals(reference(), off);
  double s = 0;
  for (double v : r) s += v * v;
  EXPECT_NEAR(cost_metric(off, reference()), s / r.size(), 1e-15);
  const auto m = metrics(off, truth, reference());
  EXPECT_EQ(m.n_points, reference().size());
  EXPECT_THROW(cost_metric(truth, SpectrumPointSet{}), ConfigError);
}

TEST(Metrics, CostEqualsFitRssPerPoint) {
  FitConfig cfg;
  cfg.max_iterations = 3;
  const auto f = fit(reference(), {1.3, 0.8, 6.0}, cfg);
  EXPECT_NEAR(f.rss / f.n_points, cost_metric(f.params, reference()), 1e-12 * std::max(1.0, f.rss));
}

TEST(Comparison, PopulationStatistics) {
  const auto [m, s] = detail::mean_std({1.0, 3.0});
  EXPECT_DOUBLE_EQ(m, 2.0);
  EXPECT_DOUBLE_EQ(s, 1.0);
}

TEST(Comparison, DeterministicAndWellFormed) {
  ComparisonConfig cfg;
  cfg.n_random = 3;
  cfg.fit.max_iterations = 2;
  cfg.seed = 11;
  const auto cases = comparison_cases(2, {}, 11);
  ASSERT_EQ(cases.size(), 2u);
  const InitialGuess guess = [&](const SpectrumPointSet&) { return QubitParams{1.5, 1.0, 6.0}; };
  const auto a = compare_random_vs_ml(cases, cfg, guess);
  const auto b = compare_random_vs_ml(cases, cfg, guess);
  std::ostringstream sa, sb;
  write_comparison(sa, a);
  write_comparison(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(a.random.n_fits, 6u);
  EXPECT_EQ(a.ml.n_fits, 2u);
  for (const auto& row : a.rows) {
    EXPECT_GT(row.n_reference, 0u);
    EXPECT_EQ(row.guess, (QubitParams{1.5, 1.0, 6.0}));
  }
  cfg.seed = 12;
  std::ostringstream sc;
  write_comparison(sc, compare_random_vs_ml(cases, cfg, guess));
  EXPECT_NE(sa.str(), sc.str());
}

TEST(Scan, GridShapeAndTruthNode) {
  ScanAxes axes{1, {0.6, 0.7, 0.8}, 2, {6.0, 6.5}};
  FitConfig cfg;
  cfg.max_iterations = 3;
  const auto c = scan_initial_grid(truth, axes, 1.5, cfg);
  ASSERT_EQ(c.error.rows(), 3);
  ASSERT_EQ(c.error.cols(), 2);
  EXPECT_EQ(c.fixed_axis, 0);
  EXPECT_NEAR(c.error(1, 1), 0.0, 1e-9);
  EXPECT_DOUBLE_EQ(c.log10_cost(1, 1), log_cost_floor);
  for (Eigen::Index i = 0; i < c.log10_cost.size(); ++i) EXPECT_GE(c.log10_cost.data()[i], log_cost_floor);
  std::ostringstream os;
  write_contour(os, c);
  const auto text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3 + 6);
  axes.y_axis = 1;
  EXPECT_THROW(scan_initial_grid(truth, axes, 1.5, cfg), ConfigError);
}

TEST(Scan, GridSpecs) {
  EXPECT_EQ(parse_grid_spec("0:1:3"), (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_THROW(parse_grid_spec("0:1"), ConfigError);
  EXPECT_THROW(parse_grid_spec("0:1:2.5"), ConfigError);
  EXPECT_EQ(parse_axis("ej"), 2);
  EXPECT_THROW(parse_axis("e_x"), ConfigError);
}
