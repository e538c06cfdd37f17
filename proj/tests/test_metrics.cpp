#include "cvflow/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace cvflow;

namespace {

FlowModel identity_flow(int d, BaseKind base, int sd = 0) {
  FlowConfig c;
  c.action_dim = d;
  c.state_dim = sd;
  c.layers = 4;
  c.hidden = 8;
  c.base = base;
  Rng rng(0);
  return FlowModel(c, rng);
}

// Every coupling layer contracts its free coordinates by exp(-clamp).
FlowModel collapsed_flow() {
  FlowModel f = identity_flow(2, BaseKind::Uniform);
  for (CouplingLayer& l : f.layers()) {
    Parameter& bias = l.conditioner().layers().back().bias();
    bias.value.leftCols(2).setConstant(-100.0);
  }
  return f;
}

// P(|tanh(z)|^2 <= r2) for z uniform on [-1, 1]^2, by midpoint quadrature.
double identity_uniform_accuracy(double r2, int n = 2000) {
  double hits = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = std::tanh(-1.0 + 2.0 * (i + 0.5) / n);
    for (int j = 0; j < n; ++j) {
      const double b = std::tanh(-1.0 + 2.0 * (j + 0.5) / n);
      hits += a * a + b * b <= r2;
    }
  }
  return hits / (static_cast<double>(n) * n);
}

MetricOptions opts(long n, int states = 32) {
  MetricOptions o;
  o.n = n;
  o.n_states = states;
  return o;
}

}  // namespace

TEST(Accuracy, BoxConstraintIsOne) {
  Rng rng(1);
  EXPECT_EQ(accuracy(identity_flow(2, BaseKind::Gaussian), catalog::box(2), rng, opts(5000)), 1.0);
}

TEST(Accuracy, IdentityUniformMatchesAreaOracle) {
  Rng rng(2);
  const long n = 100000;
  const double acc = accuracy(identity_flow(2, BaseKind::Uniform), catalog::r_l2(), rng, opts(n));
  const double p = identity_uniform_accuracy(0.05);
  EXPECT_NEAR(p, 0.0407, 5e-4);
  EXPECT_NEAR(acc, p, 4.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Accuracy, RejectsEmptySampleAndIsDeterministic) {
  Rng rng(3);
  const FlowModel f = identity_flow(2, BaseKind::Gaussian);
  EXPECT_THROW(accuracy(f, catalog::r_l2(), rng, opts(0)), std::invalid_argument);
  Rng a(4), b(4);
  const double x = accuracy(f, catalog::r_l2(), a, opts(3000));
  EXPECT_EQ(x, accuracy(f, catalog::r_l2(), b, opts(3000)));
  EXPECT_GE(x, 0.0);
  EXPECT_LE(x, 1.0);
}

TEST(Accuracy, StateConditionedFamiliesInUnitInterval) {
  Rng rng(5);
  for (const ConstraintSet& cs : {catalog::m(3), catalog::o_s(3), catalog::hc_o(6)}) {
    const double a = accuracy(identity_flow(cs.action_dim(), BaseKind::Gaussian, cs.feature_dim()), cs, rng, opts(2000));
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Accuracy, MonteCarloConsistencyWhenDoublingN) {
  const FlowModel f = identity_flow(2, BaseKind::Uniform);
  const double p = identity_uniform_accuracy(0.05);
  int ok = 0;
  const int trials = 40;
  for (int t = 0; t < trials; ++t) {
    Rng r1(100 + t), r2(1000 + t);
    const long n = 4000;
    const double a = accuracy(f, catalog::r_l2(), r1, opts(n));
    const double b = accuracy(f, catalog::r_l2(), r2, opts(2 * n));
    const double se = std::sqrt(p * (1 - p) / n);
    ok += std::abs(a - b) < 3.0 * se;
  }
  EXPECT_GE(ok, static_cast<int>(0.95 * trials));
}

TEST(Recall, IdentityFlowCoversEverything) {
  Rng rng(6);
  EXPECT_EQ(recall(identity_flow(2, BaseKind::Uniform), catalog::r_l2(), rng, opts(5000)), 1.0);
}

TEST(Recall, IdentityOnBoxMatchesTanhOracle) {
  Rng rng(7);
  const long n = 40000;
  const double r = recall(identity_flow(2, BaseKind::Uniform), catalog::box(2), rng, opts(n));
  const double p = std::tanh(1.0) * std::tanh(1.0);  // both |atanh(a_i)| <= 1
  EXPECT_NEAR(r, p, 4.0 * std::sqrt(p * (1 - p) / n));
}

TEST(Recall, CollapsedFlowIsNearZero) {
  Rng rng(8);
  const FlowModel f = collapsed_flow();
  const Matrix img = f.sample(1000, Matrix::Zero(1000, 0), rng);
  EXPECT_LT(img.cwiseAbs().maxCoeff(), std::exp(-4.0) + 1e-9);  // two contractions per coordinate
  EXPECT_LT(recall(f, catalog::r_l2(), rng, opts(5000)), 0.01);
}

TEST(Recall, MatchesIndependentRejectionSampler) {
  FlowTrainConfig c;
  c.epochs = 200;
  c.batch = 256;
  c.hidden = 16;
  c.layers = 4;
  c.base = BaseKind::Uniform;
  const FlowModel f = pretrain(c, catalog::r_l2()).model;
  Rng rng(9);
  const long n = 8000;
  const double r = recall(f, catalog::r_l2(), rng, opts(n, 1));

  // Polar rejection sampler on the disk, then the plain inverse.
  Rng other(10);
  long covered = 0;
  for (long i = 0; i < n;) {
    const double x = other.uniform(-1, 1), y = other.uniform(-1, 1);
    if (x * x + y * y > 0.05) continue;
    ++i;
    Matrix a(1, 2);
    a << x, y;
    covered += (f.inverse(a, Matrix::Zero(1, 0)).values.array().abs() <= 1.0).all();
  }
  const double oracle = static_cast<double>(covered) / n;
  const double se = std::sqrt(std::max(oracle * (1 - oracle), 1e-4) / n);
  EXPECT_NEAR(r, oracle, 2.0 * std::sqrt(2.0) * se);
}

TEST(Recall, RequiresUniformBaseAndTractableConstraint) {
  Rng rng(11);
  EXPECT_THROW(recall(identity_flow(2, BaseKind::Gaussian), catalog::r_l2(), rng, opts(10)), std::invalid_argument);
  MetricOptions o = opts(1000);
  o.max_attempts = 50;
  EXPECT_THROW(recall(identity_flow(2, BaseKind::Uniform), catalog::r_d(), rng, o), ConstraintTooTight);
}

TEST(QualityReport, F1IdentityAndGaussianOmitsRecall) {
  Rng rng(12);
  const FlowQualityReport u = quality_report(identity_flow(2, BaseKind::Uniform), catalog::r_l2(), rng, opts(4000));
  ASSERT_TRUE(u.recall.has_value());
  EXPECT_DOUBLE_EQ(u.f1, 2 * u.accuracy * *u.recall / (u.accuracy + *u.recall));
  EXPECT_EQ(u.constraint, "R+L2");
  EXPECT_EQ(u.n_samples, 4000);
  const FlowQualityReport g = quality_report(identity_flow(2, BaseKind::Gaussian), catalog::r_l2(), rng, opts(4000));
  EXPECT_FALSE(g.recall.has_value());
  EXPECT_EQ(f1_score(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(f1_score(0.5, 1.0), 2.0 / 3.0);
}

TEST(CvStats, Arithmetic) {
  std::vector<double> log(100, 0.0);
  const CvStats none = cv_stats(log);
  EXPECT_EQ(none.count_pct, 0.0);
  EXPECT_EQ(none.magnitude, 0.0);
  log[3] = 0.1;
  log[50] = 0.2;
  log[99] = 0.3;
  const CvStats st = cv_stats(log);
  EXPECT_DOUBLE_EQ(st.count_pct, 3.0);
  EXPECT_NEAR(st.magnitude, 0.2, 1e-15);
  EXPECT_THROW(cv_stats({}), std::invalid_argument);
}

TEST(CvStats, FromCsvMatchesInMemory) {
  const auto path = (std::filesystem::temp_directory_path() / "cvflow_cv.csv").string();
  {
    std::ofstream out(path);
    out << "step,cv_pre,cv_post\n0,0,0\n1,0.25,0\n2,0,0\n3,0.75,0\n";
  }
  const CvStats st = cv_stats_from_csv(path);
  EXPECT_DOUBLE_EQ(st.count_pct, 50.0);
  EXPECT_DOUBLE_EQ(st.magnitude, 0.5);
  std::filesystem::remove(path);
}

TEST(Comparison, EpochZeroIdenticalAndCsvPaired) {
  ComparisonConfig c;
  c.train.epochs = 20;
  c.train.batch = 64;
  c.train.hidden = 8;
  c.train.layers = 2;
  c.train.base = BaseKind::Uniform;
  c.eval_every = 10;
  c.eval = opts(500, 4);
  c.final = opts(500, 4);
  c.csv_path = (std::filesystem::temp_directory_path() / "cvflow_compare.csv").string();
  const ComparisonResult r = compare_standard_flow(catalog::r_l2(), c);
  ASSERT_EQ(r.rows.size(), 6u);
  EXPECT_EQ(r.rows[0].epoch, 0);
  EXPECT_EQ(r.rows[1].epoch, 0);
  EXPECT_EQ(r.rows[0].arm, "cvflow");
  EXPECT_EQ(r.rows[1].arm, "standard");
  EXPECT_EQ(r.rows[0].report.accuracy, r.rows[1].report.accuracy);
  EXPECT_EQ(*r.rows[0].report.recall, *r.rows[1].report.recall);
  const csv::Table t = csv::read(c.csv_path);
  EXPECT_EQ(t.header, (std::vector<std::string>{"epoch", "arm", "accuracy", "recall", "f1"}));
  ASSERT_EQ(t.rows.size(), 6u);
  for (std::size_t i = 0; i < t.rows.size(); i += 2) EXPECT_EQ(t.rows[i][0], t.rows[i + 1][0]);
  std::filesystem::remove(c.csv_path);
}

TEST(Comparison, NllLossUniformPenaltyVanishesInsideBox) {
  FlowModel f = identity_flow(2, BaseKind::Uniform);
  Matrix a(2, 2);
  a << 0.1, -0.2, 0.3, 0.05;
  ad::Tape t;
  const double loss = nll_loss(t, f, a, Matrix::Zero(2, 0), 1000.0).item();
  // Inside the box only the inverse logdet (unsquash) contributes.
  double expect = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) expect -= std::log(1.0 / (1.0 - a.data()[i] * a.data()[i]));
  EXPECT_NEAR(loss, expect / 2.0, 1e-12);
}
