#include "cvflow/projection.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace cvflow;

namespace {

// Nearest feasible point on a uniform grid over A, found by exhaustive search.
Vector grid_nearest(const ConstraintSet& cs, const Vector& a, int n = 400) {
  Vector best = a;
  double best_d = std::numeric_limits<double>::infinity();
  Vector g(2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      g << -1.0 + 2.0 * (i + 0.5) / n, -1.0 + 2.0 * (j + 0.5) / n;
      const double r2 = g.squaredNorm();
      bool ok = false;
      if (cs.id() == "R+L2") ok = r2 <= 0.05;
      if (cs.id() == "R+D") ok = r2 <= 0.05 && r2 >= 0.04;
      if (!ok) continue;
      const double d = (g - a).norm();
      if (d < best_d) {
        best_d = d;
        best = g;
      }
    }
  }
  return best;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

Vector random_in_box(Rng& rng, int d) {
  Vector a(d);
  for (int i = 0; i < d; ++i) a(i) = rng.uniform(-1, 1);
  return a;
}

}  // namespace

TEST(Projection, RL2RadialExample) {
  const ProjectionResult r = project(vec({0.3, 0.4}), Vector(), catalog::r_l2());
  EXPECT_EQ(r.method, ProjectionMethod::ClosedForm);
  const double k = std::sqrt(0.05) / 0.5;
  EXPECT_NEAR(r.action(0), 0.3 * k, 1e-12);
  EXPECT_NEAR(r.action(1), 0.4 * k, 1e-12);
  EXPECT_NEAR(r.action(0), 0.1342, 1e-4);
  EXPECT_NEAR(r.action(1), 0.1789, 1e-4);
  EXPECT_LE(r.residual_cv, 1e-6);
  const Vector g = grid_nearest(catalog::r_l2(), vec({0.3, 0.4}));
  EXPECT_LE((r.action - vec({0.3, 0.4})).norm(), (g - vec({0.3, 0.4})).norm() + 1e-3);
}

TEST(Projection, FeasibleInputUnchanged) {
  const Vector a = vec({0.1, -0.05});
  const ProjectionResult r = project(a, Vector(), catalog::r_l2());
  EXPECT_EQ(r.action, a);
  EXPECT_EQ(r.iterations, 0);
}

TEST(Projection, AnnulusOriginTieBreaksAlongFirstAxis) {
  const ProjectionResult r = project(vec({0.0, 0.0}), Vector(), catalog::r_d());
  EXPECT_EQ(r.method, ProjectionMethod::ClosedForm);
  EXPECT_NEAR(r.action(0), 0.2, 1e-12);
  EXPECT_EQ(r.action(1), 0.0);
}

TEST(Projection, AnnulusProjectsToNearestShell) {
  const ProjectionResult in = project(vec({0.1, 0.0}), Vector(), catalog::r_d());
  EXPECT_NEAR(in.action.squaredNorm(), 0.04, 1e-12);
  const ProjectionResult out = project(vec({0.6, 0.8}), Vector(), catalog::r_d());
  EXPECT_NEAR(out.action.squaredNorm(), 0.05, 1e-12);
  EXPECT_NEAR(out.action(1) / out.action(0), 0.8 / 0.6, 1e-12);
}

TEST(Projection, MinimalAgainstGridOnRL2AndRD) {
  Rng rng(1);
  for (const ConstraintSet& cs : {catalog::r_l2(), catalog::r_d()}) {
    for (int q = 0; q < 20; ++q) {
      const Vector a = random_in_box(rng, 2);
      const Vector p = project(a, Vector(), cs).action;
      const Vector g = grid_nearest(cs, a);
      EXPECT_LE((p - a).norm(), (g - a).norm() + 1e-3) << cs.id();
      EXPECT_LE(cs.cv(p, Vector()), 1e-6);
    }
  }
}

TEST(Projection, HalfspaceFormula) {
  // a0 + 2 a1 <= 0.5
  ConstraintFunction f{{Term::of(TermKind::Linear, 0, 1.0), Term::of(TermKind::Linear, 1, 2.0)}, 0.5};
  const ConstraintSet cs("hs", 2, 0, Convexity::Convex, {f});
  const Vector a = vec({0.5, 0.5});
  const ProjectionResult r = project(a, Vector(), cs);
  const Vector w = vec({1.0, 2.0});
  const Vector expect = a - (w.dot(a) - 0.5) / w.squaredNorm() * w;
  EXPECT_EQ(r.method, ProjectionMethod::ClosedForm);
  EXPECT_NEAR((r.action - expect).norm(), 0.0, 1e-12);
}

TEST(Projection, BoxConstraintIsIdentityOnA) {
  const Vector a = vec({0.9, -1.0});
  EXPECT_EQ(project(a, Vector(), catalog::box(2)).action, a);
}

TEST(Projection, ConvexIntersectionUsesDykstraAndIsFeasible) {
  Rng rng(2);
  const ConstraintSet cs = catalog::o_s(3);
  int dykstra = 0;
  for (int i = 0; i < 200; ++i) {
    const Vector s = cs.sample_states(1, rng).row(0).transpose();
    const Vector a = random_in_box(rng, 3);
    const ProjectionResult r = project(a, s, cs);
    EXPECT_LE(r.residual_cv, 1e-6);
    EXPECT_TRUE(proj::in_box(r.action, 1e-9));
    dykstra += r.method == ProjectionMethod::Dykstra && r.iterations > 0;
  }
  EXPECT_GT(dykstra, 0);
}

TEST(Projection, ConvexFamiliesFeasibleOnRandomInputs) {
  Rng rng(3);
  for (const ConstraintSet& cs : {catalog::r_l2(), catalog::m(3), catalog::o_s(3), catalog::hc_o(6),
                                  catalog::linear_statewise(2, 1, 0.005)}) {
    for (int i = 0; i < 1000; ++i) {
      const Vector s = cs.feature_dim() ? Vector(cs.sample_states(1, rng).row(0).transpose()) : Vector();
      const Vector a = random_in_box(rng, cs.action_dim());
      const ProjectionResult r = project(a, s, cs);
      if (cs.id().rfind("linear-statewise", 0) == 0) {
        // Random features may make C(s) ∩ A empty; only check the certified cases.
        if (r.residual_cv > 1e-6) continue;
      }
      ASSERT_LE(r.residual_cv, 1e-6) << cs.id() << " input " << a.transpose();
    }
  }
}

TEST(Projection, IdempotentOnClosedFormAndDykstraPaths) {
  Rng rng(4);
  for (const ConstraintSet& cs : {catalog::r_l2(), catalog::r_d(), catalog::o_s(3), catalog::hc_o(6)}) {
    for (int i = 0; i < 100; ++i) {
      const Vector s = cs.feature_dim() ? Vector(cs.sample_states(1, rng).row(0).transpose()) : Vector();
      const Vector a = random_in_box(rng, cs.action_dim());
      const Vector p1 = project(a, s, cs).action;
      const Vector p2 = project(p1, s, cs).action;
      EXPECT_LT((p1 - p2).cwiseAbs().maxCoeff(), 1e-6) << cs.id();
    }
  }
}

TEST(Projection, UnrecognizedNonconvexFallsBackToPenaltyDescent) {
  // a0 * a0 >= 0.25 written with a negative square plus a linear term on the other axis.
  ConstraintFunction f{{Term::of(TermKind::Square, 0, -1.0), Term::of(TermKind::Linear, 1, 0.1)}, -0.25};
  const ConstraintSet cs("odd", 2, 0, Convexity::Nonconvex, {f});
  const Vector a = vec({0.1, 0.0});
  const ProjectionResult r = project(a, Vector(), cs);
  EXPECT_EQ(r.method, ProjectionMethod::PenaltyGd);
  EXPECT_GT(r.iterations, 0);
  EXPECT_LE(r.residual_cv, 1e-3);
  EXPECT_TRUE(proj::in_box(r.action));
  EXPECT_EQ(to_string(r.method), "penalty-gd");
}

TEST(Projection, RejectsWrongDimension) {
  EXPECT_THROW(project(vec({0.1, 0.2, 0.3}), Vector(), catalog::r_l2()), ShapeError);
}

TEST(Feasible, SimpleCases) {
  EXPECT_TRUE(feasible(vec({0.0, 0.0}), Vector(), catalog::r_l2()));
  EXPECT_FALSE(feasible(vec({1.0, 1.0}), Vector(), catalog::r_l2()));
}

TEST(Feasible, AgreesWithDirectEvaluation) {
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    const Vector a = random_in_box(rng, 2);
    const double r2 = a(0) * a(0) + a(1) * a(1);
    EXPECT_EQ(feasible(a, Vector(), catalog::r_l2()), r2 <= 0.05 + 1e-6);
    EXPECT_EQ(feasible(a, Vector(), catalog::r_d()),
              std::max(r2 - 0.05, 0.0) + std::max(0.04 - r2, 0.0) <= 1e-6);
  }
}
