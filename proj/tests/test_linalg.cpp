#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include "test_util.hpp"

namespace dq {
namespace {

TEST(BuildHessian, GramWithoutDamping) {
  const Tensor2D x(2, 2, {1, 2, 3, 4});
  const Hessian h = build_hessian(x, 0.0);
  EXPECT_EQ(h.matrix(0, 0), 10.0);
  EXPECT_EQ(h.matrix(0, 1), 14.0);
  EXPECT_EQ(h.matrix(1, 0), 14.0);
  EXPECT_EQ(h.matrix(1, 1), 20.0);
  EXPECT_EQ(h.damping_lambda, 0.0);
  EXPECT_EQ(h.source_rows, 2u);
}

TEST(BuildHessian, DampingIsFractionOfMeanDiagonal) {
  const Hessian h = build_hessian(Tensor2D(2, 2, {1, 2, 3, 4}), 0.01);
  EXPECT_DOUBLE_EQ(h.damping_lambda, 0.15);
  EXPECT_DOUBLE_EQ(h.matrix(0, 0), 10.15);
  EXPECT_DOUBLE_EQ(h.matrix(1, 1), 20.15);
  EXPECT_EQ(h.matrix(0, 1), 14.0);
}

TEST(BuildHessian, ZeroRowIsUnusable) {
  EXPECT_THROW(build_hessian(Tensor2D(1, 3), 0.0), ValidationError);
  EXPECT_THROW(build_hessian(Tensor2D(0, 3), 0.01), ValidationError);
}

TEST(BuildHessian, RejectsNonFiniteInput) {
  EXPECT_THROW(Tensor2D(1, 2, {1.0, std::nan("")}), ValidationError);
  RowMatrix m(1, 1);
  m(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(Tensor2D::from_matrix(m), ValidationError);
}

TEST(BuildHessian, ExactlySymmetric) {
  Rng rng(7);
  const Hessian h = testing::random_hessian(rng, 33, 9);
  EXPECT_TRUE((h.matrix - h.matrix.transpose()).isZero(0.0));
}

TEST(BuildHessian, AccumulatedBatchesMatchOnePass) {
  Rng rng(3);
  const Tensor2D all = testing::random_tensor(rng, 40, 5);
  HessianAccumulator acc(5);
  acc.add_batch(Tensor2D::from_matrix(all.matrix().topRows(17)));
  acc.add_batch(Tensor2D::from_matrix(all.matrix().bottomRows(23)));
  const Hessian split = acc.finish(0.01);
  const Hessian once = build_hessian(all, 0.01);
  EXPECT_EQ(split.source_rows, 40u);
  EXPECT_TRUE(split.matrix.isApprox(once.matrix, 1e-13));
}

TEST(SolveSpd, DiagonalAndIdentity) {
  const auto r = solve_spd(Matrix{{2, 0}, {0, 4}}, Matrix{{2}, {8}});
  EXPECT_DOUBLE_EQ(r.x(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r.x(1, 0), 2.0);
  EXPECT_EQ(r.ridge, 0.0);

  const Matrix b{{0.3}, {-1.5}, {2.0}};
  EXPECT_TRUE(solve_spd(Matrix::Identity(3, 3), b).x.isApprox(b));
}

TEST(SolveSpd, SingularMatrixUsesRidge) {
  const Matrix a{{1, 1}, {1, 1}};
  const Matrix b{{1}, {1}};
  const auto r = solve_spd(a, b);
  EXPECT_GT(r.ridge, 0.0);
  EXPECT_LE(r.ridge, 1e-4);
  EXPECT_LT((a * r.x - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SolveSpd, IndefiniteMatrixFailsWithContext) {
  const Matrix a{{1, 0}, {0, -1}};
  try {
    solve_spd(a, Matrix{{1}, {1}}, "column 3, group 1");
    FAIL() << "expected SingularSystemError";
  } catch (const SingularSystemError& e) {
    EXPECT_NE(std::string(e.what()).find("column 3, group 1"), std::string::npos);
    EXPECT_EQ(e.code(), ExitCode::kNumerical);
  }
}

TEST(SolveSpd, ResidualBoundWithoutRidge) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Hessian h = testing::random_hessian(rng, 20, 8);
    const Matrix b = testing::random_tensor(rng, 8, 3).matrix();
    const auto r = solve_spd(h.matrix, b);
    ASSERT_EQ(r.ridge, 0.0);
    const double bound = 1e-8 * (1.0 + b.cwiseAbs().maxCoeff());
    EXPECT_LE((h.matrix * r.x - b).cwiseAbs().maxCoeff(), bound);
  }
}

TEST(SpectralBound, DiagonalMatrix) {
  const double l = spectral_upper_bound(Matrix{{2, 0}, {0, 5}});
  EXPECT_GE(l, 5.0);
  EXPECT_LE(l, 5.05);
}

TEST(SpectralBound, ZeroMatrixFloor) {
  EXPECT_EQ(spectral_upper_bound(Matrix::Zero(3, 3)), 1e-12);
}

TEST(SpectralBound, TwoByTwoAgainstCharacteristicPolynomial) {
  // λ² - 30λ + 4 = 0  ⇒  λ_max = 15 + √221
  const double lmax = 15.0 + std::sqrt(221.0);
  const double l = spectral_upper_bound(Matrix{{10, 14}, {14, 20}});
  EXPECT_GE(l, lmax);
  EXPECT_LE(l, 1.02 * lmax);
}

TEST(SpectralBound, DominatesRayleighQuotients) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = testing::random_psd(rng, 10, 6);
    const double l = spectral_upper_bound(a, static_cast<std::uint64_t>(trial));
    for (int k = 0; k < 100; ++k) {
      const Vector v = testing::random_vector(rng, 10).normalized();
      ASSERT_GE(l, v.dot(a * v));
    }
    const double lmax = Eigen::SelfAdjointEigenSolver<Matrix>(a).eigenvalues().maxCoeff();
    EXPECT_GE(l, lmax * (1.0 - 1e-9));
  }
}

TEST(SpectralBound, Deterministic) {
  Rng rng(9);
  const Matrix a = testing::random_psd(rng, 12, 12);
  EXPECT_EQ(spectral_upper_bound(a, 42), spectral_upper_bound(a, 42));
}

}  // namespace
}  // namespace dq
