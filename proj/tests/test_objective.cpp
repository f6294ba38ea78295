#include <gtest/gtest.h>

#include <Eigen/QR>
#include <numeric>
#include <random>

#include "magneto/objective.hpp"
#include "oracles.hpp"

namespace magneto::objective {
namespace {

Matrix<double> random_unit_rows(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> g;
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < rows; ++i) m.row(i).normalize();
  return m;
}

TEST(SupCon, TwoSameLabelRowsHaveZeroLoss) {
  std::mt19937_64 rng(1);
  const std::vector<std::uint32_t> labels{3, 3};
  for (int t = 0; t < 5; ++t) {
    const auto r = supcon_loss<double>(random_unit_rows(rng, 2, 4), labels, 0.1);
    EXPECT_NEAR(r.loss, 0.0, 1e-15);
  }
}

TEST(SupCon, OrthonormalPairsClosedForm) {
  Matrix<double> z(4, 2);
  z << 1, 0, 1, 0, 0, 1, 0, 1;
  const std::vector<std::uint32_t> labels{0, 0, 1, 1};
  const auto r = supcon_loss<double>(z, labels, 1.0);
  // Each anchor: one positive at dot 1, two negatives at dot 0.
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  EXPECT_NEAR(r.loss, expected, 1e-12);
  EXPECT_NEAR(expected, 0.5514, 1e-4);
  EXPECT_NEAR(r.loss, oracle::reference_supcon(oracle::to_rows(z), labels, 1.0), 1e-12);
}

TEST(SupCon, Errors) {
  std::mt19937_64 rng(2);
  const auto z = random_unit_rows(rng, 3, 4);
  const std::vector<std::uint32_t> distinct{0, 1, 2};
  try {
    supcon_loss<double>(z, distinct, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate batch"), std::string::npos);
  }
  const std::vector<std::uint32_t> labels{0, 0, 1};
  EXPECT_THROW(supcon_loss<double>(z, labels, 0.0), Error);
  EXPECT_THROW(supcon_loss<double>(z, labels, -1.0), Error);
}

TEST(SupCon, AnchorsWithoutPositivesAreSkipped) {
  std::mt19937_64 rng(3);
  const auto z = random_unit_rows(rng, 5, 4);
  const std::vector<std::uint32_t> labels{0, 0, 1, 2, 3};
  const auto r = supcon_loss<double>(z, labels, 0.5);
  EXPECT_NEAR(r.loss, oracle::reference_supcon(oracle::to_rows(z), labels, 0.5), 1e-12);
}

TEST(SupCon, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::uint32_t> lab(0, 2);
  const double eps = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_unit_rows(rng, 5, 4);
    std::vector<std::uint32_t> labels(5);
    for (auto& l : labels) l = lab(rng);
    labels[1] = labels[0];
    const double tau = 0.5;
    const auto r = supcon_loss<double>(z, labels, tau);
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      auto up = z, down = z;
      up.data()[k] += eps;
      down.data()[k] -= eps;
      const double numeric = (oracle::reference_supcon(oracle::to_rows(up), labels, tau) -
                              oracle::reference_supcon(oracle::to_rows(down), labels, tau)) /
                             (2 * eps);
      EXPECT_LT(oracle::relative_error(r.grad.data()[k], numeric), 1e-5) << "trial " << trial << " entry " << k;
    }
  }
}

TEST(SupCon, InvariantUnderCommonRotation) {
  std::mt19937_64 rng(5);
  const auto z = random_unit_rows(rng, 6, 4);
  const std::vector<std::uint32_t> labels{0, 1, 0, 1, 2, 2};
  Matrix<double> a(4, 4);
  std::normal_distribution<double> g;
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
  const Matrix<double> q = Eigen::HouseholderQR<Matrix<double>>(a).householderQ();
  const Matrix<double> rotated = z * q;
  EXPECT_NEAR(supcon_loss<double>(z, labels, 0.1).loss, supcon_loss<double>(rotated, labels, 0.1).loss, 1e-10);
}

TEST(SupCon, PermutationInvariantWithPermutedGradient) {
  std::mt19937_64 rng(6);
  const auto z = random_unit_rows(rng, 6, 4);
  const std::vector<std::uint32_t> labels{0, 1, 0, 1, 2, 2};
  std::vector<Eigen::Index> perm{4, 2, 0, 5, 1, 3};
  Matrix<double> zp(6, 4);
  std::vector<std::uint32_t> lp(6);
  for (std::size_t i = 0; i < 6; ++i) {
    zp.row(static_cast<Eigen::Index>(i)) = z.row(perm[i]);
    lp[i] = labels[static_cast<std::size_t>(perm[i])];
  }
  const auto a = supcon_loss<double>(z, labels, 0.2);
  const auto b = supcon_loss<double>(zp, lp, 0.2);
  EXPECT_NEAR(a.loss, b.loss, 1e-12);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_TRUE(b.grad.row(static_cast<Eigen::Index>(i)).isApprox(a.grad.row(perm[i]), 1e-10));
  }
}

TEST(SupCon, MoreSimilarNegativeNeverLowersLoss) {
  // Anchor e1, positive e3, negative in the e1-e2 plane: only the
  // anchor-negative similarity moves as the angle closes.
  const std::vector<std::uint32_t> labels{0, 0, 1};
  for (double tau : {0.1, 0.5, 1.0}) {
    double previous = -1.0;
    for (double theta = 3.1; theta >= 0.0; theta -= 0.1) {
      Matrix<double> z(3, 3);
      z << 1, 0, 0, 0, 0, 1, std::cos(theta), std::sin(theta), 0;
      const double loss = supcon_loss<double>(z, labels, tau).loss;
      if (previous >= 0.0) EXPECT_GE(loss, previous);
      previous = loss;
    }
  }
}

TEST(Distill, IdentityAndHandComputed) {
  std::mt19937_64 rng(8);
  const auto z = random_unit_rows(rng, 4, 3);
  const auto same = distill_loss<double>(z, z);
  EXPECT_EQ(same.loss, 0.0);
  EXPECT_TRUE((same.grad.array() == 0.0).all());

  Matrix<double> a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  const auto r = distill_loss<double>(a, b);
  EXPECT_DOUBLE_EQ(r.loss, 2.0);
  EXPECT_DOUBLE_EQ(r.grad(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(r.grad(0, 1), -2.0);

  const auto swapped = distill_loss<double>(b, a);
  EXPECT_DOUBLE_EQ(swapped.loss, r.loss);
  EXPECT_TRUE(swapped.grad.isApprox(-r.grad));
  EXPECT_THROW(distill_loss<double>(a, Matrix<double>(2, 2)), Error);
}

TEST(Joint, SwitchesAndRecomposition) {
  std::mt19937_64 rng(9);
  const auto z = random_unit_rows(rng, 6, 4);
  const std::vector<std::uint32_t> labels{0, 0, 1, 1, 2, 2};
  const auto con = supcon_loss<double>(z, labels, 0.1);

  DistillTarget<double> target;
  target.rows = {0, 2, 3};
  target.embeddings = random_unit_rows(rng, 3, 4);

  const auto off = joint_loss<double>(z, labels, &target, 0.1, 0.0);
  EXPECT_EQ(off.total, con.loss);
  EXPECT_TRUE(off.grad_wrt_embeddings == con.grad);
  const auto none = joint_loss<double>(z, labels, nullptr, 0.1, 1.0);
  EXPECT_EQ(none.total, con.loss);

  DistillTarget<double> exact{{0, 2, 3}, Matrix<double>(3, 4)};
  for (std::size_t k = 0; k < 3; ++k) exact.embeddings.row(static_cast<Eigen::Index>(k)) = z.row(exact.rows[k]);
  EXPECT_EQ(joint_loss<double>(z, labels, &exact, 0.1, 1.0).total, con.loss);

  for (double lambda : {0.3, 1.0, 2.5}) {
    const auto j = joint_loss<double>(z, labels, &target, 0.1, lambda);
    EXPECT_NEAR(j.total, j.contrastive + lambda * j.distillation, 1e-9);
    Matrix<double> student(3, 4);
    for (std::size_t k = 0; k < 3; ++k) student.row(static_cast<Eigen::Index>(k)) = z.row(target.rows[k]);
    const auto d = distill_loss<double>(student, target.embeddings);
    Matrix<double> expected = con.grad;
    for (std::size_t k = 0; k < 3; ++k) expected.row(target.rows[k]) += lambda * d.grad.row(static_cast<Eigen::Index>(k));
    EXPECT_LT((j.grad_wrt_embeddings - expected).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_THROW(joint_loss<double>(z, labels, &target, 0.1, -1.0), Error);
}

}  // namespace
}  // namespace magneto::objective
