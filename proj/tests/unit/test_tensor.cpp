#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "sal_lab/core/autograd.hpp"
#include "sal_lab/core/gradcheck.hpp"
#include "sal_lab/core/ops.hpp"
#include "sal_lab/core/tensor.hpp"

using namespace sal_lab;

TEST(Tensor, ElementCountIsProductOfExtents) {
  Tensor<float> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(Tensor<double>::scalar(2.5).rank(), 0u);
  EXPECT_EQ(Tensor<double>::scalar(2.5).size(), 1u);
}

TEST(Tensor, RejectsZeroExtentAndSizeMismatch) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), std::invalid_argument);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), std::invalid_argument);
}

TEST(Tensor, RowMajorIndexing) {
  const auto t = Tensor<double>::from({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 0}), 3.0);
  EXPECT_EQ(t.at({0, 2}), 2.0);
  EXPECT_THROW(t.at({2, 0}), std::out_of_range);
  EXPECT_EQ(strides_of({2, 3, 4}), (std::vector<std::size_t>{12, 4, 1}));
}

TEST(Tensor, PrecisionTag) {
  EXPECT_EQ(Tensor<float>::precision(), Precision::single);
  EXPECT_EQ(Tensor<double>::precision(), Precision::double_);
}

TEST(Backward, SumGivesOnes) {
  auto x = Var<double>::parameter(Tensor<double>::from({2, 3}, {1, -2, 3, 4, 5, -6}));
  const auto g = backward(ops::sum(x));
  EXPECT_EQ(g.of(x), Tensor<double>::ones({2, 3}));
}

TEST(Backward, SumOfSquares) {
  auto x = Var<double>::parameter(Tensor<double>::from({3}, {1, 2, 3}));
  const auto g = backward(ops::sum(ops::mul(x, x)));
  EXPECT_EQ(g.of(x), Tensor<double>::from({3}, {2, 4, 6}));
}

TEST(Backward, RejectsNonScalarRoot) {
  auto x = Var<double>::parameter(Tensor<double>::ones({2}));
  EXPECT_THROW(backward(ops::scale(x, 2.0)), std::invalid_argument);
}

TEST(Backward, UnreachedParameterGetsZeros) {
  auto x = Var<double>::parameter(Tensor<double>::ones({2}));
  auto unused = Var<double>::parameter(Tensor<double>::ones({3, 2}));
  const auto g = backward(ops::sum(x));
  EXPECT_EQ(g.find(unused), nullptr);
  EXPECT_EQ(g.of(unused), Tensor<double>::zeros({3, 2}));
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  auto x = Var<double>::parameter(Tensor<double>::scalar(3.0));
  auto y = ops::mul(x, x);  // 9, dy/dx = 6
  auto z = ops::add(y, y);  // dz/dx = 12
  EXPECT_DOUBLE_EQ(backward(z).of(x).item(), 12.0);
}

TEST(Backward, RejectsCycle) {
  auto x = Var<double>::parameter(Tensor<double>::scalar(1.0));
  auto a = ops::scale(x, 2.0);
  auto b = ops::scale(a, 3.0);
  a.node()->inputs.push_back(b.shared());  // only reachable by editing nodes directly
  EXPECT_THROW(backward(b), std::logic_error);
  a.node()->inputs.pop_back();
}

TEST(Backward, RetainedIntermediate) {
  auto x = Var<double>::parameter(Tensor<double>::from({2}, {1, 2}));
  auto y = ops::scale(x, 3.0);
  y.retain_grad();
  const auto g = backward(ops::sum(ops::mul(y, y)));
  EXPECT_EQ(g.of(y), Tensor<double>::from({2}, {6, 12}));
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Var<double>::parameter(Tensor<double>::ones({2}));
  NoGradGuard guard;
  EXPECT_FALSE(ops::sum(x).requires_grad());
}

TEST(FiniteDifference, SumIsAllOnes) {
  ScalarFunction<double> f = [](const Tensor<double>& x) {
    double s = 0;
    for (double v : x.values()) s += v;
    return s;
  };
  const auto g = finite_difference_gradient(f, Tensor<double>::from({4}, {1, -3, 0.5, 2}), 1e-4);
  for (double v : g.values()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, SquareAtThree) {
  ScalarFunction<double> f = [](const Tensor<double>& x) { return x[0] * x[0]; };
  EXPECT_NEAR(finite_difference_at(f, Tensor<double>::scalar(3.0), 0, 1e-4), 6.0, 1e-6);
}

TEST(FiniteDifference, NonFiniteNamesCoordinate) {
  ScalarFunction<double> f = [](const Tensor<double>& x) { return std::log(x[1]); };
  try {
    finite_difference_gradient(f, Tensor<double>::from({2}, {1.0, 0.0}), 1e-4);
    FAIL() << "expected domain_error";
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 0"), std::string::npos);
  }
}
