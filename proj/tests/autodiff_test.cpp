#include <gtest/gtest.h>

#include "rama/autodiff.hpp"
#include "rama/nn.hpp"
#include "test_support.hpp"

using namespace rama;
using ad::Matrix;
using ad::Var;
using rama::testing::max_relative_error;
using rama::testing::numeric_gradient;

namespace {

Var<double> random_leaf(int r, int c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed, 1);
  return Var<double>::leaf(scale * rng.normal_matrix<double>(r, c));
}

void expect_gradcheck(const std::function<Var<double>()>& build, std::vector<Var<double>> params, double tol = 1e-6) {
  for (auto& p : params) p.zero_grad();
  Var<double> out = build();
  out.backward();
  const auto analytic = rama::testing::flat_grad(params);
  const auto numeric = numeric_gradient([&] { return build().item(); }, params);
  EXPECT_LT(max_relative_error(analytic, numeric, 1e-6), tol);
}

}  // namespace

TEST(Autodiff, ElementwiseOpsMatchFiniteDifferences) {
  auto a = random_leaf(3, 4, 1);
  auto b = random_leaf(3, 4, 2);
  auto row = random_leaf(1, 4, 3);
  auto col = random_leaf(3, 1, 4);
  expect_gradcheck([&] { return ad::sum(ad::mul(ad::add(a, row), ad::sub(b, col))); }, {a, b, row, col});
  expect_gradcheck([&] { return ad::sum(ad::div(a, ad::add_scalar(ad::square(b), 1.0))); }, {a, b});
  expect_gradcheck([&] { return ad::mean(ad::tanh(ad::mul(a, b))); }, {a, b});
  expect_gradcheck([&] { return ad::sum(ad::sigmoid(a)); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::elu(ad::scale(a, 2.0))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::softplus(a)); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::exp(ad::scale(a, 0.5))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::log(ad::add_scalar(ad::square(a), 0.5))); }, {a});
}

TEST(Autodiff, MatmulAndShapeOps) {
  auto a = random_leaf(3, 4, 5);
  auto b = random_leaf(4, 2, 6);
  auto c = random_leaf(3, 2, 7);
  expect_gradcheck([&] { return ad::sum(ad::square(ad::matmul(a, b))); }, {a, b});
  expect_gradcheck([&] { return ad::sum(ad::mul(ad::transpose(a), ad::transpose(a))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::concat_cols<double>({ad::matmul(a, b), c}))); }, {a, b, c});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::concat_rows<double>({a, ad::transpose(b)}))); }, {a, b});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::slice_cols(a, 1, 2))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::slice_rows(a, 1, 2))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::gather_rows(a, {2, 0, 2}))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::row_sum(a))); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::square(ad::col_sum(a))); }, {a});
}

TEST(Autodiff, SoftmaxFamily) {
  auto a = random_leaf(3, 5, 8);
  auto w = Var<double>::constant(Rng(9, 0).normal_matrix<double>(3, 5));
  expect_gradcheck([&] { return ad::sum(ad::mul(ad::softmax_rows(a), w)); }, {a});
  expect_gradcheck([&] { return ad::sum(ad::mul(ad::log_softmax_rows(a), w)); }, {a});
  const Matrix<double> p = ad::softmax_rows_value<double>(a.value());
  for (Eigen::Index i = 0; i < p.rows(); ++i) EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
}

TEST(Autodiff, ClampMinHasNoGradientBelowFloor) {
  auto a = Var<double>::leaf(Matrix<double>::Constant(1, 1, 0.5));
  ad::clamp_min(a, 1.0).backward();
  EXPECT_EQ(a.grad()(0, 0), 0.0);
  a.zero_grad();
  ad::clamp_min(a, 0.1).backward();
  EXPECT_EQ(a.grad()(0, 0), 1.0);
}

TEST(Autodiff, Conv2dMatchesFiniteDifferences) {
  ad::ConvShape cs{2, 6, 6, 3, 4, 2, 1};
  auto x = random_leaf(2, cs.in_size(), 10);
  auto w = random_leaf(cs.out_channels, cs.patch(), 11, 0.3);
  auto b = random_leaf(1, cs.out_channels, 12);
  expect_gradcheck([&] { return ad::sum(ad::square(ad::conv2d(x, w, b, cs))); }, {x, w, b});
  EXPECT_EQ(ad::conv2d(x, w, b, cs).cols(), cs.out_size());
}

TEST(Autodiff, DetachAndNoGrad) {
  auto a = random_leaf(2, 2, 13);
  ad::sum(ad::mul(a, ad::detach(a))).backward();
  EXPECT_TRUE(a.grad().isApprox(a.value()));
  a.zero_grad();
  {
    ad::NoGradGuard guard;
    Var<double> y = ad::sum(ad::square(a));
    EXPECT_FALSE(y.requires_grad());
  }
}

TEST(Autodiff, SharedSubgraphAccumulates) {
  auto a = random_leaf(2, 3, 14);
  Var<double> s = ad::tanh(a);
  ad::sum(ad::add(ad::square(s), s)).backward();
  const Matrix<double> t = a.value().array().tanh().matrix();
  const Matrix<double> expected = ((2 * t.array() + 1) * (1 - t.array().square())).matrix();
  EXPECT_TRUE(a.grad().isApprox(expected, 1e-12));
}

TEST(Autodiff, BackwardNeedsScalar) {
  auto a = random_leaf(2, 2, 15);
  EXPECT_THROW(ad::square(a).backward(), UsageError);
  EXPECT_THROW(ad::add(a, random_leaf(3, 3, 16)), UsageError);
}

TEST(Nn, GruAndMlpGradients) {
  Rng rng(17, 0);
  nn::ParameterStore<double> store;
  nn::GruCell<double> gru(store, "gru", 3, 4, rng);
  nn::Mlp<double> mlp(store, "mlp", 4, {5}, 2, rng);
  auto x = random_leaf(2, 3, 18);
  auto h = random_leaf(2, 4, 19);
  auto params = store.vars();
  params.push_back(x);
  params.push_back(h);
  expect_gradcheck([&] { return ad::sum(ad::square(mlp(gru(x, gru(x, h))))); }, params, 1e-5);
}

TEST(Nn, AdamClipsAndRejectsNonFinite) {
  nn::ParameterStore<double> store;
  auto p = store.add("p", Matrix<double>::Constant(1, 2, 1.0));
  nn::Adam<double> adam(store.vars(), {0.1, 0.9, 0.999, 1e-8, 1.0});
  ad::sum(ad::scale(p, 100.0)).backward();
  const double norm = adam.step();
  EXPECT_NEAR(norm, 100.0 * std::sqrt(2.0), 1e-9);
  EXPECT_LT(p.value()(0, 0), 1.0);
  store.zero_grad();
  ad::sum(ad::scale(p, std::numeric_limits<double>::infinity())).backward();
  EXPECT_THROW(adam.step(), NumericError);
}

TEST(Nn, ParameterStoreFlattenRoundTrip) {
  Rng rng(20, 0);
  nn::ParameterStore<float> a;
  nn::Mlp<float> m(a, "m", 3, {4}, 2, rng);
  nn::ParameterStore<double> b;
  Rng rng2(21, 0);
  nn::Mlp<double> m2(b, "m", 3, {4}, 2, rng2);
  b.copy_from(a);
  EXPECT_EQ(b.flatten().cast<float>(), a.flatten());
  EXPECT_EQ(a.size(), b.size());
  const auto before = a.checksum();
  a.assign_flat(a.flatten());
  EXPECT_EQ(before, a.checksum());
}
