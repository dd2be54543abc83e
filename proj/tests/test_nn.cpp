#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "otd/nn.hpp"

using namespace otd;
using namespace otd::nn;

namespace {

MlpSpec small(Activation a, std::vector<bool> norm) {
  return MlpSpec{{5, 7, 6, 3}, a, std::move(norm)};
}

Eigen::MatrixXd random_input(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

}  // namespace

TEST(Nn, SpecValidation) {
  EXPECT_THROW(MlpParams(MlpSpec{{4, 2}, Activation::kRelu, {}}), ShapeError);
  EXPECT_THROW(MlpParams(MlpSpec{{4, 0, 2}, Activation::kRelu, {false}}), ShapeError);
  EXPECT_THROW(MlpParams(MlpSpec{{4, 3, 2}, Activation::kRelu, {}}), ShapeError);
  EXPECT_EQ(activation_from_string(to_string(Activation::kGelu)), Activation::kGelu);
  EXPECT_THROW(activation_from_string("tanh"), std::invalid_argument);
}

TEST(Nn, ParameterLayout) {
  const MlpParams p(small(Activation::kMish, {true, false}));
  // 5*7 + 7 + 7 + 7, 7*6 + 6, 6*3 + 3
  EXPECT_EQ(p.size(), 56 + 48 + 21);
  EXPECT_EQ(p.offsets(0).gain, 42);
  EXPECT_EQ(p.offsets(1).gain, -1);
  EXPECT_EQ(p.offsets(1).weight, 56);
}

TEST(Nn, InitIsDeterministicAndBounded) {
  const MlpSpec spec = small(Activation::kMish, {true, true});
  const MlpParams a = init_params(spec, 3), b = init_params(spec, 3);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_NE(a.values(), init_params(spec, 4).values());
  for (int l = 0; l < spec.num_layers(); ++l) {
    EXPECT_TRUE(a.bias(l).isZero(0.0));
    EXPECT_LE(a.weight(l).cwiseAbs().maxCoeff(), std::sqrt(6.0 / spec.widths[l]));
    if (a.has_norm(l)) {
      EXPECT_TRUE(a.gain(l).isOnes(0.0));
      EXPECT_TRUE(a.shift(l).isZero(0.0));
    }
  }
}

TEST(Nn, ZeroWeightsPropagateBias) {
  MlpParams p(MlpSpec{{3, 4, 2}, Activation::kRelu, {false}});
  const Eigen::MatrixXd x = random_input(3, 5, 1);
  EXPECT_TRUE(forward(p, x).isZero(0.0));
  p.bias(0).setConstant(0.5);
  p.weight(1).setOnes();
  p.bias(1) << 1.0, -1.0;
  const Eigen::MatrixXd y = forward(p, x);
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    EXPECT_DOUBLE_EQ(y(0, j), 3.0);
    EXPECT_DOUBLE_EQ(y(1, j), 1.0);
  }
}

TEST(Nn, MishValues) {
  MlpParams p(MlpSpec{{1, 1, 1}, Activation::kMish, {false}});
  p.weight(0)(0, 0) = 1.0;
  p.weight(1)(0, 0) = 1.0;
  Eigen::MatrixXd x(1, 4);
  x << -3.0, 0.0, 1.0, 30.0;
  const Eigen::MatrixXd y = forward(p, x);
  for (int j = 0; j < 4; ++j) {
    const double v = x(0, j);
    EXPECT_NEAR(y(0, j), v * std::tanh(std::log1p(std::exp(v))), 1e-12);
  }
}

TEST(Nn, LayerNormStandardizes) {
  MlpParams p = init_params(MlpSpec{{4, 16, 2}, Activation::kRelu, {true}}, 9);
  MlpCache cache;
  forward(p, random_input(4, 6, 2), &cache);
  const Eigen::MatrixXd& n = cache.normed[0];
  for (Eigen::Index j = 0; j < n.cols(); ++j) {
    EXPECT_NEAR(n.col(j).mean(), 0.0, 1e-12);
    EXPECT_NEAR(n.col(j).squaredNorm() / 16.0, 1.0, 1e-6);
  }
}

TEST(Nn, LinearLayerGradientClosedForm) {
  // One hidden relu layer with all-positive inputs acts as an identity
  // feeding the output layer; check the output layer's dW = dy x^T.
  MlpParams p = init_params(MlpSpec{{3, 4, 2}, Activation::kRelu, {false}}, 5);
  p.weight(0).setIdentity();
  p.weight(0)(3, 0) = 0.0;
  Eigen::MatrixXd x = random_input(3, 4, 3).cwiseAbs();
  MlpCache cache;
  forward(p, x, &cache);
  const Eigen::MatrixXd dy = random_input(2, 4, 4);
  const MlpGradients g = backward(p, cache, dy);
  const Eigen::MatrixXd expected = dy * cache.act_out[0].transpose();
  const Eigen::Map<const Eigen::MatrixXd> dw(g.params.data() + p.offsets(1).weight, 2, 4);
  EXPECT_LE((dw - expected).cwiseAbs().maxCoeff(), 1e-14);
  const Eigen::Map<const Eigen::VectorXd> db(g.params.data() + p.offsets(1).bias, 2);
  EXPECT_LE((db - dy.rowwise().sum()).cwiseAbs().maxCoeff(), 1e-14);
}

class NnGradient : public ::testing::TestWithParam<std::tuple<Activation, bool>> {};

TEST_P(NnGradient, MatchesFiniteDifferences) {
  const auto [act, norm] = GetParam();
  const MlpParams p = init_params(small(act, {norm, norm}), 21);
  const auto r = oracle::check_gradients(p, random_input(5, 4, 22), 23, 200);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Activations, NnGradient,
                         ::testing::Combine(::testing::Values(Activation::kRelu, Activation::kGelu,
                                                              Activation::kMish),
                                            ::testing::Bool()));

TEST(Nn, ShapeErrors) {
  const MlpParams p = init_params(small(Activation::kRelu, {false, false}), 1);
  EXPECT_THROW(forward(p, Eigen::MatrixXd::Zero(4, 2)), ShapeError);
  MlpCache cache;
  forward(p, Eigen::MatrixXd::Zero(5, 2), &cache);
  EXPECT_THROW(backward(p, cache, Eigen::MatrixXd::Zero(3, 3)), ShapeError);
}

TEST(Nn, AdamZeroGradientKeepsParams) {
  Eigen::VectorXd x(3);
  x << 1, -2, 3;
  const Eigen::VectorXd before = x;
  AdamState s;
  adam_update(x, Eigen::VectorXd::Zero(3), s, AdamConfig{});
  EXPECT_EQ(x, before);
}

TEST(Nn, AdamFirstStepIsSignStep) {
  Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g(3);
  g << 0.5, -2.0, 1e-3;
  AdamState s;
  const AdamConfig cfg{.lr = 0.01};
  adam_update(x, g, s, cfg);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(x[i], -cfg.lr * g[i] / (std::abs(g[i]) + cfg.eps), 1e-15);
    EXPECT_NEAR(x[i], -cfg.lr * (g[i] > 0 ? 1 : -1), 1e-6);
  }
}

TEST(Nn, AdamTwoStepsMatchHandRecurrence) {
  const AdamConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};
  Eigen::VectorXd x(1);
  x << 1.0;
  AdamState s;
  const double g1 = 0.3, g2 = -0.7;
  adam_update(x, Eigen::VectorXd::Constant(1, g1), s, cfg);
  adam_update(x, Eigen::VectorXd::Constant(1, g2), s, cfg);

  // m1 = 0.03, v1 = 9e-5; m2 = 0.9*0.03 - 0.07 = -0.043, v2 = 0.999*9e-5 + 0.001*0.49
  double p = 1.0;
  const double m1 = 0.03, v1 = 9e-5;
  p -= 0.1 * (m1 / 0.1) / (std::sqrt(v1 / 0.001) + 1e-8);
  const double m2 = -0.043, v2 = 0.999 * 9e-5 + 0.001 * 0.49;
  p -= 0.1 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(x[0], p, 1e-12);
  EXPECT_EQ(s.step, 2);
}

TEST(Nn, CosineSchedule) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 100), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 50, 100), 0.5, 1e-15);
  EXPECT_NEAR(cosine_lr(1.0, 100, 100), 0.0, 1e-15);
}

TEST(Nn, JsonRoundTrip) {
  const MlpParams p = init_params(small(Activation::kGelu, {true, false}), 2);
  const MlpParams back = mlp_params_from_json(to_json(p));
  EXPECT_EQ(back.spec(), p.spec());
  EXPECT_EQ(back.values(), p.values());
  Json j = to_json(p);
  j["values"].erase(0);
  EXPECT_THROW(mlp_params_from_json(j), ShapeError);
}
